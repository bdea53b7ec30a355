#pragma once

#include "kanet/autodiff.hpp"
#include "kanet/classifier.hpp"
#include "kanet/commands.hpp"
#include "kanet/data.hpp"
#include "kanet/encoder.hpp"
#include "kanet/error.hpp"
#include "kanet/ipel.hpp"
#include "kanet/kant_format.hpp"
#include "kanet/knowledge_adapter.hpp"
#include "kanet/optim.hpp"
#include "kanet/protocol.hpp"
#include "kanet/run_config.hpp"
#include "kanet/tensor.hpp"
#include "kanet/transformer.hpp"
