#pragma once

#include "kanet/ipel.hpp"

namespace fixture {

struct WorldSpec {
  std::size_t classes = 6;
  std::size_t per_class = 6;
  std::size_t dim = 16;
  std::size_t heads = 4;
  std::size_t image = 8;
  std::size_t patch = 4;
  std::size_t n_early = 1, n_middle = 1, n_post = 1;
  double sigma_within = 0.5;
  std::uint64_t seed = 0;
};

/// A small frozen encoder with its base session cached up to the fusion point.
template <class T>
struct World {
  kanet::Encoder<T> encoder;
  kanet::SplitDatasets<T> data;
  kanet::BaseSession<T> base;
  kanet::KnowledgeLibrary<T> lib;
};

template <class T>
World<T> make_world(const WorldSpec& s) {
  kanet::EncoderConfig ec;
  ec.image_size = s.image;
  ec.patch_size = s.patch;
  ec.embed_dim = s.dim;
  ec.num_heads = s.heads;
  ec.n_early = s.n_early;
  ec.n_middle = s.n_middle;
  ec.n_post = s.n_post;
  ec.seed = s.seed + 100;
  kanet::SyntheticConfig sc;
  sc.num_classes = s.classes;
  sc.train_per_class = s.per_class;
  sc.test_per_class = 2;
  sc.image_size = s.image;
  sc.sigma_within = s.sigma_within;
  sc.seed = s.seed;
  kanet::Encoder<T> enc(ec);
  auto data = kanet::generate_synthetic<T>(sc);
  auto base = kanet::encode_base_session(enc, data.train);
  auto lib = kanet::base_library(base);
  return {std::move(enc), std::move(data), std::move(base), std::move(lib)};
}

}  // namespace fixture
