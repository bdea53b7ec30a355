#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "kanet/kant_format.hpp"

namespace kanet {

enum class Split { train, test };

inline std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

/// Labeled images sharing one shape.
template <std::floating_point T>
struct LabeledDataset {
  std::vector<Tensor<T>> images;
  std::vector<ClassId> labels;
  Split split = Split::train;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  void add(Tensor<T> image, ClassId label) {
    if (!images.empty() && image.shape() != images.front().shape())
      throw DimensionError("dataset: image shape " + shape_string(image.shape()) + " differs from " +
                           shape_string(images.front().shape()));
    images.push_back(std::move(image));
    labels.push_back(label);
  }
};

template <std::floating_point T>
struct SplitDatasets {
  LabeledDataset<T> train{{}, {}, Split::train};
  LabeledDataset<T> test{{}, {}, Split::test};
};

struct SyntheticConfig {
  std::size_t num_classes = 12;
  std::size_t train_per_class = 40;
  std::size_t test_per_class = 20;
  std::size_t channels = 3;
  std::size_t image_size = 32;
  double sigma_between = 1.0;
  double sigma_within = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes == 0 || image_size == 0 || channels == 0) throw ConfigError("synthetic: sizes must be positive");
    if (!(sigma_between > 0.0)) throw ConfigError("synthetic: sigma_between must be > 0");
    if (!(sigma_within >= 0.0)) throw ConfigError("synthetic: sigma_within must be >= 0");
  }
};

/// Gaussian blobs in pixel space: each class has a template drawn per pixel
/// from N(0, sigma_between^2); each sample adds N(0, sigma_within^2) noise.
/// Samples are ordered by class, train before test within the draw order.
template <std::floating_point T>
SplitDatasets<T> generate_synthetic(const SyntheticConfig& cfg, std::vector<Tensor<T>>* templates_out = nullptr) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const Shape shape{cfg.channels, cfg.image_size, cfg.image_size};
  std::normal_distribution<double> noise(0.0, 1.0);
  SplitDatasets<T> out;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    Tensor<T> tmpl(shape);
    for (auto& v : tmpl.data()) v = static_cast<T>(cfg.sigma_between * noise(rng));
    auto draw = [&] {
      Tensor<T> img = tmpl;
      for (auto& v : img.data()) v = static_cast<T>(static_cast<double>(v) + cfg.sigma_within * noise(rng));
      return img;
    };
    for (std::size_t i = 0; i < cfg.train_per_class; ++i) out.train.add(draw(), static_cast<ClassId>(c));
    for (std::size_t i = 0; i < cfg.test_per_class; ++i) out.test.add(draw(), static_cast<ClassId>(c));
    if (templates_out) templates_out->push_back(std::move(tmpl));
  }
  return out;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Read a `tensor_path,label,split` CSV. Relative tensor paths resolve against
/// the manifest's directory. A first line equal to the column names is skipped,
/// as are blank lines. Errors carry the 1-based line number.
template <std::floating_point T>
SplitDatasets<T> load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IngestionError("manifest: cannot open " + path.string());
  const auto base = path.parent_path();
  SplitDatasets<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
    const std::string_view sv = detail::trim(line);
    if (sv.empty()) continue;
    if (lineno == 1 && sv == "tensor_path,label,split") continue;
    const auto c1 = sv.find(',');
    const auto c2 = c1 == std::string_view::npos ? c1 : sv.find(',', c1 + 1);
    if (c2 == std::string_view::npos || sv.find(',', c2 + 1) != std::string_view::npos)
      throw IngestionError(where + "expected 3 comma-separated fields");
    const auto file = detail::trim(sv.substr(0, c1));
    const auto label_text = detail::trim(sv.substr(c1 + 1, c2 - c1 - 1));
    const auto split_text = detail::trim(sv.substr(c2 + 1));
    ClassId label{};
    const auto [ptr, ec] = std::from_chars(label_text.data(), label_text.data() + label_text.size(), label);
    if (ec != std::errc{} || ptr != label_text.data() + label_text.size() || label < 0)
      throw IngestionError(where + "bad label '" + std::string(label_text) + "'");
    LabeledDataset<T>* target = nullptr;
    if (split_text == "train") target = &out.train;
    else if (split_text == "test") target = &out.test;
    else throw IngestionError(where + "bad split '" + std::string(split_text) + "'");
    std::filesystem::path tensor_path(file);
    if (tensor_path.is_relative()) tensor_path = base / tensor_path;
    if (!std::filesystem::exists(tensor_path)) throw IngestionError(where + "missing file " + tensor_path.string());
    try {
      target->add(load_tensor_as<T>(tensor_path), label);
    } catch (const Error& e) {
      throw IngestionError(where + e.what());
    }
  }
  if (!out.train.empty() && !out.test.empty() && out.train.images.front().shape() != out.test.images.front().shape())
    throw IngestionError("manifest: train and test images differ in shape");
  return out;
}

}  // namespace kanet
