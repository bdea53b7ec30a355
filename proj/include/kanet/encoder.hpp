#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kanet/kant_format.hpp"
#include "kanet/transformer.hpp"

namespace kanet {

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t n_early = 2;
  std::size_t n_middle = 3;
  std::size_t n_post = 2;
  std::uint64_t seed = 0;

  std::size_t total_layers() const { return n_early + n_middle + n_post; }
  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("encoder: image_size must be a positive multiple of patch_size");
    if (channels == 0) throw ConfigError("encoder: channels must be positive");
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
      throw ConfigError("encoder: embed_dim must be divisible by num_heads");
    if (n_early == 0 || n_middle == 0 || n_post == 0) throw ConfigError("encoder: every stage needs at least one layer");
  }
};

/// Token matrix of (L+1) x D; row 0 is the [class] token.
template <std::floating_point T>
struct TokenSequence {
  Tensor<T> tokens;

  std::size_t length() const { return tokens.rows(); }
  Tensor<T> class_token() const { return tokens.row_tensor(0); }
};

/// Frozen tokens of one image, cached up to the fusion point.
template <std::floating_point T>
struct EncodedSample {
  Tensor<T> early_class_token;  // 1 x D, row 0 after the early stage
  Tensor<T> middle_tokens;      // (L+1) x D after the middle stage
};

enum class Stage { early, middle, post };

/// Frozen ViT-style encoder split into early, middle and post stages.
///
/// Weights are drawn once for all layers from the seed; the stage split only
/// decides which layers each stage runs, so re-splitting never changes a weight.
/// No method mutates weights, and the weights are bound to tapes as constants:
/// gradients flow through the encoder to its inputs but never into it.
template <std::floating_point T>
class Encoder {
 public:
  explicit Encoder(EncoderConfig config) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    const T std = T(0.02);
    const std::size_t D = config_.embed_dim;
    patch_weight_ = Tensor<T>::randn({config_.patch_dim(), D}, rng, std);
    patch_bias_ = Tensor<T>({D});
    class_token_ = Tensor<T>::randn({1, D}, rng, std);
    positions_ = Tensor<T>::randn({config_.num_tokens(), D}, rng, std);
    layers_.reserve(config_.total_layers());
    for (std::size_t i = 0; i < config_.total_layers(); ++i)
      layers_.push_back(BlockParams<T>::init(D, config_.num_heads, rng, std));
  }

  const EncoderConfig& config() const { return config_; }
  const BlockParams<T>& layer(std::size_t i) const { return layers_.at(i); }
  const Tensor<T>& patch_weight() const { return patch_weight_; }
  const Tensor<T>& patch_bias() const { return patch_bias_; }
  const Tensor<T>& class_token() const { return class_token_; }
  const Tensor<T>& positions() const { return positions_; }

  /// Move the stage boundaries: the first `n_early` layers form f_e, the next
  /// `n_middle` form f_m and the rest f_p. Layer count is fixed.
  void set_split(std::size_t n_early, std::size_t n_middle) {
    const std::size_t total = config_.total_layers();
    if (n_early == 0 || n_middle == 0 || n_early + n_middle >= total)
      throw ConfigError("encoder: split leaves an empty stage");
    config_.n_early = n_early;
    config_.n_middle = n_middle;
    config_.n_post = total - n_early - n_middle;
  }

  // ---- tape-level forward --------------------------------------------------

  Var patch_embed(Tape<T>& tape, const Tensor<T>& image) const {
    const Var patches = tape.constant(extract_patches(image));
    const Var proj = tape.linear(patches, tape.constant_ref(patch_weight_), tape.constant_ref(patch_bias_));
    const Var tokens = tape.concat_rows({tape.constant_ref(class_token_), proj});
    return tape.add(tokens, tape.constant_ref(positions_));
  }

  Var encode(Tape<T>& tape, Var tokens, Stage stage) const {
    check_tokens(tape.value(tokens));
    const auto [first, last] = stage_range(stage);
    for (std::size_t i = first; i < last; ++i) {
      const BlockVars vars = bind_block(tape, layers_[i], false);
      tokens = transformer_block(tape, tokens, tokens, vars);
    }
    return tokens;
  }

  // ---- value-level forward -------------------------------------------------

  TokenSequence<T> patch_embed(const Tensor<T>& image) const {
    Tape<T> tape;
    return {tape.value(patch_embed(tape, image))};
  }

  TokenSequence<T> encode_early(const TokenSequence<T>& t) const { return run_stage(t, Stage::early); }
  TokenSequence<T> encode_middle(const TokenSequence<T>& t) const { return run_stage(t, Stage::middle); }
  TokenSequence<T> encode_post(const TokenSequence<T>& t) const { return run_stage(t, Stage::post); }

  /// Full frozen pass: x_p^0 with no knowledge fusion.
  Tensor<T> class_feature(const Tensor<T>& image) const {
    auto s = encode_to_middle(image);
    return encode_post(TokenSequence<T>{s.middle_tokens}).class_token();
  }

  EncodedSample<T> encode_to_middle(const Tensor<T>& image) const {
    Tape<T> tape;
    const Var early = encode(tape, patch_embed(tape, image), Stage::early);
    const Var middle = encode(tape, early, Stage::middle);
    return {tape.value(early).row_tensor(0), tape.value(middle)};
  }

  // ---- weights -------------------------------------------------------------

  std::vector<const Tensor<T>*> tensors() const {
    std::vector<const Tensor<T>*> out{&patch_weight_, &patch_bias_, &class_token_, &positions_};
    for (const auto& l : layers_)
      for (const auto* t : l.tensors()) out.push_back(t);
    return out;
  }

  void save_weights(const std::filesystem::path& path) const {
    auto ts = tensors();
    save_tensors<T>(path, ts);
  }

  void load_weights(const std::filesystem::path& path) {
    std::vector<Tensor<T>*> out{&patch_weight_, &patch_bias_, &class_token_, &positions_};
    for (auto& l : layers_)
      for (auto* t : l.tensors()) out.push_back(t);
    load_tensors_into<T>(path, out);
  }

 private:
  std::pair<std::size_t, std::size_t> stage_range(Stage stage) const {
    switch (stage) {
      case Stage::early:
        return {0, config_.n_early};
      case Stage::middle:
        return {config_.n_early, config_.n_early + config_.n_middle};
      case Stage::post:
        break;
    }
    return {config_.n_early + config_.n_middle, config_.total_layers()};
  }

  void check_tokens(const Tensor<T>& t) const {
    if (t.ndim() != 2 || t.cols() != config_.embed_dim || t.rows() != config_.num_tokens()) {
      throw DimensionError("encoder: expected tokens of shape [" + std::to_string(config_.num_tokens()) + "x" +
                           std::to_string(config_.embed_dim) + "], got " + shape_string(t.shape()));
    }
  }

  TokenSequence<T> run_stage(const TokenSequence<T>& t, Stage stage) const {
    Tape<T> tape;
    return {tape.value(encode(tape, tape.constant_ref(t.tokens), stage))};
  }

  /// L x (C*p*p) matrix; patches in row-major grid order, each flattened
  /// channel-major then row-major within the patch.
  Tensor<T> extract_patches(const Tensor<T>& image) const {
    const std::size_t C = config_.channels, S = config_.image_size, P = config_.patch_size;
    if (image.shape() != Shape{C, S, S}) {
      throw DimensionError("encoder: expected image of shape " + shape_string({C, S, S}) + ", got " +
                           shape_string(image.shape()));
    }
    const std::size_t side = config_.patches_per_side();
    Tensor<T> out({config_.num_patches(), config_.patch_dim()});
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px) {
        auto row = out.row(py * side + px);
        std::size_t k = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t dy = 0; dy < P; ++dy)
            for (std::size_t dx = 0; dx < P; ++dx) row[k++] = image[(c * S + py * P + dy) * S + px * P + dx];
      }
    return out;
  }

  EncoderConfig config_;
  Tensor<T> patch_weight_, patch_bias_, class_token_, positions_;
  std::vector<BlockParams<T>> layers_;
};

}  // namespace kanet
