#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <span>
#include <vector>

#include "kanet/encoder.hpp"

namespace kanet {

/// Knowledge vector library: one class-mean early [class] token per seen class.
template <std::floating_point T>
struct KnowledgeLibrary {
  Tensor<T> entries;  // |C| x D
  std::vector<ClassId> class_ids;

  std::size_t size() const { return class_ids.size(); }
  bool empty() const { return class_ids.empty(); }
  std::size_t dim() const { return entries.cols(); }

  std::size_t row_of(ClassId id) const {
    auto it = std::find(class_ids.begin(), class_ids.end(), id);
    if (it == class_ids.end()) throw ArgumentError("library: unknown class id " + std::to_string(id));
    return static_cast<std::size_t>(it - class_ids.begin());
  }

  /// Sub-library holding `ids` in the given order.
  KnowledgeLibrary select(std::span<const ClassId> ids) const {
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (ClassId id : ids) rows.push_back(row_of(id));
    return {select_rows(entries, rows), std::vector<ClassId>(ids.begin(), ids.end())};
  }
};

template <std::floating_point T>
using ClassTokenSets = std::map<ClassId, std::vector<Tensor<T>>>;

namespace detail {

template <std::floating_point T>
Tensor<T> mean_token(ClassId id, const std::vector<Tensor<T>>& tokens) {
  if (tokens.empty()) throw EmptyClassError("library: class " + std::to_string(id) + " has no tokens");
  const std::size_t d = tokens.front().size();
  Tensor<T> mean({1, d});
  for (const auto& t : tokens) {
    if (t.size() != d) throw DimensionError("library: tokens of class " + std::to_string(id) + " differ in length");
    for (std::size_t j = 0; j < d; ++j) mean[j] += t[j];
  }
  for (auto& v : mean.data()) v /= T(tokens.size());
  return mean;
}

}  // namespace detail

/// One row per class, the arithmetic mean of its tokens, ascending class id.
template <std::floating_point T>
KnowledgeLibrary<T> summarize_library(const ClassTokenSets<T>& sets) {
  KnowledgeLibrary<T> lib;
  std::vector<Tensor<T>> rows;
  for (const auto& [id, tokens] : sets) {
    rows.push_back(detail::mean_token(id, tokens));
    lib.class_ids.push_back(id);
  }
  lib.entries = rows.empty() ? Tensor<T>({0, 0}) : stack_rows(rows);
  return lib;
}

/// Append rows for new classes; existing rows are copied bit for bit.
template <std::floating_point T>
KnowledgeLibrary<T> extend_library(const KnowledgeLibrary<T>& lib, const ClassTokenSets<T>& new_sets) {
  for (const auto& [id, tokens] : new_sets) {
    if (std::find(lib.class_ids.begin(), lib.class_ids.end(), id) != lib.class_ids.end())
      throw ConflictError("library: class " + std::to_string(id) + " already present");
  }
  const auto added = summarize_library(new_sets);
  if (!lib.empty() && !added.empty() && added.dim() != lib.dim()) throw DimensionError("library: token length differs");
  KnowledgeLibrary<T> out;
  out.entries = concat_rows(lib.entries, added.entries);
  out.class_ids = lib.class_ids;
  out.class_ids.insert(out.class_ids.end(), added.class_ids.begin(), added.class_ids.end());
  return out;
}

/// Row-wise concatenation of two libraries over disjoint classes.
template <std::floating_point T>
KnowledgeLibrary<T> concat_libraries(const KnowledgeLibrary<T>& first, const KnowledgeLibrary<T>& second) {
  std::set<ClassId> seen(first.class_ids.begin(), first.class_ids.end());
  for (ClassId id : second.class_ids)
    if (seen.count(id)) throw ConflictError("library: class " + std::to_string(id) + " in both libraries");
  KnowledgeLibrary<T> out;
  out.entries = concat_rows(first.entries, second.entries);
  out.class_ids = first.class_ids;
  out.class_ids.insert(out.class_ids.end(), second.class_ids.begin(), second.class_ids.end());
  return out;
}

/// Trainable fusion block (the adapter's parameters): one post-norm transformer
/// block whose query is x_m^0 and whose keys/values are the library rows.
template <std::floating_point T>
struct FusionParams {
  BlockParams<T> block;

  /// Gaussian(0, 0.02) weights with the attention output projection zeroed,
  /// so training starts close to the unfused encoder.
  static FusionParams init(std::size_t dim, std::size_t heads, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return {BlockParams<T>::init(dim, heads, rng, T(0.02), true)};
  }

  /// Dense Gaussian init with no zeroed projection; used by gradient checks.
  static FusionParams random(std::size_t dim, std::size_t heads, std::uint64_t seed, T stddev) {
    std::mt19937_64 rng(seed);
    return {BlockParams<T>::init(dim, heads, rng, stddev, false)};
  }

  std::size_t heads() const { return block.heads; }
  std::size_t dim() const { return block.dim; }
  std::vector<Tensor<T>*> tensors() { return block.tensors(); }
  std::vector<const Tensor<T>*> tensors() const { return block.tensors(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* t : tensors()) n += t->size();
    return n;
  }
};

/// How the refined feature is produced. `identity` skips fusion entirely
/// (x̂_m^0 = x_m^0): the no-adapter baseline.
enum class FusionMode { adapter, identity };

/// x̂_m^0 = g(x_m^0, M; θ_g) on a tape. Per-head attention weights are appended
/// to `attention_out` when given.
template <std::floating_point T>
Var fuse(Tape<T>& tape, Var x_m0, Var library, const BlockVars& fusion, std::vector<Var>* attention_out = nullptr) {
  if (tape.value(library).rows() == 0 || tape.value(library).size() == 0)
    throw PreconditionError("fuse: knowledge library is empty");
  if (tape.value(x_m0).rows() != 1) throw DimensionError("fuse: query must be a single token");
  if (tape.value(library).cols() != tape.value(x_m0).cols()) throw DimensionError("fuse: library width differs from D");
  return transformer_block(tape, x_m0, library, fusion, attention_out);
}

/// Refined feature x_p^0 from cached middle-stage tokens: row 0 is replaced by
/// the fused token, then the post stage runs. Returns a 1 x D node.
template <std::floating_point T>
Var refine_tokens(Tape<T>& tape, const Encoder<T>& encoder, const Tensor<T>& middle_tokens, Var library,
                  const BlockVars& fusion, FusionMode mode) {
  const Var x = tape.constant_ref(middle_tokens);
  const std::size_t n = middle_tokens.rows();
  const Var x0 = tape.slice_rows(x, 0, 1);
  const Var fused = mode == FusionMode::identity ? x0 : fuse(tape, x0, library, fusion);
  const Var seq = n > 1 ? tape.concat_rows({fused, tape.slice_rows(x, 1, n - 1)}) : fused;
  const Var out = encoder.encode(tape, seq, Stage::post);
  return tape.slice_rows(out, 0, 1);
}

// ---- value-level API ---------------------------------------------------------

template <std::floating_point T>
Tensor<T> fuse(const Tensor<T>& x_m0, const KnowledgeLibrary<T>& lib, const FusionParams<T>& params) {
  if (lib.empty()) throw PreconditionError("fuse: knowledge library is empty");
  Tape<T> tape;
  const BlockVars vars = bind_block(tape, params.block, false);
  const Var q = tape.constant_ref(x_m0);
  return tape.value(fuse(tape, tape.reshape(q, {1, x_m0.size()}), tape.constant_ref(lib.entries), vars));
}

/// Per-head post-softmax attention of x_m^0 over the library: heads x |C|.
template <std::floating_point T>
Tensor<T> attention_weights(const Tensor<T>& x_m0, const KnowledgeLibrary<T>& lib, const FusionParams<T>& params) {
  if (lib.empty()) throw PreconditionError("attention_weights: knowledge library is empty");
  Tape<T> tape;
  const BlockVars vars = bind_block(tape, params.block, false);
  std::vector<Var> heads;
  const Var q = tape.reshape(tape.constant_ref(x_m0), {1, x_m0.size()});
  fuse(tape, q, tape.constant_ref(lib.entries), vars, &heads);
  Tensor<T> out({heads.size(), lib.size()});
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const auto& w = tape.value(heads[h]);
    std::copy(w.data().begin(), w.data().end(), out.row(h).begin());
  }
  return out;
}

template <std::floating_point T>
Tensor<T> refine_encoded(const Tensor<T>& middle_tokens, const KnowledgeLibrary<T>& lib, const Encoder<T>& encoder,
                         const FusionParams<T>& params, FusionMode mode = FusionMode::adapter) {
  if (mode == FusionMode::adapter && lib.empty()) throw PreconditionError("refine: knowledge library is empty");
  Tape<T> tape;
  const BlockVars vars = bind_block(tape, params.block, false);
  const Var library = tape.constant_ref(lib.entries);
  const Var f = refine_tokens(tape, encoder, middle_tokens, library, vars, mode);
  return tape.value(f).reshaped({tape.value(f).size()});
}


/// f(x, M): the refined global representation of `image` (shape {D}).
template <std::floating_point T>
Tensor<T> refine(const Tensor<T>& image, const KnowledgeLibrary<T>& lib, const Encoder<T>& encoder,
                 const FusionParams<T>& params, FusionMode mode = FusionMode::adapter) {
  const auto sample = encoder.encode_to_middle(image);
  return refine_encoded(sample.middle_tokens, lib, encoder, params, mode);
}

}  // namespace kanet

namespace kanet {

/// Frozen encoder plus the adapter's trainable fusion block.
template <std::floating_point T>
struct KanetModel {
  Encoder<T> encoder;
  FusionParams<T> fusion;
  FusionMode mode = FusionMode::adapter;

  static KanetModel create(const EncoderConfig& config, std::uint64_t fusion_seed) {
    return {Encoder<T>(config), FusionParams<T>::init(config.embed_dim, config.num_heads, fusion_seed),
            FusionMode::adapter};
  }
};

/// Library entries as one KANT record plus a `row,class_id` CSV sidecar.
template <std::floating_point T>
void save_library(const KnowledgeLibrary<T>& lib, const std::filesystem::path& entries_path,
                  const std::filesystem::path& ids_path) {
  save_tensor(entries_path, lib.entries);
  std::ofstream os(ids_path, std::ios::binary);
  if (!os) throw FormatError("library: cannot write " + ids_path.string());
  os << "row,class_id\n";
  for (std::size_t i = 0; i < lib.class_ids.size(); ++i) os << i << ',' << lib.class_ids[i] << '\n';
}

template <std::floating_point T>
KnowledgeLibrary<T> load_library(const std::filesystem::path& entries_path, const std::filesystem::path& ids_path) {
  KnowledgeLibrary<T> lib{load_tensor_as<T>(entries_path), {}};
  std::ifstream is(ids_path);
  if (!is) throw FormatError("library: cannot open " + ids_path.string());
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("library: bad sidecar line '" + line + "'");
    lib.class_ids.push_back(std::stoi(line.substr(comma + 1)));
  }
  if (lib.entries.ndim() != 2 || lib.entries.rows() != lib.class_ids.size())
    throw FormatError("library: " + std::to_string(lib.class_ids.size()) + " ids for entries of shape " +
                      shape_string(lib.entries.shape()));
  return lib;
}

/// Class-mean library from a set of early [class] tokens and their labels.
template <std::floating_point T>
KnowledgeLibrary<T> library_from_tokens(std::span<const Tensor<T>* const> tokens, std::span<const ClassId> labels) {
  ClassTokenSets<T> sets;
  for (std::size_t i = 0; i < tokens.size(); ++i) sets[labels[i]].push_back(*tokens[i]);
  return summarize_library(sets);
}

}  // namespace kanet
