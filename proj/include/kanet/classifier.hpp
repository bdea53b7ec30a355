#pragma once

#include <map>
#include <set>
#include <span>
#include <vector>

#include "kanet/autodiff.hpp"

namespace kanet {

/// Cosine prototype classifier: one (unnormalized) weight row per seen class.
template <std::floating_point T>
struct ClassifierWeights {
  Tensor<T> rows;  // |C| x D
  std::vector<ClassId> class_ids;

  std::size_t size() const { return class_ids.size(); }
  bool empty() const { return class_ids.empty(); }

  /// Rows for `ids`, in that order.
  ClassifierWeights select(std::span<const ClassId> ids) const {
    std::vector<std::size_t> idx;
    for (ClassId id : ids) {
      auto it = std::find(class_ids.begin(), class_ids.end(), id);
      if (it == class_ids.end()) throw ArgumentError("classifier: unknown class id " + std::to_string(id));
      idx.push_back(static_cast<std::size_t>(it - class_ids.begin()));
    }
    return {select_rows(rows, idx), std::vector<ClassId>(ids.begin(), ids.end())};
  }
};

/// Per-class mean of `features` rows, ascending class id.
template <std::floating_point T>
ClassifierWeights<T> prototypes(const Tensor<T>& features, std::span<const ClassId> labels) {
  if (features.rows() != labels.size() && !(features.size() == 0 && labels.empty()))
    throw DimensionError("prototypes: one label per feature row required");
  const std::size_t d = features.cols();
  std::map<ClassId, std::pair<std::vector<T>, std::size_t>> acc;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [sum, count] = acc[labels[i]];
    if (sum.empty()) sum.assign(d, T{0});
    auto r = features.row(i);
    for (std::size_t j = 0; j < d; ++j) sum[j] += r[j];
    ++count;
  }
  ClassifierWeights<T> out{Tensor<T>({acc.size(), d}), {}};
  std::size_t r = 0;
  for (const auto& [id, entry] : acc) {
    for (std::size_t j = 0; j < d; ++j) out.rows(r, j) = entry.first[j] / T(entry.second);
    out.class_ids.push_back(id);
    ++r;
  }
  return out;
}

/// Tape version: `features` are 1 x D nodes, result is |classes| x D with rows
/// in ascending class id order (the order of `class_order` if given).
template <std::floating_point T>
Var prototypes(Tape<T>& tape, std::span<const Var> features, std::span<const ClassId> labels,
               std::vector<ClassId>* class_order = nullptr) {
  if (features.size() != labels.size()) throw DimensionError("prototypes: one label per feature required");
  std::map<ClassId, std::vector<Var>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(features[i]);
  std::vector<Var> rows;
  for (const auto& [id, members] : groups) {
    rows.push_back(members.size() == 1 ? members.front() : tape.mean_rows(tape.concat_rows(members)));
    if (class_order) class_order->push_back(id);
  }
  return tape.concat_rows(rows);
}

/// softmax(alpha * cos(features, weights)) for an n x D batch: n x |C|.
template <std::floating_point T>
Var predict(Tape<T>& tape, Var features, Var weights, T alpha) {
  if (!(alpha > T{0})) throw ArgumentError("predict: alpha must be positive");
  return tape.softmax_rows(tape.scale(tape.cosine_rows(features, weights), alpha));
}

/// Probability vector over the classifier's classes for one feature.
template <std::floating_point T>
Tensor<T> predict(const Tensor<T>& feature, const ClassifierWeights<T>& weights, T alpha) {
  if (weights.empty()) throw PreconditionError("predict: classifier has no classes");
  Tape<T> tape;
  const Var f = tape.reshape(tape.constant_ref(feature), {1, feature.size()});
  const auto& p = tape.value(predict(tape, f, tape.constant_ref(weights.rows), alpha));
  return p.reshaped({p.size()});
}

/// Old rows copied bit for bit, new rows appended.
template <std::floating_point T>
ClassifierWeights<T> extend(const ClassifierWeights<T>& old, const ClassifierWeights<T>& added) {
  std::set<ClassId> seen(old.class_ids.begin(), old.class_ids.end());
  for (ClassId id : added.class_ids)
    if (seen.count(id)) throw ConflictError("classifier: class " + std::to_string(id) + " already present");
  if (!old.empty() && !added.empty() && old.rows.cols() != added.rows.cols())
    throw DimensionError("classifier: row width differs");
  ClassifierWeights<T> out;
  out.rows = concat_rows(old.rows, added.rows);
  out.class_ids = old.class_ids;
  out.class_ids.insert(out.class_ids.end(), added.class_ids.begin(), added.class_ids.end());
  return out;
}

/// Class with the highest score; exact ties go to the lowest class id.
template <class Scores>
ClassId argmax_class(const Scores& scores, std::span<const ClassId> class_ids) {
  if (class_ids.empty() || std::size(scores) != class_ids.size())
    throw ArgumentError("argmax_class: scores and ids must be non-empty and aligned");
  std::size_t best = 0;
  for (std::size_t i = 1; i < class_ids.size(); ++i) {
    if (scores[i] > scores[best] || (scores[i] == scores[best] && class_ids[i] < class_ids[best])) best = i;
  }
  return class_ids[best];
}

}  // namespace kanet
