#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kanet/classifier.hpp"
#include "kanet/data.hpp"
#include "kanet/knowledge_adapter.hpp"

namespace kanet {

/// How classes are dealt into sessions: `base_classes` in session 0, then
/// `incremental_sessions` sessions of `ways_per_session` classes with `shots`
/// training samples each.
struct SplitConfig {
  std::size_t base_classes = 60;
  std::size_t incremental_sessions = 8;
  std::size_t ways_per_session = 5;
  std::size_t shots = 5;
  std::uint64_t seed = 0;

  static SplitConfig cifar100() { return {60, 8, 5, 5, 0}; }
  static SplitConfig cub200() { return {100, 10, 10, 5, 0}; }

  std::size_t total_classes() const { return base_classes + incremental_sessions * ways_per_session; }
  std::size_t num_sessions() const { return incremental_sessions + 1; }

  void validate() const {
    if (base_classes == 0) throw ConfigError("split: base_classes must be positive");
    if (incremental_sessions > 0 && (ways_per_session == 0 || shots == 0))
      throw ConfigError("split: incremental sessions need positive ways and shots");
  }
};

struct SessionSpec {
  std::size_t index = 0;
  std::vector<ClassId> label_space;         // ascending
  std::vector<std::size_t> train_indices;  // into the train dataset
  std::vector<std::size_t> test_indices;   // into the test dataset
};

template <std::floating_point T>
struct SessionStream {
  std::shared_ptr<const SplitDatasets<T>> data;
  std::vector<SessionSpec> sessions;
};

/// Deal the dataset's classes (ascending id) into a base session and equal
/// incremental sessions. Incremental training splits keep `shots` samples per
/// class, drawn with the split's seed; test splits keep every sample.
template <std::floating_point T>
SessionStream<T> build_session_stream(std::shared_ptr<const SplitDatasets<T>> data, const SplitConfig& cfg) {
  cfg.validate();
  std::map<ClassId, std::vector<std::size_t>> train_by_class, test_by_class;
  for (std::size_t i = 0; i < data->train.size(); ++i) train_by_class[data->train.labels[i]].push_back(i);
  for (std::size_t i = 0; i < data->test.size(); ++i) test_by_class[data->test.labels[i]].push_back(i);
  if (train_by_class.size() < cfg.total_classes())
    throw ConfigError("split: dataset has " + std::to_string(train_by_class.size()) + " classes, split needs " +
                      std::to_string(cfg.total_classes()));

  std::vector<ClassId> classes;
  for (const auto& [id, _] : train_by_class) classes.push_back(id);

  std::mt19937_64 rng(cfg.seed);
  SessionStream<T> stream{data, {}};
  std::size_t next = 0;
  for (std::size_t s = 0; s < cfg.num_sessions(); ++s) {
    const std::size_t count = s == 0 ? cfg.base_classes : cfg.ways_per_session;
    SessionSpec spec;
    spec.index = s;
    for (std::size_t c = 0; c < count; ++c) {
      const ClassId id = classes[next++];
      spec.label_space.push_back(id);
      std::vector<std::size_t> train = train_by_class.at(id);
      if (s > 0) {
        if (train.size() < cfg.shots)
          throw ConfigError("split: class " + std::to_string(id) + " has " + std::to_string(train.size()) +
                            " training samples, session needs " + std::to_string(cfg.shots));
        std::shuffle(train.begin(), train.end(), rng);
        train.resize(cfg.shots);
        std::sort(train.begin(), train.end());
      }
      spec.train_indices.insert(spec.train_indices.end(), train.begin(), train.end());
      if (auto it = test_by_class.find(id); it != test_by_class.end())
        spec.test_indices.insert(spec.test_indices.end(), it->second.begin(), it->second.end());
    }
    stream.sessions.push_back(std::move(spec));
  }
  return stream;
}

// ---- metrics -----------------------------------------------------------------

/// Avg = mean of the per-session accuracies.
inline double avg_accuracy(std::span<const double> accs) {
  if (accs.empty()) throw ArgumentError("avg_accuracy: no sessions");
  return std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
}

/// PD = first-session accuracy minus last-session accuracy.
inline double performance_drop(std::span<const double> accs) {
  if (accs.empty()) throw ArgumentError("performance_drop: no sessions");
  return accs.front() - accs.back();
}

struct BaseNewAccuracy {
  std::optional<double> base;
  std::optional<double> novel;
};

/// Accuracy (percent) over samples whose true class is a base class and over
/// the rest, separately. A group with no samples yields nullopt.
inline BaseNewAccuracy base_new_accuracy(std::span<const ClassId> predictions, std::span<const ClassId> truths,
                                         const std::set<ClassId>& base_classes) {
  if (predictions.size() != truths.size()) throw ArgumentError("base_new_accuracy: length mismatch");
  std::size_t base_total = 0, base_ok = 0, new_total = 0, new_ok = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const bool ok = predictions[i] == truths[i];
    if (base_classes.count(truths[i])) {
      ++base_total;
      base_ok += ok;
    } else {
      ++new_total;
      new_ok += ok;
    }
  }
  BaseNewAccuracy out;
  if (base_total) out.base = 100.0 * static_cast<double>(base_ok) / static_cast<double>(base_total);
  if (new_total) out.novel = 100.0 * static_cast<double>(new_ok) / static_cast<double>(new_total);
  return out;
}

struct SessionAccuracy {
  std::size_t session = 0;
  std::size_t classes_seen = 0;
  std::size_t test_samples = 0;
  double accuracy = 0.0;
};

struct MetricsReport {
  std::vector<SessionAccuracy> sessions;
  double avg = 0.0;
  double pd = 0.0;
  std::optional<double> base_acc;
  std::optional<double> new_acc;

  std::vector<double> accuracies() const {
    std::vector<double> out;
    for (const auto& s : sessions) out.push_back(s.accuracy);
    return out;
  }
};

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["per_session_accuracy"] = nlohmann::json::array();
  for (const auto& s : r.sessions) j["per_session_accuracy"].push_back(round2(s.accuracy));
  j["avg"] = round2(r.avg);
  j["pd"] = round2(r.pd);
  j["base_acc"] = r.base_acc ? nlohmann::json(round2(*r.base_acc)) : nlohmann::json(nullptr);
  j["new_acc"] = r.new_acc ? nlohmann::json(round2(*r.new_acc)) : nlohmann::json(nullptr);
  return j;
}

/// One row per session: session,classes_seen,test_samples,accuracy.
inline std::string to_csv(const MetricsReport& r) {
  std::string out = "session,classes_seen,test_samples,accuracy\n";
  char buf[128];
  for (const auto& s : r.sessions) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.2f\n", s.session, s.classes_seen, s.test_samples, s.accuracy);
    out += buf;
  }
  return out;
}

// ---- incremental procedure ---------------------------------------------------

/// Which library the fusion reads during evaluation. `zero_row` replaces M
/// with a single all-zero row (the "without M" ablation); bookkeeping of the
/// real library is unchanged.
enum class LibraryMode { full, zero_row };

struct ProtocolOptions {
  double alpha = 16.0;
  LibraryMode library = LibraryMode::full;
};

template <std::floating_point T>
struct IncrementalResult {
  MetricsReport report;
  std::vector<KnowledgeLibrary<T>> libraries;     // after each session
  std::vector<ClassifierWeights<T>> classifiers;  // after each session
  std::vector<ClassId> final_predictions;
  std::vector<ClassId> final_truths;
};

/// Run the session stream: for session i, (1) extend M with class means of the
/// new training data's early [class] tokens, (2) refine the training data with
/// the updated M, (3) append their class-mean prototypes to the classifier and
/// (4) classify every test sample of sessions 0..i after refining it with M.
template <std::floating_point T>
IncrementalResult<T> run_incremental(const KanetModel<T>& model, const SessionStream<T>& stream,
                                     const ProtocolOptions& opts = {}) {
  if (stream.sessions.empty()) throw ProtocolError("protocol: empty session stream");
  const auto& data = *stream.data;
  const std::size_t D = model.encoder.config().embed_dim;
  const T alpha = T(opts.alpha);

  IncrementalResult<T> result;
  KnowledgeLibrary<T> library;
  ClassifierWeights<T> classifier;
  std::set<ClassId> seen;
  std::vector<std::size_t> test_pool;
  std::map<std::size_t, Tensor<T>> test_cache;  // middle tokens per test index
  const KnowledgeLibrary<T> zero_library{Tensor<T>({1, D}), {-1}};

  for (std::size_t pos = 0; pos < stream.sessions.size(); ++pos) {
    const SessionSpec& session = stream.sessions[pos];
    if (session.index != pos)
      throw ProtocolError("protocol: expected session " + std::to_string(pos) + ", got " +
                          std::to_string(session.index));
    for (ClassId id : session.label_space)
      if (!seen.insert(id).second)
        throw ProtocolError("protocol: class " + std::to_string(id) + " reappears in session " +
                            std::to_string(pos));

    // (1) summarize knowledge
    std::vector<EncodedSample<T>> encoded;
    std::vector<ClassId> labels;
    ClassTokenSets<T> token_sets;
    for (std::size_t idx : session.train_indices) {
      encoded.push_back(model.encoder.encode_to_middle(data.train.images[idx]));
      labels.push_back(data.train.labels[idx]);
      token_sets[labels.back()].push_back(encoded.back().early_class_token);
    }
    library = pos == 0 ? summarize_library(token_sets) : extend_library(library, token_sets);
    const KnowledgeLibrary<T>& active = opts.library == LibraryMode::zero_row ? zero_library : library;

    // (2) refine training data, (3) extend classifier
    std::vector<Tensor<T>> feats;
    for (const auto& e : encoded)
      feats.push_back(refine_encoded(e.middle_tokens, active, model.encoder, model.fusion, model.mode));
    const auto protos = prototypes(stack_rows(feats), std::span<const ClassId>(labels));
    classifier = pos == 0 ? protos : extend(classifier, protos);

    // (4) evaluate on the union of test splits so far
    for (std::size_t idx : session.test_indices) {
      test_pool.push_back(idx);
      test_cache.emplace(idx, model.encoder.encode_to_middle(data.test.images[idx]).middle_tokens);
    }
    std::vector<ClassId> predictions, truths;
    std::size_t correct = 0;
    for (std::size_t idx : test_pool) {
      const auto f = refine_encoded(test_cache.at(idx), active, model.encoder, model.fusion, model.mode);
      const auto probs = predict(f, classifier, alpha);
      const ClassId pred = argmax_class(probs, std::span<const ClassId>(classifier.class_ids));
      predictions.push_back(pred);
      truths.push_back(data.test.labels[idx]);
      correct += pred == truths.back();
    }
    const double acc =
        test_pool.empty() ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(test_pool.size());
    result.report.sessions.push_back({pos, classifier.size(), test_pool.size(), acc});
    result.libraries.push_back(library);
    result.classifiers.push_back(classifier);
    result.final_predictions = std::move(predictions);
    result.final_truths = std::move(truths);
  }

  const auto accs = result.report.accuracies();
  result.report.avg = avg_accuracy(accs);
  result.report.pd = performance_drop(accs);
  const std::set<ClassId> base(stream.sessions.front().label_space.begin(), stream.sessions.front().label_space.end());
  const auto bn = base_new_accuracy(result.final_predictions, result.final_truths, base);
  result.report.base_acc = bn.base;
  result.report.new_acc = bn.novel;
  return result;
}

}  // namespace kanet
