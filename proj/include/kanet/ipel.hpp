#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "kanet/classifier.hpp"
#include "kanet/data.hpp"
#include "kanet/knowledge_adapter.hpp"
#include "kanet/optim.hpp"

namespace kanet {

struct IpelConfig {
  std::size_t way = 20;
  std::size_t shot = 10;
  std::size_t query_per_class = 15;
  std::size_t pseudo_old_test = 128;
  std::size_t tasks_per_epoch = 200;
  std::size_t epochs = 50;
  double lr0 = 0.03;
  double alpha = 16.0;
  double lambda_adapt = 1.5;
  double lambda_balance = 2.0;
  std::uint64_t seed = 0;

  std::size_t total_steps() const { return epochs * tasks_per_epoch; }

  void validate() const {
    if (way == 0 || shot == 0 || query_per_class == 0 || tasks_per_epoch == 0)
      throw ConfigError("ipel: way, shot, query_per_class and tasks_per_epoch must be positive");
    if (!(alpha > 0.0)) throw ConfigError("ipel: alpha must be positive");
    if (!(lr0 >= 0.0)) throw ConfigError("ipel: lr0 must be non-negative");
    if (!(lambda_adapt >= 0.0) || !(lambda_balance >= 0.0)) throw ConfigError("ipel: loss weights must be >= 0");
  }
};

/// Frozen encodings of the base session's training data. Because f_e and f_m
/// never change, tokens up to the fusion point are computed once.
template <std::floating_point T>
struct BaseSession {
  std::vector<EncodedSample<T>> samples;
  std::vector<ClassId> labels;
  std::map<ClassId, std::vector<std::size_t>> by_class;

  std::vector<ClassId> classes() const {
    std::vector<ClassId> out;
    for (const auto& [id, _] : by_class) out.push_back(id);
    return out;
  }
};

template <std::floating_point T>
BaseSession<T> encode_base_session(const Encoder<T>& encoder, const LabeledDataset<T>& data,
                                   std::span<const std::size_t> indices) {
  BaseSession<T> base;
  base.samples.reserve(indices.size());
  for (std::size_t idx : indices) {
    base.by_class[data.labels[idx]].push_back(base.samples.size());
    base.samples.push_back(encoder.encode_to_middle(data.images[idx]));
    base.labels.push_back(data.labels[idx]);
  }
  return base;
}

template <std::floating_point T>
BaseSession<T> encode_base_session(const Encoder<T>& encoder, const LabeledDataset<T>& data) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return encode_base_session(encoder, data, all);
}

/// The base knowledge library M from the cached early [class] tokens.
template <std::floating_point T>
KnowledgeLibrary<T> base_library(const BaseSession<T>& base) {
  ClassTokenSets<T> sets;
  for (std::size_t i = 0; i < base.samples.size(); ++i) sets[base.labels[i]].push_back(base.samples[i].early_class_token);
  return summarize_library(sets);
}

/// Base-class prototypes θ_c of features refined with `lib` under the current fusion.
template <std::floating_point T>
ClassifierWeights<T> base_prototypes(const BaseSession<T>& base, const KnowledgeLibrary<T>& lib,
                                     const Encoder<T>& encoder, const FusionParams<T>& fusion,
                                     FusionMode mode = FusionMode::adapter) {
  std::vector<Tensor<T>> feats;
  feats.reserve(base.samples.size());
  for (const auto& s : base.samples) feats.push_back(refine_encoded(s.middle_tokens, lib, encoder, fusion, mode));
  return prototypes(stack_rows(feats), std::span<const ClassId>(base.labels));
}

/// One pseudo incremental task. Sample fields index into BaseSession::samples.
template <std::floating_point T>
struct EpisodeTask {
  std::vector<ClassId> pseudo_new;  // ascending
  std::vector<ClassId> pseudo_old;  // ascending
  std::vector<std::size_t> support;          // way * shot, grouped by class
  std::vector<std::size_t> query;            // way * query_per_class
  std::vector<std::size_t> pseudo_old_test;  // drawn from pseudo-old classes
  KnowledgeLibrary<T> pseudo_old_knowledge;
  ClassifierWeights<T> pseudo_old_classifier;
};

/// Throws ConfigError unless every draw of sample_episode can be satisfied.
template <std::floating_point T>
void check_episode_feasible(const BaseSession<T>& base, const IpelConfig& cfg) {
  cfg.validate();
  if (base.by_class.size() < cfg.way)
    throw ConfigError("ipel: base session has " + std::to_string(base.by_class.size()) + " classes, way is " +
                      std::to_string(cfg.way));
  const std::size_t per_class = cfg.shot + cfg.query_per_class;
  std::vector<std::size_t> counts;
  for (const auto& [id, members] : base.by_class) {
    if (members.size() < per_class)
      throw ConfigError("ipel: class " + std::to_string(id) + " has " + std::to_string(members.size()) +
                        " samples, need shot + query = " + std::to_string(per_class));
    counts.push_back(members.size());
  }
  // Worst case for the pseudo-old pool: the largest classes are drawn as new.
  std::sort(counts.begin(), counts.end());
  std::size_t pool = 0;
  for (std::size_t i = 0; i + cfg.way < counts.size(); ++i) pool += counts[i];
  if (pool < cfg.pseudo_old_test)
    throw ConfigError("ipel: pseudo-old classes may hold only " + std::to_string(pool) + " samples, need " +
                      std::to_string(cfg.pseudo_old_test));
}

/// Random N-way K-shot pseudo task: N base classes become pseudo-new (disjoint
/// support and query samples), the rest pseudo-old (a uniform draw of
/// `pseudo_old_test` samples from their pooled training data, plus their
/// library and classifier rows).
template <std::floating_point T, class Rng>
EpisodeTask<T> sample_episode(const BaseSession<T>& base, const KnowledgeLibrary<T>& lib_base,
                              const ClassifierWeights<T>& theta_base, const IpelConfig& cfg, Rng& rng) {
  check_episode_feasible(base, cfg);
  std::vector<ClassId> classes = base.classes();
  const std::size_t per_class = cfg.shot + cfg.query_per_class;

  EpisodeTask<T> ep;
  std::shuffle(classes.begin(), classes.end(), rng);
  ep.pseudo_new.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(cfg.way));
  ep.pseudo_old.assign(classes.begin() + static_cast<std::ptrdiff_t>(cfg.way), classes.end());
  std::sort(ep.pseudo_new.begin(), ep.pseudo_new.end());
  std::sort(ep.pseudo_old.begin(), ep.pseudo_old.end());

  for (ClassId id : ep.pseudo_new) {
    std::vector<std::size_t> members = base.by_class.at(id);
    std::shuffle(members.begin(), members.end(), rng);
    ep.support.insert(ep.support.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cfg.shot));
    ep.query.insert(ep.query.end(), members.begin() + static_cast<std::ptrdiff_t>(cfg.shot),
                    members.begin() + static_cast<std::ptrdiff_t>(per_class));
  }

  std::vector<std::size_t> pool;
  for (ClassId id : ep.pseudo_old) {
    const auto& members = base.by_class.at(id);
    pool.insert(pool.end(), members.begin(), members.end());
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  ep.pseudo_old_test.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(cfg.pseudo_old_test));

  ep.pseudo_old_knowledge = lib_base.select(ep.pseudo_old);
  ep.pseudo_old_classifier = theta_base.select(ep.pseudo_old);
  return ep;
}

/// Everything the episode losses read besides the episode itself.
template <std::floating_point T>
struct EpisodeContext {
  const BaseSession<T>& base;
  const Encoder<T>& encoder;
  const BlockVars& fusion;
  T alpha;
};

namespace detail {

template <std::floating_point T>
std::vector<Var> refine_all(Tape<T>& tape, const EpisodeContext<T>& ctx, std::span<const std::size_t> samples,
                            Var library) {
  std::vector<Var> out;
  out.reserve(samples.size());
  for (std::size_t s : samples)
    out.push_back(refine_tokens(tape, ctx.encoder, ctx.base.samples[s].middle_tokens, library, ctx.fusion,
                                FusionMode::adapter));
  return out;
}

template <std::floating_point T>
std::vector<ClassId> labels_of(const BaseSession<T>& base, std::span<const std::size_t> samples) {
  std::vector<ClassId> out;
  for (std::size_t s : samples) out.push_back(base.labels[s]);
  return out;
}

/// Column index of each label within `order`.
inline std::vector<std::size_t> label_positions(std::span<const ClassId> labels, std::span<const ClassId> order) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (ClassId id : labels) {
    auto it = std::find(order.begin(), order.end(), id);
    if (it == order.end()) throw ArgumentError("ipel: label outside the classifier");
    out.push_back(static_cast<std::size_t>(it - order.begin()));
  }
  return out;
}

/// M^pn: class means of the support set's early [class] tokens.
template <std::floating_point T>
KnowledgeLibrary<T> support_library(const BaseSession<T>& base, std::span<const std::size_t> support) {
  ClassTokenSets<T> sets;
  for (std::size_t s : support) sets[base.labels[s]].push_back(base.samples[s].early_class_token);
  return summarize_library(sets);
}

}  // namespace detail

/// L_adapt: refine S and Q with M^pn, classify Q against the prototypes of S.
template <std::floating_point T>
Var adaptation_loss(Tape<T>& tape, const EpisodeTask<T>& ep, const EpisodeContext<T>& ctx) {
  const auto lib_new = detail::support_library(ctx.base, ep.support);
  const Var library = tape.constant(lib_new.entries);
  const auto support_feats = detail::refine_all(tape, ctx, ep.support, library);
  const auto query_feats = detail::refine_all(tape, ctx, ep.query, library);
  const auto support_labels = detail::labels_of(ctx.base, ep.support);
  std::vector<ClassId> order;
  const Var theta_new = prototypes(tape, std::span<const Var>(support_feats), support_labels, &order);
  const Var probs = predict(tape, tape.concat_rows(query_feats), theta_new, ctx.alpha);
  const auto query_labels = detail::labels_of(ctx.base, ep.query);
  return tape.cross_entropy(probs, detail::label_positions(query_labels, order));
}

/// L_balance: refine D^pg = D^po_test ∪ Q and S with M^pg = [M^po; M^pn],
/// classify against θ^pg = [θ^po; prototypes of S]. θ^po is held constant.
template <std::floating_point T>
Var balance_loss(Tape<T>& tape, const EpisodeTask<T>& ep, const EpisodeContext<T>& ctx) {
  const auto lib_new = detail::support_library(ctx.base, ep.support);
  const auto lib_global = concat_libraries(ep.pseudo_old_knowledge, lib_new);
  const Var library = tape.constant(lib_global.entries);

  std::vector<std::size_t> global_test = ep.pseudo_old_test;
  global_test.insert(global_test.end(), ep.query.begin(), ep.query.end());
  const auto test_feats = detail::refine_all(tape, ctx, global_test, library);
  const auto support_feats = detail::refine_all(tape, ctx, ep.support, library);
  const auto support_labels = detail::labels_of(ctx.base, ep.support);

  std::vector<ClassId> new_order;
  const Var theta_new = prototypes(tape, std::span<const Var>(support_feats), support_labels, &new_order);
  std::vector<ClassId> order = ep.pseudo_old_classifier.class_ids;
  order.insert(order.end(), new_order.begin(), new_order.end());
  const Var theta_global = ep.pseudo_old_classifier.empty()
                               ? theta_new
                               : tape.concat_rows({tape.constant(ep.pseudo_old_classifier.rows), theta_new});
  const Var probs = predict(tape, tape.concat_rows(test_feats), theta_global, ctx.alpha);
  const auto test_labels = detail::labels_of(ctx.base, global_test);
  return tape.cross_entropy(probs, detail::label_positions(test_labels, order));
}

/// L = λ_adapt L_adapt + λ_balance L_balance.
inline double combine_losses(double adapt, double balance, const IpelConfig& cfg) {
  return cfg.lambda_adapt * adapt + cfg.lambda_balance * balance;
}

struct EpisodeLosses {
  Var adapt, balance, total;
};

template <std::floating_point T>
EpisodeLosses episode_losses(Tape<T>& tape, const EpisodeTask<T>& ep, const EpisodeContext<T>& ctx,
                                const IpelConfig& cfg) {
  const Var adapt = adaptation_loss(tape, ep, ctx);
  const Var balance = balance_loss(tape, ep, ctx);
  const Var total = tape.add(tape.scale(adapt, T(cfg.lambda_adapt)), tape.scale(balance, T(cfg.lambda_balance)));
  return {adapt, balance, total};
}

/// Value of the total loss for given fusion weights (no gradients recorded).
template <std::floating_point T>
T total_loss(const EpisodeTask<T>& ep, const BaseSession<T>& base, const Encoder<T>& encoder,
             const FusionParams<T>& fusion, const IpelConfig& cfg) {
  Tape<T> tape;
  const BlockVars vars = bind_block(tape, fusion.block, false);
  const EpisodeContext<T> ctx{base, encoder, vars, T(cfg.alpha)};
  return tape.scalar(episode_losses(tape, ep, ctx, cfg).total);
}

struct TrainLogEntry {
  std::size_t epoch = 0;
  std::size_t task = 0;
  double adapt = 0;
  double balance = 0;
  double total = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::size_t steps = 0;
};

/// Incremental pseudo episode learning. Only `fusion` is written. θ_c (base
/// prototypes under the current fusion) is refreshed at the start of every
/// epoch; one sampled task per Adam step with a cosine-annealed learning rate.
template <std::floating_point T>
TrainResult train(const BaseSession<T>& base, const KnowledgeLibrary<T>& lib_base, const Encoder<T>& encoder,
                  FusionParams<T>& fusion, const IpelConfig& cfg,
                  const std::function<void(const TrainLogEntry&)>& on_step = {}) {
  check_episode_feasible(base, cfg);
  std::mt19937_64 rng(cfg.seed);
  Adam<T> adam(fusion.tensors());
  TrainResult result;
  const std::size_t total_steps = cfg.total_steps();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto theta_c = base_prototypes(base, lib_base, encoder, fusion);
    for (std::size_t task = 0; task < cfg.tasks_per_epoch; ++task) {
      const auto ep = sample_episode(base, lib_base, theta_c, cfg, rng);
      Tape<T> tape;
      const BlockVars vars = bind_block(tape, fusion.block, true);
      const EpisodeContext<T> ctx{base, encoder, vars, T(cfg.alpha)};
      const auto losses = episode_losses(tape, ep, ctx, cfg);
      TrainLogEntry entry{epoch,
                          task,
                          static_cast<double>(tape.scalar(losses.adapt)),
                          static_cast<double>(tape.scalar(losses.balance)),
                          static_cast<double>(tape.scalar(losses.total)),
                          cosine_annealed_lr(result.steps, total_steps, cfg.lr0)};
      if (!std::isfinite(entry.total)) {
        throw TrainingError("ipel: non-finite loss at epoch " + std::to_string(epoch) + ", task " +
                            std::to_string(task) + " (adapt=" + std::to_string(entry.adapt) +
                            ", balance=" + std::to_string(entry.balance) + ")");
      }
      tape.backward(losses.total);
      std::vector<Tensor<T>> grads;
      for (Var v : block_var_list(vars)) grads.push_back(tape.grad(v));
      adam.step(grads, entry.lr);
      ++result.steps;
      result.log.push_back(entry);
      if (on_step) on_step(entry);
    }
  }
  return result;
}

}  // namespace kanet
