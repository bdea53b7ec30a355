#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kanet/ipel.hpp"
#include "kanet/protocol.hpp"
#include "kanet/run_config.hpp"

namespace kanet {

/// Everything a command needs, built from a validated RunConfig without
/// touching the filesystem beyond reading inputs.
struct Experiment {
  RunConfig config;
  std::shared_ptr<const SplitDatasets<float>> data;
  SessionStream<float> stream;
  KanetModel<float> model;
};

inline Experiment build_experiment(const RunConfig& cfg) {
  cfg.validate();
  const EncoderConfig enc = cfg.effective_encoder();
  auto data = std::make_shared<SplitDatasets<float>>(
      cfg.dataset == "synthetic" ? generate_synthetic<float>(cfg.effective_synthetic())
                                 : load_manifest<float>(cfg.manifest));
  const Shape expected{enc.channels, enc.image_size, enc.image_size};
  for (const auto* split : {&data->train, &data->test})
    if (!split->empty() && split->images.front().shape() != expected)
      throw ConfigError("config: images have shape " + shape_string(split->images.front().shape()) +
                        ", encoder expects " + shape_string(expected));
  auto stream = build_session_stream<float>(data, cfg.effective_split());
  auto model = KanetModel<float>::create(enc, cfg.fusion_seed());
  if (cfg.baseline) model.mode = FusionMode::identity;
  return {cfg, std::move(data), std::move(stream), std::move(model)};
}

inline void load_checkpoint(FusionParams<float>& fusion, const std::filesystem::path& path) {
  load_tensors_into<float>(path, fusion.tensors());
}

inline void save_checkpoint(const FusionParams<float>& fusion, const std::filesystem::path& path) {
  const auto ts = fusion.tensors();
  save_tensors<float>(path, ts);
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

inline std::filesystem::path prepare_out_dir(const RunConfig& cfg) {
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  write_text(dir / "run_config.txt", cfg.to_text());
  return dir;
}

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt_opt2(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

inline void maybe_load_checkpoint(Experiment& ex) {
  if (!ex.config.checkpoint.empty()) load_checkpoint(ex.model.fusion, ex.config.checkpoint);
}

/// Library holding every class of every session, built from training data.
inline KnowledgeLibrary<float> full_library(const Experiment& ex) {
  ClassTokenSets<float> sets;
  for (const auto& session : ex.stream.sessions)
    for (std::size_t idx : session.train_indices)
      sets[ex.data->train.labels[idx]].push_back(
          ex.model.encoder.encode_to_middle(ex.data->train.images[idx]).early_class_token);
  return summarize_library(sets);
}

inline std::size_t session_of(const SessionStream<float>& stream, ClassId id) {
  for (const auto& s : stream.sessions)
    if (std::binary_search(s.label_space.begin(), s.label_space.end(), id)) return s.index;
  throw ArgumentError("class " + std::to_string(id) + " belongs to no session");
}

}  // namespace detail

struct TrainOutcome {
  std::filesystem::path checkpoint;
  std::size_t steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};

/// IPEL over the base session's training data. Writes theta_g.kant (the fusion
/// parameters) and train_log.jsonl (one line per optimizer step).
inline TrainOutcome cmd_train(const RunConfig& cfg) {
  Experiment ex = build_experiment(cfg);
  detail::maybe_load_checkpoint(ex);
  const auto& base_split = ex.stream.sessions.front();
  const auto base = encode_base_session(ex.model.encoder, ex.data->train, base_split.train_indices);
  const auto lib = base_library(base);
  const IpelConfig ipel = cfg.effective_ipel();
  if (ipel.epochs > 0) check_episode_feasible(base, ipel);

  const auto dir = detail::prepare_out_dir(cfg);
  std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
  if (!log) throw Error("cannot write " + (dir / "train_log.jsonl").string());
  TrainOutcome out;
  std::size_t step = 0;
  const auto result = train(base, lib, ex.model.encoder, ex.model.fusion, ipel, [&](const TrainLogEntry& e) {
    nlohmann::json j{{"step", step++}, {"epoch", e.epoch}, {"task", e.task}, {"lr", e.lr},
                     {"loss_adapt", e.adapt}, {"loss_balance", e.balance}, {"loss_total", e.total}};
    log << j.dump() << '\n';
  });
  out.steps = result.steps;
  if (!result.log.empty()) {
    out.first_loss = result.log.front().total;
    out.last_loss = result.log.back().total;
  }
  out.checkpoint = dir / "theta_g.kant";
  save_checkpoint(ex.model.fusion, out.checkpoint);
  save_library(lib, dir / "base_library.kant", dir / "base_library_ids.csv");
  return out;
}

/// Incremental protocol over every session. Writes metrics.json, metrics.csv
/// and the final library and classifier.
inline MetricsReport cmd_eval(const RunConfig& cfg) {
  Experiment ex = build_experiment(cfg);
  detail::maybe_load_checkpoint(ex);
  ProtocolOptions opts;
  opts.alpha = cfg.ipel.alpha;
  opts.library = cfg.no_library ? LibraryMode::zero_row : LibraryMode::full;
  const auto result = run_incremental(ex.model, ex.stream, opts);

  const auto dir = detail::prepare_out_dir(cfg);
  detail::write_text(dir / "metrics.json", to_json(result.report).dump(2) + "\n");
  detail::write_text(dir / "metrics.csv", to_csv(result.report));
  save_library(result.libraries.back(), dir / "library.kant", dir / "library_ids.csv");
  const auto& cls = result.classifiers.back();
  save_library(KnowledgeLibrary<float>{cls.rows, cls.class_ids}, dir / "classifier.kant", dir / "classifier_ids.csv");
  return result.report;
}

/// Every stage split with 1 <= ks < kf <= total - 1.
inline std::vector<std::pair<std::size_t, std::size_t>> layer_pairs(std::size_t total_layers) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t ks = 1; ks + 1 < total_layers; ++ks)
    for (std::size_t kf = ks + 1; kf < total_layers; ++kf) out.emplace_back(ks, kf);
  return out;
}

struct SweepRow {
  std::size_t ks = 0;
  std::size_t kf = 0;
  MetricsReport report;
};

/// Train and evaluate once per (ks, kf) pair; writes layer_sweep.csv.
inline std::vector<SweepRow> cmd_sweep_layers(const RunConfig& cfg) {
  const auto pairs = layer_pairs(cfg.encoder.total_layers());
  if (pairs.empty()) throw ConfigError("sweep: encoder needs at least 3 layers");
  std::vector<RunConfig> runs;
  for (const auto& [ks, kf] : pairs) {
    RunConfig c = cfg;
    c.ks = ks;
    c.kf = kf;
    c.validate();
    runs.push_back(std::move(c));
  }
  const auto dir = detail::prepare_out_dir(cfg);
  std::vector<SweepRow> rows;
  std::string csv = "ks,kf,base_acc,new_acc,avg\n";
  for (const auto& c : runs) {
    Experiment ex = build_experiment(c);
    detail::maybe_load_checkpoint(ex);
    if (!c.baseline) {
      const auto base = encode_base_session(ex.model.encoder, ex.data->train, ex.stream.sessions.front().train_indices);
      train(base, base_library(base), ex.model.encoder, ex.model.fusion, c.effective_ipel());
    }
    ProtocolOptions opts;
    opts.alpha = c.ipel.alpha;
    opts.library = c.no_library ? LibraryMode::zero_row : LibraryMode::full;
    const auto report = run_incremental(ex.model, ex.stream, opts).report;
    csv += std::to_string(*c.ks) + "," + std::to_string(*c.kf) + "," + detail::fmt_opt2(report.base_acc) + "," +
           detail::fmt_opt2(report.new_acc) + "," + detail::fmt_opt2(report.avg) + "\n";
    rows.push_back({*c.ks, *c.kf, report});
  }
  detail::write_text(dir / "layer_sweep.csv", csv);
  return rows;
}

/// Fusion attention of test samples over the library of all classes; writes
/// attention.csv with one row per (sample, class, head).
inline std::size_t cmd_dump_attention(const RunConfig& cfg, const std::vector<std::size_t>& sample_ids) {
  Experiment ex = build_experiment(cfg);
  detail::maybe_load_checkpoint(ex);
  if (sample_ids.empty()) throw ArgumentError("dump-attention: no sample ids");
  for (std::size_t id : sample_ids)
    if (id >= ex.data->test.size())
      throw ArgumentError("dump-attention: sample id " + std::to_string(id) + " out of range (test set has " +
                          std::to_string(ex.data->test.size()) + ")");
  const auto lib = detail::full_library(ex);

  const auto dir = detail::prepare_out_dir(cfg);
  std::string csv = "sample_id,sample_label,class_id,head,weight\n";
  std::size_t rows = 0;
  for (std::size_t id : sample_ids) {
    const auto middle = ex.model.encoder.encode_to_middle(ex.data->test.images[id]).middle_tokens;
    const auto w = attention_weights(middle.row_tensor(0), lib, ex.model.fusion);
    for (std::size_t c = 0; c < lib.size(); ++c)
      for (std::size_t h = 0; h < w.rows(); ++h) {
        csv += std::to_string(id) + "," + std::to_string(ex.data->test.labels[id]) + "," +
               std::to_string(lib.class_ids[c]) + "," + std::to_string(h) + "," + detail::fmt_g(w(h, c)) + "\n";
        ++rows;
      }
  }
  detail::write_text(dir / "attention.csv", csv);
  return rows;
}

/// Plain (no fusion) and refined features of every test sample; writes
/// embeddings_plain.csv and embeddings_refined.csv.
inline std::size_t cmd_export_embeddings(const RunConfig& cfg) {
  Experiment ex = build_experiment(cfg);
  detail::maybe_load_checkpoint(ex);
  const auto lib = detail::full_library(ex);
  const std::size_t D = ex.model.encoder.config().embed_dim;

  std::string header = "sample_id,label,session";
  for (std::size_t d = 0; d < D; ++d) header += ",f" + std::to_string(d);
  header += "\n";
  std::string plain = header, refined = header;
  const auto& test = ex.data->test;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto middle = ex.model.encoder.encode_to_middle(test.images[i]).middle_tokens;
    const auto p = refine_encoded(middle, lib, ex.model.encoder, ex.model.fusion, FusionMode::identity);
    const auto r = refine_encoded(middle, lib, ex.model.encoder, ex.model.fusion, ex.model.mode);
    const std::string prefix = std::to_string(i) + "," + std::to_string(test.labels[i]) + "," +
                               std::to_string(detail::session_of(ex.stream, test.labels[i]));
    plain += prefix;
    refined += prefix;
    for (std::size_t d = 0; d < D; ++d) {
      plain += "," + detail::fmt_g(p[d]);
      refined += "," + detail::fmt_g(r[d]);
    }
    plain += "\n";
    refined += "\n";
  }
  const auto dir = detail::prepare_out_dir(cfg);
  detail::write_text(dir / "embeddings_plain.csv", plain);
  detail::write_text(dir / "embeddings_refined.csv", refined);
  return test.size();
}

}  // namespace kanet
