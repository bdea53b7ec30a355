#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kanet/kanet.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> checkpoint;
  bool baseline = false;
  bool no_library = false;
  std::optional<std::size_t> ks;
  std::optional<std::size_t> kf;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "experiment seed");
  cmd->add_option("--out-dir", f.out_dir, "output directory");
  cmd->add_option("--checkpoint", f.checkpoint, "fusion checkpoint (KANT) to start from");
  cmd->add_flag("--baseline", f.baseline, "disable knowledge fusion");
  cmd->add_flag("--no-library", f.no_library, "evaluate with a single zero library row");
  cmd->add_option("--ks", f.ks, "last layer of the early stage");
  cmd->add_option("--kf", f.kf, "last layer before fusion");
  cmd->allow_extras();
}

// Config file first, then --key=value extras, then the named flags.
kanet::RunConfig resolve(const CLI::App* cmd, const CommonFlags& f) {
  kanet::RunConfig cfg;
  if (!f.config.empty()) cfg.load_file(f.config);
  cfg.apply_overrides(cmd->remaining());
  if (f.seed) cfg.seed = *f.seed;
  if (f.out_dir) cfg.out_dir = *f.out_dir;
  if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
  if (f.baseline) cfg.baseline = true;
  if (f.no_library) cfg.no_library = true;
  if (f.ks) cfg.ks = f.ks;
  if (f.kf) cfg.kf = f.kf;
  cfg.validate();
  return cfg;
}

void print_report(const kanet::MetricsReport& r) {
  for (const auto& s : r.sessions)
    std::printf("session %zu  classes %zu  acc %.2f\n", s.session, s.classes_seen, s.accuracy);
  std::printf("avg %.2f  pd %.2f\n", r.avg, r.pd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge adapter network for few-shot class-incremental learning"};
  app.require_subcommand(1);

  CommonFlags f;
  std::vector<std::size_t> samples;
  auto* train = app.add_subcommand("train", "run incremental pseudo episode learning on the base session");
  auto* eval = app.add_subcommand("eval", "run the incremental session protocol");
  auto* sweep = app.add_subcommand("sweep-layers", "train and evaluate every (ks, kf) stage split");
  auto* attn = app.add_subcommand("dump-attention", "write fusion attention weights of test samples");
  auto* emb = app.add_subcommand("export-embeddings", "write plain and refined test features");
  for (auto* cmd : {train, eval, sweep, attn, emb}) add_common(cmd, f);
  attn->add_option("--samples", samples, "test sample indices")->required()->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      const auto out = kanet::cmd_train(resolve(train, f));
      std::printf("steps %zu  loss %.4f -> %.4f\ncheckpoint %s\n", out.steps, out.first_loss, out.last_loss,
                  out.checkpoint.string().c_str());
    } else if (eval->parsed()) {
      print_report(kanet::cmd_eval(resolve(eval, f)));
    } else if (sweep->parsed()) {
      for (const auto& row : kanet::cmd_sweep_layers(resolve(sweep, f)))
        std::printf("ks %zu  kf %zu  avg %.2f\n", row.ks, row.kf, row.report.avg);
    } else if (attn->parsed()) {
      std::printf("%zu attention rows\n", kanet::cmd_dump_attention(resolve(attn, f), samples));
    } else if (emb->parsed()) {
      std::printf("%zu samples exported\n", kanet::cmd_export_embeddings(resolve(emb, f)));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
