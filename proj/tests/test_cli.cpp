#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "kanet/commands.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("kanet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const std::vector<std::string> settings{
        "image_size=8",     "patch_size=4",      "embed_dim=16",   "num_heads=4",     "n_early=1",
        "n_middle=1",       "n_post=1",          "num_classes=6",  "train_per_class=6", "test_per_class=2",
        "base_classes=4",   "incremental_sessions=1", "ways_per_session=2", "shots=2", "way=2",
        "shot=2",           "query_per_class=2", "pseudo_old_test=4", "tasks_per_epoch=2", "epochs=1",
        "lr0=0.01"};
    cfg_.apply_overrides(settings);
    cfg_.out_dir = (dir_ / "out").string();
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
  kanet::RunConfig cfg_;
};

}  // namespace

TEST(RunConfig, DefaultsAreFullScaleRecipe) {
  const kanet::RunConfig c;
  EXPECT_EQ(c.ipel.way, 20u);
  EXPECT_EQ(c.ipel.shot, 10u);
  EXPECT_EQ(c.ipel.query_per_class, 15u);
  EXPECT_EQ(c.ipel.pseudo_old_test, 128u);
  EXPECT_EQ(c.ipel.tasks_per_epoch, 200u);
  EXPECT_EQ(c.ipel.epochs, 50u);
  EXPECT_DOUBLE_EQ(c.ipel.lr0, 0.03);
  EXPECT_DOUBLE_EQ(c.ipel.alpha, 16.0);
  EXPECT_DOUBLE_EQ(c.ipel.lambda_adapt, 1.5);
  EXPECT_DOUBLE_EQ(c.ipel.lambda_balance, 2.0);
  EXPECT_EQ(c.split.base_classes, 60u);
  EXPECT_EQ(c.split.incremental_sessions, 8u);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, FileThenOverrides) {
  const auto path = fs::temp_directory_path() / "kanet_cfg_test.cfg";
  {
    std::ofstream os(path);
    os << "# comment\n\nepochs = 3   # trailing\nlr0=0.5\nbaseline = true\nsplit_preset = cub200\n";
  }
  kanet::RunConfig c;
  c.load_file(path);
  c.apply_overrides({"--lr0=0.25", "--out-dir=x"});
  EXPECT_EQ(c.ipel.epochs, 3u);
  EXPECT_DOUBLE_EQ(c.ipel.lr0, 0.25);
  EXPECT_TRUE(c.baseline);
  EXPECT_EQ(c.split.base_classes, 100u);
  EXPECT_EQ(c.out_dir, "x");
  kanet::RunConfig d;
  std::ofstream(path) << c.to_text();
  d.load_file(path);
  EXPECT_EQ(d.to_text(), c.to_text());
  fs::remove(path);
}

TEST(RunConfig, Errors) {
  kanet::RunConfig c;
  EXPECT_THROW(c.set("nonsense", "1"), kanet::ConfigError);
  EXPECT_THROW(c.set("epochs", "three"), kanet::ConfigError);
  EXPECT_THROW(c.set("epochs", "-1"), kanet::ConfigError);
  EXPECT_THROW(c.set("lr0", "0.1x"), kanet::ConfigError);
  EXPECT_THROW(c.set("baseline", "maybe"), kanet::ConfigError);
  EXPECT_THROW(c.apply_overrides({"--epochs"}), kanet::ConfigError);
  const auto path = fs::temp_directory_path() / "kanet_cfg_bad.cfg";
  std::ofstream(path) << "epochs = 1\nwhat\n";
  try {
    c.load_file(path);
    ADD_FAILURE();
  } catch (const kanet::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  fs::remove(path);
  c = {};
  c.dataset = "imagenet";
  EXPECT_THROW(c.validate(), kanet::ConfigError);
  c = {};
  c.synthetic.num_classes = 50;
  EXPECT_THROW(c.validate(), kanet::ConfigError);
}

TEST(RunConfig, StageSplitFromKsKf) {
  kanet::RunConfig c;
  c.ks = 1;
  c.kf = 5;
  const auto e = c.effective_encoder();
  EXPECT_EQ(e.n_early, 1u);
  EXPECT_EQ(e.n_middle, 4u);
  EXPECT_EQ(e.n_post, 2u);
  c.kf = 7;
  EXPECT_THROW(c.effective_encoder(), kanet::ConfigError);
  c.ks = 3;
  c.kf = 3;
  EXPECT_THROW(c.effective_encoder(), kanet::ConfigError);
}

TEST(Sweep, PairCountMatchesCombinatorics) {
  for (std::size_t layers = 3; layers <= 12; ++layers) {
    const auto pairs = kanet::layer_pairs(layers);
    EXPECT_EQ(pairs.size(), (layers - 1) * (layers - 2) / 2);
    for (const auto& [ks, kf] : pairs) {
      EXPECT_GE(ks, 1u);
      EXPECT_LT(ks, kf);
      EXPECT_LT(kf, layers);
    }
  }
  EXPECT_EQ(kanet::layer_pairs(7).size(), 15u);
}

TEST_F(Cli, TrainWithZeroEpochsWritesInitialization) {
  cfg_.ipel.epochs = 0;
  const auto out = kanet::cmd_train(cfg_);
  EXPECT_EQ(out.steps, 0u);
  auto fusion = kanet::FusionParams<float>::init(16, 4, cfg_.fusion_seed());
  const auto ts = fusion.tensors();
  const auto loaded = kanet::load_tensors<float>(out.checkpoint);
  ASSERT_EQ(loaded.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) EXPECT_TRUE(kanet::bitwise_equal(loaded[i], *ts[i]));
  EXPECT_EQ(slurp(fs::path(cfg_.out_dir) / "train_log.jsonl"), "");
}

TEST_F(Cli, TrainThenEval) {
  const auto out = kanet::cmd_train(cfg_);
  EXPECT_EQ(out.steps, 2u);
  EXPECT_EQ(count_lines(slurp(fs::path(cfg_.out_dir) / "train_log.jsonl")), 2u);
  auto eval_cfg = cfg_;
  eval_cfg.checkpoint = out.checkpoint.string();
  eval_cfg.out_dir = (dir_ / "eval").string();
  const auto report = kanet::cmd_eval(eval_cfg);
  EXPECT_EQ(report.sessions.size(), 2u);
  const auto csv = slurp(dir_ / "eval" / "metrics.csv");
  EXPECT_EQ(count_lines(csv), 3u);
  const auto json = nlohmann::json::parse(slurp(dir_ / "eval" / "metrics.json"));
  EXPECT_EQ(json["per_session_accuracy"].size(), 2u);
  EXPECT_TRUE(fs::exists(dir_ / "eval" / "library_ids.csv"));
  const auto lib = kanet::load_library<float>(dir_ / "eval" / "library.kant", dir_ / "eval" / "library_ids.csv");
  EXPECT_EQ(lib.size(), 6u);
}

TEST_F(Cli, SingleSessionEvalWritesOneRow) {
  cfg_.split.incremental_sessions = 0;
  const auto report = kanet::cmd_eval(cfg_);
  EXPECT_EQ(report.sessions.size(), 1u);
  EXPECT_EQ(count_lines(slurp(fs::path(cfg_.out_dir) / "metrics.csv")), 2u);
  const auto json = nlohmann::json::parse(slurp(fs::path(cfg_.out_dir) / "metrics.json"));
  EXPECT_TRUE(json["new_acc"].is_null());
}

TEST_F(Cli, InvalidConfigHasNoSideEffects) {
  cfg_.ipel.way = 5;  // base session has only 4 classes
  EXPECT_THROW(kanet::cmd_train(cfg_), kanet::ConfigError);
  EXPECT_FALSE(fs::exists(cfg_.out_dir));
  cfg_.ipel.way = 2;
  cfg_.checkpoint = (dir_ / "missing.kant").string();
  EXPECT_THROW(kanet::cmd_eval(cfg_), kanet::Error);
  EXPECT_FALSE(fs::exists(cfg_.out_dir));
}

TEST_F(Cli, SweepLayers) {
  cfg_.encoder.n_middle = 2;  // four layers: three (ks, kf) pairs
  const auto rows = kanet::cmd_sweep_layers(cfg_);
  EXPECT_EQ(rows.size(), 3u);
  const auto csv = slurp(fs::path(cfg_.out_dir) / "layer_sweep.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "ks,kf,base_acc,new_acc,avg");
  EXPECT_EQ(count_lines(csv), 4u);
}

TEST_F(Cli, DumpAttention) {
  EXPECT_EQ(kanet::cmd_dump_attention(cfg_, {0, 3}), 2u * 6u * 4u);
  const auto csv = slurp(fs::path(cfg_.out_dir) / "attention.csv");
  EXPECT_EQ(count_lines(csv), 49u);
  EXPECT_THROW(kanet::cmd_dump_attention(cfg_, {999}), kanet::ArgumentError);
}

TEST_F(Cli, ExportEmbeddings) {
  EXPECT_EQ(kanet::cmd_export_embeddings(cfg_), 12u);
  const auto plain = slurp(fs::path(cfg_.out_dir) / "embeddings_plain.csv");
  EXPECT_EQ(count_lines(plain), 13u);
  EXPECT_EQ(count_lines(slurp(fs::path(cfg_.out_dir) / "embeddings_refined.csv")), 13u);
  EXPECT_EQ(plain.substr(0, 24), "sample_id,label,session,");
}

#ifdef KANET_CLI_PATH
TEST_F(Cli, BinaryExitCodes) {
  const std::string exe = KANET_CLI_PATH;
  const auto cfg_path = dir_ / "run.cfg";
  std::ofstream(cfg_path) << cfg_.to_text();
  const std::string quiet = " > " + (dir_ / "log.txt").string() + " 2>&1";
  EXPECT_EQ(std::system((exe + " eval --config " + cfg_path.string() + " --baseline --out-dir " +
                         (dir_ / "b").string() + quiet).c_str()),
            0);
  EXPECT_TRUE(fs::exists(dir_ / "b" / "metrics.csv"));
  EXPECT_NE(std::system((exe + " eval --config " + cfg_path.string() + " --epochs=abc" + quiet).c_str()), 0);
  EXPECT_NE(std::system((exe + " train --config " + cfg_path.string() + " --ks 3 --kf 2" + quiet).c_str()), 0);
  EXPECT_NE(std::system((exe + " frobnicate" + quiet).c_str()), 0);
}
#endif
