#include <gtest/gtest.h>

#include <numeric>

#include "kanet/protocol.hpp"

using kanet::SplitConfig;
using kanet::Tensor;

namespace {

std::shared_ptr<kanet::SplitDatasets<float>> dataset(std::size_t classes, std::size_t train, std::size_t test,
                                                     double sigma_within = 0.5, std::size_t image = 8) {
  kanet::SyntheticConfig c;
  c.num_classes = classes;
  c.train_per_class = train;
  c.test_per_class = test;
  c.image_size = image;
  c.sigma_within = sigma_within;
  return std::make_shared<kanet::SplitDatasets<float>>(kanet::generate_synthetic<float>(c));
}

kanet::KanetModel<float> small_model(kanet::FusionMode mode) {
  kanet::EncoderConfig e;
  e.image_size = 8;
  e.patch_size = 4;
  e.embed_dim = 16;
  e.num_heads = 4;
  e.n_early = 1;
  e.n_middle = 1;
  e.n_post = 1;
  auto m = kanet::KanetModel<float>::create(e, 0);
  m.mode = mode;
  return m;
}

std::vector<int> range(int a, int b) {
  std::vector<int> v(static_cast<std::size_t>(b - a));
  std::iota(v.begin(), v.end(), a);
  return v;
}

}  // namespace

TEST(Split, SyntheticTwelveClasses) {
  const auto stream = kanet::build_session_stream<float>(dataset(12, 8, 3), {6, 3, 2, 5, 0});
  ASSERT_EQ(stream.sessions.size(), 4u);
  EXPECT_EQ(stream.sessions[0].label_space, range(0, 6));
  EXPECT_EQ(stream.sessions[1].label_space, range(6, 8));
  EXPECT_EQ(stream.sessions[2].label_space, range(8, 10));
  EXPECT_EQ(stream.sessions[3].label_space, range(10, 12));
  EXPECT_EQ(stream.sessions[0].train_indices.size(), 48u);
  for (std::size_t s = 1; s < 4; ++s) {
    EXPECT_EQ(stream.sessions[s].train_indices.size(), 10u);
    EXPECT_EQ(stream.sessions[s].test_indices.size(), 6u);
  }
}

TEST(Split, CifarAndCubLayouts) {
  const auto cifar = SplitConfig::cifar100();
  EXPECT_EQ(cifar.num_sessions(), 9u);
  EXPECT_EQ(cifar.total_classes(), 100u);
  const auto s1 = kanet::build_session_stream<float>(dataset(100, 5, 1, 0.5, 4), cifar);
  EXPECT_EQ(s1.sessions[0].label_space.size(), 60u);
  EXPECT_EQ(s1.sessions[8].label_space, range(95, 100));
  const auto cub = SplitConfig::cub200();
  EXPECT_EQ(cub.num_sessions(), 11u);
  EXPECT_EQ(cub.total_classes(), 200u);
  const auto s2 = kanet::build_session_stream<float>(dataset(200, 5, 1, 0.5, 4), cub);
  EXPECT_EQ(s2.sessions[10].label_space.size(), 10u);
  EXPECT_EQ(s2.sessions[10].train_indices.size(), 50u);
}

TEST(Split, ShotsDrawnWithSeed) {
  auto d = dataset(4, 10, 1);
  const auto a = kanet::build_session_stream<float>(d, {2, 1, 2, 3, 7});
  const auto b = kanet::build_session_stream<float>(d, {2, 1, 2, 3, 7});
  const auto c = kanet::build_session_stream<float>(d, {2, 1, 2, 3, 8});
  EXPECT_EQ(a.sessions[1].train_indices, b.sessions[1].train_indices);
  EXPECT_NE(a.sessions[1].train_indices, c.sessions[1].train_indices);
  for (auto i : a.sessions[1].train_indices) EXPECT_GE(d->train.labels[i], 2);
}

TEST(Split, TooFewClassesOrShots) {
  EXPECT_THROW(kanet::build_session_stream<float>(dataset(5, 8, 1), {4, 1, 2, 5, 0}), kanet::ConfigError);
  EXPECT_THROW(kanet::build_session_stream<float>(dataset(6, 3, 1), {4, 1, 2, 5, 0}), kanet::ConfigError);
  EXPECT_THROW((SplitConfig{0, 1, 1, 1, 0}.validate()), kanet::ConfigError);
}

TEST(Metrics, ReferenceSessionAccuracies) {
  const std::vector<double> accs{85.67, 79.94, 78.06, 75.43, 74.43, 73.11, 73.16, 71.95, 70.22};
  EXPECT_NEAR(kanet::avg_accuracy(accs), 75.77, 0.005);
  EXPECT_NEAR(kanet::performance_drop(accs), 15.45, 0.005);
  EXPECT_THROW(kanet::avg_accuracy(std::vector<double>{}), kanet::ArgumentError);
}

TEST(Metrics, BaseNewSplit) {
  const std::vector<int> pred{0, 1, 5, 6, 6, 2};
  const std::vector<int> truth{0, 2, 5, 6, 7, 2};
  const auto r = kanet::base_new_accuracy(pred, truth, {0, 1, 2});
  EXPECT_NEAR(*r.base, 200.0 / 3.0, 1e-12);
  EXPECT_NEAR(*r.novel, 200.0 / 3.0, 1e-12);
  const auto only_base = kanet::base_new_accuracy(std::vector<int>{0}, std::vector<int>{0}, {0});
  EXPECT_FALSE(only_base.novel.has_value());
}

TEST(Metrics, ReportSerialization) {
  kanet::MetricsReport r;
  r.sessions = {{0, 6, 30, 90.0}, {1, 8, 40, 77.5}};
  r.avg = 83.75;
  r.pd = 12.5;
  r.base_acc = 80.0;
  const auto j = kanet::to_json(r);
  EXPECT_EQ(j["per_session_accuracy"].size(), 2u);
  EXPECT_DOUBLE_EQ(j["avg"].get<double>(), 83.75);
  EXPECT_TRUE(j["new_acc"].is_null());
  EXPECT_EQ(kanet::to_csv(r), "session,classes_seen,test_samples,accuracy\n0,6,30,90.00\n1,8,40,77.50\n");
}

TEST(Protocol, SeparableDataIsPerfect) {
  const auto stream = kanet::build_session_stream<float>(dataset(12, 5, 3, 0.0), {6, 3, 2, 5, 0});
  const auto r = kanet::run_incremental(small_model(kanet::FusionMode::identity), stream);
  for (const auto& s : r.report.sessions) EXPECT_DOUBLE_EQ(s.accuracy, 100.0);
  EXPECT_DOUBLE_EQ(r.report.pd, 0.0);
  EXPECT_DOUBLE_EQ(*r.report.new_acc, 100.0);
}

TEST(Protocol, OldRowsNeverChange) {
  const auto stream = kanet::build_session_stream<float>(dataset(12, 6, 2), {6, 3, 2, 5, 0});
  const auto r = kanet::run_incremental(small_model(kanet::FusionMode::adapter), stream);
  ASSERT_EQ(r.libraries.size(), 4u);
  for (std::size_t s = 1; s < 4; ++s) {
    const auto& prev_lib = r.libraries[s - 1];
    const auto& prev_cls = r.classifiers[s - 1];
    EXPECT_EQ(r.libraries[s].size(), prev_lib.size() + 2);
    for (std::size_t row = 0; row < prev_lib.size(); ++row) {
      EXPECT_TRUE(kanet::bitwise_equal(r.libraries[s].entries.row_tensor(row), prev_lib.entries.row_tensor(row)));
      EXPECT_TRUE(kanet::bitwise_equal(r.classifiers[s].rows.row_tensor(row), prev_cls.rows.row_tensor(row)));
    }
  }
  EXPECT_EQ(r.report.sessions.back().classes_seen, 12u);
  EXPECT_EQ(r.report.sessions.back().test_samples, 24u);
}

TEST(Protocol, LibraryModesAndErrors) {
  auto stream = kanet::build_session_stream<float>(dataset(8, 6, 2), {4, 2, 2, 5, 0});
  const auto model = small_model(kanet::FusionMode::adapter);
  const auto z = kanet::run_incremental(model, stream, {16.0, kanet::LibraryMode::zero_row});
  EXPECT_EQ(z.libraries.back().size(), 8u);
  auto swapped = stream;
  std::swap(swapped.sessions[1], swapped.sessions[2]);
  EXPECT_THROW(kanet::run_incremental(model, swapped), kanet::ProtocolError);
  auto repeated = stream;
  repeated.sessions[2].label_space = repeated.sessions[1].label_space;
  EXPECT_THROW(kanet::run_incremental(model, repeated), kanet::ProtocolError);
  kanet::SessionStream<float> empty{stream.data, {}};
  EXPECT_THROW(kanet::run_incremental(model, empty), kanet::ProtocolError);
}

TEST(Protocol, SingleSessionHasNoNovelAccuracy) {
  const auto stream = kanet::build_session_stream<float>(dataset(4, 4, 2), {4, 0, 0, 0, 0});
  const auto r = kanet::run_incremental(small_model(kanet::FusionMode::identity), stream);
  EXPECT_EQ(r.report.sessions.size(), 1u);
  EXPECT_FALSE(r.report.new_acc.has_value());
  EXPECT_DOUBLE_EQ(r.report.pd, 0.0);
}
