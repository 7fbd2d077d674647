#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "aml/amltrain.hpp"

using aml::Matrix;

namespace {

struct QuietLog {
  aml::LogSink prev;
  std::vector<std::string> lines;
  QuietLog() {
    prev = aml::set_log_sink([this](const std::string& l) { lines.push_back(l); });
  }
  ~QuietLog() { aml::set_log_sink(prev); }
};

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("aml_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Points on the plane z = 0.5 x - 0.25 y inside the unit box.
aml::ManifoldDataset plane_dataset(std::size_t n, std::uint64_t seed) {
  aml::ManifoldDataset d;
  d.kind = "plane";
  d.columns = {"x", "y", "z"};
  d.on_points = Matrix(n, 3);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double x = u(rng), y = u(rng);
    d.on_points(r, 0) = x;
    d.on_points(r, 1) = y;
    d.on_points(r, 2) = 0.5 * x - 0.25 * y;
  }
  aml::compute_bounds(d);
  return d;
}

}  // namespace

TEST(ClipRule, CapsAtTwiceThePrimary) {
  const double aux[] = {-5.0};
  EXPECT_DOUBLE_EQ(aml::clip_aux_terms(1.0, aux), 1.0 - 2.0);
}

TEST(ClipRule, LeavesSmallTermsAlone) {
  const double aux[] = {0.5};
  EXPECT_DOUBLE_EQ(aml::clip_aux_terms(1.0, aux), 1.5);
}

TEST(ClipRule, ZeroPrimaryZeroesEverything) {
  const double aux[] = {3.0, -0.1};
  EXPECT_DOUBLE_EQ(aml::clip_aux_terms(0.0, aux), 0.0);
  EXPECT_DOUBLE_EQ(aml::clip_scale(0.0, 3.0, 2.0), 0.0);
}

TEST(ClipRule, EachTermClippedOnItsOwn) {
  const double aux[] = {-5.0, 0.5, 10.0};
  // -2 + 0.5 + 2
  EXPECT_DOUBLE_EQ(aml::clip_aux_terms(1.0, aux), 1.0 + 0.5);
  EXPECT_DOUBLE_EQ(aml::clip_aux_terms(-1.0, aux, 3.0), -1.0 - 3.0 + 0.5 + 3.0);
}

TEST(Stopping, RatioRule) {
  const double on[] = {0.1, -0.1}, off[] = {0.5, -0.5};
  EXPECT_TRUE(aml::is_vanishing(on, off, 5.0));
  EXPECT_FALSE(aml::is_vanishing(on, off, 5.0001));
  EXPECT_THROW(aml::is_vanishing({}, off, 5.0), aml::ContractError);
  EXPECT_DOUBLE_EQ(aml::vanishing_ratio(0.1, 0.5), 5.0);
  EXPECT_TRUE(std::isinf(aml::vanishing_ratio(0.0, 0.5)));
}

TEST(Config, RejectsBadValues) {
  aml::TrainConfig c;
  c.stopping_ratio = 1.0;
  EXPECT_THROW(c.validate(), aml::ContractError);
  c = {};
  c.clip_factor = 0.0;
  EXPECT_THROW(c.validate(), aml::ContractError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), aml::ContractError);
}

TEST(Config, JsonRoundTrip) {
  aml::TrainConfig c;
  c.mode = aml::TrainMode::Syzygy;
  c.stopping_ratio = 7.5;
  c.width = 12;
  c.off.mode = aml::OffManifoldMode::Thicken;
  aml::json j = c;
  const auto back = j.get<aml::TrainConfig>();
  EXPECT_EQ(back.mode, aml::TrainMode::Syzygy);
  EXPECT_DOUBLE_EQ(back.stopping_ratio, 7.5);
  EXPECT_EQ(back.width, 12u);
  EXPECT_EQ(back.off.mode, aml::OffManifoldMode::Thicken);
  EXPECT_EQ(aml::json(back).dump(), j.dump());
}

TEST(Persistence, RoundTripIsExact) {
  QuietLog quiet;
  std::mt19937_64 rng(3);
  aml::RelationSet set;
  for (std::size_t k = 1; k <= 2; ++k) {
    auto g = aml::RelationNet::make(3, 4 * k, rng);
    g.on_mean = 0.01 * k;
    g.off_mean = 0.3 * k;
    set.relations.push_back(g);
  }
  set.columns = {"x", "y", "z"};
  set.dataset_fingerprint = "abc";
  const auto dir = scratch("persist");
  aml::save_relation_set(set, dir / "relations.json");
  const auto back = aml::load_relation_set(dir / "relations.json");
  ASSERT_EQ(back.size(), 2u);
  Matrix probe = Matrix::from_rows({{0.1, 0.2, 0.3}, {-1.0, 0.5, 2.0}});
  for (std::size_t k = 0; k < 2; ++k) {
    const Matrix a = set.relations[k].evaluate(probe), b = back.relations[k].evaluate(probe);
    for (std::size_t r = 0; r < a.size(); ++r) EXPECT_EQ(a[r], b[r]);
    EXPECT_EQ(back.relations[k].on_mean, set.relations[k].on_mean);
    EXPECT_EQ(back.relations[k].off_mean, set.relations[k].off_mean);
  }
  EXPECT_EQ(back.columns, set.columns);
  // loading prints the on/off means
  ASSERT_GE(quiet.lines.size(), 3u);
  EXPECT_NE(quiet.lines[0].find("2 relations"), std::string::npos);
}

TEST(Persistence, VersionMismatchIsAnIoError) {
  QuietLog quiet;
  std::mt19937_64 rng(3);
  aml::RelationSet set;
  set.relations.push_back(aml::RelationNet::make(2, 4, rng));
  auto j = aml::relation_set_to_json(set);
  j["version"] = aml::kRelationSetVersion + 1;
  EXPECT_THROW(aml::relation_set_from_json(j), aml::IoError);
}

TEST(Persistence, TruncatedWeightsAreRejected) {
  std::mt19937_64 rng(3);
  aml::RelationSet set;
  set.relations.push_back(aml::RelationNet::make(2, 4, rng));
  auto j = aml::relation_set_to_json(set);
  j["relations"][0]["weights"][0].erase(0);
  EXPECT_THROW(aml::relation_set_from_json(j), aml::IoError);
  auto k = aml::relation_set_to_json(set);
  k.erase("N");
  EXPECT_THROW(aml::relation_set_from_json(k), aml::IoError);
}

TEST(TrainingData, SplitIsSeededAndDisjoint) {
  auto d = plane_dataset(200, 1);
  aml::TrainConfig cfg;
  cfg.seed = 9;
  auto a = aml::prepare_training_data(d, cfg), b = aml::prepare_training_data(d, cfg);
  EXPECT_EQ(a.on_test.rows(), 40u);
  EXPECT_EQ(a.on_train.rows(), 160u);
  EXPECT_EQ(a.on_test.values(), b.on_test.values());
  EXPECT_EQ(a.off_train.values(), b.off_train.values());
  cfg.seed = 10;
  auto c = aml::prepare_training_data(d, cfg);
  EXPECT_NE(a.on_test.values(), c.on_test.values());
}

TEST(Training, LearnsAPlane) {
  QuietLog quiet;
  auto d = plane_dataset(1000, 2);
  aml::TrainConfig cfg;
  cfg.seed = 4;
  cfg.max_relations = 1;
  cfg.epochs = 300;
  auto res = aml::train_relation_set(cfg, d);
  ASSERT_FALSE(res.first_failed) << res.outcomes.front().report;
  ASSERT_EQ(res.set.size(), 1u);
  const auto& g = res.set.relations.front();
  EXPECT_GE(g.off_mean, 5.0 * g.on_mean);
  EXPECT_GE(res.outcomes.front().holdout_ratio, 5.0);
  EXPECT_EQ(res.stop_reason, "reached max_relations");

  // same seed, same weights
  auto again = aml::train_relation_set(cfg, d);
  EXPECT_EQ(aml::relation_set_to_json(again.set).dump(), aml::relation_set_to_json(res.set).dump());
}

TEST(Training, ZeroEpochsOnlyChecks) {
  QuietLog quiet;
  auto d = plane_dataset(200, 2);
  aml::TrainConfig cfg;
  cfg.epochs = 0;
  cfg.max_relations = 1;
  auto td = aml::prepare_training_data(d, cfg);
  const auto init = aml::fresh_relation(cfg, td, 1);
  const auto out = aml::train_first_relation(cfg, td);
  EXPECT_EQ(out.epochs_run, 0u);
  EXPECT_EQ(out.relation.net.weights.front().values(), init.net.weights.front().values());
}

TEST(Training, FreshRelationsDoubleInWidth) {
  auto d = plane_dataset(100, 2);
  aml::TrainConfig cfg;
  auto td = aml::prepare_training_data(d, cfg);
  EXPECT_EQ(aml::fresh_relation(cfg, td, 1).net.layer_sizes[1], 4u);
  EXPECT_EQ(aml::fresh_relation(cfg, td, 2).net.layer_sizes[1], 8u);
  cfg.width = 32;
  EXPECT_EQ(aml::fresh_relation(cfg, td, 2).net.layer_sizes[1], 32u);
}

TEST(Training, EmptyDatasetIsAContractError) {
  aml::ManifoldDataset d;
  aml::TrainConfig cfg;
  EXPECT_THROW(aml::train_relation_set(cfg, d), aml::ContractError);
}
