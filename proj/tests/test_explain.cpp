#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "sinan/explain.hpp"

using namespace sinan;

namespace {

TelemetryNorms norms_for(int tiers) {
  TelemetryNorms n;
  n.channel.assign(tiers, {1, 1, 1, 1, 1});
  n.latency_ms = 100.0;
  n.alloc_cores.assign(tiers, 2.0);
  return n;
}

CnnArch arch3() {
  CnnArch a;
  a.tiers = 3;
  a.steps = 5;
  return a;
}

TelemetryWindow random_window(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TelemetryWindow w;
  w.tiers = 3;
  w.steps = 5;
  w.x_rh.resize(3 * 5 * kChannels);
  for (auto& v : w.x_rh) v = u(rng);
  w.x_lh.resize(kPercentiles * 5);
  for (auto& v : w.x_lh) v = u(rng);
  w.x_rc.resize(3);
  for (auto& v : w.x_rc) v = u(rng);
  return w;
}

/// Latency driven by tier 2's cpu_util alone.
const CnnModel& tier2_model() {
  static const CnnModel model = [] {
    std::mt19937_64 rng(3);
    std::vector<TrainingSample> data;
    for (int i = 0; i < 600; ++i) {
      TrainingSample s;
      s.window = random_window(rng);
      double m = 0;
      for (int st = 0; st < 5; ++st) m += s.window.rh(2, st, 0) / 5;
      for (int p = 0; p < kPercentiles; ++p) s.y[p] = 40 + 200 * m + p;
      data.push_back(s);
    }
    CnnModel cnn(arch3(), norms_for(3), 1);
    TrainConfig tc;
    tc.lr = 0.02;
    tc.batch = 16;
    tc.epochs = 30;
    cnn_train(cnn, data, tc, {1e6, 0.01});
    return cnn;
  }();
  return model;
}

std::vector<TelemetryWindow> windows(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TelemetryWindow> out;
  for (int i = 0; i < n; ++i) out.push_back(random_window(rng));
  return out;
}

}  // namespace

TEST(Importance, ConvBlindModelHasNoImportance) {
  CnnModel m(arch3(), norms_for(3), 4);
  m.zero_conv();
  auto rep = perturb_importance(m, windows(8, 1), {0.5, 0.7}, ImportanceGranularity::Tier);
  ASSERT_EQ(rep.entries.size(), 3u);
  for (auto& e : rep.entries) EXPECT_NEAR(e.weight, 0.0, 1e-9);
}

TEST(Importance, FindsTheDrivingTier) {
  auto rep = perturb_importance(tier2_model(), windows(20, 2), {0.5, 0.7}, ImportanceGranularity::Tier);
  EXPECT_EQ(rep.rank_of_tier(2), 0);
  EXPECT_GT(rep.entries[0].weight, 3 * rep.entries[1].weight);
  // Shrinking the driving utilisation lowers the prediction.
  EXPECT_LT(rep.entries[0].coefficients[0], 0.0);
  EXPECT_EQ(rep.sample_count, 20u);
}

TEST(Importance, ChannelGranularity) {
  auto rep = perturb_importance(tier2_model(), windows(20, 2), {0.5}, ImportanceGranularity::TierChannel);
  ASSERT_EQ(rep.entries.size(), 3u * kChannels);
  EXPECT_EQ(rep.entries[0].tier, 2);
  EXPECT_EQ(rep.entries[0].channel, 0);
  EXPECT_EQ(rep.entries[0].name, "tier2:cpu_util");
}

TEST(Importance, IdentityFactorIsZero) {
  auto rep = perturb_importance(tier2_model(), windows(5, 3), {1.0, 0.5}, ImportanceGranularity::Tier);
  for (auto& e : rep.entries) EXPECT_EQ(e.coefficients[0], 0.0);
}

TEST(Importance, InvariantToSampleOrder) {
  auto w = windows(12, 4);
  auto a = perturb_importance(tier2_model(), w, {0.5, 0.7}, ImportanceGranularity::Tier);
  std::mt19937_64 rng(9);
  std::shuffle(w.begin(), w.end(), rng);
  auto b = perturb_importance(tier2_model(), w, {0.5, 0.7}, ImportanceGranularity::Tier);
  for (int t = 0; t < 3; ++t) {
    const auto& ea = a.entries[a.rank_of_tier(t)];
    const auto& eb = b.entries[b.rank_of_tier(t)];
    EXPECT_NEAR(ea.weight, eb.weight, 1e-9 * (1 + ea.weight));
  }
}

TEST(Importance, Errors) {
  const auto& m = tier2_model();
  EXPECT_THROW(perturb_importance(m, {}, {0.5}, ImportanceGranularity::Tier), RuntimeError);
  EXPECT_THROW(perturb_importance(m, windows(2, 1), {}, ImportanceGranularity::Tier), RuntimeError);
  EXPECT_THROW(perturb_importance(m, windows(2, 1), {0.0}, ImportanceGranularity::Tier), ConfigError);
  EXPECT_THROW(perturb_importance(m, windows(2, 1), {2.5}, ImportanceGranularity::Tier), ConfigError);
}

TEST(Importance, CsvAndSummary) {
  auto rep = perturb_importance(tier2_model(), windows(4, 5), {0.5, 0.7}, ImportanceGranularity::Tier);
  std::ostringstream csv;
  write_importance_csv(csv, rep);
  const std::string text = csv.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "rank,group,tier,channel,weight,coef_0.5,coef_0.7");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_NE(importance_summary(rep, 1).find("tier2"), std::string::npos);
}

namespace {

std::vector<IntervalMetrics> p99_history(const std::vector<double>& p99) {
  std::vector<IntervalMetrics> h(p99.size());
  for (std::size_t i = 0; i < p99.size(); ++i) h[i].latency_ms.fill(p99[i]);
  return h;
}

}  // namespace

TEST(ViolationIntervals, TargetsTheNextInterval) {
  auto h = p99_history({10, 10, 10, 10, 10, 300, 10, 10, 250, 10});
  EXPECT_EQ(violation_intervals(h, 200, 5), (std::vector<std::size_t>{4, 7}));
  // Index 4 would need interval 5 as its target; it has full history.
  auto h2 = p99_history({10, 10, 10, 10, 10, 300});
  EXPECT_EQ(violation_intervals(h2, 200, 5), (std::vector<std::size_t>{4}));
  EXPECT_EQ(violation_intervals(h2, 200, 6), (std::vector<std::size_t>{}));
}

TEST(ViolationIntervals, FallbackToSlowest) {
  auto h = p99_history({10, 10, 50, 40, 60, 40, 60, 20});
  EXPECT_EQ(violation_intervals(h, 200, 2, 3), (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_TRUE(violation_intervals(p99_history({}), 200, 5).empty());
}
