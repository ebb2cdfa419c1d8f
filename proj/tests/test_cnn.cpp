#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "sinan/cnn.hpp"

using namespace sinan;

namespace {

TelemetryNorms norms_for(int tiers) {
  TelemetryNorms n;
  n.channel.assign(tiers, {1, 1, 1, 1, 1});
  n.latency_ms = 100.0;
  n.alloc_cores.assign(tiers, 2.0);
  return n;
}

CnnArch small_arch(int tiers = 3) {
  CnnArch a;
  a.tiers = tiers;
  a.steps = 5;
  return a;
}

TelemetryWindow random_window(std::mt19937_64& rng, int tiers = 3, int steps = 5) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TelemetryWindow w;
  w.tiers = tiers;
  w.steps = steps;
  w.x_rh.resize(static_cast<std::size_t>(tiers) * steps * kChannels);
  for (auto& v : w.x_rh) v = u(rng);
  w.x_lh.resize(static_cast<std::size_t>(kPercentiles) * steps);
  for (auto& v : w.x_lh) v = u(rng);
  w.x_rc.resize(tiers);
  for (auto& v : w.x_rc) v = u(rng);
  return w;
}

}  // namespace

TEST(Phi, OracleValues) {
  EXPECT_EQ(phi(50, {100, 0.01}), 50.0);
  EXPECT_NEAR(phi(300, {100, 0.01}), 166.666666667, 1e-6);
  EXPECT_NEAR(phi(300, {100, 0.005}), 200.0, 1e-6);
  EXPECT_EQ(phi_prime(50, {100, 0.01}), 1.0);
  EXPECT_NEAR(phi_prime(300, {100, 0.01}), 1.0 / 9.0, 1e-12);
}

TEST(Phi, ContinuousMonotoneBounded) {
  const LossConfig c{100, 0.01};
  for (double eps : {1e-6, 1e-8, 1e-10}) EXPECT_LE(std::abs(phi(100 + eps, c) - 100), eps + 1e-13);
  double prev = -1.0;
  for (int i = 0; i <= 10000; ++i) {
    const double x = i * 0.5;
    const double y = phi(x, c);
    EXPECT_GT(y, prev);
    EXPECT_LT(y, 100 + 1 / 0.01);
    prev = y;
  }
}

TEST(ScaledLoss, Examples) {
  const LossConfig c{100, 0.01};
  std::vector<double> a{50}, b{60};
  EXPECT_DOUBLE_EQ(scaled_loss(a, a, c), 0.0);
  EXPECT_DOUBLE_EQ(scaled_loss(a, b, c), 100.0);
  std::vector<double> p{300}, t{100};
  EXPECT_NEAR(scaled_loss(p, t, c), std::pow(200.0 / 3.0, 2), 1e-6);
}

TEST(Cnn, ZeroWeightsGiveBias) {
  CnnModel m(small_arch(), norms_for(3), 1);
  m.zero_weights();
  m.set_output_bias_ms({10, 20, 30, 40, 50});
  std::mt19937_64 rng(1);
  auto out = m.forward(random_window(rng));
  EXPECT_EQ(out.y, (std::array<double, 5>{10, 20, 30, 40, 50}));
  EXPECT_EQ(out.latent.size(), 32u);
}

TEST(Cnn, RepairedOutputIsMonotone) {
  std::mt19937_64 rng(2);
  for (int s = 0; s < 20; ++s) {
    CnnModel m(small_arch(), norms_for(3), s);
    auto y = m.forward(random_window(rng)).y;
    for (int p = 1; p < kPercentiles; ++p) EXPECT_LE(y[p - 1], y[p]);
  }
}

TEST(Cnn, ShapeMismatchThrows) {
  CnnModel m(small_arch(3), norms_for(3), 1);
  std::mt19937_64 rng(1);
  EXPECT_THROW(m.forward(random_window(rng, 4)), ConfigError);
}

TEST(Cnn, AllocationSensitivity) {
  CnnModel m(small_arch(), norms_for(3), 5);
  std::mt19937_64 rng(5);
  auto w = random_window(rng);
  auto w2 = w;
  w2.x_rc = {0.1, 0.9, 0.3};
  EXPECT_NE(m.forward(w).y_raw, m.forward(w2).y_raw);
}

TEST(Cnn, ParameterBudget) {
  CnnArch hotel = small_arch(10);
  EXPECT_LT(hotel.param_count(), 100000u);
  CnnModel m(hotel, norms_for(10), 1);
  EXPECT_EQ(m.params().size(), hotel.param_count());
}

TEST(Cnn, GoldenForward) {
  CnnModel m(small_arch(), norms_for(3), 42);
  std::mt19937_64 rng(42);
  auto out = m.forward(random_window(rng));
  std::ifstream in(std::string(SINAN_GOLDEN_DIR) + "/cnn_forward.txt");
  ASSERT_TRUE(in) << "golden file missing";
  for (int p = 0; p < kPercentiles; ++p) {
    std::string tok;
    in >> tok;
    EXPECT_EQ(format_double(out.y[p]), tok) << "percentile " << p;
  }
}

TEST(FiniteDiff, FreshModelsAcrossSeeds) {
  const LossConfig loss{100, 0.01};
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    CnnModel m(small_arch(), norms_for(3), seed);
    std::mt19937_64 rng(seed);
    TrainingSample s;
    s.window = random_window(rng);
    s.y = {80, 90, 110, 150, 400};  // straddles the knee
    EXPECT_LT(finite_diff_check(m, s, loss, seed, 120), 1e-3) << "seed " << seed;
  }
}

TEST(FiniteDiff, KneeStraddlingSample) {
  CnnModel m(small_arch(), norms_for(3), 3);
  std::mt19937_64 rng(3);
  TrainingSample s;
  s.window = random_window(rng);
  auto pred = m.forward(s.window).y_raw;
  // Predictions below the knee, labels above it.
  const double knee = *std::max_element(pred.begin(), pred.end()) + 20.0;
  const LossConfig loss{knee, 0.01};
  for (int p = 0; p < kPercentiles; ++p) s.y[p] = knee + 200.0;
  EXPECT_LT(finite_diff_check(m, s, loss, 3, 150), 1e-3);
}

TEST(FiniteDiff, ZeroLossGivesZeroGradient) {
  CnnModel m(small_arch(), norms_for(3), 4);
  std::mt19937_64 rng(4);
  TrainingSample s;
  s.window = random_window(rng);
  s.y = m.forward(s.window).y_raw;
  std::vector<double> grad(m.params().size(), 0.0);
  EXPECT_NEAR(m.accumulate_gradient(s, {100, 0.01}, grad), 0.0, 1e-12);
  for (double g : grad) EXPECT_NEAR(g, 0.0, 1e-6);
}

namespace {

std::vector<TrainingSample> linear_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0), noise(-0.05, 0.05);
  std::vector<TrainingSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TrainingSample s;
    s.window = random_window(rng);
    const double level = u(rng);
    double mean = 0.0;
    for (int t = 0; t < 3; ++t)
      for (int st = 0; st < 5; ++st) {
        s.window.rh(t, st, 0) = std::clamp(level + noise(rng), 0.0, 1.0);
        mean += s.window.rh(t, st, 0) / 15.0;
      }
    for (int p = 0; p < kPercentiles; ++p) s.y[p] = 50.0 + 200.0 * mean + 2.0 * p;
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(CnnTrain, LearnsLinearFunctionOfUtilisation) {
  auto data = linear_dataset(600, 1);
  double mean = 0, sq = 0;
  for (auto& s : data) mean += s.y[4] / data.size();
  for (auto& s : data) sq += (s.y[4] - mean) * (s.y[4] - mean) / data.size();
  const double sd = std::sqrt(sq);
  CnnModel m(small_arch(), norms_for(3), 1);
  TrainConfig tc;
  tc.lr = 0.02;
  tc.batch = 16;
  tc.epochs = 30;
  auto r = cnn_train(m, data, tc, {1e6, 0.01});
  EXPECT_EQ(r.rmse_history.size(), 31u);
  EXPECT_LT(r.rmse_history.back().valid_ms, 0.2 * sd);
}

TEST(CnnTrain, ZeroEpochsLeavesModel) {
  auto data = linear_dataset(50, 2);
  CnnModel m(small_arch(), norms_for(3), 1);
  const CnnModel before = m;
  TrainConfig tc;
  tc.epochs = 0;
  auto r = cnn_train(m, data, tc, {100, 0.01});
  EXPECT_EQ(r.rmse_history.size(), 1u);
  EXPECT_EQ(m, before);
  EXPECT_THROW(cnn_train(m, {}, tc, {100, 0.01}), ConfigError);
}

TEST(CnnTrain, DeterministicAndSplitNineToOne) {
  auto data = linear_dataset(100, 3);
  TrainConfig tc;
  tc.lr = 0.02;
  tc.epochs = 3;
  CnnModel a(small_arch(), norms_for(3), 9), b(small_arch(), norms_for(3), 9);
  auto ra = cnn_train(a, data, tc, {100, 0.01});
  auto rb = cnn_train(b, data, tc, {100, 0.01});
  EXPECT_EQ(a, b);
  ASSERT_EQ(ra.rmse_history.size(), rb.rmse_history.size());
  for (std::size_t i = 0; i < ra.rmse_history.size(); ++i)
    EXPECT_EQ(ra.rmse_history[i].valid_ms, rb.rmse_history[i].valid_ms);
  EXPECT_EQ(ra.train_size, 90u);
  EXPECT_EQ(ra.valid_size, 10u);
}

TEST(CnnTrain, FineTuneUsesHundredthRate) {
  TrainConfig tc;
  tc.lr = 0.02;
  tc.fine_tune = true;
  EXPECT_DOUBLE_EQ(tc.effective_lr(), 0.0002);
}

TEST(CnnTrain, FineTuneReducesShiftedError) {
  auto data = linear_dataset(400, 4);
  CnnModel m(small_arch(), norms_for(3), 2);
  TrainConfig tc;
  tc.lr = 0.02;
  tc.batch = 16;
  tc.epochs = 20;
  cnn_train(m, data, tc, {1e6, 0.01});
  auto shifted = linear_dataset(300, 5);
  for (auto& s : shifted)
    for (auto& y : s.y) y *= 1.2;
  tc.fine_tune = true;
  tc.lr = 2.0;  // effective 0.02
  auto r = cnn_train(m, shifted, tc, {1e6, 0.01});
  EXPECT_LT(r.rmse_history.back().valid_ms, r.rmse_history.front().valid_ms);
}

TEST(CnnSerialisation, RoundTripIsBitExact) {
  CnnModel m(small_arch(), norms_for(3), 8);
  std::stringstream ss;
  write_cnn(ss, m);
  auto back = read_cnn(ss);
  EXPECT_EQ(back, m);
  std::mt19937_64 rng(8);
  auto w = random_window(rng);
  EXPECT_EQ(back.forward(w).y_raw, m.forward(w).y_raw);
  EXPECT_EQ(back.norms().channel, m.norms().channel);
  std::stringstream junk("not a model");
  EXPECT_THROW(read_cnn(junk), ConfigError);
}
