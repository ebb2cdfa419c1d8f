#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "sinan/boosted_trees.hpp"
#include "sinan/common.hpp"

using namespace sinan;

namespace {

void make_set(std::size_t n, std::uint64_t seed, bool xor_labels, FeatureMatrix& x, std::vector<int>& y) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  x = FeatureMatrix();
  x.cols = 4;
  y.clear();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> r{u(rng), u(rng), u(rng), u(rng)};
    x.push_row(r);
    y.push_back(xor_labels ? ((r[0] > 0) != (r[1] > 0)) : (r[0] > 0));
  }
}

}  // namespace

TEST(BtProbability, SoftmaxMatchesSigmoid) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int i = 0; i < 10000; ++i) {
    const double sv = u(rng), snv = u(rng);
    const double softmax = std::exp(sv) / (std::exp(sv) + std::exp(snv));
    EXPECT_NEAR(two_score_probability(sv, snv), softmax, 1e-12);
    EXPECT_NEAR(sigmoid(sv - snv), softmax, 1e-12);
  }
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(std::log(3.0)), 0.75, 1e-15);
  // Saturates without overflow.
  EXPECT_EQ(sigmoid(-800.0), 0.0);
  EXPECT_EQ(sigmoid(800.0), 1.0);
}

TEST(BtModel, EmptyModelIsHalf) {
  BtModel m;
  m.num_features = 2;
  std::vector<double> x{1.0, 2.0};
  EXPECT_EQ(m.predict_proba(x), 0.5);
}

TEST(BtTrain, SeparableSet) {
  FeatureMatrix xt, xv;
  std::vector<int> yt, yv;
  make_set(2000, 1, false, xt, yt);
  make_set(500, 2, false, xv, yv);
  auto m = bt_train(xt, yt, {});
  EXPECT_GE(bt_evaluate(m, xv, yv).accuracy, 0.95);
  EXPECT_LE(m.trees.size(), 200u);
}

TEST(BtTrain, XorSet) {
  FeatureMatrix xt, xv;
  std::vector<int> yt, yv;
  make_set(2000, 3, true, xt, yt);
  make_set(500, 4, true, xv, yv);
  BtTrainConfig cfg;
  cfg.max_depth = 3;
  auto m = bt_train(xt, yt, cfg);
  auto met = bt_evaluate(m, xv, yv);
  EXPECT_GE(met.accuracy, 0.95);
  EXPECT_NEAR(met.accuracy + met.false_positive + met.false_negative, 1.0, 1e-12);
}

TEST(BtTrain, SingleClassGivesPrior) {
  FeatureMatrix x;
  std::vector<int> y;
  make_set(99, 5, false, x, y);
  std::fill(y.begin(), y.end(), 0);
  auto m = bt_train(x, y, {});
  EXPECT_TRUE(m.trees.empty());
  EXPECT_NEAR(m.predict_proba(x.row(0)), 0.5 / 100.0, 1e-12);
  EXPECT_NEAR(m.predict_proba(x.row(7)), 0.5 / 100.0, 1e-12);
}

TEST(BtTrain, TreeEffectBoundedByShrinkage) {
  FeatureMatrix x;
  std::vector<int> y;
  make_set(800, 6, true, x, y);
  auto m = bt_train(x, y, {});
  ASSERT_GT(m.trees.size(), 2u);
  BtModel partial = m;
  for (std::size_t k = m.trees.size(); k-- > 1;) {
    partial.trees.resize(k);
    BtModel next = partial;
    next.trees.push_back(m.trees[k]);
    const double bound = m.shrinkage * m.trees[k].max_abs_leaf();
    for (std::size_t i = 0; i < 50; ++i) EXPECT_LE(std::abs(next.margin(x.row(i)) - partial.margin(x.row(i))), bound + 1e-12);
  }
}

TEST(BtTrain, DeterministicAndPredictAllowsSplitInput) {
  FeatureMatrix x;
  std::vector<int> y;
  make_set(500, 7, false, x, y);
  auto a = bt_train(x, y, {});
  auto b = bt_train(x, y, {});
  EXPECT_TRUE(a == b);
  auto r = x.row(3);
  std::vector<double> lat(r.begin(), r.begin() + 2), alloc(r.begin() + 2, r.end());
  EXPECT_EQ(bt_predict(a, lat, alloc), a.predict_proba(r));
  std::vector<double> short_alloc{1.0};
  EXPECT_THROW(bt_predict(a, lat, short_alloc), ConfigError);
}

TEST(BtSerialisation, RoundTripIsExact) {
  FeatureMatrix x;
  std::vector<int> y;
  make_set(400, 8, true, x, y);
  auto m = bt_train(x, y, {});
  std::stringstream ss;
  write_bt(ss, m);
  auto back = read_bt(ss);
  EXPECT_TRUE(back == m);
  for (std::size_t i = 0; i < x.rows; ++i) EXPECT_EQ(back.predict_proba(x.row(i)), m.predict_proba(x.row(i)));
  std::stringstream junk("sinan-bt 9");
  EXPECT_THROW(read_bt(junk), ConfigError);
}
