#include <gtest/gtest.h>

#include <cmath>

#include "sinan/workload.hpp"

using namespace sinan;

TEST(Workload, PoissonMeanWithinThreeSigma) {
  WorkloadSpec w;
  w.users = 100;
  w.mix = {{0, 1.0}};
  w.seed = 3;
  double sum = 0.0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) sum += static_cast<double>(arrivals_for_interval(w, i).size());
  // Mean of n Poisson(100) draws has sd 10/sqrt(n).
  EXPECT_NEAR(sum / n, 100.0, 3.0 * 10.0 / std::sqrt(n));
}

TEST(Workload, ZeroUsersGiveNoArrivals) {
  WorkloadSpec w;
  w.users = 0;
  w.mix = {{0, 1.0}};
  EXPECT_TRUE(arrivals_for_interval(w, 0).empty());
}

TEST(Workload, MixFractions) {
  WorkloadSpec w;
  w.users = 1000;
  w.mix = {{0, 5}, {1, 80}, {2, 15}};
  w.seed = 9;
  std::array<double, 3> counts{};
  double total = 0;
  for (int i = 0; total < 1e5; ++i) {
    for (const auto& a : arrivals_for_interval(w, i)) {
      counts[a.request_type] += 1;
      total += 1;
    }
  }
  EXPECT_NEAR(counts[0] / total, 0.05, 0.02);
  EXPECT_NEAR(counts[1] / total, 0.80, 0.02);
  EXPECT_NEAR(counts[2] / total, 0.15, 0.02);
}

TEST(Workload, OffsetsInsideIntervalAndReproducible) {
  WorkloadSpec w;
  w.users = 500;
  w.mix = {{0, 1}, {1, 1}};
  w.seed = 1;
  for (int i = 0; i < 20; ++i) {
    auto a = arrivals_for_interval(w, i);
    auto b = arrivals_for_interval(w, i);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_GE(a[k].offset_ms, 0.0);
      EXPECT_LT(a[k].offset_ms, 1000.0);
      EXPECT_EQ(a[k].offset_ms, b[k].offset_ms);
      EXPECT_EQ(a[k].request_type, b[k].request_type);
    }
  }
  WorkloadSpec other = w;
  other.seed = 2;
  EXPECT_NE(arrivals_for_interval(w, 0)[0].offset_ms, arrivals_for_interval(other, 0)[0].offset_ms);
}

TEST(Diurnal, SinePoints) {
  DiurnalProfile p{250, 50, 600};
  EXPECT_EQ(diurnal_users(p, 0), 250);
  EXPECT_EQ(diurnal_users(p, 150), 300);
  EXPECT_EQ(diurnal_users(p, 450), 200);
  DiurnalProfile low{1, 5, 600};
  EXPECT_EQ(diurnal_users(low, 450), 1);
  WorkloadSpec w;
  w.diurnal = p;
  w.mix = {{0, 1}};
  EXPECT_EQ(w.users_at(150), 300);
}

TEST(Workload, ValidationErrors) {
  WorkloadSpec w;
  w.users = 10;
  EXPECT_THROW(validate_workload(w, 2), ConfigError);
  w.mix = {{0, -1.0}};
  EXPECT_THROW(validate_workload(w, 2), ConfigError);
  w.mix = {{5, 1.0}};
  EXPECT_THROW(validate_workload(w, 2), ConfigError);
  w.mix = {{1, 1.0}};
  w.users = -1;
  EXPECT_THROW(validate_workload(w, 2), ConfigError);
  w.users = 3;
  EXPECT_NO_THROW(validate_workload(w, 2));
}
