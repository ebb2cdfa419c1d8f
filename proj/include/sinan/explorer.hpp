#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "sinan/allocation.hpp"
#include "sinan/graph.hpp"
#include "sinan/sim.hpp"
#include "sinan/telemetry.hpp"
#include "sinan/workload.hpp"

namespace sinan {

/// Coarse application state: (rps, current p99, p99 change).
struct StateBucket {
  int rps_bucket = 0;   // floor(rps / 50)
  int lat_bucket = 0;   // floor(p99 / (0.1 QoS)), capped at 12
  int diff_bucket = 0;  // -2..2, thresholds at 5% and 20% of QoS

  friend auto operator<=>(const StateBucket&, const StateBucket&) = default;
};

StateBucket bucket_state(double rps, double p99_now, double p99_prev, double qos_ms);

enum class OpCategory { Down, Hold, Up };

/// One per-tier exploration move: an absolute step in quanta, or a
/// relative step when `factor` is set.
struct ExplorerOp {
  std::string name;
  OpCategory category = OpCategory::Hold;
  int delta_tenths = 0;
  double factor = 0.0;

  int apply(int tenths) const;
};

/// hold, -0.2..-1.0, +0.2..+1.0 cores, -10%, -30%, +10%, +30%, in that order.
std::vector<ExplorerOp> default_ops();

struct ExplorerConfig {
  double qos_ms = 200.0;
  double alpha_band_ms = 40.0;  // exploration band above QoS, 0.2 QoS by default
  double util_cap = 0.9;
  int steps = 5;    // T
  int horizon = 5;  // k
  int episode_length = 120;
  int recovery_intervals = 5;
  // Operation coefficients: the favoured direction gets c_favoured.
  double c_favoured = 2.0;
  double c_hold = 1.0;
  double c_disfavoured = 0.5;
  std::uint64_t seed = 1;
  std::vector<ExplorerOp> ops = default_ops();
  // Label each sample by replaying its candidate allocation unchanged for
  // `horizon` intervals on a forked simulator, instead of by what the
  // collector's own later moves caused.
  bool held_labels = true;

  static ExplorerConfig for_qos(double qos_ms);
};

/// Expected shrinkage of the Bernoulli confidence interval when one more
/// sample lands in a cell with n visits and s successes, scaled by c_op.
/// Unvisited cells (n = 0) return c_op, above any reachable gain.
double info_gain(int n, int s, double c_op);

/// Coefficient for an operation category given the last observed p99:
/// below 0.8 QoS downsizing is favoured, otherwise upsizing.
double op_coefficient(OpCategory category, double last_p99, const ExplorerConfig& cfg);

struct BanditCell {
  int n = 0;
  int s = 0;  // intervals that met QoS + alpha band
};

class BanditState {
 public:
  using Key = std::tuple<int, StateBucket, int>;  // (tier, state, allocation in quanta)

  BanditCell cell(int tier, const StateBucket& bucket, int level) const;
  void update(int tier, const StateBucket& bucket, int level, bool met_qos);
  std::size_t size() const { return cells_.size(); }

 private:
  std::map<Key, BanditCell> cells_;
};

/// Per tier, index into cfg.ops of the legal operation with the highest
/// information gain. Legality: hold always; otherwise the result must stay
/// in [0.2, cpu_cap] and differ from the current value, the last interval's
/// used cores over the proposed cores must not exceed util_cap, and no
/// downsizing while p99 > QoS. Ties go to the smaller resulting allocation,
/// then the lower op index.
std::vector<int> select_ops(const BanditState& bandit, const StateBucket& bucket, const AllocationVector& current,
                            const ServiceGraph& graph, const IntervalMetrics& last, const ExplorerConfig& cfg);

/// Decides the next allocation from the trace so far (never empty).
using AllocationPolicy = std::function<AllocationVector(std::span<const TraceStep> trace)>;

struct CollectionResult {
  std::vector<TrainingSample> samples;
  TelemetryNorms norms;
  std::vector<std::vector<TraceStep>> traces;
  std::size_t recoveries = 0;
};

/// Runs `episodes` seeded episodes starting from cpu_cap, cycling through
/// `suite` for the load. After recovery_intervals consecutive intervals
/// with p99 above QoS + alpha band the policy is overridden for one
/// interval and every tier is reset to cpu_cap. Samples are
/// labelled with norms fitted on all collected intervals.
CollectionResult collect_with_policy(const ServiceGraph& graph, const std::vector<WorkloadSpec>& suite, int episodes,
                                     const ExplorerConfig& cfg, const AllocationPolicy& policy);

/// Bandit-driven collection; the bandit persists across episodes.
CollectionResult collect(const ServiceGraph& graph, const std::vector<WorkloadSpec>& suite, int episodes,
                         const ExplorerConfig& cfg);

/// Fraction of samples whose next-interval p99 lies in [lo, hi].
double band_fraction(std::span<const TrainingSample> samples, double lo_ms, double hi_ms);

}  // namespace sinan
