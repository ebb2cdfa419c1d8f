#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "sinan/allocation.hpp"
#include "sinan/common.hpp"
#include "sinan/graph.hpp"

namespace sinan {

/// Fixed simulation step.
inline constexpr double kTickMs = 10.0;
inline constexpr int kTicksPerInterval = 100;

/// Latency quantiles reported per interval, in the order of the tensors.
inline constexpr std::array<double, kPercentiles> kPercentileLevels = {0.95, 0.96, 0.97, 0.98, 0.99};

struct Arrival {
  double offset_ms = 0.0;  // within the interval, [0, 1000)
  int request_type = 0;
};

struct TierMetrics {
  double cpu_util = 0.0;  // cores used / cores allocated
  double rss_mb = 0.0;
  double cache_mb = 0.0;
  double rx_pkts = 0.0;  // stage entries accepted this interval
  double tx_pkts = 0.0;  // stage completions this interval
  double queue_len = 0.0;  // time-averaged waiting + computing requests
  double used_cores = 0.0;
  std::int64_t dropped = 0;
  std::int64_t occupancy = 0;  // waiting + computing at interval end

  /// Channel value in tensor order (cpu_util, rss, cache, rx, tx).
  double channel(int c) const;
};

struct IntervalMetrics {
  std::int64_t interval_index = 0;
  double rps = 0.0;
  std::vector<TierMetrics> tiers;
  std::array<double, kPercentiles> latency_ms{};  // p95..p99
  std::int64_t arrivals = 0;
  std::int64_t completed = 0;
  std::int64_t dropped = 0;
  std::int64_t in_system = 0;  // requests anywhere in the graph at interval end
  bool percentiles_carried = false;  // no completions; latencies copied forward

  double p99() const { return latency_ms[kPercentiles - 1]; }
};

/// Mutable simulator state. One instance per run; not shared across threads.
class SimState {
 public:
  SimState(const ServiceGraph& graph, std::uint64_t seed);

  std::int64_t clock_ticks() const { return clock_ticks_; }
  std::int64_t intervals() const { return interval_; }
  std::int64_t in_system() const { return in_system_; }
  std::size_t queue_length(std::size_t tier) const { return tiers_[tier].queue.size(); }
  std::size_t computing(std::size_t tier) const { return tiers_[tier].active.size(); }
  int slots_used(std::size_t tier) const { return tiers_[tier].slots_used; }
  /// Remaining CPU demand of every request currently computing.
  std::vector<double> remaining_demands() const;
  bool stalled_at(std::size_t tier, std::int64_t tick) const;

 private:
  friend IntervalMetrics simulate_interval(SimState&, const ServiceGraph&, const AllocationVector&,
                                           std::span<const Arrival>);

  struct Request {
    int type = 0;
    int stage = 0;
    double remaining_ms = 0.0;
    double arrival_ms = 0.0;
    double ready_ms = 0.0;
  };
  struct TierState {
    std::deque<int> queue;
    std::vector<int> active;
    int slots_used = 0;
    std::int64_t stall_period_ms = 0;
    std::int64_t stall_ms = 0;
    std::int64_t stall_offset_ms = 0;
  };

  int new_request(int type, double arrival_ms);
  double sample_demand(const Stage& stage);
  void release_slots(const ServiceGraph& g, const Request& r, int upto_stage);

  std::vector<Request> pool_;
  std::vector<int> free_;
  std::vector<TierState> tiers_;
  std::int64_t clock_ticks_ = 0;
  std::int64_t interval_ = 0;
  std::int64_t in_system_ = 0;
  std::array<double, kPercentiles> last_latency_{};
  Rng rng_;
};

/// Advances the state by one 1 s interval under `alloc`. Arrivals beyond a
/// tier's queue capacity are dropped and counted; nothing here throws for
/// load-related reasons.
IntervalMetrics simulate_interval(SimState& state, const ServiceGraph& graph,
                                  const AllocationVector& alloc, std::span<const Arrival> arrivals);

/// Nearest-rank percentile of an ascending sample: element ceil(q*n), 1-based.
/// Returns 0 for an empty sample.
double percentile(std::span<const double> sorted, double q);

}  // namespace sinan
