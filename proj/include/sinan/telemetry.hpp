#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sinan/allocation.hpp"
#include "sinan/common.hpp"
#include "sinan/graph.hpp"
#include "sinan/sim.hpp"

namespace sinan {

/// Fixed divisors applied to raw telemetry. Shared by training and serving
/// so both see identically scaled inputs.
struct TelemetryNorms {
  // [tier][channel], channel order cpu_util, rss, cache, rx, tx.
  std::vector<std::array<double, kChannels>> channel;
  double latency_ms = 1.0;
  std::vector<double> alloc_cores;  // per tier

  /// Utilization by 1, memory by the tier's observed maximum, packets by the
  /// observed 99th percentile, latency by QoS, allocation by cpu_cap.
  static TelemetryNorms fit(const ServiceGraph& graph, std::span<const IntervalMetrics> history, double qos_ms);
  std::size_t num_tiers() const { return channel.size(); }
};

/// Model input triple. x_rh is [tier][step][channel], x_lh is
/// [percentile][step], steps ordered oldest to newest.
struct TelemetryWindow {
  int tiers = 0;
  int steps = 0;
  std::vector<double> x_rh;
  std::vector<double> x_lh;
  std::vector<double> x_rc;

  double rh(int tier, int step, int ch) const { return x_rh[(tier * steps + step) * kChannels + ch]; }
  double& rh(int tier, int step, int ch) { return x_rh[(tier * steps + step) * kChannels + ch]; }
  double lh(int pct, int step) const { return x_lh[pct * steps + step]; }

  friend bool operator==(const TelemetryWindow&, const TelemetryWindow&) = default;
};

struct TrainingSample {
  TelemetryWindow window;
  std::array<double, kPercentiles> y{};  // next-interval p95..p99, ms
  int v = 0;  // QoS violated within the next k intervals

  friend bool operator==(const TrainingSample&, const TrainingSample&) = default;
};

/// One interval of a run together with the allocation that was in force.
struct TraceStep {
  IntervalMetrics metrics;
  AllocationVector alloc;
};

/// Encodes a candidate allocation the way x_rc expects it.
std::vector<double> encode_allocation(const AllocationVector& alloc, const TelemetryNorms& norms);

/// Window over history[end_index - T + 1 .. end_index]. Throws ConfigError
/// when fewer than T intervals are available.
TelemetryWindow build_window(std::span<const IntervalMetrics> history, std::size_t end_index, int steps,
                             const AllocationVector& candidate, const TelemetryNorms& norms);

/// One sample per t in [T, len - k): window ends at t, x_rc is the
/// allocation applied during t + 1, y its percentiles, and v = 1 iff some
/// p99 in t+1..t+k exceeds qos_ms. Length exactly T + k yields no samples.
std::vector<TrainingSample> label_samples(std::span<const TraceStep> trace, double qos_ms, int steps, int horizon,
                                          const TelemetryNorms& norms);

/// Dataset CSV: a "# sinan-dataset v1 tiers=N steps=T" line, a header row,
/// then one row per sample with columns
///   rh_<tier>_<step>_<channel>  (tier-major, then step, then channel)
///   lh_<pct>_<step>             (pct 0..4 = p95..p99)
///   rc_<tier>
///   y_p95 .. y_p99, v
/// Values use shortest round-trip formatting, so reading back is exact.
void write_dataset_csv(std::ostream& out, std::span<const TrainingSample> samples, int tiers, int steps);
std::vector<TrainingSample> read_dataset_csv(std::istream& in);

void save_dataset(const std::string& path, std::span<const TrainingSample> samples, int tiers, int steps);
std::vector<TrainingSample> load_dataset(const std::string& path);

/// Norms persist as a small text block (also embedded in model files).
void write_norms(std::ostream& out, const TelemetryNorms& norms);
TelemetryNorms read_norms(std::istream& in);

}  // namespace sinan
