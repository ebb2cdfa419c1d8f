#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "sinan/cnn.hpp"
#include "sinan/graph.hpp"
#include "sinan/telemetry.hpp"

namespace sinan {

enum class ImportanceGranularity { Tier, TierChannel };

struct ImportanceEntry {
  int tier = 0;
  int channel = -1;  // -1 when the group is the whole tier
  std::string name;
  double weight = 0.0;
  std::vector<double> coefficients;  // one per factor
};

struct ImportanceReport {
  std::vector<ImportanceEntry> entries;  // descending |weight|
  std::vector<double> factors;
  std::vector<std::size_t> sample_intervals;  // provenance, as passed in
  std::size_t sample_count = 0;

  /// Position of `tier` in the ranking (0 = most important), or -1.
  int rank_of_tier(int tier) const;
};

/// For every group and factor, scales that group's x_rh slice of each
/// sample by the factor and records the CNN's predicted p99. An OLS fit of
/// the predictions on an intercept plus one indicator per (group, factor)
/// gives the coefficients; a group's weight is the sum of their absolute
/// values. Throws RuntimeError when there are no samples or the regression
/// is rank deficient.
ImportanceReport perturb_importance(const CnnModel& cnn, const std::vector<TelemetryWindow>& samples,
                                    const std::vector<double>& factors, ImportanceGranularity granularity,
                                    const ServiceGraph* graph = nullptr,
                                    std::vector<std::size_t> sample_intervals = {});

/// Window end indices t whose predicted interval t+1 violated qos; when
/// none did, the `fallback` indices with the highest p99 at t+1 (ties to
/// the earlier index). t needs `steps` intervals of history and a successor.
std::vector<std::size_t> violation_intervals(std::span<const IntervalMetrics> history, double qos_ms, int steps,
                                             std::size_t fallback = 10);

void write_importance_csv(std::ostream& out, const ImportanceReport& report);
std::string importance_summary(const ImportanceReport& report, std::size_t top = 10);

}  // namespace sinan
