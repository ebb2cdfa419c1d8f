#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sinan/common.hpp"
#include "sinan/sim.hpp"

namespace sinan {

/// Sinusoidal day shape: users(t) = round(base + amplitude * sin(2*pi*t/period)).
struct DiurnalProfile {
  double base = 100.0;
  double amplitude = 0.0;
  double period_s = 600.0;
};

struct MixEntry {
  int request_type = 0;
  double weight = 1.0;
};

/// Open-loop load: each emulated user issues Poisson requests at 1 RPS.
struct WorkloadSpec {
  int users = 0;  // used when `diurnal` is empty
  std::optional<DiurnalProfile> diurnal;
  std::vector<MixEntry> mix;
  std::uint64_t seed = 0;

  int users_at(std::int64_t interval_index) const;
};

/// Per-user mean request rate.
inline constexpr double kRequestsPerUser = 1.0;

int diurnal_users(const DiurnalProfile& profile, double t_s);

/// Draws one interval of arrivals from `rng`: Poisson count with mean
/// users x 1, offsets uniform in [0, 1000), types by mix weight.
std::vector<Arrival> arrivals_for_interval(const WorkloadSpec& spec, std::int64_t interval_index, Rng& rng);

/// Same as above with the generator derived from (spec.seed, interval_index),
/// so any interval can be regenerated independently.
std::vector<Arrival> arrivals_for_interval(const WorkloadSpec& spec, std::int64_t interval_index);

/// Throws ConfigError on empty mix, nonpositive weights, or negative users.
void validate_workload(const WorkloadSpec& spec, std::size_t num_request_types);

}  // namespace sinan
