#include "sinan/workload.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sinan {

int diurnal_users(const DiurnalProfile& p, double t_s) {
  const double v = p.base + p.amplitude * std::sin(2.0 * std::numbers::pi * t_s / p.period_s);
  return std::max(1, static_cast<int>(std::lround(v)));
}

int WorkloadSpec::users_at(std::int64_t interval_index) const {
  if (diurnal) return diurnal_users(*diurnal, static_cast<double>(interval_index) * kIntervalMs / 1000.0);
  return users;
}

void validate_workload(const WorkloadSpec& spec, std::size_t num_request_types) {
  if (spec.mix.empty()) throw ConfigError("workload.mix: empty");
  for (const auto& e : spec.mix) {
    if (!(e.weight > 0.0)) throw ConfigError("workload.mix: weights must be positive");
    if (e.request_type < 0 || static_cast<std::size_t>(e.request_type) >= num_request_types)
      throw ConfigError("workload.mix: unknown request type index " + std::to_string(e.request_type));
  }
  if (spec.users < 0) throw ConfigError("workload.users: must be nonnegative");
  if (spec.diurnal && !(spec.diurnal->period_s > 0.0))
    throw ConfigError("workload.diurnal.period_s: must be positive");
}

std::vector<Arrival> arrivals_for_interval(const WorkloadSpec& spec, std::int64_t interval_index, Rng& rng) {
  const int users = spec.users_at(interval_index);
  std::vector<Arrival> out;
  if (users <= 0 || spec.mix.empty()) return out;

  std::poisson_distribution<int> count_dist(users * kRequestsPerUser * kIntervalMs / 1000.0);
  std::uniform_real_distribution<double> offset_dist(0.0, kIntervalMs);
  std::vector<double> weights;
  for (const auto& e : spec.mix) weights.push_back(e.weight);
  std::discrete_distribution<std::size_t> type_dist(weights.begin(), weights.end());

  const int count = count_dist(rng);
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Arrival a;
    a.offset_ms = offset_dist(rng);
    a.request_type = spec.mix[type_dist(rng)].request_type;
    out.push_back(a);
  }
  std::sort(out.begin(), out.end(), [](const Arrival& a, const Arrival& b) { return a.offset_ms < b.offset_ms; });
  return out;
}

std::vector<Arrival> arrivals_for_interval(const WorkloadSpec& spec, std::int64_t interval_index) {
  Rng rng = make_rng(spec.seed, static_cast<std::uint64_t>(interval_index) + 1);
  return arrivals_for_interval(spec, interval_index, rng);
}

}  // namespace sinan
