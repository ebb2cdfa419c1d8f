#include "sinan/sim.hpp"

#include <algorithm>
#include <cmath>

namespace sinan {

double TierMetrics::channel(int c) const {
  switch (c) {
    case 0: return cpu_util;
    case 1: return rss_mb;
    case 2: return cache_mb;
    case 3: return rx_pkts;
    case 4: return tx_pkts;
    default: throw ConfigError("channel index out of range: " + std::to_string(c));
  }
}

double percentile(std::span<const double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

SimState::SimState(const ServiceGraph& graph, std::uint64_t seed)
    : tiers_(graph.num_tiers()), rng_(make_rng(seed, 0x5157)) {
  for (std::size_t i = 0; i < graph.num_tiers(); ++i) {
    if (const auto& st = graph.tiers[i].stall) {
      tiers_[i].stall_period_ms = std::llround(st->period_s * 1000.0);
      tiers_[i].stall_ms = std::llround(st->stall_ms);
      tiers_[i].stall_offset_ms = std::llround(st->offset_ms);
    }
  }
}

std::vector<double> SimState::remaining_demands() const {
  std::vector<double> out;
  for (const auto& t : tiers_)
    for (int id : t.active) out.push_back(pool_[id].remaining_ms);
  return out;
}

bool SimState::stalled_at(std::size_t tier, std::int64_t tick) const {
  const auto& t = tiers_[tier];
  if (t.stall_period_ms <= 0) return false;
  const std::int64_t start_ms = tick * static_cast<std::int64_t>(kTickMs) - t.stall_offset_ms;
  // First outage one full period into the run.
  if (start_ms < t.stall_period_ms) return false;
  return start_ms % t.stall_period_ms < t.stall_ms;
}

int SimState::new_request(int type, double arrival_ms) {
  int id;
  if (!free_.empty()) {
    id = free_.back();
    free_.pop_back();
  } else {
    id = static_cast<int>(pool_.size());
    pool_.emplace_back();
  }
  pool_[id] = Request{type, 0, 0.0, arrival_ms, arrival_ms};
  return id;
}

double SimState::sample_demand(const Stage& stage) {
  if (stage.demand_cv <= 0.0) return stage.cpu_demand_ms;
  const double shape = 1.0 / (stage.demand_cv * stage.demand_cv);
  std::gamma_distribution<double> dist(shape, stage.cpu_demand_ms / shape);
  return std::max(dist(rng_), 1e-3);
}

void SimState::release_slots(const ServiceGraph& g, const Request& r, int upto_stage) {
  const auto& stages = g.request_types[r.type].stages;
  for (int s = 0; s <= upto_stage; ++s) --tiers_[stages[s].tier_index].slots_used;
}

IntervalMetrics simulate_interval(SimState& st, const ServiceGraph& g, const AllocationVector& alloc,
                                  std::span<const Arrival> arrivals) {
  const std::size_t n_tiers = g.num_tiers();
  if (alloc.size() != n_tiers) throw ConfigError("allocation length does not match tier count");

  IntervalMetrics m;
  m.interval_index = st.interval_;
  m.tiers.assign(n_tiers, TierMetrics{});
  m.arrivals = static_cast<std::int64_t>(arrivals.size());
  m.rps = static_cast<double>(arrivals.size()) * (1000.0 / kIntervalMs);

  std::vector<Arrival> sorted(arrivals.begin(), arrivals.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const Arrival& a, const Arrival& b) { return a.offset_ms < b.offset_ms; });

  std::vector<double> used_ms(n_tiers, 0.0);
  std::vector<double> queued_sum(n_tiers, 0.0);
  std::vector<double> latencies;
  const double interval_start = static_cast<double>(st.clock_ticks_) * kTickMs;
  std::size_t next_arrival = 0;

  // Pushes request `id` into the queue of its current stage's tier, or drops it.
  auto enter_stage = [&](int id, double when) {
    auto& r = st.pool_[id];
    const auto& stage = g.request_types[r.type].stages[r.stage];
    auto& tier = st.tiers_[stage.tier_index];
    if (static_cast<int>(tier.queue.size()) >= g.tiers[stage.tier_index].queue_capacity) {
      ++m.tiers[stage.tier_index].dropped;
      ++m.dropped;
      if (r.stage > 0) st.release_slots(g, r, r.stage - 1);
      --st.in_system_;
      st.free_.push_back(id);
      return;
    }
    r.remaining_ms = st.sample_demand(stage);
    r.ready_ms = when;
    tier.queue.push_back(id);
    m.tiers[stage.tier_index].rx_pkts += 1.0;
  };

  for (int tick = 0; tick < kTicksPerInterval; ++tick) {
    const double t0 = static_cast<double>(st.clock_ticks_) * kTickMs;
    const double t1 = t0 + kTickMs;

    while (next_arrival < sorted.size() && interval_start + sorted[next_arrival].offset_ms < t1) {
      const auto& a = sorted[next_arrival++];
      const double when = interval_start + a.offset_ms;
      ++st.in_system_;
      enter_stage(st.new_request(a.request_type, when), when);
    }

    for (int ti : g.topo_order) {
      auto& tier = st.tiers_[ti];
      const auto& spec = g.tiers[ti];
      while (tier.slots_used < spec.concurrency_limit && !tier.queue.empty()) {
        const int id = tier.queue.front();
        tier.queue.pop_front();
        ++tier.slots_used;
        st.pool_[id].ready_ms = std::max(st.pool_[id].ready_ms, t0);
        tier.active.push_back(id);
      }
      if (!tier.active.empty() && !st.stalled_at(ti, st.clock_ticks_)) {
        const double cores = alloc.cores(ti);
        const double rate = std::min(1.0, cores / static_cast<double>(tier.active.size()));
        std::vector<int> still;
        still.reserve(tier.active.size());
        for (int id : tier.active) {
          auto& r = st.pool_[id];
          const double start = std::max(t0, r.ready_ms);
          const double work = rate * std::max(0.0, t1 - start);
          if (r.remaining_ms <= work) {
            const double done = start + r.remaining_ms / rate;
            used_ms[ti] += r.remaining_ms;
            m.tiers[ti].tx_pkts += 1.0;
            const auto& stages = g.request_types[r.type].stages;
            if (r.stage + 1 == static_cast<int>(stages.size())) {
              latencies.push_back(done - r.arrival_ms);
              ++m.completed;
              st.release_slots(g, r, r.stage);
              --st.in_system_;
              st.free_.push_back(id);
            } else {
              // Caller keeps its slot while the callee works.
              ++r.stage;
              enter_stage(id, done);
            }
          } else {
            r.remaining_ms -= work;
            used_ms[ti] += work;
            still.push_back(id);
          }
        }
        tier.active.swap(still);
      }
      queued_sum[ti] += static_cast<double>(tier.queue.size() + tier.active.size());
    }
    ++st.clock_ticks_;
  }

  std::sort(latencies.begin(), latencies.end());
  if (latencies.empty()) {
    m.latency_ms = st.last_latency_;
    m.percentiles_carried = true;
  } else {
    for (int i = 0; i < kPercentiles; ++i) m.latency_ms[i] = percentile(latencies, kPercentileLevels[i]);
    st.last_latency_ = m.latency_ms;
  }

  for (std::size_t i = 0; i < n_tiers; ++i) {
    auto& tm = m.tiers[i];
    const auto& spec = g.tiers[i];
    tm.used_cores = used_ms[i] / kIntervalMs;
    tm.cpu_util = used_ms[i] / (alloc.cores(i) * kIntervalMs);
    tm.queue_len = queued_sum[i] / kTicksPerInterval;
    tm.rss_mb = spec.memory_base_mb + spec.memory_per_queued_mb * tm.queue_len;
    tm.cache_mb = spec.cache_base_mb + spec.cache_per_rps_mb * tm.tx_pkts * (1000.0 / kIntervalMs);
    tm.occupancy = static_cast<std::int64_t>(st.tiers_[i].queue.size() + st.tiers_[i].active.size());
  }
  m.in_system = st.in_system_;
  ++st.interval_;
  return m;
}

}  // namespace sinan
