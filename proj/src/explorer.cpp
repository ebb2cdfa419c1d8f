#include "sinan/explorer.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <optional>

namespace sinan {

StateBucket bucket_state(double rps, double p99_now, double p99_prev, double qos_ms) {
  StateBucket b;
  b.rps_bucket = static_cast<int>(std::floor(std::max(0.0, rps) / 50.0));
  b.lat_bucket = std::min(12, static_cast<int>(std::floor(std::max(0.0, p99_now) / (0.1 * qos_ms))));
  const double d = p99_now - p99_prev;
  const double a = std::abs(d);
  int mag = 0;
  if (a >= 0.2 * qos_ms)
    mag = 2;
  else if (a >= 0.05 * qos_ms)
    mag = 1;
  b.diff_bucket = d < 0 ? -mag : mag;
  return b;
}

int ExplorerOp::apply(int tenths) const {
  if (factor != 0.0) return scale_tenths(tenths, factor);
  return tenths + delta_tenths;
}

std::vector<ExplorerOp> default_ops() {
  std::vector<ExplorerOp> ops;
  ops.push_back({"hold", OpCategory::Hold, 0, 0.0});
  for (int d = 2; d <= 10; d += 2) ops.push_back({"-" + format_double(d / 10.0), OpCategory::Down, -d, 0.0});
  for (int d = 2; d <= 10; d += 2) ops.push_back({"+" + format_double(d / 10.0), OpCategory::Up, d, 0.0});
  ops.push_back({"-10%", OpCategory::Down, 0, 0.9});
  ops.push_back({"-30%", OpCategory::Down, 0, 0.7});
  ops.push_back({"+10%", OpCategory::Up, 0, 1.1});
  ops.push_back({"+30%", OpCategory::Up, 0, 1.3});
  return ops;
}

ExplorerConfig ExplorerConfig::for_qos(double qos_ms) {
  ExplorerConfig cfg;
  cfg.qos_ms = qos_ms;
  cfg.alpha_band_ms = 0.2 * qos_ms;
  return cfg;
}

double info_gain(int n, int s, double c_op) {
  if (n <= 0) return c_op;
  const double p = static_cast<double>(s) / n;
  const double pp = (s + 1.0) / (n + 1.0);
  const double pm = static_cast<double>(s) / (n + 1.0);
  const double now = std::sqrt(p * (1 - p) / n);
  const double up = std::sqrt(pp * (1 - pp) / (n + 1));
  const double down = std::sqrt(pm * (1 - pm) / (n + 1));
  const double g = now - p * up - (1 - p) * down;
  // p in {0,1} is exactly zero in exact arithmetic; keep it so despite rounding.
  if (s == 0 || s == n) return 0.0;
  return c_op * g;
}

double op_coefficient(OpCategory category, double last_p99, const ExplorerConfig& cfg) {
  if (category == OpCategory::Hold) return cfg.c_hold;
  const bool reclaim = last_p99 < 0.8 * cfg.qos_ms;
  const bool favoured = reclaim ? category == OpCategory::Down : category == OpCategory::Up;
  return favoured ? cfg.c_favoured : cfg.c_disfavoured;
}

BanditCell BanditState::cell(int tier, const StateBucket& bucket, int level) const {
  auto it = cells_.find(Key{tier, bucket, level});
  return it == cells_.end() ? BanditCell{} : it->second;
}

void BanditState::update(int tier, const StateBucket& bucket, int level, bool met_qos) {
  auto& c = cells_[Key{tier, bucket, level}];
  c.n += 1;
  c.s += met_qos ? 1 : 0;
}

std::vector<int> select_ops(const BanditState& bandit, const StateBucket& bucket, const AllocationVector& current,
                            const ServiceGraph& graph, const IntervalMetrics& last, const ExplorerConfig& cfg) {
  const std::size_t n = graph.num_tiers();
  const double p99 = last.p99();
  std::vector<int> chosen(n, 0);
  for (std::size_t t = 0; t < n; ++t) {
    const int cur = current.tenths(t);
    const int cap = graph.tiers[t].cap_tenths();
    const double used = t < last.tiers.size() ? last.tiers[t].used_cores : 0.0;
    int best = -1;
    double best_gain = 0.0;
    int best_level = 0;
    for (std::size_t k = 0; k < cfg.ops.size(); ++k) {
      const auto& op = cfg.ops[k];
      const int level = op.category == OpCategory::Hold ? cur : op.apply(cur);
      if (op.category != OpCategory::Hold) {
        if (level == cur || level < kMinCpuTenths || level > cap) continue;
        if (used / (level * kCpuQuantum) > cfg.util_cap) continue;
        if (op.category == OpCategory::Down && p99 > cfg.qos_ms) continue;
      }
      const auto c = bandit.cell(static_cast<int>(t), bucket, level);
      const double g = info_gain(c.n, c.s, op_coefficient(op.category, p99, cfg));
      if (best < 0 || g > best_gain || (g == best_gain && level < best_level)) {
        best = static_cast<int>(k);
        best_gain = g;
        best_level = level;
      }
    }
    chosen[t] = best;
  }
  return chosen;
}

namespace {

AllocationVector apply_ops(const AllocationVector& cur, const std::vector<int>& ops, const ExplorerConfig& cfg) {
  AllocationVector next = cur;
  for (std::size_t t = 0; t < cur.size(); ++t) {
    const auto& op = cfg.ops[static_cast<std::size_t>(ops[t])];
    if (op.category != OpCategory::Hold) next.set_tenths(t, op.apply(cur.tenths(t)));
  }
  return next;
}

// 1 if holding `alloc` from interval `first` for cfg.horizon intervals
// violates QoS in any of them, on a copy of the simulator.
int held_violation(const SimState& sim, const ServiceGraph& graph, const AllocationVector& alloc,
                   const WorkloadSpec& load, int first, const ExplorerConfig& cfg) {
  SimState fork = sim;
  for (int j = 0; j < cfg.horizon; ++j) {
    const auto arrivals = arrivals_for_interval(load, first + j);
    if (simulate_interval(fork, graph, alloc, arrivals).p99() > cfg.qos_ms) return 1;
  }
  return 0;
}

}  // namespace

CollectionResult collect_with_policy(const ServiceGraph& graph, const std::vector<WorkloadSpec>& suite, int episodes,
                                     const ExplorerConfig& cfg, const AllocationPolicy& policy) {
  CollectionResult res;
  if (episodes <= 0) {
    res.norms = TelemetryNorms::fit(graph, {}, cfg.qos_ms);
    return res;
  }
  if (suite.empty()) throw ConfigError("collection needs at least one workload");
  const double limit = cfg.qos_ms + cfg.alpha_band_ms;
  std::vector<std::vector<int>> held_by_episode;
  for (int e = 0; e < episodes; ++e) {
    WorkloadSpec load = suite[static_cast<std::size_t>(e) % suite.size()];
    load.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(e);
    SimState sim(graph, cfg.seed * 7919ULL + static_cast<std::uint64_t>(e));
    std::vector<TraceStep> trace;
    std::vector<int> held(static_cast<std::size_t>(cfg.episode_length), 0);
    AllocationVector alloc = graph.caps();
    int over = 0;
    bool recover = false;
    for (int i = 0; i < cfg.episode_length; ++i) {
      if (recover)
        alloc = graph.caps();
      else if (!trace.empty())
        alloc = graph.clamp(policy(trace));
      recover = false;
      if (cfg.held_labels && i > cfg.steps) held[static_cast<std::size_t>(i)] = held_violation(sim, graph, alloc, load, i, cfg);
      const auto arrivals = arrivals_for_interval(load, i);
      auto m = simulate_interval(sim, graph, alloc, arrivals);
      over = m.p99() > limit ? over + 1 : 0;
      trace.push_back({std::move(m), alloc});
      if (over >= cfg.recovery_intervals) {
        ++res.recoveries;
        recover = true;
        over = 0;
      }
    }
    res.traces.push_back(std::move(trace));
    held.resize(res.traces.back().size());
    held_by_episode.push_back(std::move(held));
  }

  std::vector<IntervalMetrics> all;
  for (const auto& tr : res.traces)
    for (const auto& s : tr) all.push_back(s.metrics);
  res.norms = TelemetryNorms::fit(graph, all, cfg.qos_ms);
  for (std::size_t e = 0; e < res.traces.size(); ++e) {
    const auto& tr = res.traces[e];
    if (tr.size() < static_cast<std::size_t>(cfg.steps + cfg.horizon)) continue;
    auto s = label_samples(tr, cfg.qos_ms, cfg.steps, cfg.horizon, res.norms);
    if (cfg.held_labels) {
      // Sample j ends its window at interval steps + j; its candidate is the next one.
      for (std::size_t j = 0; j < s.size(); ++j) s[j].v = held_by_episode[e][static_cast<std::size_t>(cfg.steps) + j + 1];
    }
    std::move(s.begin(), s.end(), std::back_inserter(res.samples));
  }
  return res;
}

CollectionResult collect(const ServiceGraph& graph, const std::vector<WorkloadSpec>& suite, int episodes,
                         const ExplorerConfig& cfg) {
  BanditState bandit;
  const double limit = cfg.qos_ms + cfg.alpha_band_ms;
  // The cell chosen at the previous decision, credited once its interval is observed.
  struct Pending {
    StateBucket bucket;
    AllocationVector alloc;
  };
  std::optional<Pending> pending;
  AllocationPolicy policy = [&](std::span<const TraceStep> trace) {
    const auto& last = trace.back();
    if (pending && trace.size() >= 2 && pending->alloc == last.alloc) {
      const bool met = last.metrics.p99() <= limit;
      for (std::size_t t = 0; t < pending->alloc.size(); ++t)
        bandit.update(static_cast<int>(t), pending->bucket, pending->alloc.tenths(t), met);
    }
    const double prev = trace.size() >= 2 ? trace[trace.size() - 2].metrics.p99() : last.metrics.p99();
    const auto bucket = bucket_state(last.metrics.rps, last.metrics.p99(), prev, cfg.qos_ms);
    const auto ops = select_ops(bandit, bucket, last.alloc, graph, last.metrics, cfg);
    auto next = apply_ops(last.alloc, ops, cfg);
    pending = Pending{bucket, next};
    return next;
  };
  // A fresh episode must not credit the previous episode's last decision.
  AllocationPolicy wrapped = [&](std::span<const TraceStep> trace) {
    if (trace.size() == 1) pending.reset();
    return policy(trace);
  };
  return collect_with_policy(graph, suite, episodes, cfg, wrapped);
}

double band_fraction(std::span<const TrainingSample> samples, double lo_ms, double hi_ms) {
  if (samples.empty()) return 0.0;
  std::size_t in = 0;
  for (const auto& s : samples) {
    const double p = s.y[kPercentiles - 1];
    if (p >= lo_ms && p <= hi_ms) ++in;
  }
  return static_cast<double>(in) / samples.size();
}

}  // namespace sinan
