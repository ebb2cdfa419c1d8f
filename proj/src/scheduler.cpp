#include "sinan/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sinan/telemetry.hpp"

namespace sinan {

void SchedulerConfig::validate() const {
  if (!(p_d > 0.0 && p_d < p_u && p_u < 1.0)) throw ConfigError("scheduler: need 0 < p_d < p_u < 1");
  if (!(rmse_valid_ms >= 0.0)) throw ConfigError("scheduler: rmse_valid must be >= 0");
  if (qos_ms <= 0.0) throw ConfigError("scheduler: qos_ms must be > 0");
  if (steps < 1 || horizon < 1 || victim_window < 0 || trust_threshold < 1 || step_tenths < 1)
    throw ConfigError("scheduler: integer settings out of range");
}

std::string to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::Hold: return "hold";
    case ActionKind::ScaleDown1: return "down1";
    case ActionKind::ScaleDownBatch: return "down_batch";
    case ActionKind::ScaleUp1: return "up1";
    case ActionKind::ScaleUpAll: return "up_all";
    case ActionKind::ScaleUpVictim: return "up_victim";
    case ActionKind::Emergency: return "emergency";
  }
  return "?";
}

std::string CandidateAction::label() const {
  switch (kind) {
    case ActionKind::ScaleDown1:
    case ActionKind::ScaleUp1:
    case ActionKind::ScaleDownBatch:
    case ActionKind::ScaleUpAll: return to_string(kind) + "(" + std::to_string(param) + ")";
    default: return to_string(kind);
  }
}

std::vector<CandidateAction> enumerate_actions(const ServiceGraph& graph, const AllocationVector& current,
                                               std::span<const double> util, const std::vector<int>& victims,
                                               const SchedulerConfig& cfg, bool conservative) {
  const int n = static_cast<int>(graph.num_tiers());
  if (static_cast<int>(current.size()) != n || static_cast<int>(util.size()) != n)
    throw ConfigError("enumerate_actions: size mismatch");
  std::vector<CandidateAction> out;
  auto add = [&](ActionKind kind, int param, AllocationVector alloc) {
    alloc = graph.clamp(std::move(alloc));
    if (kind != ActionKind::Hold && alloc == current) return;
    for (const auto& c : out)
      if (c.alloc == alloc) return;
    out.push_back({kind, param, std::move(alloc)});
  };
  const int d = cfg.step_tenths;

  add(ActionKind::Hold, 0, current);
  for (int t = 0; t < n; ++t) {
    auto a = current;
    a.set_tenths(t, a.tenths(t) - d);
    add(ActionKind::ScaleDown1, t, std::move(a));
  }
  if (!conservative) {
    std::vector<int> order;
    for (int t = 0; t < n; ++t)
      if (current.tenths(t) > kMinCpuTenths) order.push_back(t);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return util[a] < util[b]; });
    const int kmax = std::min<int>(cfg.max_batch > 0 ? cfg.max_batch : n, static_cast<int>(order.size()));
    for (int k = 2; k <= kmax; ++k) {
      auto a = current;
      for (int i = 0; i < k; ++i) a.set_tenths(order[i], a.tenths(order[i]) - d);
      add(ActionKind::ScaleDownBatch, k, std::move(a));
    }
  }
  for (int t = 0; t < n; ++t) {
    auto a = current;
    a.set_tenths(t, a.tenths(t) + d);
    add(ActionKind::ScaleUp1, t, std::move(a));
  }
  for (int pct : {10, 30}) {
    auto a = current;
    for (int t = 0; t < n; ++t) a.set_tenths(t, scale_tenths(a.tenths(t), 1.0 + pct / 100.0));
    add(ActionKind::ScaleUpAll, pct, std::move(a));
  }
  if (!victims.empty()) {
    auto a = current;
    for (int t : victims) a.set_tenths(t, a.tenths(t) + d);
    add(ActionKind::ScaleUpVictim, 0, std::move(a));
  }
  return out;
}

Decision choose_action(const ServiceGraph& graph, std::vector<CandidateAction> candidates,
                       std::vector<CandidateScore> scores, const SchedulerConfig& cfg, const TrustState& trust) {
  if (candidates.size() != scores.size()) throw ConfigError("choose_action: scores do not match candidates");
  const double p_d = trust.conservative ? cfg.p_d * 0.5 : cfg.p_d;
  const double limit = cfg.qos_ms - cfg.rmse_valid_ms;
  auto passes = [&](std::size_t i) {
    if (scores[i].p99_ms > limit) return false;
    return !(trust.conservative && candidates[i].kind == ActionKind::ScaleDownBatch);
  };

  int hold = -1;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (candidates[i].kind == ActionKind::Hold) hold = static_cast<int>(i);
  const bool hold_ok = hold >= 0 && passes(hold) && scores[hold].p_v < cfg.p_u;

  int best = -1;
  auto consider = [&](int i) {
    if (best < 0) {
      best = i;
      return;
    }
    const int a = candidates[i].alloc.total_tenths();
    const int b = candidates[best].alloc.total_tenths();
    if (a < b) best = i;
    // Equal cost: Hold wins, otherwise the earlier candidate already holds.
    else if (a == b && candidates[i].kind == ActionKind::Hold) best = i;
  };
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!passes(i)) continue;
    const auto& c = candidates[i];
    if (hold_ok) {
      if (c.kind == ActionKind::Hold || (c.is_down() && scores[i].p_v < p_d)) consider(static_cast<int>(i));
    } else if (c.is_up() && scores[i].p_v < cfg.p_u) {
      consider(static_cast<int>(i));
    }
  }

  Decision d;
  d.candidates = std::move(candidates);
  d.scores = std::move(scores);
  if (best < 0) {
    d.emergency = true;
    d.chosen = {ActionKind::Emergency, 0, graph.caps()};
  } else {
    d.chosen_index = best;
    d.chosen = d.candidates[best];
  }
  return d;
}

std::vector<CandidateScore> score_candidates(const CnnModel& cnn, const BtModel& bt,
                                             std::span<const IntervalMetrics> history,
                                             std::span<const CandidateAction> candidates, int steps) {
  if (history.size() < static_cast<std::size_t>(steps)) throw ConfigError("score_candidates: history shorter than T");
  std::vector<CandidateScore> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    const auto w = build_window(history, history.size() - 1, steps, c.alloc, cnn.norms());
    const auto y = cnn.forward(w);
    out.push_back({y.y[kPercentiles - 1], bt_predict(bt, y.latent, w.x_rc)});
  }
  return out;
}

Decision decide(const CnnModel& cnn, const BtModel& bt, const ServiceGraph& graph,
                std::span<const IntervalMetrics> history, std::vector<CandidateAction> candidates,
                const SchedulerConfig& cfg, const TrustState& trust) {
  auto scores = score_candidates(cnn, bt, history, candidates, cfg.steps);
  return choose_action(graph, std::move(candidates), std::move(scores), cfg, trust);
}

SafetyResult safety_check(double observed_p99, double predicted_p99, bool observed_violation, double /*predicted_pv*/,
                          TrustState trust, const SchedulerConfig& cfg) {
  SafetyResult r;
  r.emergency = observed_violation && predicted_p99 <= cfg.qos_ms - cfg.rmse_valid_ms;
  if (r.emergency || std::abs(observed_p99 - predicted_p99) > 3.0 * cfg.rmse_valid_ms) ++trust.misprediction_count;
  trust.conservative = trust.misprediction_count >= cfg.trust_threshold;
  r.trust = trust;
  return r;
}

double calibrate_p_u(std::span<const double> probs, std::span<const int> labels, double max_fn) {
  if (probs.size() != labels.size()) throw ConfigError("calibrate_p_u: size mismatch");
  constexpr double lo = 0.002, hi = 0.999;
  std::vector<double> pos;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (labels[i] == 1) pos.push_back(probs[i]);
  if (pos.empty()) return hi;
  std::sort(pos.begin(), pos.end());
  // Positives strictly below the threshold are missed.
  const auto allowed = static_cast<std::size_t>(std::floor(max_fn * static_cast<double>(probs.size()) + 1e-9));
  if (allowed >= pos.size()) return hi;
  return std::clamp(pos[allowed], lo, hi);
}

SinanScheduler::SinanScheduler(const ServiceGraph& graph, const CnnModel& cnn, const BtModel& bt,
                               SchedulerConfig cfg)
    : graph_(graph), cnn_(cnn), bt_(bt), cfg_(cfg) {
  cfg_.validate();
}

AllocationVector SinanScheduler::step(std::span<const IntervalMetrics> history, const AllocationVector& current) {
  safety_emergency_ = false;
  applied_.push_back(current);
  while (applied_.size() > static_cast<std::size_t>(cfg_.victim_window) + 1) applied_.pop_front();

  if (last_ && !last_->emergency && !history.empty()) {
    const auto& s = last_->scores[static_cast<std::size_t>(last_->chosen_index)];
    const double obs = history.back().p99();
    auto r = safety_check(obs, s.p99_ms, obs > cfg_.qos_ms, s.p_v, trust_, cfg_);
    trust_ = r.trust;
    if (r.emergency) {
      safety_emergency_ = true;
      last_.reset();
      return graph_.caps();
    }
  }
  if (history.size() < static_cast<std::size_t>(cfg_.steps)) {
    last_.reset();
    return current;
  }

  std::vector<double> util;
  for (const auto& t : history.back().tiers) util.push_back(t.cpu_util);
  std::vector<int> victims;
  for (std::size_t t = 0; t < current.size(); ++t) {
    for (std::size_t i = 1; i < applied_.size(); ++i) {
      if (applied_[i].tenths(t) < applied_[i - 1].tenths(t)) {
        victims.push_back(static_cast<int>(t));
        break;
      }
    }
  }
  auto cands = enumerate_actions(graph_, current, util, victims, cfg_, trust_.conservative);
  last_ = decide(cnn_, bt_, graph_, history, std::move(cands), cfg_, trust_);
  return last_->chosen.alloc;
}

AllocationVector autoscale_step(const ServiceGraph& graph, std::span<const double> util,
                                const AllocationVector& current, AutoscaleVariant variant) {
  if (util.size() != current.size()) throw ConfigError("autoscale_step: size mismatch");
  AllocationVector next = current;
  for (std::size_t t = 0; t < current.size(); ++t) {
    const double u = util[t];
    double f = 1.0;
    if (variant == AutoscaleVariant::Opt) {
      if (u >= 0.7)
        f = 1.3;
      else if (u >= 0.6)
        f = 1.1;
      else if (u < 0.3)
        f = 0.7;
      else if (u < 0.4)
        f = 0.9;
    } else {
      if (u >= 0.5)
        f = 1.3;
      else if (u >= 0.3)
        f = 1.1;
      else if (u < 0.1)
        f = 0.9;
    }
    if (f != 1.0) next.set_tenths(t, scale_tenths(current.tenths(t), f));
  }
  return graph.clamp(std::move(next));
}

AllocationVector queueboost_step(const ServiceGraph& graph, std::span<const double> queue_lengths,
                                 const AllocationVector& current) {
  if (queue_lengths.size() != current.size()) throw ConfigError("queueboost_step: size mismatch");
  AllocationVector next = current;
  if (current.size() == 0) return next;
  const std::size_t boost = static_cast<std::size_t>(
      std::max_element(queue_lengths.begin(), queue_lengths.end()) - queue_lengths.begin());
  next.set_tenths(boost, scale_tenths(current.tenths(boost), 1.3));
  int reclaim = -1;
  for (std::size_t t = 0; t < current.size(); ++t) {
    if (t == boost || current.tenths(t) <= kMinCpuTenths) continue;
    if (reclaim < 0 || queue_lengths[t] < queue_lengths[static_cast<std::size_t>(reclaim)]) reclaim = static_cast<int>(t);
  }
  if (reclaim >= 0) next.set_tenths(reclaim, scale_tenths(current.tenths(reclaim), 0.9));
  return graph.clamp(std::move(next));
}

}  // namespace sinan
