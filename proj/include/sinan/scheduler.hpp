#pragma once

#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sinan/allocation.hpp"
#include "sinan/boosted_trees.hpp"
#include "sinan/cnn.hpp"
#include "sinan/graph.hpp"
#include "sinan/sim.hpp"

namespace sinan {

struct SchedulerConfig {
  double qos_ms = 200.0;
  double p_d = 0.05;
  double p_u = 0.5;
  double p_d_ratio = 0.1;  // p_d = p_d_ratio * p_u after calibration
  double rmse_valid_ms = 0.0;
  int horizon = 5;  // k
  int steps = 5;    // T
  int victim_window = 5;
  int trust_threshold = 10;
  int max_batch = 0;  // largest k' for ScaleDownBatch, 0 means every tier
  int step_tenths = 2;

  /// Throws ConfigError unless 0 < p_d < p_u < 1 and rmse_valid >= 0.
  void validate() const;
};

struct TrustState {
  int misprediction_count = 0;
  bool conservative = false;
};

enum class ActionKind { Hold, ScaleDown1, ScaleDownBatch, ScaleUp1, ScaleUpAll, ScaleUpVictim, Emergency };

std::string to_string(ActionKind kind);

struct CandidateAction {
  ActionKind kind = ActionKind::Hold;
  int param = 0;  // tier for the *1 kinds, k' for batch, percent for ScaleUpAll
  AllocationVector alloc;

  double total_cpu() const { return alloc.total_cores(); }
  bool is_down() const { return kind == ActionKind::ScaleDown1 || kind == ActionKind::ScaleDownBatch; }
  bool is_up() const {
    return kind == ActionKind::ScaleUp1 || kind == ActionKind::ScaleUpAll || kind == ActionKind::ScaleUpVictim;
  }
  std::string label() const;
};

/// Hold, ScaleDown1 per tier, ScaleDownBatch(k') for 1 < k' <= N over the
/// least utilised tiers that can still shrink, ScaleUp1 per tier,
/// ScaleUpAll +10% and +30%, ScaleUpVictim. Results are clamped to
/// [0.2, cpu_cap] and the first occurrence of each allocation is kept;
/// non-hold candidates that change nothing are dropped.
std::vector<CandidateAction> enumerate_actions(const ServiceGraph& graph, const AllocationVector& current,
                                               std::span<const double> util, const std::vector<int>& victims,
                                               const SchedulerConfig& cfg, bool conservative = false);

struct CandidateScore {
  double p99_ms = 0.0;
  double p_v = 0.0;
};

struct Decision {
  CandidateAction chosen;
  int chosen_index = -1;  // -1 for the emergency action
  bool emergency = false;
  std::vector<CandidateAction> candidates;
  std::vector<CandidateScore> scores;
};

/// Threshold logic over already-scored candidates (see decide).
Decision choose_action(const ServiceGraph& graph, std::vector<CandidateAction> candidates,
                       std::vector<CandidateScore> scores, const SchedulerConfig& cfg, const TrustState& trust);

/// Predicted next-interval p99 and violation probability per candidate.
std::vector<CandidateScore> score_candidates(const CnnModel& cnn, const BtModel& bt,
                                             std::span<const IntervalMetrics> history,
                                             std::span<const CandidateAction> candidates, int steps);

/// Drops candidates whose predicted p99 exceeds QoS - rmse_valid. Hold is
/// acceptable when it survives and p_V < p_u; then the cheapest of Hold and
/// the surviving scale-downs with p_V < p_d wins. Otherwise the cheapest
/// surviving scale-up with p_V < p_u wins, and with none left every tier
/// goes to cpu_cap. Conservative mode halves p_d and drops batch scale-downs.
Decision decide(const CnnModel& cnn, const BtModel& bt, const ServiceGraph& graph,
                std::span<const IntervalMetrics> history, std::vector<CandidateAction> candidates,
                const SchedulerConfig& cfg, const TrustState& trust);

struct SafetyResult {
  bool emergency = false;
  TrustState trust;
};

SafetyResult safety_check(double observed_p99, double predicted_p99, bool observed_violation, double predicted_pv,
                          TrustState trust, const SchedulerConfig& cfg);

/// Largest threshold t such that labelled violations scored below t make up
/// at most max_fn of all samples. Clamped to [0.002, 0.999].
double calibrate_p_u(std::span<const double> probs, std::span<const int> labels, double max_fn = 0.01);

/// Closed-loop Sinan manager.
class SinanScheduler {
 public:
  SinanScheduler(const ServiceGraph& graph, const CnnModel& cnn, const BtModel& bt, SchedulerConfig cfg);

  /// Next allocation given the metrics observed so far (the last entry was
  /// produced under `current`).
  AllocationVector step(std::span<const IntervalMetrics> history, const AllocationVector& current);

  const TrustState& trust() const { return trust_; }
  const std::optional<Decision>& last_decision() const { return last_; }
  bool last_was_safety_emergency() const { return safety_emergency_; }
  const SchedulerConfig& config() const { return cfg_; }

 private:
  const ServiceGraph& graph_;
  const CnnModel& cnn_;
  const BtModel& bt_;
  SchedulerConfig cfg_;
  TrustState trust_;
  std::optional<Decision> last_;
  bool safety_emergency_ = false;
  std::deque<AllocationVector> applied_;
};

enum class AutoscaleVariant { Opt, Cons };

/// Threshold autoscaler. Opt: +10% on [0.6, 0.7), +30% at >= 0.7, -10% on
/// [0.3, 0.4), -30% below 0.3. Cons: +10% on [0.3, 0.5), +30% at >= 0.5,
/// -10% below 0.1.
AllocationVector autoscale_step(const ServiceGraph& graph, std::span<const double> util,
                                const AllocationVector& current, AutoscaleVariant variant);

/// Queue-driven booster: +30% to the longest queue, -10% from the shortest
/// queue among the other tiers still above 0.2 cores. Ties go to the lower index.
AllocationVector queueboost_step(const ServiceGraph& graph, std::span<const double> queue_lengths,
                                 const AllocationVector& current);

}  // namespace sinan
