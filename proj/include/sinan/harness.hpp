#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sinan/boosted_trees.hpp"
#include "sinan/cnn.hpp"
#include "sinan/explain.hpp"
#include "sinan/explorer.hpp"
#include "sinan/graph.hpp"
#include "sinan/scheduler.hpp"
#include "sinan/workload.hpp"

namespace sinan {

enum class ManagerKind { Sinan, AutoscaleOpt, AutoscaleCons, QueueBoost, Static };

std::string to_string(ManagerKind kind);
/// Throws ConfigError for unknown names.
ManagerKind parse_manager(const std::string& name);

struct CollectSettings {
  std::string policy = "explorer";  // explorer or any manager name except sinan
  int episodes = 50;
  int episode_length = 120;
  double util_cap = 0.9;
  double alpha_band_ms = -1.0;  // < 0 means 0.2 QoS
  bool held_labels = true;
  std::vector<int> loads;  // users per episode, cycled; empty means workload.users
};

struct TrainSettings {
  TrainConfig cnn;
  LossConfig loss;  // knee_ms <= 0 means QoS
  CnnArch arch;     // tiers and steps are taken from the experiment
  BtTrainConfig bt;
  double max_false_negative = 0.01;
};

struct RunSettings {
  ManagerKind manager = ManagerKind::Sinan;
  int duration_s = 300;
  std::vector<int> loads;              // compare sweep; empty means workload.users
  std::vector<ManagerKind> compare;    // managers in the sweep
  std::optional<AllocationVector> static_alloc;  // defaults to cpu_cap
};

struct ExplainSettings {
  std::vector<double> factors{0.5, 0.7};
  ImportanceGranularity granularity = ImportanceGranularity::Tier;
  std::size_t fallback_samples = 10;
  std::size_t top = 10;
};

/// Everything a declarative run needs. Loaded from a JSON file whose
/// "graph" path is resolved against the file's directory.
struct ExperimentConfig {
  std::string name = "experiment";
  std::string graph_path;
  ServiceGraph graph;
  double qos_ms = 200.0;
  std::uint64_t seed = 1;
  int steps = 5;    // T
  int horizon = 5;  // k
  WorkloadSpec workload;
  CollectSettings collect;
  TrainSettings train;
  SchedulerConfig scheduler;
  RunSettings run;
  ExplainSettings explain;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

ExperimentConfig parse_experiment(const std::string& json_text, const std::string& base_dir);
/// Throws ConfigError naming the path when the file or its graph is missing.
ExperimentConfig load_experiment(const std::string& path);

/// Seed overrides propagate to the workload, collection and training.
void apply_seed(ExperimentConfig& cfg, std::uint64_t seed);

/// Workload at a given user count with the experiment's mix and seed.
WorkloadSpec workload_at(const ExperimentConfig& cfg, int users);

struct CollectOutput {
  std::vector<TrainingSample> samples;
  TelemetryNorms norms;
  std::vector<std::vector<TraceStep>> traces;
  std::size_t intervals = 0;
  std::size_t recoveries = 0;
};

CollectOutput collect_data(const ExperimentConfig& cfg);

struct SinanModels {
  CnnModel cnn;
  BtModel bt;
  double p_u = 0.5;
  double p_d = 0.05;
  double rmse_valid_ms = 0.0;  // phi-space validation RMSE
};

struct TrainReport {
  std::vector<RmseEntry> rmse_history;
  double cnn_train_rmse_ms = 0.0;
  double cnn_valid_rmse_ms = 0.0;
  double cnn_valid_rmse_phi_ms = 0.0;
  BtMetrics bt_valid;
  std::size_t bt_trees = 0;
  std::size_t train_size = 0;
  std::size_t valid_size = 0;
};

/// CNN on the samples, then the BT on (latent, x_rc) over the same split,
/// then p_u calibration on the validation part and p_d = p_d_ratio * p_u.
SinanModels train_models(const ExperimentConfig& cfg, const std::vector<TrainingSample>& samples,
                         const TelemetryNorms& norms, TrainReport* report = nullptr);

/// Directory layout: cnn.txt, bt.txt, thresholds.json.
void save_models(const std::string& dir, const SinanModels& models);
/// Throws ConfigError naming the missing file.
SinanModels load_models(const std::string& dir);

struct TraceRow {
  std::int64_t interval = 0;
  int users = 0;
  double rps = 0.0;
  std::array<double, kPercentiles> latency_ms{};
  bool violation = false;
  double total_cpu = 0.0;
  std::string action;
  std::optional<double> pred_p99;
  std::optional<double> p_v;
  bool emergency = false;
  std::vector<double> alloc;
  std::vector<double> util;
};

struct RunTrace {
  std::vector<std::string> tiers;
  std::vector<TraceRow> rows;
  std::vector<TraceStep> steps;  // raw telemetry; not serialised
};

/// Closed-loop run of `manager` at `users` for cfg.run.duration_s intervals.
/// Row i carries the allocation in force during interval i and the decision
/// that chose it. `models` is required for the sinan manager.
RunTrace run_scenario(const ExperimentConfig& cfg, ManagerKind manager, int users,
                      const SinanModels* models = nullptr);

std::string trace_csv_header(const std::vector<std::string>& tiers);
std::string trace_to_csv(const RunTrace& trace);
/// Writes via `<path>.partial` and rename.
void write_trace_csv(const std::string& path, const RunTrace& trace);

struct RunSummary {
  std::size_t intervals = 0;
  double qos_met = 0.0;
  double mean_cpu = 0.0;
  double max_cpu = 0.0;
};

RunSummary summarize(const RunTrace& trace, double qos_ms);
/// Recomputes the summary from CSV text alone.
RunSummary summarize_csv(const std::string& csv, double qos_ms);
std::string summary_line(const RunSummary& s);

struct CompareRow {
  ManagerKind manager = ManagerKind::Static;
  int users = 0;
  std::string label;  // free-form scenario tag, e.g. a mix name
  RunSummary summary;
};

/// One run per (manager, load), managers outermost.
std::vector<CompareRow> compare(const ExperimentConfig& cfg, const std::vector<ManagerKind>& managers,
                                const std::vector<int>& loads, const SinanModels* models = nullptr);
std::string compare_to_csv(const std::vector<CompareRow>& rows);
std::string compare_table(const std::vector<CompareRow>& rows);

/// Importance of each tier for the p99 predictions on the windows that
/// precede a violation in `traces`, with fallback to the slowest intervals.
ImportanceReport explain_traces(const ExperimentConfig& cfg, const CnnModel& cnn,
                                const std::vector<std::vector<TraceStep>>& traces);

/// Stage name carried by pipeline failures.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what, bool config)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)), config_(config) {}
  const std::string& stage() const { return stage_; }
  bool is_config_error() const { return config_; }

 private:
  std::string stage_;
  bool config_;
};

struct PipelineResult {
  TrainReport train;
  std::vector<CompareRow> rows;
  std::string manifest_path;
};

/// collect -> train -> calibrate -> managed runs, writing every artifact and
/// a manifest.json (seeds, SHA-256 digests, metrics) into out_dir.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);

}  // namespace sinan
