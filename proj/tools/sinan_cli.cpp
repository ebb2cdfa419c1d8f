// Command-line front end: collect, train, run, compare, explain, pipeline.
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "sinan/harness.hpp"

namespace fs = std::filesystem;
using namespace sinan;

namespace {

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<int> duration;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required();
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "override the config seed");
  cmd->add_option("--duration", c.duration, "override run.duration_s");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_experiment(c.config);
  if (c.seed) apply_seed(cfg, *c.seed);
  if (c.duration) cfg.run.duration_s = *c.duration;
  cfg.validate();
  fs::create_directories(c.out);
  return cfg;
}

std::string out_path(const Common& c, const std::string& name) { return (fs::path(c.out) / name).string(); }

int cmd_collect(const Common& c) {
  const auto cfg = load(c);
  const auto data = collect_data(cfg);
  save_dataset(out_path(c, "dataset.csv"), data.samples, static_cast<int>(cfg.graph.num_tiers()), cfg.steps);
  std::ostringstream norms;
  write_norms(norms, data.norms);
  write_file_atomic(out_path(c, "norms.txt"), norms.str());
  std::printf("collected %zu samples over %zu intervals (%zu recoveries), band fraction %.3f\n", data.samples.size(),
              data.intervals, data.recoveries, band_fraction(data.samples, 0.8 * cfg.qos_ms, 1.2 * cfg.qos_ms));
  return 0;
}

int cmd_train(const Common& c, const std::string& data_dir) {
  const auto cfg = load(c);
  const std::string dir = data_dir.empty() ? c.out : data_dir;
  const auto samples = load_dataset((fs::path(dir) / "dataset.csv").string());
  std::ifstream nin((fs::path(dir) / "norms.txt").string());
  if (!nin) throw ConfigError("cannot open " + (fs::path(dir) / "norms.txt").string());
  const auto norms = read_norms(nin);
  TrainReport rep;
  const auto models = train_models(cfg, samples, norms, &rep);
  save_models(c.out, models);
  std::printf("cnn: train %zu valid %zu, rmse train %.2f ms valid %.2f ms (scaled %.2f ms)\n", rep.train_size,
              rep.valid_size, rep.cnn_train_rmse_ms, rep.cnn_valid_rmse_ms, rep.cnn_valid_rmse_phi_ms);
  std::printf("bt: %zu trees, valid accuracy %.4f false pos %.4f false neg %.4f\n", rep.bt_trees,
              rep.bt_valid.accuracy, rep.bt_valid.false_positive, rep.bt_valid.false_negative);
  std::printf("thresholds: p_u %.4f p_d %.4f\n", models.p_u, models.p_d);
  return 0;
}

std::optional<SinanModels> maybe_models(const std::string& dir, bool needed) {
  if (!needed) return std::nullopt;
  return load_models(dir);
}

int cmd_run(const Common& c, const std::string& manager, std::optional<int> users, const std::string& models_dir) {
  const auto cfg = load(c);
  const ManagerKind kind = manager.empty() ? cfg.run.manager : parse_manager(manager);
  const auto models = maybe_models(models_dir.empty() ? c.out : models_dir, kind == ManagerKind::Sinan);
  const int u = users ? *users : cfg.workload.users;
  const auto trace = run_scenario(cfg, kind, u, models ? &*models : nullptr);
  const std::string path = out_path(c, "run_" + to_string(kind) + "_" + std::to_string(u) + ".csv");
  write_trace_csv(path, trace);
  std::printf("%s users=%d %s\n", to_string(kind).c_str(), u, summary_line(summarize(trace, cfg.qos_ms)).c_str());
  std::printf("trace: %s\n", path.c_str());
  return 0;
}

int cmd_compare(const Common& c, const std::string& models_dir) {
  const auto cfg = load(c);
  const auto managers = cfg.run.compare.empty() ? std::vector<ManagerKind>{cfg.run.manager} : cfg.run.compare;
  const auto loads = cfg.run.loads.empty() ? std::vector<int>{cfg.workload.users} : cfg.run.loads;
  bool need = std::find(managers.begin(), managers.end(), ManagerKind::Sinan) != managers.end();
  const auto models = maybe_models(models_dir.empty() ? c.out : models_dir, need);
  const auto rows = compare(cfg, managers, loads, models ? &*models : nullptr);
  write_file_atomic(out_path(c, "compare.csv"), compare_to_csv(rows));
  std::printf("%s", compare_table(rows).c_str());
  return 0;
}

int cmd_explain(const Common& c, const std::string& models_dir) {
  const auto cfg = load(c);
  const std::string dir = models_dir.empty() ? c.out : models_dir;
  const std::string cnn_path = (fs::path(dir) / "cnn.txt").string();
  if (!fs::exists(cnn_path)) throw ConfigError("missing model file: " + cnn_path);
  const auto cnn = load_cnn(cnn_path);
  std::optional<SinanModels> models;
  if (cfg.run.manager == ManagerKind::Sinan) models = load_models(dir);
  const auto trace = run_scenario(cfg, cfg.run.manager, cfg.workload.users, models ? &*models : nullptr);
  const auto report = explain_traces(cfg, cnn, {trace.steps});
  std::ostringstream csv;
  write_importance_csv(csv, report);
  write_file_atomic(out_path(c, "importance.csv"), csv.str());
  std::printf("%s", importance_summary(report, cfg.explain.top).c_str());
  return 0;
}

int cmd_pipeline(const Common& c) {
  const auto cfg = load(c);
  const auto res = run_pipeline(cfg, c.out);
  const auto& t = res.train;
  std::printf("cnn rmse train %.2f ms valid %.2f ms; bt accuracy %.4f fp %.4f fn %.4f\n", t.cnn_train_rmse_ms,
              t.cnn_valid_rmse_ms, t.bt_valid.accuracy, t.bt_valid.false_positive, t.bt_valid.false_negative);
  std::printf("%s", compare_table(res.rows).c_str());
  std::printf("manifest: %s\n", res.manifest_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sinan: QoS-aware microservice resource management lab"};
  app.require_subcommand(1);

  Common common;
  std::string models_dir, data_dir, manager;
  std::optional<int> users;

  auto* collect = app.add_subcommand("collect", "explore the allocation space and write a dataset");
  add_common(collect, common);
  auto* train = app.add_subcommand("train", "fit the CNN and boosted trees on a dataset");
  add_common(train, common);
  train->add_option("--data", data_dir, "directory with dataset.csv and norms.txt (default: --out)");
  auto* run = app.add_subcommand("run", "one managed run, written as a trace CSV");
  add_common(run, common);
  run->add_option("--manager", manager, "sinan, autoscale_opt, autoscale_cons, queueboost or static");
  run->add_option("--users", users, "constant user count (default: workload.users)");
  run->add_option("--models", models_dir, "model directory (default: --out)");
  auto* cmp = app.add_subcommand("compare", "every configured manager at every configured load");
  add_common(cmp, common);
  cmp->add_option("--models", models_dir, "model directory (default: --out)");
  auto* explain = app.add_subcommand("explain", "perturbation importance of each tier on a fresh run");
  add_common(explain, common);
  explain->add_option("--models", models_dir, "model directory (default: --out)");
  auto* pipeline = app.add_subcommand("pipeline", "collect, train, calibrate and run end to end");
  add_common(pipeline, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (collect->parsed()) return cmd_collect(common);
    if (train->parsed()) return cmd_train(common, data_dir);
    if (run->parsed()) return cmd_run(common, manager, users, models_dir);
    if (cmp->parsed()) return cmd_compare(common, models_dir);
    if (explain->parsed()) return cmd_explain(common, models_dir);
    if (pipeline->parsed()) return cmd_pipeline(common);
  } catch (const StageError& e) {
    std::fprintf(stderr, "error in stage %s\n", e.what());
    return e.is_config_error() ? 1 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
