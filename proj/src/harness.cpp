#include "sinan/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace sinan {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::pair<ManagerKind, const char*> kManagerNames[] = {
    {ManagerKind::Sinan, "sinan"},
    {ManagerKind::AutoscaleOpt, "autoscale_opt"},
    {ManagerKind::AutoscaleCons, "autoscale_cons"},
    {ManagerKind::QueueBoost, "queueboost"},
    {ManagerKind::Static, "static"},
};

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end())
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

std::vector<double> tier_column(const IntervalMetrics& m, double TierMetrics::*field) {
  std::vector<double> out;
  out.reserve(m.tiers.size());
  for (const auto& t : m.tiers) out.push_back(t.*field);
  return out;
}

/// Next allocation for the non-learning managers.
AllocationVector baseline_step(const ExperimentConfig& cfg, ManagerKind kind, const IntervalMetrics& last,
                               const AllocationVector& current) {
  switch (kind) {
    case ManagerKind::AutoscaleOpt:
      return autoscale_step(cfg.graph, tier_column(last, &TierMetrics::cpu_util), current, AutoscaleVariant::Opt);
    case ManagerKind::AutoscaleCons:
      return autoscale_step(cfg.graph, tier_column(last, &TierMetrics::cpu_util), current, AutoscaleVariant::Cons);
    case ManagerKind::QueueBoost:
      return queueboost_step(cfg.graph, tier_column(last, &TierMetrics::queue_len), current);
    case ManagerKind::Static:
      return cfg.run.static_alloc ? *cfg.run.static_alloc : cfg.graph.caps();
    case ManagerKind::Sinan: break;
  }
  throw ConfigError("baseline_step: sinan is not a baseline");
}

AllocationVector initial_allocation(const ExperimentConfig& cfg, ManagerKind kind) {
  if (kind == ManagerKind::Static && cfg.run.static_alloc) return *cfg.run.static_alloc;
  return cfg.graph.caps();
}

void parse_graph_overrides(const json& faults, ServiceGraph& g) {
  for (const auto& [name, spec] : faults.items()) {
    const std::string where = "faults." + name;
    const int t = g.tier_index(name);
    if (t < 0) throw ConfigError(where + ": unknown tier");
    if (spec.is_null()) {
      g.tiers[t].stall.reset();
      continue;
    }
    check_keys(spec, {"period_s", "stall_ms", "offset_ms"}, where);
    StallFault f;
    f.period_s = get(spec, "period_s", f.period_s, where);
    f.stall_ms = get(spec, "stall_ms", f.stall_ms, where);
    f.offset_ms = get(spec, "offset_ms", f.offset_ms, where);
    if (!(f.period_s > 0) || !(f.stall_ms > 0)) throw ConfigError(where + ": period_s and stall_ms must be positive");
    if (!(f.offset_ms >= 0) || f.offset_ms + f.stall_ms > f.period_s * 1000.0)
      throw ConfigError(where + ".offset_ms: outage must fit inside the period");
    g.tiers[t].stall = f;
  }
}

std::vector<int> int_list(const json& obj, const char* key, const std::string& where) {
  auto v = get<std::vector<int>>(obj, key, {}, where);
  for (int u : v)
    if (u < 0) throw ConfigError(where + "." + key + ": user counts must be nonnegative");
  return v;
}

}  // namespace

std::string to_string(ManagerKind kind) {
  for (const auto& [k, n] : kManagerNames)
    if (k == kind) return n;
  return "unknown";
}

ManagerKind parse_manager(const std::string& name) {
  for (const auto& [k, n] : kManagerNames)
    if (name == n) return k;
  throw ConfigError("unknown manager '" + name + "'");
}

void ExperimentConfig::validate() const {
  if (!(qos_ms > 0)) throw ConfigError("qos_ms must be positive");
  if (steps < 1 || horizon < 1) throw ConfigError("window.steps and window.horizon must be >= 1");
  if (run.duration_s < steps + horizon) throw ConfigError("run.duration_s must be at least steps + horizon");
  validate_workload(workload, graph.request_types.size());
  if (collect.episodes < 1) throw ConfigError("collect.episodes must be >= 1");
  if (collect.episode_length < steps + horizon) throw ConfigError("collect.episode_length must be at least steps + horizon");
  if (!(collect.util_cap > 0)) throw ConfigError("collect.util_cap must be positive");
  if (collect.policy != "explorer") {
    if (parse_manager(collect.policy) == ManagerKind::Sinan)
      throw ConfigError("collect.policy: sinan needs trained models and cannot collect");
  }
  if (train.cnn.epochs < 0 || train.cnn.batch < 1 || !(train.cnn.lr > 0))
    throw ConfigError("train: epochs >= 0, batch >= 1 and lr > 0 required");
  if (!(train.max_false_negative >= 0 && train.max_false_negative < 1))
    throw ConfigError("scheduler.max_false_negative must lie in [0, 1)");
  if (!(scheduler.p_d_ratio > 0 && scheduler.p_d_ratio < 1)) throw ConfigError("scheduler.p_d_ratio must lie in (0, 1)");
  if (run.static_alloc && !graph.is_valid(*run.static_alloc))
    throw ConfigError("run.static_alloc: one entry per tier within [0.2, cpu_cap]");
  for (double f : explain.factors)
    if (!(f > 0 && f <= 2)) throw ConfigError("explain.factors must lie in (0, 2]");
}

ExperimentConfig parse_experiment(const std::string& json_text, const std::string& base_dir) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config is not valid JSON: ") + e.what());
  }
  check_keys(root, {"name", "graph", "qos_ms", "seed", "window", "workload", "faults", "collect", "train",
                    "boosted_trees", "scheduler", "run", "explain"},
             "experiment");
  ExperimentConfig cfg;
  cfg.name = get<std::string>(root, "name", cfg.name, "experiment");
  if (!root.contains("graph")) throw ConfigError("experiment.graph: missing");
  const std::string graph_ref = get<std::string>(root, "graph", "", "experiment");
  cfg.graph_path = fs::path(graph_ref).is_absolute() ? graph_ref : (fs::path(base_dir) / graph_ref).string();
  cfg.graph = load_graph_file(cfg.graph_path);
  if (root.contains("faults")) {
    if (!root["faults"].is_object()) throw ConfigError("faults: expected an object keyed by tier name");
    parse_graph_overrides(root["faults"], cfg.graph);
  }
  cfg.qos_ms = get(root, "qos_ms", cfg.qos_ms, "experiment");
  cfg.seed = get<std::uint64_t>(root, "seed", cfg.seed, "experiment");

  if (root.contains("window")) {
    const auto& w = root["window"];
    check_keys(w, {"steps", "horizon"}, "window");
    cfg.steps = get(w, "steps", cfg.steps, "window");
    cfg.horizon = get(w, "horizon", cfg.horizon, "window");
  }

  if (!root.contains("workload")) throw ConfigError("experiment.workload: missing");
  {
    const auto& w = root["workload"];
    check_keys(w, {"users", "mix", "diurnal"}, "workload");
    cfg.workload.users = get(w, "users", 0, "workload");
    if (!w.contains("mix")) throw ConfigError("workload.mix: missing");
    if (!w["mix"].is_object()) throw ConfigError("workload.mix: expected an object keyed by request type");
    std::set<std::string> seen;
    // Mix entries follow the graph's request type order, not the file's.
    for (std::size_t r = 0; r < cfg.graph.request_types.size(); ++r) {
      const auto& name = cfg.graph.request_types[r].name;
      if (!w["mix"].contains(name)) continue;
      seen.insert(name);
      cfg.workload.mix.push_back({static_cast<int>(r), get<double>(w["mix"], name.c_str(), 0.0, "workload.mix")});
    }
    for (const auto& [name, _] : w["mix"].items())
      if (!seen.count(name)) throw ConfigError("workload.mix: unknown request type '" + name + "'");
    if (w.contains("diurnal")) {
      const auto& d = w["diurnal"];
      check_keys(d, {"base", "amplitude", "period_s"}, "workload.diurnal");
      DiurnalProfile p;
      p.base = get(d, "base", p.base, "workload.diurnal");
      p.amplitude = get(d, "amplitude", p.amplitude, "workload.diurnal");
      p.period_s = get(d, "period_s", p.period_s, "workload.diurnal");
      if (!(p.period_s > 0) || p.base - std::abs(p.amplitude) < 0)
        throw ConfigError("workload.diurnal: period_s > 0 and base >= |amplitude| required");
      cfg.workload.diurnal = p;
    }
  }

  if (root.contains("collect")) {
    const auto& c = root["collect"];
    const std::string w = "collect";
    check_keys(c, {"policy", "episodes", "episode_length", "util_cap", "alpha_band_ms", "held_labels", "loads"}, w);
    cfg.collect.policy = get(c, "policy", cfg.collect.policy, w);
    cfg.collect.episodes = get(c, "episodes", cfg.collect.episodes, w);
    cfg.collect.episode_length = get(c, "episode_length", cfg.collect.episode_length, w);
    cfg.collect.util_cap = get(c, "util_cap", cfg.collect.util_cap, w);
    cfg.collect.alpha_band_ms = get(c, "alpha_band_ms", cfg.collect.alpha_band_ms, w);
    cfg.collect.held_labels = get(c, "held_labels", cfg.collect.held_labels, w);
    cfg.collect.loads = int_list(c, "loads", w);
  }

  if (root.contains("train")) {
    const auto& t = root["train"];
    const std::string w = "train";
    check_keys(t, {"epochs", "lr", "batch", "weight_decay", "validation_fraction", "knee_ms", "loss_alpha", "arch"}, w);
    cfg.train.cnn.epochs = get(t, "epochs", cfg.train.cnn.epochs, w);
    cfg.train.cnn.lr = get(t, "lr", cfg.train.cnn.lr, w);
    cfg.train.cnn.batch = get(t, "batch", cfg.train.cnn.batch, w);
    cfg.train.cnn.weight_decay = get(t, "weight_decay", cfg.train.cnn.weight_decay, w);
    cfg.train.cnn.validation_fraction = get(t, "validation_fraction", cfg.train.cnn.validation_fraction, w);
    cfg.train.loss.knee_ms = get(t, "knee_ms", 0.0, w);
    cfg.train.loss.alpha = get(t, "loss_alpha", cfg.train.loss.alpha, w);
    if (t.contains("arch")) {
      const auto& a = t["arch"];
      check_keys(a, {"conv1", "conv2", "encoder", "hidden", "latent", "output_scale_ms"}, "train.arch");
      auto& arch = cfg.train.arch;
      arch.conv1 = get(a, "conv1", arch.conv1, "train.arch");
      arch.conv2 = get(a, "conv2", arch.conv2, "train.arch");
      arch.encoder = get(a, "encoder", arch.encoder, "train.arch");
      arch.hidden = get(a, "hidden", arch.hidden, "train.arch");
      arch.latent = get(a, "latent", arch.latent, "train.arch");
      arch.output_scale_ms = get(a, "output_scale_ms", arch.output_scale_ms, "train.arch");
    }
  }

  if (root.contains("boosted_trees")) {
    const auto& b = root["boosted_trees"];
    const std::string w = "boosted_trees";
    check_keys(b, {"max_trees", "max_depth", "shrinkage", "min_samples_leaf", "patience", "validation_fraction"}, w);
    auto& bt = cfg.train.bt;
    bt.max_trees = get(b, "max_trees", bt.max_trees, w);
    bt.max_depth = get(b, "max_depth", bt.max_depth, w);
    bt.shrinkage = get(b, "shrinkage", bt.shrinkage, w);
    bt.min_samples_leaf = get(b, "min_samples_leaf", bt.min_samples_leaf, w);
    bt.patience = get(b, "patience", bt.patience, w);
    bt.validation_fraction = get(b, "validation_fraction", bt.validation_fraction, w);
  }

  if (root.contains("scheduler")) {
    const auto& s = root["scheduler"];
    const std::string w = "scheduler";
    check_keys(s, {"p_d_ratio", "max_false_negative", "victim_window", "trust_threshold", "max_batch", "step_tenths"},
               w);
    cfg.scheduler.p_d_ratio = get(s, "p_d_ratio", cfg.scheduler.p_d_ratio, w);
    cfg.train.max_false_negative = get(s, "max_false_negative", cfg.train.max_false_negative, w);
    cfg.scheduler.victim_window = get(s, "victim_window", cfg.scheduler.victim_window, w);
    cfg.scheduler.trust_threshold = get(s, "trust_threshold", cfg.scheduler.trust_threshold, w);
    cfg.scheduler.max_batch = get(s, "max_batch", cfg.scheduler.max_batch, w);
    cfg.scheduler.step_tenths = get(s, "step_tenths", cfg.scheduler.step_tenths, w);
  }

  if (root.contains("run")) {
    const auto& r = root["run"];
    const std::string w = "run";
    check_keys(r, {"manager", "duration_s", "loads", "compare", "static_alloc"}, w);
    cfg.run.manager = parse_manager(get<std::string>(r, "manager", "sinan", w));
    cfg.run.duration_s = get(r, "duration_s", cfg.run.duration_s, w);
    cfg.run.loads = int_list(r, "loads", w);
    for (const auto& m : get<std::vector<std::string>>(r, "compare", {}, w)) cfg.run.compare.push_back(parse_manager(m));
    if (r.contains("static_alloc")) {
      auto cores = get<std::vector<double>>(r, "static_alloc", {}, w);
      cfg.run.static_alloc = AllocationVector::from_cores(cores);
    }
  }

  if (root.contains("explain")) {
    const auto& e = root["explain"];
    const std::string w = "explain";
    check_keys(e, {"factors", "granularity", "fallback_samples", "top"}, w);
    cfg.explain.factors = get(e, "factors", cfg.explain.factors, w);
    const auto gran = get<std::string>(e, "granularity", "tier", w);
    if (gran == "tier")
      cfg.explain.granularity = ImportanceGranularity::Tier;
    else if (gran == "tier_channel")
      cfg.explain.granularity = ImportanceGranularity::TierChannel;
    else
      throw ConfigError("explain.granularity: expected tier or tier_channel");
    cfg.explain.fallback_samples = get(e, "fallback_samples", cfg.explain.fallback_samples, w);
    cfg.explain.top = get(e, "top", cfg.explain.top, w);
  }

  apply_seed(cfg, cfg.seed);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment(ss.str(), fs::path(path).parent_path().string());
}

void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.workload.seed = seed;
  cfg.train.cnn.seed = seed;
  cfg.train.bt.seed = seed;
}

WorkloadSpec workload_at(const ExperimentConfig& cfg, int users) {
  WorkloadSpec w = cfg.workload;
  if (!w.diurnal) w.users = users;
  w.seed = cfg.seed;
  return w;
}

CollectOutput collect_data(const ExperimentConfig& cfg) {
  std::vector<WorkloadSpec> suite;
  const auto loads = cfg.collect.loads.empty() ? std::vector<int>{cfg.workload.users} : cfg.collect.loads;
  for (int u : loads) suite.push_back(workload_at(cfg, u));

  ExplorerConfig ec = ExplorerConfig::for_qos(cfg.qos_ms);
  if (cfg.collect.alpha_band_ms >= 0) ec.alpha_band_ms = cfg.collect.alpha_band_ms;
  ec.util_cap = cfg.collect.util_cap;
  ec.steps = cfg.steps;
  ec.horizon = cfg.horizon;
  ec.episode_length = cfg.collect.episode_length;
  ec.held_labels = cfg.collect.held_labels;
  ec.seed = cfg.seed;

  CollectionResult res;
  if (cfg.collect.policy == "explorer") {
    res = collect(cfg.graph, suite, cfg.collect.episodes, ec);
  } else {
    const ManagerKind kind = parse_manager(cfg.collect.policy);
    res = collect_with_policy(cfg.graph, suite, cfg.collect.episodes, ec, [&](std::span<const TraceStep> trace) {
      return baseline_step(cfg, kind, trace.back().metrics, trace.back().alloc);
    });
  }
  CollectOutput out;
  out.samples = std::move(res.samples);
  out.norms = std::move(res.norms);
  out.traces = std::move(res.traces);
  out.recoveries = res.recoveries;
  for (const auto& t : out.traces) out.intervals += t.size();
  return out;
}

SinanModels train_models(const ExperimentConfig& cfg, const std::vector<TrainingSample>& samples,
                         const TelemetryNorms& norms, TrainReport* report) {
  if (samples.size() < 2) throw RuntimeError("train: need at least two samples, got " + std::to_string(samples.size()));
  CnnArch arch = cfg.train.arch;
  arch.tiers = static_cast<int>(cfg.graph.num_tiers());
  arch.steps = cfg.steps;
  LossConfig loss = cfg.train.loss;
  if (loss.knee_ms <= 0) loss.knee_ms = cfg.qos_ms;

  SinanModels m;
  m.cnn = CnnModel(arch, norms, cfg.train.cnn.seed);
  TrainResult tr = cnn_train(m.cnn, samples, cfg.train.cnn, loss);

  std::vector<char> is_valid(samples.size(), 0);
  for (auto i : tr.valid_indices) is_valid[i] = 1;
  std::vector<TrainingSample> train_set, valid_set;
  for (std::size_t i = 0; i < samples.size(); ++i) (is_valid[i] ? valid_set : train_set).push_back(samples[i]);

  double se = 0.0;
  std::size_t n = 0;
  for (const auto& s : valid_set) {
    const auto y = m.cnn.forward(s.window).y;
    for (int p = 0; p < kPercentiles; ++p) {
      const double d = phi(y[p], loss) - phi(s.y[p], loss);
      se += d * d;
      ++n;
    }
  }
  m.rmse_valid_ms = n ? std::sqrt(se / static_cast<double>(n)) : 0.0;

  auto features = [&](const std::vector<TrainingSample>& set, FeatureMatrix& x, std::vector<int>& y) {
    x = FeatureMatrix();
    for (const auto& s : set) {
      auto f = m.cnn.forward(s.window).latent;
      f.insert(f.end(), s.window.x_rc.begin(), s.window.x_rc.end());
      x.cols = f.size();
      x.push_row(f);
      y.push_back(s.v);
    }
  };
  FeatureMatrix xt, xv;
  std::vector<int> yt, yv;
  features(train_set, xt, yt);
  features(valid_set, xv, yv);
  m.bt = bt_train(xt, yt, cfg.train.bt);

  std::vector<double> pv;
  for (std::size_t i = 0; i < xv.rows; ++i) pv.push_back(m.bt.predict_proba(xv.row(i)));
  m.p_u = calibrate_p_u(pv, yv, cfg.train.max_false_negative);
  m.p_d = cfg.scheduler.p_d_ratio * m.p_u;

  if (report) {
    report->rmse_history = tr.rmse_history;
    report->cnn_train_rmse_ms = cnn_rmse(m.cnn, train_set);
    report->cnn_valid_rmse_ms = cnn_rmse(m.cnn, valid_set);
    report->cnn_valid_rmse_phi_ms = m.rmse_valid_ms;
    report->bt_valid = xv.rows ? bt_evaluate(m.bt, xv, yv) : BtMetrics{};
    report->bt_trees = m.bt.trees.size();
    report->train_size = train_set.size();
    report->valid_size = valid_set.size();
  }
  return m;
}

void save_models(const std::string& dir, const SinanModels& models) {
  fs::create_directories(dir);
  save_cnn((fs::path(dir) / "cnn.txt").string(), models.cnn);
  save_bt((fs::path(dir) / "bt.txt").string(), models.bt);
  json th = {{"p_u", models.p_u}, {"p_d", models.p_d}, {"rmse_valid_ms", models.rmse_valid_ms}};
  write_file_atomic((fs::path(dir) / "thresholds.json").string(), th.dump(2) + "\n");
}

SinanModels load_models(const std::string& dir) {
  for (const char* f : {"cnn.txt", "bt.txt", "thresholds.json"})
    if (!fs::exists(fs::path(dir) / f)) throw ConfigError("missing model file: " + (fs::path(dir) / f).string());
  SinanModels m;
  m.cnn = load_cnn((fs::path(dir) / "cnn.txt").string());
  m.bt = load_bt((fs::path(dir) / "bt.txt").string());
  try {
    const auto th = json::parse(read_file((fs::path(dir) / "thresholds.json").string()));
    m.p_u = th.at("p_u").get<double>();
    m.p_d = th.at("p_d").get<double>();
    m.rmse_valid_ms = th.at("rmse_valid_ms").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError("thresholds.json: " + std::string(e.what()));
  }
  return m;
}

RunTrace run_scenario(const ExperimentConfig& cfg, ManagerKind manager, int users, const SinanModels* models) {
  if (manager == ManagerKind::Sinan && !models) throw ConfigError("run: the sinan manager needs trained models");
  const ServiceGraph& g = cfg.graph;
  const WorkloadSpec w = workload_at(cfg, users);
  validate_workload(w, g.request_types.size());

  std::optional<SinanScheduler> sched;
  if (manager == ManagerKind::Sinan) {
    if (models->cnn.arch().tiers != static_cast<int>(g.num_tiers()) || models->cnn.arch().steps != cfg.steps)
      throw ConfigError("run: model shape does not match the graph and window");
    SchedulerConfig sc = cfg.scheduler;
    sc.qos_ms = cfg.qos_ms;
    sc.steps = cfg.steps;
    sc.horizon = cfg.horizon;
    sc.p_u = models->p_u;
    sc.p_d = models->p_d;
    sc.rmse_valid_ms = models->rmse_valid_ms;
    sc.validate();
    sched.emplace(g, models->cnn, models->bt, sc);
  }

  RunTrace trace;
  for (const auto& t : g.tiers) trace.tiers.push_back(t.name);
  SimState sim(g, cfg.seed * 7919 + 17);
  AllocationVector alloc = initial_allocation(cfg, manager);
  std::vector<IntervalMetrics> history;
  TraceRow pending;
  pending.action = "init";
  for (std::int64_t i = 0; i < cfg.run.duration_s; ++i) {
    IntervalMetrics m = simulate_interval(sim, g, alloc, arrivals_for_interval(w, i));
    TraceRow row = std::move(pending);
    row.interval = i;
    row.users = w.users_at(i);
    row.rps = m.rps;
    row.latency_ms = m.latency_ms;
    row.violation = m.p99() > cfg.qos_ms;
    row.total_cpu = alloc.total_cores();
    row.alloc = alloc.as_cores();
    row.util = tier_column(m, &TierMetrics::cpu_util);
    trace.rows.push_back(std::move(row));
    trace.steps.push_back({m, alloc});
    history.push_back(std::move(m));

    pending = TraceRow{};
    if (sched) {
      alloc = sched->step(history, alloc);
      if (sched->last_was_safety_emergency()) {
        pending.action = "emergency";
        pending.emergency = true;
      } else if (const auto& d = sched->last_decision()) {
        pending.action = d->chosen.label();
        pending.emergency = d->emergency;
        if (d->chosen_index >= 0) {
          pending.pred_p99 = d->scores[static_cast<std::size_t>(d->chosen_index)].p99_ms;
          pending.p_v = d->scores[static_cast<std::size_t>(d->chosen_index)].p_v;
        }
      } else {
        pending.action = "warmup";
      }
    } else {
      alloc = baseline_step(cfg, manager, history.back(), alloc);
      pending.action = to_string(manager);
    }
    alloc = g.clamp(alloc);
  }
  return trace;
}

std::string trace_csv_header(const std::vector<std::string>& tiers) {
  std::string h = "interval,users,rps,p95,p96,p97,p98,p99,violation,total_cpu,action,pred_p99,p_v,emergency";
  for (const auto& t : tiers) h += ",alloc_" + t + ",util_" + t;
  return h;
}

std::string trace_to_csv(const RunTrace& trace) {
  std::string out = trace_csv_header(trace.tiers) + "\n";
  for (const auto& r : trace.rows) {
    out += std::to_string(r.interval) + ',' + std::to_string(r.users) + ',' + format_double(r.rps);
    for (double l : r.latency_ms) out += ',' + format_double(l);
    out += r.violation ? ",1," : ",0,";
    out += format_double(r.total_cpu) + ',' + r.action + ',';
    if (r.pred_p99) out += format_double(*r.pred_p99);
    out += ',';
    if (r.p_v) out += format_double(*r.p_v);
    out += r.emergency ? ",1" : ",0";
    for (std::size_t t = 0; t < r.alloc.size(); ++t)
      out += ',' + format_double(r.alloc[t]) + ',' + format_double(r.util[t]);
    out += '\n';
  }
  return out;
}

void write_trace_csv(const std::string& path, const RunTrace& trace) { write_file_atomic(path, trace_to_csv(trace)); }

RunSummary summarize(const RunTrace& trace, double qos_ms) {
  RunSummary s;
  s.intervals = trace.rows.size();
  if (trace.rows.empty()) return s;
  std::size_t met = 0;
  double sum = 0.0;
  for (const auto& r : trace.rows) {
    if (r.latency_ms[kPercentiles - 1] <= qos_ms) ++met;
    sum += r.total_cpu;
    s.max_cpu = std::max(s.max_cpu, r.total_cpu);
  }
  s.qos_met = static_cast<double>(met) / static_cast<double>(s.intervals);
  s.mean_cpu = sum / static_cast<double>(s.intervals);
  return s;
}

RunSummary summarize_csv(const std::string& csv, double qos_ms) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("summarize_csv: empty input");
  const auto header = split(line, ',');
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ConfigError("summarize_csv: missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_p99 = col("p99"), c_cpu = col("total_cpu");
  RunTrace t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != header.size()) throw ConfigError("summarize_csv: ragged row");
    TraceRow r;
    r.latency_ms[kPercentiles - 1] = parse_double(f[c_p99]);
    r.total_cpu = parse_double(f[c_cpu]);
    t.rows.push_back(std::move(r));
  }
  return summarize(t, qos_ms);
}

std::string summary_line(const RunSummary& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "intervals=%zu qos_met=%.4f mean_cpu=%.3f max_cpu=%.3f", s.intervals, s.qos_met,
                s.mean_cpu, s.max_cpu);
  return buf;
}

std::vector<CompareRow> compare(const ExperimentConfig& cfg, const std::vector<ManagerKind>& managers,
                                const std::vector<int>& loads, const SinanModels* models) {
  std::vector<CompareRow> rows;
  for (auto m : managers) {
    for (int u : loads) {
      CompareRow r;
      r.manager = m;
      r.users = u;
      r.summary = summarize(run_scenario(cfg, m, u, models), cfg.qos_ms);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

std::string compare_to_csv(const std::vector<CompareRow>& rows) {
  std::string out = "manager,users,label,intervals,qos_met,mean_cpu,max_cpu\n";
  for (const auto& r : rows) {
    out += to_string(r.manager) + ',' + std::to_string(r.users) + ',' + r.label + ',' +
           std::to_string(r.summary.intervals) + ',' + format_double(r.summary.qos_met) + ',' +
           format_double(r.summary.mean_cpu) + ',' + format_double(r.summary.max_cpu) + '\n';
  }
  return out;
}

std::string compare_table(const std::vector<CompareRow>& rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-16s %6s %-8s %8s %9s %9s\n", "manager", "users", "label", "qos_met", "mean_cpu",
                "max_cpu");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %6d %-8s %8.4f %9.3f %9.3f\n", to_string(r.manager).c_str(), r.users,
                  r.label.c_str(), r.summary.qos_met, r.summary.mean_cpu, r.summary.max_cpu);
    out += buf;
  }
  return out;
}

ImportanceReport explain_traces(const ExperimentConfig& cfg, const CnnModel& cnn,
                                const std::vector<std::vector<TraceStep>>& traces) {
  // Violation windows across all traces; only if none exist anywhere do we
  // fall back to the slowest intervals.
  std::vector<std::pair<std::size_t, std::size_t>> picks;  // (trace, end index)
  std::vector<std::vector<IntervalMetrics>> hists;
  for (const auto& tr : traces) {
    std::vector<IntervalMetrics> h;
    for (const auto& s : tr) h.push_back(s.metrics);
    hists.push_back(std::move(h));
  }
  for (std::size_t k = 0; k < traces.size(); ++k) {
    for (std::size_t i = static_cast<std::size_t>(std::max(0, cfg.steps - 1)); i + 1 < hists[k].size(); ++i)
      if (hists[k][i + 1].p99() > cfg.qos_ms) picks.emplace_back(k, i);
  }
  if (picks.empty()) {
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t k = 0; k < traces.size(); ++k)
      for (std::size_t i = static_cast<std::size_t>(std::max(0, cfg.steps - 1)); i + 1 < hists[k].size(); ++i)
        all.emplace_back(k, i);
    std::stable_sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
      return hists[a.first][a.second + 1].p99() > hists[b.first][b.second + 1].p99();
    });
    all.resize(std::min(all.size(), cfg.explain.fallback_samples));
    std::sort(all.begin(), all.end());
    picks = std::move(all);
  }
  std::vector<TelemetryWindow> windows;
  std::vector<std::size_t> where;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& h : hists) {
    offsets.push_back(offset);
    offset += h.size();
  }
  for (const auto& [k, i] : picks) {
    windows.push_back(build_window(hists[k], i, cfg.steps, traces[k][i + 1].alloc, cnn.norms()));
    where.push_back(offsets[k] + i);
  }
  return perturb_importance(cnn, windows, cfg.explain.factors, cfg.explain.granularity, &cfg.graph, std::move(where));
}

std::string sha256_file(const std::string& path) {
  const std::string data = read_file(path);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw RuntimeError("sha256 failed for " + path);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir) {
  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const ConfigError& e) {
      throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
      throw StageError(name, e.what(), false);
    }
  };
  PipelineResult res;
  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  std::vector<std::string> artifacts;

  CollectOutput data = stage("collect", [&] {
    auto d = collect_data(cfg);
    save_dataset((out / "dataset.csv").string(), d.samples, static_cast<int>(cfg.graph.num_tiers()), cfg.steps);
    return d;
  });
  artifacts.push_back("dataset.csv");

  SinanModels models = stage("train", [&] {
    auto m = train_models(cfg, data.samples, data.norms, &res.train);
    save_models(out_dir, m);
    return m;
  });
  for (const char* f : {"cnn.txt", "bt.txt", "thresholds.json"}) artifacts.push_back(f);

  const auto managers = cfg.run.compare.empty() ? std::vector<ManagerKind>{cfg.run.manager} : cfg.run.compare;
  const auto loads = cfg.run.loads.empty() ? std::vector<int>{cfg.workload.users} : cfg.run.loads;
  stage("run", [&] {
    for (auto m : managers) {
      for (int u : loads) {
        const auto trace = run_scenario(cfg, m, u, &models);
        const std::string name = "run_" + to_string(m) + "_" + std::to_string(u) + ".csv";
        write_trace_csv((out / name).string(), trace);
        artifacts.push_back(name);
        res.rows.push_back({m, u, "", summarize(trace, cfg.qos_ms)});
      }
    }
    write_file_atomic((out / "compare.csv").string(), compare_to_csv(res.rows));
    return 0;
  });
  artifacts.push_back("compare.csv");

  stage("manifest", [&] {
    json mf;
    mf["name"] = cfg.name;
    mf["graph"] = cfg.graph_path;
    mf["seeds"] = {{"experiment", cfg.seed},
                   {"workload", cfg.workload.seed},
                   {"cnn", cfg.train.cnn.seed},
                   {"bt", cfg.train.bt.seed}};
    json digests = json::object();
    for (const auto& a : artifacts) digests[a] = sha256_file((out / a).string());
    mf["digests"] = digests;
    json metrics;
    metrics["collect"] = {{"samples", data.samples.size()},
                          {"intervals", data.intervals},
                          {"recoveries", data.recoveries},
                          {"band_fraction",
                           band_fraction(data.samples, 0.8 * cfg.qos_ms, 1.2 * cfg.qos_ms)}};
    metrics["cnn"] = {{"train_rmse_ms", res.train.cnn_train_rmse_ms},
                      {"valid_rmse_ms", res.train.cnn_valid_rmse_ms},
                      {"valid_rmse_phi_ms", res.train.cnn_valid_rmse_phi_ms},
                      {"train_size", res.train.train_size},
                      {"valid_size", res.train.valid_size}};
    metrics["bt"] = {{"accuracy", res.train.bt_valid.accuracy},
                     {"false_positive", res.train.bt_valid.false_positive},
                     {"false_negative", res.train.bt_valid.false_negative},
                     {"trees", res.train.bt_trees}};
    metrics["thresholds"] = {{"p_u", models.p_u}, {"p_d", models.p_d}, {"rmse_valid_ms", models.rmse_valid_ms}};
    json runs = json::array();
    for (const auto& r : res.rows)
      runs.push_back({{"manager", to_string(r.manager)},
                      {"users", r.users},
                      {"qos_met", r.summary.qos_met},
                      {"mean_cpu", r.summary.mean_cpu},
                      {"max_cpu", r.summary.max_cpu}});
    metrics["runs"] = runs;
    mf["metrics"] = metrics;
    res.manifest_path = (out / "manifest.json").string();
    write_file_atomic(res.manifest_path, mf.dump(2) + "\n");
    return 0;
  });
  return res;
}

}  // namespace sinan
