#include "sinan/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace sinan {

namespace {

double positive_or_one(double v) { return v > 1e-12 ? v : 1.0; }

double p99_of(std::vector<double> xs) {
  if (xs.empty()) return 1.0;
  std::sort(xs.begin(), xs.end());
  return percentile(xs, 0.99);
}

}  // namespace

TelemetryNorms TelemetryNorms::fit(const ServiceGraph& graph, std::span<const IntervalMetrics> history,
                                   double qos_ms) {
  const std::size_t n = graph.num_tiers();
  TelemetryNorms norms;
  norms.channel.assign(n, {1.0, 1.0, 1.0, 1.0, 1.0});
  norms.latency_ms = qos_ms;
  for (std::size_t i = 0; i < n; ++i) {
    norms.alloc_cores.push_back(graph.tiers[i].cpu_cap);
    double rss = 0.0, cache = 0.0;
    std::vector<double> rx, tx;
    for (const auto& m : history) {
      rss = std::max(rss, m.tiers[i].rss_mb);
      cache = std::max(cache, m.tiers[i].cache_mb);
      rx.push_back(m.tiers[i].rx_pkts);
      tx.push_back(m.tiers[i].tx_pkts);
    }
    norms.channel[i][1] = positive_or_one(rss);
    norms.channel[i][2] = positive_or_one(cache);
    norms.channel[i][3] = positive_or_one(p99_of(std::move(rx)));
    norms.channel[i][4] = positive_or_one(p99_of(std::move(tx)));
  }
  return norms;
}

std::vector<double> encode_allocation(const AllocationVector& alloc, const TelemetryNorms& norms) {
  if (alloc.size() != norms.alloc_cores.size()) throw ConfigError("allocation length does not match norms");
  std::vector<double> out(alloc.size());
  for (std::size_t i = 0; i < alloc.size(); ++i) out[i] = alloc.cores(i) / norms.alloc_cores[i];
  return out;
}

TelemetryWindow build_window(std::span<const IntervalMetrics> history, std::size_t end_index, int steps,
                             const AllocationVector& candidate, const TelemetryNorms& norms) {
  if (steps < 1) throw ConfigError("window length must be >= 1");
  if (end_index >= history.size() || end_index + 1 < static_cast<std::size_t>(steps)) {
    throw ConfigError("insufficient history: need " + std::to_string(steps) + " intervals ending at " +
                      std::to_string(end_index) + ", have " + std::to_string(history.size()));
  }
  const int n = static_cast<int>(norms.num_tiers());
  TelemetryWindow w;
  w.tiers = n;
  w.steps = steps;
  w.x_rh.assign(static_cast<std::size_t>(n) * steps * kChannels, 0.0);
  w.x_lh.assign(static_cast<std::size_t>(kPercentiles) * steps, 0.0);
  const std::size_t first = end_index + 1 - steps;
  for (int s = 0; s < steps; ++s) {
    const auto& m = history[first + s];
    if (static_cast<int>(m.tiers.size()) != n) throw ConfigError("history tier count does not match norms");
    for (int t = 0; t < n; ++t)
      for (int c = 0; c < kChannels; ++c) w.rh(t, s, c) = m.tiers[t].channel(c) / norms.channel[t][c];
    for (int p = 0; p < kPercentiles; ++p) w.x_lh[p * steps + s] = m.latency_ms[p] / norms.latency_ms;
  }
  w.x_rc = encode_allocation(candidate, norms);
  return w;
}

std::vector<TrainingSample> label_samples(std::span<const TraceStep> trace, double qos_ms, int steps, int horizon,
                                          const TelemetryNorms& norms) {
  const std::size_t len = trace.size();
  if (len < static_cast<std::size_t>(steps + horizon)) {
    throw ConfigError("trace too short: length " + std::to_string(len) + " < T + k = " +
                      std::to_string(steps + horizon));
  }
  std::vector<IntervalMetrics> history;
  history.reserve(len);
  for (const auto& s : trace) history.push_back(s.metrics);

  std::vector<TrainingSample> out;
  for (std::size_t t = steps; t + horizon < len; ++t) {
    TrainingSample s;
    s.window = build_window(history, t, steps, trace[t + 1].alloc, norms);
    s.y = history[t + 1].latency_ms;
    for (int j = 1; j <= horizon; ++j) {
      if (history[t + j].p99() > qos_ms) {
        s.v = 1;
        break;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset_csv(std::ostream& out, std::span<const TrainingSample> samples, int tiers, int steps) {
  out << "# sinan-dataset v1 tiers=" << tiers << " steps=" << steps << "\n";
  bool first = true;
  auto col = [&](const std::string& name) {
    if (!first) out << ',';
    out << name;
    first = false;
  };
  for (int t = 0; t < tiers; ++t)
    for (int s = 0; s < steps; ++s)
      for (int c = 0; c < kChannels; ++c)
        col("rh_" + std::to_string(t) + "_" + std::to_string(s) + "_" + std::to_string(c));
  for (int p = 0; p < kPercentiles; ++p)
    for (int s = 0; s < steps; ++s) col("lh_" + std::to_string(p) + "_" + std::to_string(s));
  for (int t = 0; t < tiers; ++t) col("rc_" + std::to_string(t));
  for (int p = 0; p < kPercentiles; ++p) col("y_p" + std::to_string(95 + p));
  col("v");
  out << "\n";

  for (const auto& sm : samples) {
    if (sm.window.tiers != tiers || sm.window.steps != steps) throw ConfigError("sample shape mismatch");
    std::string line;
    auto put = [&](double v) {
      if (!line.empty()) line += ',';
      line += format_double(v);
    };
    for (double v : sm.window.x_rh) put(v);
    for (double v : sm.window.x_lh) put(v);
    for (double v : sm.window.x_rc) put(v);
    for (double v : sm.y) put(v);
    line += ',';
    line += std::to_string(sm.v);
    out << line << "\n";
  }
}

std::vector<TrainingSample> read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("dataset: empty file");
  int tiers = 0, steps = 0;
  if (std::sscanf(line.c_str(), "# sinan-dataset v1 tiers=%d steps=%d", &tiers, &steps) != 2 || tiers < 1 ||
      steps < 1) {
    throw ConfigError("dataset: bad or unsupported version line");
  }
  if (!std::getline(in, line)) throw ConfigError("dataset: missing header row");
  const std::size_t n_rh = static_cast<std::size_t>(tiers) * steps * kChannels;
  const std::size_t n_lh = static_cast<std::size_t>(kPercentiles) * steps;
  const std::size_t width = n_rh + n_lh + tiers + kPercentiles + 1;
  if (split(line, ',').size() != width) throw ConfigError("dataset: header width mismatch");

  std::vector<TrainingSample> out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != width) throw ConfigError("dataset: row " + std::to_string(row) + " has wrong width");
    TrainingSample s;
    s.window.tiers = tiers;
    s.window.steps = steps;
    std::size_t k = 0;
    s.window.x_rh.resize(n_rh);
    for (auto& v : s.window.x_rh) v = parse_double(cells[k++]);
    s.window.x_lh.resize(n_lh);
    for (auto& v : s.window.x_lh) v = parse_double(cells[k++]);
    s.window.x_rc.resize(tiers);
    for (auto& v : s.window.x_rc) v = parse_double(cells[k++]);
    for (auto& v : s.y) v = parse_double(cells[k++]);
    s.v = static_cast<int>(parse_double(cells[k]));
    if (s.v != 0 && s.v != 1) throw ConfigError("dataset: row " + std::to_string(row) + " label not 0/1");
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const std::string& path, std::span<const TrainingSample> samples, int tiers, int steps) {
  std::ostringstream ss;
  write_dataset_csv(ss, samples, tiers, steps);
  write_file_atomic(path, ss.str());
}

std::vector<TrainingSample> load_dataset(const std::string& path) {
  std::istringstream ss(read_file(path));
  return read_dataset_csv(ss);
}

void write_norms(std::ostream& out, const TelemetryNorms& norms) {
  out << "norms " << norms.num_tiers() << " " << format_double(norms.latency_ms) << "\n";
  for (std::size_t t = 0; t < norms.num_tiers(); ++t) {
    out << format_double(norms.alloc_cores[t]);
    for (double c : norms.channel[t]) out << " " << format_double(c);
    out << "\n";
  }
}

TelemetryNorms read_norms(std::istream& in) {
  std::string tag, lat;
  std::size_t n = 0;
  if (!(in >> tag >> n >> lat) || tag != "norms") throw ConfigError("norms: bad header");
  TelemetryNorms norms;
  norms.latency_ms = parse_double(lat);
  norms.channel.resize(n);
  norms.alloc_cores.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    std::string tok;
    if (!(in >> tok)) throw ConfigError("norms: truncated");
    norms.alloc_cores[t] = parse_double(tok);
    for (auto& c : norms.channel[t]) {
      if (!(in >> tok)) throw ConfigError("norms: truncated");
      c = parse_double(tok);
    }
  }
  return norms;
}

}  // namespace sinan
