#include "sinan/explain.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace sinan {

namespace {

const char* kChannelNames[kChannels] = {"cpu_util", "rss", "cache", "rx", "tx"};

struct Group {
  int tier;
  int channel;
};

}  // namespace

int ImportanceReport::rank_of_tier(int tier) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].tier == tier) return static_cast<int>(i);
  return -1;
}

ImportanceReport perturb_importance(const CnnModel& cnn, const std::vector<TelemetryWindow>& samples,
                                    const std::vector<double>& factors, ImportanceGranularity granularity,
                                    const ServiceGraph* graph, std::vector<std::size_t> sample_intervals) {
  if (samples.empty()) throw RuntimeError("perturb_importance: no samples; collect more violation intervals");
  if (factors.empty()) throw RuntimeError("perturb_importance: no perturbation factors");
  for (double f : factors)
    if (!(f > 0.0 && f <= 2.0)) throw ConfigError("perturb_importance: factors must lie in (0, 2]");

  const int tiers = samples.front().tiers;
  const int steps = samples.front().steps;
  std::vector<Group> groups;
  for (int t = 0; t < tiers; ++t) {
    if (granularity == ImportanceGranularity::Tier)
      groups.push_back({t, -1});
    else
      for (int c = 0; c < kChannels; ++c) groups.push_back({t, c});
  }

  const std::size_t nf = factors.size();
  const std::size_t cols = 1 + groups.size() * nf;
  // Normal equations; every row is an intercept plus at most one indicator.
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(cols));
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cols));
  auto add_row = [&](std::size_t indicator, double y) {
    xtx(0, 0) += 1.0;
    xty(0) += y;
    if (indicator == 0) return;
    const auto j = static_cast<Eigen::Index>(indicator);
    xtx(0, j) += 1.0;
    xtx(j, 0) += 1.0;
    xtx(j, j) += 1.0;
    xty(j) += y;
  };

  for (const auto& w : samples) {
    if (w.tiers != tiers || w.steps != steps) throw ConfigError("perturb_importance: sample shape mismatch");
    add_row(0, cnn.forward(w).y[kPercentiles - 1]);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (std::size_t k = 0; k < nf; ++k) {
        TelemetryWindow p = w;
        for (int s = 0; s < steps; ++s) {
          for (int c = 0; c < kChannels; ++c) {
            if (groups[g].channel >= 0 && groups[g].channel != c) continue;
            p.rh(groups[g].tier, s, c) *= factors[k];
          }
        }
        add_row(1 + g * nf + k, cnn.forward(p).y[kPercentiles - 1]);
      }
    }
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xtx);
  if (qr.rank() < static_cast<Eigen::Index>(cols))
    throw RuntimeError("perturb_importance: regression is rank deficient; add samples or factors");
  const Eigen::VectorXd beta = qr.solve(xty);

  ImportanceReport rep;
  rep.factors = factors;
  rep.sample_count = samples.size();
  rep.sample_intervals = std::move(sample_intervals);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    ImportanceEntry e;
    e.tier = groups[g].tier;
    e.channel = groups[g].channel;
    e.name = graph && static_cast<std::size_t>(e.tier) < graph->num_tiers() ? graph->tiers[e.tier].name
                                                                             : "tier" + std::to_string(e.tier);
    if (e.channel >= 0) e.name += ":" + std::string(kChannelNames[e.channel]);
    for (std::size_t k = 0; k < nf; ++k) {
      double b = beta(static_cast<Eigen::Index>(1 + g * nf + k));
      // An identity perturbation cannot move the prediction.
      if (factors[k] == 1.0) b = 0.0;
      e.coefficients.push_back(b);
      e.weight += std::abs(b);
    }
    rep.entries.push_back(std::move(e));
  }
  std::stable_sort(rep.entries.begin(), rep.entries.end(), [](const ImportanceEntry& a, const ImportanceEntry& b) {
    return std::abs(a.weight) > std::abs(b.weight);
  });
  return rep;
}

std::vector<std::size_t> violation_intervals(std::span<const IntervalMetrics> history, double qos_ms, int steps,
                                             std::size_t fallback) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = static_cast<std::size_t>(std::max(0, steps - 1)); i + 1 < history.size(); ++i)
    eligible.push_back(i);
  std::vector<std::size_t> out;
  for (auto i : eligible)
    if (history[i + 1].p99() > qos_ms) out.push_back(i);
  if (!out.empty()) return out;
  std::stable_sort(eligible.begin(), eligible.end(),
                   [&](std::size_t a, std::size_t b) { return history[a + 1].p99() > history[b + 1].p99(); });
  eligible.resize(std::min(eligible.size(), fallback));
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

void write_importance_csv(std::ostream& out, const ImportanceReport& report) {
  out << "rank,group,tier,channel,weight";
  for (double f : report.factors) out << ",coef_" << format_double(f);
  out << "\n";
  for (std::size_t i = 0; i < report.entries.size(); ++i) {
    const auto& e = report.entries[i];
    out << i + 1 << ',' << e.name << ',' << e.tier << ','
        << (e.channel >= 0 ? kChannelNames[e.channel] : "all") << ',' << format_double(e.weight);
    for (double c : e.coefficients) out << ',' << format_double(c);
    out << "\n";
  }
}

std::string importance_summary(const ImportanceReport& report, std::size_t top) {
  std::ostringstream ss;
  ss << "feature importance over " << report.sample_count << " samples, factors";
  for (double f : report.factors) ss << ' ' << format_double(f);
  ss << "\n";
  char line[160];
  for (std::size_t i = 0; i < report.entries.size() && i < top; ++i) {
    std::snprintf(line, sizeof line, "%3zu  %-32s %10.3f\n", i + 1, report.entries[i].name.c_str(),
                  report.entries[i].weight);
    ss << line;
  }
  return ss.str();
}

}  // namespace sinan
