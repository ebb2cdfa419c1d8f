#include "sinan/boosted_trees.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "sinan/common.hpp"

namespace sinan {

namespace {

// Margins beyond this saturate; keeps sigmoid strictly inside (0, 1).
constexpr double kMaxMargin = 30.0;
// Newton steps are clipped so nearly pure leaves stay finite.
constexpr double kMaxLeaf = 5.0;

double logit(double p) { return std::log(p / (1.0 - p)); }

double log_loss(std::span<const double> margins, std::span<const int> labels, const std::vector<std::size_t>& idx) {
  double s = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double p = sigmoid(std::clamp(margins[k], -kMaxMargin, kMaxMargin));
    s -= labels[idx[k]] ? std::log(p) : std::log(1.0 - p);
  }
  return idx.empty() ? 0.0 : s / static_cast<double>(idx.size());
}

struct SplitChoice {
  double gain = 0.0;
  int feature = -1;
  double threshold = 0.0;
};

struct NodeStats {
  double sum_r = 0.0;
  double sum_h = 0.0;
  int count = 0;
};

// Relabels nodes in preorder, the layout the text format reproduces.
BtTree to_preorder(const BtTree& in) {
  BtTree out;
  std::function<int(int)> visit = [&](int k) -> int {
    const int at = static_cast<int>(out.nodes.size());
    out.nodes.push_back(in.nodes[k]);
    if (in.nodes[k].feature >= 0) {
      const int l = visit(in.nodes[k].left);
      const int r = visit(in.nodes[k].right);
      out.nodes[at].left = l;
      out.nodes[at].right = r;
    }
    return at;
  };
  visit(0);
  return out;
}

// Grows one regression tree on residuals r with Newton leaves sum(r)/sum(h).
BtTree grow_tree(const FeatureMatrix& X, const std::vector<std::size_t>& rows,
                 const std::vector<std::vector<int>>& order, const std::vector<double>& r,
                 const std::vector<double>& h, const BtTrainConfig& cfg) {
  const std::size_t n = rows.size();
  const std::size_t d = X.cols;
  BtTree tree;
  std::vector<NodeStats> stats(1);
  tree.nodes.emplace_back();
  std::vector<int> node_of(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    stats[0].sum_r += r[i];
    stats[0].sum_h += h[i];
    ++stats[0].count;
  }

  std::vector<int> frontier{0};
  for (int depth = 0; depth < cfg.max_depth && !frontier.empty(); ++depth) {
    std::vector<int> slot(tree.nodes.size(), -1);
    std::vector<int> open;
    for (int node : frontier) {
      if (stats[node].count >= 2 * cfg.min_samples_leaf) {
        slot[node] = static_cast<int>(open.size());
        open.push_back(node);
      }
    }
    if (open.empty()) break;

    std::vector<SplitChoice> best(open.size());
    std::vector<int> cnt(open.size());
    std::vector<double> sum(open.size()), last(open.size());
    std::vector<char> seen(open.size());
    for (std::size_t f = 0; f < d; ++f) {
      std::fill(cnt.begin(), cnt.end(), 0);
      std::fill(sum.begin(), sum.end(), 0.0);
      std::fill(seen.begin(), seen.end(), 0);
      for (int i : order[f]) {
        const int s = slot[node_of[i]];
        if (s < 0) continue;
        const double v = X.data[rows[i] * d + f];
        const auto& st = stats[open[s]];
        if (seen[s] && v > last[s] && cnt[s] >= cfg.min_samples_leaf &&
            st.count - cnt[s] >= cfg.min_samples_leaf) {
          const double right = st.sum_r - sum[s];
          const double gain = sum[s] * sum[s] / cnt[s] + right * right / (st.count - cnt[s]) -
                              st.sum_r * st.sum_r / st.count;
          if (gain > best[s].gain + 1e-12) {
            double thr = 0.5 * (last[s] + v);
            if (!(thr < v)) thr = last[s];
            best[s] = {gain, static_cast<int>(f), thr};
          }
        }
        ++cnt[s];
        sum[s] += r[i];
        last[s] = v;
        seen[s] = 1;
      }
    }

    std::vector<int> next;
    for (std::size_t s = 0; s < open.size(); ++s) {
      if (best[s].feature < 0) continue;
      const int node = open[s];
      tree.nodes[node].feature = best[s].feature;
      tree.nodes[node].threshold = best[s].threshold;
      tree.nodes[node].left = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes[node].right = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      stats.resize(tree.nodes.size());
      next.push_back(tree.nodes[node].left);
      next.push_back(tree.nodes[node].right);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& nd = tree.nodes[node_of[i]];
      if (nd.feature < 0 || slot[node_of[i]] < 0) continue;
      const int child = X.data[rows[i] * d + nd.feature] <= nd.threshold ? nd.left : nd.right;
      node_of[i] = child;
      stats[child].sum_r += r[i];
      stats[child].sum_h += h[i];
      ++stats[child].count;
    }
    frontier = std::move(next);
  }

  for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
    auto& nd = tree.nodes[k];
    if (nd.feature >= 0) continue;
    const double v = stats[k].sum_r / std::max(stats[k].sum_h, 1e-12);
    nd.value = std::clamp(v, -kMaxLeaf, kMaxLeaf);
  }
  return to_preorder(tree);
}

}  // namespace

void FeatureMatrix::push_row(std::span<const double> values) {
  if (rows == 0 && cols == 0) cols = values.size();
  if (values.size() != cols) throw ConfigError("feature row width mismatch");
  data.insert(data.end(), values.begin(), values.end());
  ++rows;
}

double BtTree::score(std::span<const double> x) const {
  int k = 0;
  while (nodes[k].feature >= 0) k = x[nodes[k].feature] <= nodes[k].threshold ? nodes[k].left : nodes[k].right;
  return nodes[k].value;
}

double BtTree::max_abs_leaf() const {
  double m = 0.0;
  for (const auto& n : nodes)
    if (n.feature < 0) m = std::max(m, std::abs(n.value));
  return m;
}

double sigmoid(double f) {
  if (f >= 0) return 1.0 / (1.0 + std::exp(-f));
  const double e = std::exp(f);
  return e / (1.0 + e);
}

double two_score_probability(double s_v, double s_nv) {
  const double m = std::max(s_v, s_nv);
  const double a = std::exp(s_v - m);
  const double b = std::exp(s_nv - m);
  return a / (a + b);
}

double BtModel::margin(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != num_features)
    throw ConfigError("bt: feature width " + std::to_string(x.size()) + " != " + std::to_string(num_features));
  double f = base_score;
  for (const auto& t : trees) f += shrinkage * t.score(x);
  return f;
}

double BtModel::predict_proba(std::span<const double> x) const {
  return sigmoid(std::clamp(margin(x), -kMaxMargin, kMaxMargin));
}

bool operator==(const BtModel& a, const BtModel& b) {
  if (a.num_features != b.num_features || a.base_score != b.base_score || a.shrinkage != b.shrinkage ||
      a.max_depth != b.max_depth || a.trees.size() != b.trees.size())
    return false;
  for (std::size_t t = 0; t < a.trees.size(); ++t) {
    const auto& x = a.trees[t].nodes;
    const auto& y = b.trees[t].nodes;
    if (x.size() != y.size()) return false;
    for (std::size_t k = 0; k < x.size(); ++k) {
      if (x[k].feature != y[k].feature || x[k].threshold != y[k].threshold || x[k].value != y[k].value ||
          x[k].left != y[k].left || x[k].right != y[k].right)
        return false;
    }
  }
  return true;
}

BtModel bt_train(const FeatureMatrix& X, std::span<const int> labels, const BtTrainConfig& cfg) {
  if (X.rows != labels.size()) throw ConfigError("bt_train: label count does not match rows");
  if (X.rows == 0) throw ConfigError("bt_train: empty dataset");
  if (cfg.max_trees < 0 || cfg.max_depth < 1 || !(cfg.shrinkage > 0.0 && cfg.shrinkage <= 1.0) ||
      cfg.min_samples_leaf < 1 || cfg.patience < 1)
    throw ConfigError("bt_train: configuration values must be positive, shrinkage in (0,1]");

  BtModel model;
  model.num_features = static_cast<int>(X.cols);
  model.shrinkage = cfg.shrinkage;
  model.max_depth = cfg.max_depth;

  auto prior = [&](const std::vector<std::size_t>& idx) {
    std::size_t pos = 0;
    for (std::size_t i : idx) pos += labels[i] ? 1 : 0;
    return std::pair<std::size_t, std::size_t>{pos, idx.size()};
  };
  std::vector<std::size_t> all(X.rows);
  std::iota(all.begin(), all.end(), 0);
  auto [pos_all, n_all] = prior(all);
  if (pos_all == 0 || pos_all == n_all) {
    model.base_score = logit((pos_all + 0.5) / (n_all + 1.0));
    return model;
  }

  std::vector<std::size_t> train = all, valid;
  if (X.rows >= 10 && cfg.validation_fraction > 0.0) {
    std::tie(train, valid) = split_indices(X.rows, cfg.validation_fraction, cfg.seed);
    std::sort(train.begin(), train.end());
    std::sort(valid.begin(), valid.end());
  }
  auto [pos, n] = prior(train);
  if (pos == 0 || pos == n) {
    model.base_score = logit((pos + 0.5) / (n + 1.0));
    return model;
  }
  model.base_score = logit(static_cast<double>(pos) / static_cast<double>(n));

  std::vector<std::vector<int>> order(X.cols, std::vector<int>(train.size()));
  for (std::size_t f = 0; f < X.cols; ++f) {
    std::iota(order[f].begin(), order[f].end(), 0);
    std::stable_sort(order[f].begin(), order[f].end(), [&](int a, int b) {
      return X.data[train[a] * X.cols + f] < X.data[train[b] * X.cols + f];
    });
  }

  std::vector<double> f_train(train.size(), model.base_score), f_valid(valid.size(), model.base_score);
  std::vector<double> r(train.size()), h(train.size());
  double best_loss = log_loss(f_valid, labels, valid);
  std::size_t best_count = 0;
  int since_best = 0;

  for (int t = 0; t < cfg.max_trees; ++t) {
    for (std::size_t i = 0; i < train.size(); ++i) {
      const double p = sigmoid(std::clamp(f_train[i], -kMaxMargin, kMaxMargin));
      r[i] = labels[train[i]] - p;
      h[i] = p * (1.0 - p);
    }
    BtTree tree = grow_tree(X, train, order, r, h, cfg);
    for (std::size_t i = 0; i < train.size(); ++i) f_train[i] += cfg.shrinkage * tree.score(X.row(train[i]));
    for (std::size_t i = 0; i < valid.size(); ++i) f_valid[i] += cfg.shrinkage * tree.score(X.row(valid[i]));
    model.trees.push_back(std::move(tree));

    if (valid.empty()) continue;
    const double loss = log_loss(f_valid, labels, valid);
    if (loss < best_loss - 1e-12) {
      best_loss = loss;
      best_count = model.trees.size();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (!valid.empty()) model.trees.resize(best_count);
  return model;
}

double bt_predict(const BtModel& model, std::span<const double> latent, std::span<const double> alloc) {
  std::vector<double> x;
  x.reserve(latent.size() + alloc.size());
  x.insert(x.end(), latent.begin(), latent.end());
  x.insert(x.end(), alloc.begin(), alloc.end());
  return model.predict_proba(x);
}

BtMetrics bt_evaluate(const BtModel& model, const FeatureMatrix& X, std::span<const int> labels, double threshold) {
  BtMetrics m;
  if (X.rows == 0) return m;
  std::size_t correct = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < X.rows; ++i) {
    const int pred = model.predict_proba(X.row(i)) >= threshold ? 1 : 0;
    if (pred == labels[i]) ++correct;
    else if (pred == 1) ++fp;
    else ++fn;
  }
  const double n = static_cast<double>(X.rows);
  m.accuracy = correct / n;
  m.false_positive = fp / n;
  m.false_negative = fn / n;
  return m;
}

void write_bt(std::ostream& out, const BtModel& model) {
  out << "sinan-bt 1\n";
  out << "features " << model.num_features << "\n";
  out << "base_score " << format_double(model.base_score) << "\n";
  out << "shrinkage " << format_double(model.shrinkage) << "\n";
  out << "max_depth " << model.max_depth << "\n";
  out << "trees " << model.trees.size() << "\n";
  for (const auto& t : model.trees) {
    std::vector<std::string> lines;
    std::function<void(int)> emit = [&](int k) {
      const auto& n = t.nodes[k];
      if (n.feature < 0) {
        lines.push_back("L " + format_double(n.value));
      } else {
        lines.push_back("S " + std::to_string(n.feature) + " " + format_double(n.threshold));
        emit(n.left);
        emit(n.right);
      }
    };
    emit(0);
    out << "tree " << lines.size() << "\n";
    for (const auto& l : lines) out << l << "\n";
  }
}

BtModel read_bt(std::istream& in) {
  std::string tag, tok;
  int version = 0;
  if (!(in >> tag >> version) || tag != "sinan-bt") throw ConfigError("bt file: bad magic");
  if (version != 1) throw ConfigError("bt file: unsupported version " + std::to_string(version));
  BtModel m;
  std::size_t n_trees = 0;
  auto expect = [&](const char* want) {
    if (!(in >> tag) || tag != want) throw ConfigError(std::string("bt file: expected ") + want);
  };
  expect("features");
  in >> m.num_features;
  expect("base_score");
  in >> tok;
  m.base_score = parse_double(tok);
  expect("shrinkage");
  in >> tok;
  m.shrinkage = parse_double(tok);
  expect("max_depth");
  in >> m.max_depth;
  expect("trees");
  if (!(in >> n_trees)) throw ConfigError("bt file: bad tree count");
  for (std::size_t t = 0; t < n_trees; ++t) {
    std::size_t count = 0;
    expect("tree");
    if (!(in >> count) || count == 0) throw ConfigError("bt file: bad node count");
    BtTree tree;
    std::size_t read = 0;
    std::function<int()> parse = [&]() -> int {
      if (read++ >= count) throw ConfigError("bt file: node list overruns its count");
      std::string kind;
      if (!(in >> kind)) throw ConfigError("bt file: truncated tree");
      const int k = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      if (kind == "L") {
        in >> tok;
        tree.nodes[k].value = parse_double(tok);
      } else if (kind == "S") {
        int feature = -1;
        in >> feature >> tok;
        if (feature < 0 || feature >= m.num_features) throw ConfigError("bt file: split feature out of range");
        tree.nodes[k].feature = feature;
        tree.nodes[k].threshold = parse_double(tok);
        const int l = parse();
        const int r = parse();
        tree.nodes[k].left = l;
        tree.nodes[k].right = r;
      } else {
        throw ConfigError("bt file: unknown node kind '" + kind + "'");
      }
      return k;
    };
    parse();
    if (read != count) throw ConfigError("bt file: node count mismatch");
    m.trees.push_back(std::move(tree));
  }
  return m;
}

void save_bt(const std::string& path, const BtModel& model) {
  std::ostringstream ss;
  write_bt(ss, model);
  write_file_atomic(path, ss.str());
}

BtModel load_bt(const std::string& path) {
  std::istringstream ss(read_file(path));
  return read_bt(ss);
}

}  // namespace sinan
