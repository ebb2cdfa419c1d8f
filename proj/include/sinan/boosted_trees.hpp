#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace sinan {

/// Dense row-major feature matrix.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  void push_row(std::span<const double> values);
};

struct BtTrainConfig {
  int max_trees = 200;
  int max_depth = 4;
  double shrinkage = 0.1;
  int min_samples_leaf = 5;
  int patience = 20;  // trees without validation improvement before stopping
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
};

/// Split nodes send x[feature] <= threshold left. Leaves have feature -1.
struct BtNode {
  int feature = -1;
  double threshold = 0.0;
  double value = 0.0;
  int left = -1;
  int right = -1;
};

struct BtTree {
  std::vector<BtNode> nodes;  // nodes[0] is the root
  double score(std::span<const double> x) const;
  double max_abs_leaf() const;
};

/// Gradient-boosted regression trees on the logistic loss. A single score
/// f per input stands for the pair (s_V, s_NV) = (f/2, -f/2); the softmax
/// over the pair equals sigmoid(f).
class BtModel {
 public:
  int num_features = 0;
  double base_score = 0.0;
  double shrinkage = 0.1;
  int max_depth = 4;
  std::vector<BtTree> trees;

  double margin(std::span<const double> x) const;
  /// Violation probability, strictly inside (0, 1).
  double predict_proba(std::span<const double> x) const;

  friend bool operator==(const BtModel& a, const BtModel& b);
};

double sigmoid(double f);
/// e^{s_V} / (e^{s_V} + e^{s_NV}), evaluated stably.
double two_score_probability(double s_violation, double s_no_violation);

/// Trains on labels in {0,1}. With only one class present the result is a
/// tree-less model predicting the smoothed prior (pos + 0.5) / (n + 1).
BtModel bt_train(const FeatureMatrix& features, std::span<const int> labels, const BtTrainConfig& cfg);

/// Scores the concatenation (latent, encoded allocation).
double bt_predict(const BtModel& model, std::span<const double> latent, std::span<const double> alloc);

struct BtMetrics {
  double accuracy = 0.0;
  double false_positive = 0.0;  // fraction of all samples
  double false_negative = 0.0;  // fraction of all samples
};
BtMetrics bt_evaluate(const BtModel& model, const FeatureMatrix& features, std::span<const int> labels,
                      double threshold = 0.5);

/// Text format: "sinan-bt 1", header fields, then one preorder node list
/// per tree ("S <feature> <threshold>" or "L <value>").
void write_bt(std::ostream& out, const BtModel& model);
BtModel read_bt(std::istream& in);
void save_bt(const std::string& path, const BtModel& model);
BtModel load_bt(const std::string& path);

}  // namespace sinan
