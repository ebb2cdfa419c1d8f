#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sinan/common.hpp"
#include "sinan/telemetry.hpp"

namespace sinan {

/// Layer sizes of the latency predictor.
///
///   x_rh [N][T][F] -> conv3x3(conv1) -> relu -> conv3x3(conv2) -> relu -> flatten
///   x_lh [M][T]    -> dense(encoder) -> relu
///   x_rc [N]       -> dense(encoder) -> relu
///   concat -> dense(hidden) -> relu -> dense(latent) -> relu  == L_f
///   L_f -> dense(M) * output_scale_ms                         == y_L
///
/// Convolutions run over the (tier, time) plane with zero padding, so
/// neighbouring tiers share filters.
struct CnnArch {
  int tiers = 1;
  int steps = 5;
  int conv1 = 8;
  int conv2 = 16;
  int encoder = 16;
  int hidden = 64;
  int latent = 32;
  double output_scale_ms = 100.0;

  std::size_t param_count() const;
  friend bool operator==(const CnnArch&, const CnnArch&) = default;
};

/// Piecewise latency compression: identity up to the knee, then
/// knee + u / (1 + alpha * u) with u = x - knee.
struct LossConfig {
  double knee_ms = 100.0;
  double alpha = 0.01;
};

double phi(double x, const LossConfig& cfg);
/// Derivative of phi; 1 on the identity branch.
double phi_prime(double x, const LossConfig& cfg);
/// Mean over components of (phi(pred_i) - phi(truth_i))^2.
double scaled_loss(std::span<const double> pred, std::span<const double> truth, const LossConfig& cfg);

struct TrainConfig {
  double lr = 0.001;  // base rate; fine-tuning runs at lr / 100
  int batch = 64;
  int epochs = 20;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool fine_tune = false;
  double validation_fraction = 0.1;

  double effective_lr() const { return fine_tune ? lr / 100.0 : lr; }
};

struct CnnOutput {
  std::array<double, kPercentiles> y{};       // ms, nondecreasing
  std::array<double, kPercentiles> y_raw{};   // ms, before monotone repair
  std::vector<double> latent;
};

struct RmseEntry {
  double train_ms = 0.0;
  double valid_ms = 0.0;
};

class CnnModel {
 public:
  CnnModel() = default;
  /// Seeded uniform initialisation, bound sqrt(6 / fan_in); biases zero.
  CnnModel(const CnnArch& arch, TelemetryNorms norms, std::uint64_t seed);

  const CnnArch& arch() const { return arch_; }
  const TelemetryNorms& norms() const { return norms_; }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  /// Output bias in ms (what y_L equals when every weight is zero).
  std::array<double, kPercentiles> output_bias_ms() const;
  void set_output_bias_ms(const std::array<double, kPercentiles>& bias);
  /// Zeroes the convolution filters and biases (used to build x_rh-blind models).
  void zero_conv();
  /// Zeroes every parameter except the output bias.
  void zero_weights();

  CnnOutput forward(const TelemetryWindow& window) const;

  /// Adds d(scaled_loss)/d(params) for one sample into `grad` and returns
  /// the sample's loss. The loss is taken on the raw (unrepaired) head.
  double accumulate_gradient(const TrainingSample& sample, const LossConfig& loss, std::span<double> grad) const;

  /// Indices of parameters belonging to each layer, in forward order.
  struct LayerRange {
    std::string name;
    std::size_t begin = 0;
    std::size_t end = 0;
    bool is_bias = false;
  };
  std::vector<LayerRange> layers() const;

  friend bool operator==(const CnnModel& a, const CnnModel& b) {
    return a.arch_ == b.arch_ && a.params_ == b.params_;
  }

 private:
  struct Offsets;
  struct Workspace;
  Offsets offsets() const;
  void check_shape(const TelemetryWindow& w) const;
  void run_forward(const TelemetryWindow& w, Workspace& ws) const;

  CnnArch arch_;
  TelemetryNorms norms_;
  std::vector<double> params_;
};

struct TrainResult {
  std::vector<RmseEntry> rmse_history;  // entry 0 is before any update
  std::size_t train_size = 0;
  std::size_t valid_size = 0;
  std::vector<std::size_t> valid_indices;  // into the dataset
};

/// Splits 9:1 after a seeded shuffle, then runs minibatch SGD with weight
/// decay. The loss is divided by output_scale_ms^2 so the learning rate is
/// independent of the latency unit. Throws ConfigError on an empty dataset.
TrainResult cnn_train(CnnModel& model, std::span<const TrainingSample> dataset, const TrainConfig& train,
                      const LossConfig& loss);

/// Root mean squared error in ms over all percentiles of the repaired output.
double cnn_rmse(const CnnModel& model, std::span<const TrainingSample> samples);

/// Largest relative disagreement between the analytic gradient and central
/// differences (step 1e-4) over `count` parameters chosen at random but
/// covering every layer. Gradients below 1e-4 in magnitude are compared
/// absolutely, which keeps round-off in the loss from dominating.
double finite_diff_check(const CnnModel& model, const TrainingSample& sample, const LossConfig& loss,
                         std::uint64_t seed, int count = 100);

void write_cnn(std::ostream& out, const CnnModel& model);
CnnModel read_cnn(std::istream& in);
void save_cnn(const std::string& path, const CnnModel& model);
CnnModel load_cnn(const std::string& path);

}  // namespace sinan
