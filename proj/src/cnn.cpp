#include "sinan/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace sinan {

double phi(double x, const LossConfig& cfg) {
  if (x <= cfg.knee_ms) return x;
  const double u = x - cfg.knee_ms;
  return cfg.knee_ms + u / (1.0 + cfg.alpha * u);
}

double phi_prime(double x, const LossConfig& cfg) {
  if (x <= cfg.knee_ms) return 1.0;
  const double d = 1.0 + cfg.alpha * (x - cfg.knee_ms);
  return 1.0 / (d * d);
}

double scaled_loss(std::span<const double> pred, std::span<const double> truth, const LossConfig& cfg) {
  if (pred.size() != truth.size()) throw ConfigError("scaled_loss: length mismatch");
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = phi(pred[i], cfg) - phi(truth[i], cfg);
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

struct CnnModel::Offsets {
  std::size_t conv1_w, conv1_b, conv2_w, conv2_b, lh_w, lh_b, rc_w, rc_b, fc_w, fc_b, lat_w, lat_b, out_w, out_b,
      total;
  std::size_t flat;   // conv2 * tiers * steps
  std::size_t concat; // flat + 2 * encoder
};

CnnModel::Offsets CnnModel::offsets() const {
  const auto& a = arch_;
  const std::size_t plane = static_cast<std::size_t>(a.tiers) * a.steps;
  Offsets o{};
  std::size_t p = 0;
  auto take = [&](std::size_t n) {
    std::size_t at = p;
    p += n;
    return at;
  };
  o.flat = a.conv2 * plane;
  o.concat = o.flat + 2 * static_cast<std::size_t>(a.encoder);
  o.conv1_w = take(static_cast<std::size_t>(a.conv1) * kChannels * 9);
  o.conv1_b = take(a.conv1);
  o.conv2_w = take(static_cast<std::size_t>(a.conv2) * a.conv1 * 9);
  o.conv2_b = take(a.conv2);
  o.lh_w = take(static_cast<std::size_t>(a.encoder) * kPercentiles * a.steps);
  o.lh_b = take(a.encoder);
  o.rc_w = take(static_cast<std::size_t>(a.encoder) * a.tiers);
  o.rc_b = take(a.encoder);
  o.fc_w = take(static_cast<std::size_t>(a.hidden) * o.concat);
  o.fc_b = take(a.hidden);
  o.lat_w = take(static_cast<std::size_t>(a.latent) * a.hidden);
  o.lat_b = take(a.latent);
  o.out_w = take(static_cast<std::size_t>(kPercentiles) * a.latent);
  o.out_b = take(kPercentiles);
  o.total = p;
  return o;
}

std::size_t CnnArch::param_count() const {
  const std::size_t plane = static_cast<std::size_t>(tiers) * steps;
  const std::size_t concat = conv2 * plane + 2 * static_cast<std::size_t>(encoder);
  return conv1 * kChannels * 9 + conv1 + conv2 * conv1 * 9 + conv2 + encoder * kPercentiles * steps + encoder +
         encoder * tiers + encoder + hidden * concat + hidden + latent * hidden + latent + kPercentiles * latent +
         kPercentiles;
}

std::vector<CnnModel::LayerRange> CnnModel::layers() const {
  const auto o = offsets();
  return {{"conv1.w", o.conv1_w, o.conv1_b, false}, {"conv1.b", o.conv1_b, o.conv2_w, true},
          {"conv2.w", o.conv2_w, o.conv2_b, false}, {"conv2.b", o.conv2_b, o.lh_w, true},
          {"enc_lh.w", o.lh_w, o.lh_b, false},      {"enc_lh.b", o.lh_b, o.rc_w, true},
          {"enc_rc.w", o.rc_w, o.rc_b, false},      {"enc_rc.b", o.rc_b, o.fc_w, true},
          {"hidden.w", o.fc_w, o.fc_b, false},      {"hidden.b", o.fc_b, o.lat_w, true},
          {"latent.w", o.lat_w, o.lat_b, false},    {"latent.b", o.lat_b, o.out_w, true},
          {"out.w", o.out_w, o.out_b, false},       {"out.b", o.out_b, o.total, true}};
}

CnnModel::CnnModel(const CnnArch& arch, TelemetryNorms norms, std::uint64_t seed)
    : arch_(arch), norms_(std::move(norms)) {
  if (arch.tiers < 1 || arch.steps < 1 || arch.conv1 < 1 || arch.conv2 < 1 || arch.encoder < 1 ||
      arch.hidden < 1 || arch.latent < 1 || !(arch.output_scale_ms > 0.0)) {
    throw ConfigError("cnn: all layer sizes must be positive");
  }
  if (norms_.num_tiers() != static_cast<std::size_t>(arch.tiers)) throw ConfigError("cnn: norms/tier mismatch");
  const auto o = offsets();
  params_.assign(o.total, 0.0);
  Rng rng = make_rng(seed, 0xC44);
  auto fill = [&](std::size_t begin, std::size_t count, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> d(-bound, bound);
    for (std::size_t i = 0; i < count; ++i) params_[begin + i] = d(rng);
  };
  fill(o.conv1_w, o.conv1_b - o.conv1_w, kChannels * 9);
  fill(o.conv2_w, o.conv2_b - o.conv2_w, static_cast<std::size_t>(arch.conv1) * 9);
  fill(o.lh_w, o.lh_b - o.lh_w, static_cast<std::size_t>(kPercentiles) * arch.steps);
  fill(o.rc_w, o.rc_b - o.rc_w, arch.tiers);
  fill(o.fc_w, o.fc_b - o.fc_w, o.concat);
  fill(o.lat_w, o.lat_b - o.lat_w, arch.hidden);
  fill(o.out_w, o.out_b - o.out_w, arch.latent);
}

std::array<double, kPercentiles> CnnModel::output_bias_ms() const {
  const auto o = offsets();
  std::array<double, kPercentiles> b{};
  for (int i = 0; i < kPercentiles; ++i) b[i] = params_[o.out_b + i] * arch_.output_scale_ms;
  return b;
}

void CnnModel::set_output_bias_ms(const std::array<double, kPercentiles>& bias) {
  const auto o = offsets();
  for (int i = 0; i < kPercentiles; ++i) params_[o.out_b + i] = bias[i] / arch_.output_scale_ms;
}

void CnnModel::zero_conv() {
  const auto o = offsets();
  std::fill(params_.begin() + o.conv1_w, params_.begin() + o.lh_w, 0.0);
}

void CnnModel::zero_weights() {
  const auto o = offsets();
  std::fill(params_.begin(), params_.begin() + o.out_b, 0.0);
}

void CnnModel::check_shape(const TelemetryWindow& w) const {
  if (w.tiers != arch_.tiers || w.steps != arch_.steps ||
      w.x_rh.size() != static_cast<std::size_t>(arch_.tiers) * arch_.steps * kChannels ||
      w.x_lh.size() != static_cast<std::size_t>(kPercentiles) * arch_.steps ||
      w.x_rc.size() != static_cast<std::size_t>(arch_.tiers)) {
    throw ConfigError("cnn: window shape " + std::to_string(w.tiers) + "x" + std::to_string(w.steps) +
                      " does not match model " + std::to_string(arch_.tiers) + "x" + std::to_string(arch_.steps));
  }
}

struct CnnModel::Workspace {
  std::vector<double> in, z1, a1, z2, a2, zlh, elh, zrc, erc, cat, zh, h, zl, lat, raw;
  // gradients
  std::vector<double> d_cat, d_a1, d_z, d_h, d_lat;
};

namespace {

// Same-padded 3x3 convolution over an [cin][H][W] plane.
void conv3x3(const double* in, int cin, int H, int W, const double* w, const double* b, int cout, double* out) {
  for (int co = 0; co < cout; ++co) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double s = b[co];
        for (int ci = 0; ci < cin; ++ci) {
          const double* wk = w + ((co * cin + ci) * 9);
          const double* plane = in + ci * H * W;
          for (int ky = 0; ky < 3; ++ky) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= H) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int xx = x + kx - 1;
              if (xx < 0 || xx >= W) continue;
              s += wk[ky * 3 + kx] * plane[yy * W + xx];
            }
          }
        }
        out[(co * H + y) * W + x] = s;
      }
    }
  }
}

// Accumulates filter/bias gradients and (optionally) the input gradient.
void conv3x3_backward(const double* in, int cin, int H, int W, const double* w, int cout, const double* d_out,
                      double* d_w, double* d_b, double* d_in) {
  for (int co = 0; co < cout; ++co) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double g = d_out[(co * H + y) * W + x];
        if (g == 0.0) continue;
        d_b[co] += g;
        for (int ci = 0; ci < cin; ++ci) {
          const int base = (co * cin + ci) * 9;
          const double* plane = in + ci * H * W;
          for (int ky = 0; ky < 3; ++ky) {
            const int yy = y + ky - 1;
            if (yy < 0 || yy >= H) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int xx = x + kx - 1;
              if (xx < 0 || xx >= W) continue;
              d_w[base + ky * 3 + kx] += g * plane[yy * W + xx];
              if (d_in) d_in[ci * H * W + yy * W + xx] += g * w[base + ky * 3 + kx];
            }
          }
        }
      }
    }
  }
}

void dense(const double* w, const double* b, const double* in, std::size_t n_in, std::size_t n_out, double* out) {
  for (std::size_t o = 0; o < n_out; ++o) {
    const double* row = w + o * n_in;
    double s = b[o];
    for (std::size_t i = 0; i < n_in; ++i) s += row[i] * in[i];
    out[o] = s;
  }
}

void dense_backward(const double* w, const double* in, std::size_t n_in, std::size_t n_out, const double* d_out,
                    double* d_w, double* d_b, double* d_in) {
  for (std::size_t o = 0; o < n_out; ++o) {
    const double g = d_out[o];
    if (g == 0.0) continue;
    d_b[o] += g;
    double* drow = d_w + o * n_in;
    const double* row = w + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) drow[i] += g * in[i];
    if (d_in)
      for (std::size_t i = 0; i < n_in; ++i) d_in[i] += g * row[i];
  }
}

void relu(const std::vector<double>& z, std::vector<double>& a) {
  a.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0.0 ? z[i] : 0.0;
}

void relu_mask(const std::vector<double>& z, double* g, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (z[i] <= 0.0) g[i] = 0.0;
}

}  // namespace

void CnnModel::run_forward(const TelemetryWindow& w, Workspace& ws) const {
  check_shape(w);
  const auto o = offsets();
  const int H = arch_.tiers, W = arch_.steps;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double* p = params_.data();

  // [tier][step][channel] -> [channel][tier][step]
  ws.in.resize(kChannels * plane);
  for (int t = 0; t < H; ++t)
    for (int s = 0; s < W; ++s)
      for (int c = 0; c < kChannels; ++c) ws.in[c * plane + t * W + s] = w.rh(t, s, c);

  ws.z1.resize(arch_.conv1 * plane);
  conv3x3(ws.in.data(), kChannels, H, W, p + o.conv1_w, p + o.conv1_b, arch_.conv1, ws.z1.data());
  relu(ws.z1, ws.a1);
  ws.z2.resize(arch_.conv2 * plane);
  conv3x3(ws.a1.data(), arch_.conv1, H, W, p + o.conv2_w, p + o.conv2_b, arch_.conv2, ws.z2.data());
  relu(ws.z2, ws.a2);

  ws.zlh.resize(arch_.encoder);
  dense(p + o.lh_w, p + o.lh_b, w.x_lh.data(), w.x_lh.size(), arch_.encoder, ws.zlh.data());
  relu(ws.zlh, ws.elh);
  ws.zrc.resize(arch_.encoder);
  dense(p + o.rc_w, p + o.rc_b, w.x_rc.data(), w.x_rc.size(), arch_.encoder, ws.zrc.data());
  relu(ws.zrc, ws.erc);

  ws.cat.resize(o.concat);
  std::copy(ws.a2.begin(), ws.a2.end(), ws.cat.begin());
  std::copy(ws.elh.begin(), ws.elh.end(), ws.cat.begin() + o.flat);
  std::copy(ws.erc.begin(), ws.erc.end(), ws.cat.begin() + o.flat + arch_.encoder);

  ws.zh.resize(arch_.hidden);
  dense(p + o.fc_w, p + o.fc_b, ws.cat.data(), o.concat, arch_.hidden, ws.zh.data());
  relu(ws.zh, ws.h);
  ws.zl.resize(arch_.latent);
  dense(p + o.lat_w, p + o.lat_b, ws.h.data(), arch_.hidden, arch_.latent, ws.zl.data());
  relu(ws.zl, ws.lat);
  ws.raw.resize(kPercentiles);
  dense(p + o.out_w, p + o.out_b, ws.lat.data(), arch_.latent, kPercentiles, ws.raw.data());
}

CnnOutput CnnModel::forward(const TelemetryWindow& window) const {
  thread_local Workspace ws;
  run_forward(window, ws);
  CnnOutput out;
  for (int i = 0; i < kPercentiles; ++i) out.y_raw[i] = ws.raw[i] * arch_.output_scale_ms;
  out.y = out.y_raw;
  for (int i = 1; i < kPercentiles; ++i) out.y[i] = std::max(out.y[i], out.y[i - 1]);
  out.latent = ws.lat;
  return out;
}

double CnnModel::accumulate_gradient(const TrainingSample& sample, const LossConfig& loss,
                                     std::span<double> grad) const {
  if (grad.size() != params_.size()) throw ConfigError("cnn: gradient buffer size mismatch");
  thread_local Workspace ws;
  run_forward(sample.window, ws);
  const auto o = offsets();
  const int H = arch_.tiers, W = arch_.steps;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double* p = params_.data();
  double* g = grad.data();
  const double scale = arch_.output_scale_ms;

  double d_raw[kPercentiles];
  double total = 0.0;
  for (int i = 0; i < kPercentiles; ++i) {
    const double y = ws.raw[i] * scale;
    const double diff = phi(y, loss) - phi(sample.y[i], loss);
    total += diff * diff;
    d_raw[i] = 2.0 * diff * phi_prime(y, loss) * scale / kPercentiles;
  }
  total /= kPercentiles;

  ws.d_lat.assign(arch_.latent, 0.0);
  dense_backward(p + o.out_w, ws.lat.data(), arch_.latent, kPercentiles, d_raw, g + o.out_w, g + o.out_b,
                 ws.d_lat.data());
  relu_mask(ws.zl, ws.d_lat.data(), arch_.latent);

  ws.d_h.assign(arch_.hidden, 0.0);
  dense_backward(p + o.lat_w, ws.h.data(), arch_.hidden, arch_.latent, ws.d_lat.data(), g + o.lat_w, g + o.lat_b,
                 ws.d_h.data());
  relu_mask(ws.zh, ws.d_h.data(), arch_.hidden);

  ws.d_cat.assign(o.concat, 0.0);
  dense_backward(p + o.fc_w, ws.cat.data(), o.concat, arch_.hidden, ws.d_h.data(), g + o.fc_w, g + o.fc_b,
                 ws.d_cat.data());

  double* d_a2 = ws.d_cat.data();
  double* d_elh = ws.d_cat.data() + o.flat;
  double* d_erc = d_elh + arch_.encoder;
  relu_mask(ws.zlh, d_elh, arch_.encoder);
  relu_mask(ws.zrc, d_erc, arch_.encoder);
  dense_backward(p + o.lh_w, sample.window.x_lh.data(), sample.window.x_lh.size(), arch_.encoder, d_elh, g + o.lh_w,
                 g + o.lh_b, nullptr);
  dense_backward(p + o.rc_w, sample.window.x_rc.data(), sample.window.x_rc.size(), arch_.encoder, d_erc,
                 g + o.rc_w, g + o.rc_b, nullptr);

  relu_mask(ws.z2, d_a2, o.flat);
  ws.d_a1.assign(arch_.conv1 * plane, 0.0);
  conv3x3_backward(ws.a1.data(), arch_.conv1, H, W, p + o.conv2_w, arch_.conv2, d_a2, g + o.conv2_w,
                   g + o.conv2_b, ws.d_a1.data());
  relu_mask(ws.z1, ws.d_a1.data(), ws.d_a1.size());
  conv3x3_backward(ws.in.data(), kChannels, H, W, p + o.conv1_w, arch_.conv1, ws.d_a1.data(), g + o.conv1_w,
                   g + o.conv1_b, nullptr);
  return total;
}

double cnn_rmse(const CnnModel& model, std::span<const TrainingSample> samples) {
  if (samples.empty()) return 0.0;
  double s = 0.0;
  for (const auto& sm : samples) {
    auto out = model.forward(sm.window);
    for (int i = 0; i < kPercentiles; ++i) {
      const double d = out.y[i] - sm.y[i];
      s += d * d;
    }
  }
  return std::sqrt(s / (static_cast<double>(samples.size()) * kPercentiles));
}

namespace {

double rmse_of(const CnnModel& model, std::span<const TrainingSample> data, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i : idx) {
    auto out = model.forward(data[i].window);
    for (int p = 0; p < kPercentiles; ++p) {
      const double d = out.y[p] - data[i].y[p];
      s += d * d;
    }
  }
  return std::sqrt(s / (static_cast<double>(idx.size()) * kPercentiles));
}

}  // namespace

TrainResult cnn_train(CnnModel& model, std::span<const TrainingSample> dataset, const TrainConfig& train,
                      const LossConfig& loss) {
  if (dataset.empty()) throw ConfigError("cnn_train: empty dataset");
  if (!(train.lr > 0.0) || train.batch < 1 || train.epochs < 0)
    throw ConfigError("cnn_train: lr must be positive, batch >= 1, epochs >= 0");
  auto [train_idx, valid_idx] = split_indices(dataset.size(), train.validation_fraction, train.seed);

  TrainResult result;
  result.train_size = train_idx.size();
  result.valid_size = valid_idx.size();
  result.valid_indices = valid_idx;
  result.rmse_history.push_back({rmse_of(model, dataset, train_idx), rmse_of(model, dataset, valid_idx)});

  const double lr = train.effective_lr();
  const double inv_scale2 = 1.0 / (model.arch().output_scale_ms * model.arch().output_scale_ms);
  const auto layers = model.layers();
  std::vector<char> decays(model.params().size(), 0);
  for (const auto& l : layers)
    if (!l.is_bias) std::fill(decays.begin() + l.begin, decays.begin() + l.end, 1);

  std::vector<double> grad(model.params().size());
  Rng rng = make_rng(train.seed, 0x7EA1);
  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    for (std::size_t start = 0; start < train_idx.size(); start += train.batch) {
      const std::size_t end = std::min(train_idx.size(), start + train.batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) model.accumulate_gradient(dataset[train_idx[k]], loss, grad);
      const double step = lr * inv_scale2 / static_cast<double>(end - start);
      auto params = model.params();
      for (std::size_t i = 0; i < params.size(); ++i) {
        params[i] -= step * grad[i] + (decays[i] ? lr * train.weight_decay * params[i] : 0.0);
      }
    }
    result.rmse_history.push_back({rmse_of(model, dataset, train_idx), rmse_of(model, dataset, valid_idx)});
  }
  return result;
}

double finite_diff_check(const CnnModel& model, const TrainingSample& sample, const LossConfig& loss,
                         std::uint64_t seed, int count) {
  CnnModel probe = model;
  std::vector<double> grad(probe.params().size(), 0.0);
  probe.accumulate_gradient(sample, loss, grad);

  auto loss_at = [&]() {
    auto out = probe.forward(sample.window);
    return scaled_loss(out.y_raw, sample.y, loss);
  };

  // Cover every layer first, then fill up with uniform picks.
  Rng rng = make_rng(seed, 0xFD);
  std::vector<std::size_t> picks;
  for (const auto& l : probe.layers()) {
    std::uniform_int_distribution<std::size_t> d(l.begin, l.end - 1);
    picks.push_back(d(rng));
  }
  std::uniform_int_distribution<std::size_t> any(0, grad.size() - 1);
  while (static_cast<int>(picks.size()) < count) picks.push_back(any(rng));

  constexpr double kStep = 1e-4;
  constexpr double kFloor = 1e-4;
  double worst = 0.0;
  auto params = probe.params();
  for (std::size_t i : picks) {
    const double keep = params[i];
    params[i] = keep + kStep;
    const double up = loss_at();
    params[i] = keep - kStep;
    const double down = loss_at();
    params[i] = keep;
    const double numeric = (up - down) / (2.0 * kStep);
    const double denom = std::max({std::abs(numeric), std::abs(grad[i]), kFloor});
    worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
  }
  return worst;
}

void write_cnn(std::ostream& out, const CnnModel& model) {
  const auto& a = model.arch();
  out << "sinan-cnn 1\n";
  out << "arch " << a.tiers << " " << a.steps << " " << a.conv1 << " " << a.conv2 << " " << a.encoder << " "
      << a.hidden << " " << a.latent << " " << format_double(a.output_scale_ms) << "\n";
  write_norms(out, model.norms());
  const auto p = model.params();
  out << "params " << p.size() << "\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    out << format_double(p[i]) << ((i % 8 == 7 || i + 1 == p.size()) ? '\n' : ' ');
  }
}

CnnModel read_cnn(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "sinan-cnn") throw ConfigError("cnn file: bad magic");
  if (version != 1) throw ConfigError("cnn file: unsupported version " + std::to_string(version));
  CnnArch a;
  std::string scale;
  if (!(in >> tag >> a.tiers >> a.steps >> a.conv1 >> a.conv2 >> a.encoder >> a.hidden >> a.latent >> scale) ||
      tag != "arch") {
    throw ConfigError("cnn file: bad arch line");
  }
  a.output_scale_ms = parse_double(scale);
  TelemetryNorms norms = read_norms(in);
  CnnModel model(a, norms, 0);
  std::size_t count = 0;
  if (!(in >> tag >> count) || tag != "params") throw ConfigError("cnn file: bad params line");
  auto p = model.params();
  if (count != p.size()) throw ConfigError("cnn file: parameter count does not match architecture");
  for (auto& v : p) {
    std::string tok;
    if (!(in >> tok)) throw ConfigError("cnn file: truncated parameters");
    v = parse_double(tok);
  }
  return model;
}

void save_cnn(const std::string& path, const CnnModel& model) {
  std::ostringstream ss;
  write_cnn(ss, model);
  write_file_atomic(path, ss.str());
}

CnnModel load_cnn(const std::string& path) {
  std::istringstream ss(read_file(path));
  return read_cnn(ss);
}

}  // namespace sinan
