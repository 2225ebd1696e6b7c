#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpra/imaging.hpp"
#include "cpra/network.hpp"

namespace cpra {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  long step = 0;
};

// One bias-corrected Adam update, applied in parameter-name order. Every
// non-frozen parameter must have a gradient.
template <typename T>
void adam_step(ModelWeights<T>& weights, const GradMap<T>& grads, AdamState<T>& state, const AdamConfig& cfg,
               const std::function<bool(const std::string&)>& frozen = {}) {
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, w] : weights) {
    if (frozen && frozen(name)) continue;
    auto git = grads.find(name);
    if (git == grads.end()) throw TrainingError("adam_step: no gradient for trainable parameter '" + name + "'");
    const Tensor<T>& g = git->second;
    require_same_shape(w.shape(), g.shape(), "adam_step");
    auto [mit, m_new] = state.m.try_emplace(name, w.shape());
    auto [vit, v_new] = state.v.try_emplace(name, w.shape());
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(w[i] - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Procedural data

// Smooth gradient, checkerboard or bilinear value noise, chosen at random.
inline ImagePlanar procedural_image(int size, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> kind_dist(0, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImagePlanar img(size, size);
  const int kind = kind_dist(rng);
  auto put = [&](int x, int y, const double* rgb) {
    for (int ch = 0; ch < 3; ++ch)
      img.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(rgb[ch] * 200.0 + 20.0), 0L, 255L));
  };
  if (kind == 0) {
    double corner[4][3];
    for (auto& c : corner)
      for (double& v : c) v = u(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double fx = x / (size - 1.0), fy = y / (size - 1.0);
        double rgb[3];
        for (int ch = 0; ch < 3; ++ch)
          rgb[ch] = (1 - fy) * ((1 - fx) * corner[0][ch] + fx * corner[1][ch]) +
                    fy * ((1 - fx) * corner[2][ch] + fx * corner[3][ch]);
        put(x, y, rgb);
      }
  } else if (kind == 1) {
    std::uniform_int_distribution<int> cell_dist(3, 8);
    const int cell = cell_dist(rng);
    double a[3], b[3];
    for (int ch = 0; ch < 3; ++ch) {
      a[ch] = u(rng);
      b[ch] = u(rng);
    }
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) put(x, y, ((x / cell + y / cell) % 2) ? a : b);
  } else {
    const int lattice = 5;
    std::vector<double> grid(lattice * lattice * 3);
    for (double& v : grid) v = u(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double gx = x * (lattice - 1.0) / (size - 1.0), gy = y * (lattice - 1.0) / (size - 1.0);
        const int x0 = std::min(static_cast<int>(gx), lattice - 2), y0 = std::min(static_cast<int>(gy), lattice - 2);
        const double fx = gx - x0, fy = gy - y0;
        double rgb[3];
        for (int ch = 0; ch < 3; ++ch) {
          auto at = [&](int i, int j) { return grid[(j * lattice + i) * 3 + ch]; };
          rgb[ch] = (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
                    fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
        }
        put(x, y, rgb);
      }
  }
  return img;
}

struct RainRange {
  double angle_min = -20.0, angle_max = 20.0;
  double intensity_min = 0.4, intensity_max = 0.8;
  double length_min = 6.0, length_max = 14.0;
  double width_min = 0.8, width_max = 1.6;
  double density = 1.0 / 40.0;  // streaks per pixel
};

inline std::pair<ImagePlanar, ImagePlanar> synthetic_pair(int size, std::mt19937_64& rng, const RainRange& range = {}) {
  ImagePlanar clean = procedural_image(size, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto lerp = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  RainParams p;
  p.angle = lerp(range.angle_min, range.angle_max);
  p.intensity = lerp(range.intensity_min, range.intensity_max);
  p.length = lerp(range.length_min, range.length_max);
  p.width = lerp(range.width_min, range.width_max);
  p.streak_count = std::max(1, static_cast<int>(std::lround(size * size * range.density)));
  p.seed = rng();
  ImagePlanar rainy = synth_rain(clean, p);
  return {std::move(clean), std::move(rainy)};
}

// ---------------------------------------------------------------------------
// Toy training

struct TrainConfig {
  int steps = 300;
  int batch = 4;
  int patch = 32;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::string loss = "l1";
  std::uint64_t seed = 0;
  bool epgo_straight_through = false;  // otherwise EPGO parameters stay frozen
  RainRange rain{};

  void validate() const {
    if (steps < 0) throw std::invalid_argument("train: steps must be non-negative");
    if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    if (!is_power_of_two(patch) || patch < 16) throw std::invalid_argument("train: patch must be a power of two >= 16");
    if (!(lr >= 0)) throw std::invalid_argument("train: lr must be non-negative");
    if (loss != "l1") throw std::invalid_argument("train: only the l1 loss is supported");
  }
};

struct TrainResult {
  std::vector<double> losses;
  ModelWeights<float> weights;
};

// Mean of the first and last `fraction` of a loss curve.
inline std::pair<double, double> loss_windows(const std::vector<double>& losses, double fraction = 0.1) {
  if (losses.empty()) return {0.0, 0.0};
  const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(losses.size() * fraction));
  const double head = std::accumulate(losses.begin(), losses.begin() + w, 0.0) / w;
  const double tail = std::accumulate(losses.end() - w, losses.end(), 0.0) / w;
  return {head, tail};
}

template <typename T>
std::string first_nonfinite(const GradMap<T>& grads, const ModelWeights<T>& weights) {
  for (const auto& [name, g] : grads)
    if (!g.all_finite()) return name + " (gradient)";
  for (const auto& [name, w] : weights)
    if (!w.all_finite()) return name + " (value)";
  return "<none>";
}

inline TrainResult train_toy(const ModelConfig& model, const TrainConfig& cfg,
                             const std::function<void(int, double)>& on_step = {}) {
  cfg.validate();
  model.validate();
  TrainResult result;
  result.weights = init_weights<float>(model, model.seed);
  AdamState<float> state;
  const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  const auto frozen = [&](const std::string& name) { return !cfg.epgo_straight_through && is_epgo_param(name); };
  std::mt19937_64 rng(cfg.seed);

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<ImagePlanar> clean, rainy;
    for (int b = 0; b < cfg.batch; ++b) {
      auto [c, r] = synthetic_pair(cfg.patch, rng, cfg.rain);
      clean.push_back(std::move(c));
      rainy.push_back(std::move(r));
    }
    Tape<float> tape;
    TapeScope<float> scope(&tape);
    ParamBinder<float> binder(result.weights, true, [&](const std::string& n) { return !frozen(n); });
    ForwardContext ctx;
    ctx.epgo_straight_through = cfg.epgo_straight_through;
    ModelOutput<float> out = model_forward(model, binder, Var<float>::leaf(to_tensor<float>(rainy)), ctx);
    Var<float> loss = l1_loss(out.image, Var<float>::leaf(to_tensor<float>(clean)));
    backward(loss, tape);
    GradMap<float> grads = binder.gradients();
    const double value = loss.value()[0];
    if (!std::isfinite(value))
      throw TrainingError("training diverged at step " + std::to_string(step) +
                          ": non-finite loss; first offending layer: " + first_nonfinite(grads, result.weights));
    adam_step(result.weights, grads, state, adam, frozen);
    result.losses.push_back(value);
    if (on_step) on_step(step, value);
  }
  return result;
}

inline void write_loss_curve_csv(const std::vector<double>& losses, std::ostream& os) {
  os << "step,loss\n" << std::setprecision(9);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
}

}  // namespace cpra
