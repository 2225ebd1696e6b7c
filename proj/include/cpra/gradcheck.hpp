#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "cpra/network.hpp"

namespace cpra {

// Finite-difference gradient check

using GradScalar = long double;

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  std::size_t samples = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;  // name order
  double global_max = 0.0;
  double threshold = 1e-4;
  bool pass() const { return global_max <= threshold; }
};

struct GradCheckOptions {
  double sample_fraction = 1.0;  // per tensor, at least one entry
  double eps = 1e-5;
  double threshold = 1e-4;
  std::uint64_t seed = 0;
  std::function<bool(const std::string&)> include;  // parameters to check; all when empty
  // Optional: index of the first forward stage a parameter influences. When
  // set, perturbed passes reuse the unperturbed outputs of earlier stages.
  std::function<std::size_t(const std::string&)> stage_of;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Scalar objective evaluated on parameters handed out by the binder.
using Objective = std::function<Var<GradScalar>(ParamBinder<GradScalar>&, ForwardContext&)>;

// Compares reverse-mode gradients with central differences (f(w+e) - f(w-e)) / 2e.
// Top-k masks are recorded on the analytic pass and replayed on every
// perturbed pass.
inline GradCheckReport gradcheck(const Objective& objective, ModelWeights<GradScalar> weights,
                                 const GradCheckOptions& opts = {}) {
  MaskStore masks{MaskMode::Record, {}};
  ForwardContext ctx;
  ctx.masks = &masks;

  GradMap<GradScalar> analytic;
  {
    Tape<GradScalar> tape;
    TapeScope<GradScalar> scope(&tape);
    ParamBinder<GradScalar> binder(weights, true, opts.include);
    Var<GradScalar> root = objective(binder, ctx);
    backward(root, tape);
    analytic = binder.gradients();
  }
  masks.mode = MaskMode::Replay;

  StageCache stages;
  if (opts.stage_of) {
    stages.record = true;
    ctx.stages = &stages;
    NoGradScope<GradScalar> no_grad;
    ParamBinder<GradScalar> binder(weights);
    objective(binder, ctx);
    stages.record = false;
  }

  auto evaluate = [&]() {
    NoGradScope<GradScalar> no_grad;
    ParamBinder<GradScalar> binder(weights);
    return objective(binder, ctx).value()[0];
  };

  GradCheckReport report;
  report.threshold = opts.threshold;
  std::mt19937_64 rng(opts.seed);
  for (const auto& [name, grad] : analytic) {
    Tensor<GradScalar>& w = weights.at(name);
    std::vector<std::size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::size_t count = w.size();
    if (opts.sample_fraction < 1.0) {
      count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(opts.sample_fraction * w.size())));
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(count);
      std::sort(idx.begin(), idx.end());
    }
    if (opts.stage_of) stages.first_dirty = opts.stage_of(name);
    GradCheckEntry entry{name, 0.0, count};
    for (std::size_t i : idx) {
      const GradScalar orig = w[i];
      w[i] = orig + opts.eps;
      const GradScalar fp = evaluate();
      w[i] = orig - opts.eps;
      const GradScalar fm = evaluate();
      w[i] = orig;
      const double numeric = static_cast<double>((fp - fm) / (2 * static_cast<GradScalar>(opts.eps)));
      entry.max_rel_err = std::max(entry.max_rel_err, relative_error(static_cast<double>(grad[i]), numeric));
    }
    report.global_max = std::max(report.global_max, entry.max_rel_err);
    report.entries.push_back(entry);
  }
  return report;
}

inline void write_gradcheck_csv(const GradCheckReport& r, std::ostream& os) {
  os << "param,rel_err\n" << std::setprecision(6) << std::scientific;
  for (const auto& e : r.entries) os << e.param << ',' << e.max_rel_err << '\n';
}

// sum(out * probe): a scalar whose gradient exercises every output element.
inline Var<GradScalar> probe_objective(const Var<GradScalar>& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<GradScalar> u(-1.0, 1.0);
  Tensor<GradScalar> probe(out.shape());
  for (auto& v : probe.data()) v = u(rng);
  return sum(mul(out, Var<GradScalar>::leaf(std::move(probe))));
}

// ---------------------------------------------------------------------------
// Canned suites: every case carries its own weights; inputs are stored as
// ordinary named tensors ("x", "q", ...) so the checker covers them too.

struct GradCheckCase {
  std::string name;
  ModelWeights<GradScalar> weights;
  Objective objective;
  std::function<std::size_t(const std::string&)> stage_of;
};

namespace detail {

inline Tensor<GradScalar> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<GradScalar> u(lo, hi);
  Tensor<GradScalar> t(s);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
inline Tensor<GradScalar> off_zero_tensor(const Shape& s, std::mt19937_64& rng) {
  Tensor<GradScalar> t = random_tensor(s, rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data())
    if (sign(rng)) v = -v;
  return t;
}

inline ModelWeights<GradScalar> random_weights(const std::vector<ParamSpec>& specs, std::mt19937_64& rng, double scale) {
  ModelWeights<GradScalar> w;
  for (const auto& s : specs) {
    Tensor<GradScalar> t = random_tensor(s.shape, rng, -scale, scale);
    if (s.init == InitKind::Ones)
      for (auto& v : t.data()) v += 1.0;
    w.set(s.name, std::move(t));
  }
  return w;
}

}  // namespace detail

inline std::vector<GradCheckCase> op_gradcheck_cases(std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckCase> cases;
  auto rnd = [&](Shape s) { return detail::random_tensor(s, rng); };
  auto add_case = [&](std::string name, std::vector<std::pair<std::string, Tensor<GradScalar>>> tensors, auto body) {
    ModelWeights<GradScalar> w;
    for (auto& [n, t] : tensors) w.set(n, std::move(t));
    const std::uint64_t probe_seed = rng();
    Objective obj = [body, probe_seed](ParamBinder<GradScalar>& b, ForwardContext& ctx) {
      return probe_objective(body(b, ctx), probe_seed);
    };
    cases.push_back({std::move(name), std::move(w), std::move(obj), {}});
  };
  using B = ParamBinder<GradScalar>;
  using C = ForwardContext;

  const Shape x_shape{2, 3, 6, 6};
  add_case("conv2d_same", {{"x", rnd(x_shape)}, {"w", rnd({4, 3, 3, 3})}, {"b", rnd({1, 4, 1, 1})}},
           [](B& b, C&) { return conv2d(b.get("x"), b.get("w"), b.get("b")); });
  add_case("conv2d_valid_stride2", {{"x", rnd({1, 2, 7, 7})}, {"w", rnd({3, 2, 3, 3})}},
           [](B& b, C&) { return conv2d(b.get("x"), b.get("w"), {}, 2, Padding::Valid); });
  add_case("conv2d_same_stride2", {{"x", rnd({1, 2, 8, 8})}, {"w", rnd({3, 2, 5, 5})}},
           [](B& b, C&) { return conv2d(b.get("x"), b.get("w"), {}, 2, Padding::Same); });
  add_case("depthwise3", {{"x", rnd(x_shape)}, {"w", rnd({3, 1, 3, 3})}, {"b", rnd({1, 3, 1, 1})}},
           [](B& b, C&) { return depthwise_conv2d(b.get("x"), b.get("w"), b.get("b")); });
  add_case("depthwise5", {{"x", rnd(x_shape)}, {"w", rnd({3, 1, 5, 5})}},
           [](B& b, C&) { return depthwise_conv2d(b.get("x"), b.get("w")); });
  add_case("linear", {{"x", rnd(x_shape)}, {"w", rnd({5, 3, 1, 1})}, {"b", rnd({1, 5, 1, 1})}},
           [](B& b, C&) { return linear(b.get("x"), b.get("w"), b.get("b")); });
  add_case("layernorm", {{"x", rnd(x_shape)}, {"g", rnd({1, 3, 1, 1})}, {"beta", rnd({1, 3, 1, 1})}},
           [](B& b, C&) { return layernorm(b.get("x"), b.get("g"), b.get("beta"), GradScalar(1e-6)); });
  for (int axis = 1; axis <= 3; ++axis)
    add_case("softmax_axis" + std::to_string(axis), {{"x", rnd(x_shape)}},
             [axis](B& b, C&) { return softmax(b.get("x"), axis); });
  add_case("gelu", {{"x", rnd(x_shape)}}, [](B& b, C&) { return gelu(b.get("x")); });
  add_case("sigmoid", {{"x", rnd(x_shape)}}, [](B& b, C&) { return sigmoid(b.get("x")); });
  add_case("relu", {{"x", detail::off_zero_tensor(x_shape, rng)}}, [](B& b, C&) { return relu(b.get("x")); });
  add_case("gap", {{"x", rnd(x_shape)}}, [](B& b, C&) { return gap(b.get("x")); });
  add_case("mul_broadcast", {{"x", rnd(x_shape)}, {"s", rnd({2, 1, 6, 6})}, {"c", rnd({1, 3, 1, 1})}},
           [](B& b, C&) { return mul(mul(b.get("x"), b.get("s")), b.get("c")); });
  add_case("add_sub", {{"x", rnd(x_shape)}, {"y", rnd(x_shape)}, {"c", rnd({1, 3, 1, 1})}},
           [](B& b, C&) { return sub(add(b.get("x"), b.get("c")), b.get("y")); });
  add_case("concat_split", {{"x", rnd(x_shape)}, {"y", rnd({2, 2, 6, 6})}}, [](B& b, C&) {
    auto parts = split_channels(concat_channels<GradScalar>({b.get("x"), b.get("y")}), 5);
    return mul(parts[0], parts[4]);
  });
  add_case("pixel_unshuffle", {{"x", rnd({1, 2, 4, 4})}}, [](B& b, C&) { return pixel_unshuffle(b.get("x"), 2); });
  add_case("pixel_shuffle", {{"x", rnd({1, 8, 2, 2})}}, [](B& b, C&) { return pixel_shuffle(b.get("x"), 2); });
  add_case("fft2d", {{"x", rnd({1, 2, 4, 8})}}, [](B& b, C&) { return fft2d_stacked(b.get("x")); });
  add_case("ifft2d_real", {{"s", rnd({1, 4, 8, 4})}}, [](B& b, C&) { return ifft2d_real_stacked(b.get("s")); });
  add_case("mean_per_item", {{"x", rnd(x_shape)}}, [](B& b, C&) { return mean_per_item(b.get("x")); });
  add_case("l1_loss", {{"x", detail::off_zero_tensor(x_shape, rng)}},
           [](B& b, C&) { return l1_loss(b.get("x"), Var<GradScalar>::leaf(Tensor<GradScalar>(Shape{2, 3, 6, 6}))); });

  // Attention core with a fixed sparse mask: 2 heads of 3 channels, keep 2 per row.
  {
    const Shape s{2, 6, 4, 4};
    Tensor<GradScalar> q = rnd(s), k = rnd(s);
    RowMask mask = dynamic_topk_mask(channel_attention_logits(q, k, 2, GradScalar(4)), {2, 2});
    add_case("channel_attention_topk", {{"q", q}, {"k", k}, {"v", rnd(s)}}, [mask](B& b, C&) {
      return masked_channel_attention(b.get("q"), b.get("k"), b.get("v"), 2, mask, GradScalar(4));
    });
  }

  return cases;
}

// SPC-SA, SPR-SA, AAFM and MSGN in isolation, input included.
inline std::vector<GradCheckCase> module_gradcheck_cases(std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckCase> cases;
  auto rnd = [&](Shape s) { return detail::random_tensor(s, rng); };
  using B = ParamBinder<GradScalar>;
  using C = ForwardContext;
  auto module_case = [&](std::string name, Shape input, std::vector<ParamSpec> specs, auto body) {
    ModelWeights<GradScalar> w = detail::random_weights(specs, rng, 0.5);
    w.set("x", rnd(input));
    const std::uint64_t probe_seed = rng();
    Objective obj = [body, probe_seed](B& b, C& ctx) { return probe_objective(body(b, ctx), probe_seed); };
    cases.push_back({std::move(name), std::move(w), std::move(obj), {}});
  };
  const Shape m_shape{2, 8, 8, 8};
  {
    SpecList sl;
    SpcSaParams<GradScalar>::specs(sl, Scope{"spc"}, 8);
    EpgoParams<GradScalar>::specs(sl, Scope{"spc.epgo"}, 8);
    module_case("spc_sa", m_shape, sl.specs, [](B& b, C& ctx) {
      return spc_sa(b.get("x"), SpcSaParams<GradScalar>::bind(b, Scope{"spc"}, 2),
                    EpgoParams<GradScalar>::bind(b, Scope{"spc.epgo"}), ctx, "spc")
          .features;
    });
  }
  {
    SpecList sl;
    SprSaParams<GradScalar>::specs(sl, Scope{"spr"}, 8);
    module_case("spr_sa", m_shape, sl.specs,
                [](B& b, C&) { return spr_sa(b.get("x"), SprSaParams<GradScalar>::bind(b, Scope{"spr"})); });
  }
  {
    SpecList sl;
    AafmParams<GradScalar>::specs(sl, Scope{"aafm"}, 8);
    module_case("aafm", m_shape, sl.specs, [](B& b, C& ctx) {
      Var<GradScalar> x = b.get("x");
      auto halves = split_channels(concat_channels<GradScalar>({x, scale(x, GradScalar(0.5))}), 2);
      return aafm(halves[0], gelu(halves[1]), AafmParams<GradScalar>::bind(b, Scope{"aafm"}), AafmOptions{}, &ctx);
    });
  }
  {
    SpecList sl;
    MsgnParams<GradScalar>::specs(sl, Scope{"msgn"}, 8, 2.0);
    module_case("msgn", m_shape, sl.specs,
                [](B& b, C&) { return msgn(b.get("x"), MsgnParams<GradScalar>::bind(b, Scope{"msgn"})); });
  }
  return cases;
}

// One full block at several resolutions, including the 1x1 bottleneck extreme.
inline std::vector<GradCheckCase> block_gradcheck_cases(std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckCase> cases;
  for (auto [c, heads, hw] : {std::tuple{8, 1, 8}, std::tuple{8, 2, 4}, std::tuple{16, 4, 2}, std::tuple{16, 2, 1}}) {
    SpecList sl;
    block_specs(sl, Scope{"block"}, c, 2.0);
    ModelWeights<GradScalar> w = detail::random_weights(sl.specs, rng, 0.1);
    w.set("x", detail::random_tensor(Shape{2, c, hw, hw}, rng));
    const std::uint64_t probe_seed = rng();
    const int h = heads;
    Objective obj = [h, probe_seed](ParamBinder<GradScalar>& b, ForwardContext& ctx) {
      auto p = BlockParams<GradScalar>::bind(b, Scope{"block"}, h);
      return probe_objective(block_forward(b.get("x"), p, ctx, "block").features, probe_seed);
    };
    cases.push_back({"block_c" + std::to_string(c) + "_h" + std::to_string(heads) + "_" + std::to_string(hw) + "x" +
                         std::to_string(hw),
                     std::move(w), std::move(obj), {}});
  }
  return cases;
}

// Whole network on a small random batch; weights drawn at `scale` so gradients
// are far from the relative-error floor.
inline GradCheckCase model_gradcheck_case(const ModelConfig& config, int size = 8, std::uint64_t seed = 0,
                                          double scale = 0.1) {
  std::mt19937_64 rng(seed);
  ModelWeights<GradScalar> w = detail::random_weights(param_specs(config), rng, scale);
  const Tensor<GradScalar> image = detail::random_tensor(Shape{1, 3, size, size}, rng, 0.0, 1.0);
  const std::uint64_t probe_seed = rng();
  Objective obj = [config, image, probe_seed](ParamBinder<GradScalar>& b, ForwardContext& ctx) {
    return probe_objective(model_forward(config, b, Var<GradScalar>::leaf(image), ctx).image, probe_seed);
  };
  auto stage_of = [config](const std::string& name) { return stage_of_param(config, name); };
  return {"model", std::move(w), std::move(obj), stage_of};
}

// Runs each case and merges the entries as "<case>/<param>".
inline GradCheckReport run_gradcheck_cases(const std::vector<GradCheckCase>& cases, GradCheckOptions opts) {
  GradCheckReport merged;
  merged.threshold = opts.threshold;
  for (const auto& c : cases) {
    opts.stage_of = c.stage_of;
    GradCheckReport r = gradcheck(c.objective, c.weights, opts);
    for (auto& e : r.entries) {
      e.param = c.name + "/" + e.param;
      merged.entries.push_back(std::move(e));
    }
    merged.global_max = std::max(merged.global_max, r.global_max);
    ++opts.seed;
  }
  return merged;
}

}  // namespace cpra
