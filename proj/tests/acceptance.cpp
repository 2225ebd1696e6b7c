// Acceptance run: one PASS/FAIL line per criterion, each under its time limit.
// Exit status is nonzero when any criterion fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpra/attention.hpp"
#include "cpra/cli.hpp"
#include "cpra/fft.hpp"
#include "cpra/gradcheck.hpp"
#include "cpra/imaging.hpp"
#include "cpra/network.hpp"
#include "cpra/training.hpp"
#include "oracles.hpp"

namespace {

using namespace cpra;
using TD = Tensor<double>;
using VD = Var<double>;
namespace fs = std::filesystem;

const TD* const kNoBias = nullptr;

struct Outcome {
  bool ok = true;
  std::string detail;
};

// Collects the first failure message; later checks still run.
struct Checker {
  Outcome o;
  void expect(bool cond, const std::string& what) {
    if (!cond && o.ok) {
      o.ok = false;
      o.detail = what;
    }
  }
};

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

int dim(std::mt19937_64& rng, int lo = 1, int hi = 8) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

fs::path scratch_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("cpra_accept_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

ImagePlanar noise_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ImagePlanar img(w, h);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  Checker c;
  std::mt19937_64 rng(101);
  constexpr int kShapes = 60;
  double worst = 0;
  for (int t = 0; t < kShapes; ++t) {
    const int n = dim(rng, 1, 3), ci = dim(rng), co = dim(rng), h = dim(rng), w = dim(rng);
    const int k = 2 * dim(rng, 0, 3) + 1;  // 1, 3, 5, 7
    const int stride = dim(rng, 1, 2);
    const bool same = dim(rng, 0, 1) == 1 || k > std::min(h, w);
    TD x = oracle::random({n, ci, h, w}, rng), wt = oracle::random({co, ci, k, k}, rng), b = oracle::random({1, co, 1, 1}, rng);
    const double e = max_rel_diff(kernels::conv2d(x, wt, &b, stride, same ? Padding::Same : Padding::Valid),
                                  oracle::conv2d(x, wt, &b, stride, same));
    worst = std::max(worst, e);
    c.expect(e <= 1e-12, "conv2d shape #" + std::to_string(t) + " rel err " + fmt(e));
  }
  for (int t = 0; t < kShapes; ++t) {
    const int ch = dim(rng), h = dim(rng), w = dim(rng), k = dim(rng, 0, 1) ? 3 : 5;
    TD x = oracle::random({dim(rng, 1, 3), ch, h, w}, rng), wt = oracle::random({ch, 1, k, k}, rng),
       b = oracle::random({1, ch, 1, 1}, rng);
    const double e = max_rel_diff(kernels::depthwise_conv2d(x, wt, &b),
                                  oracle::conv2d(x, oracle::block_diagonal(wt), &b, 1, true));
    worst = std::max(worst, e);
    c.expect(e <= 1e-12, "depthwise_conv2d shape #" + std::to_string(t) + " rel err " + fmt(e));
  }
  for (int t = 0; t < kShapes; ++t) {
    const int ci = dim(rng), co = dim(rng);
    TD x = oracle::random({dim(rng, 1, 3), ci, dim(rng), dim(rng)}, rng), wt = oracle::random({co, ci, 1, 1}, rng),
       b = oracle::random({1, co, 1, 1}, rng);
    const double e = max_rel_diff(kernels::linear(x, wt, &b), oracle::linear(x, wt, &b));
    worst = std::max(worst, e);
    c.expect(e <= 1e-12, "linear shape #" + std::to_string(t) + " rel err " + fmt(e));
  }
  if (c.o.ok) c.o.detail = "3 x " + std::to_string(kShapes) + " shapes, max rel err " + fmt(worst);
  return c.o;
}

Outcome fft_correctness() {
  Checker c;
  std::mt19937_64 rng(202);
  double worst = 0;
  for (int size : {2, 4, 8, 16}) {
    TD x = oracle::random({2, 3, size, size}, rng);
    const auto got = fft2d(x);
    const auto want = oracle::dft2d(x, kNoBias);
    const double e = std::max(max_abs_diff(got.real, want.real), max_abs_diff(got.imag, want.imag));
    worst = std::max(worst, e);
    c.expect(e <= 1e-10, "fft vs DFT at " + std::to_string(size) + ": " + fmt(e));

    double ex = 0, es = 0;
    for (std::size_t i = 0; i < x.size(); ++i) ex += x[i] * x[i];
    for (std::size_t i = 0; i < got.real.size(); ++i) es += got.real[i] * got.real[i] + got.imag[i] * got.imag[i];
    const double parseval = std::abs(ex - es) / ex;
    worst = std::max(worst, parseval);
    c.expect(parseval <= 1e-10, "Parseval at " + std::to_string(size) + ": " + fmt(parseval));

    const auto back = ifft2d_complex(got);
    double rt = max_abs_diff(back.real, x);
    for (std::size_t i = 0; i < back.imag.size(); ++i) rt = std::max(rt, std::abs(back.imag[i]));
    worst = std::max(worst, rt);
    c.expect(rt <= 1e-10, "round trip at " + std::to_string(size) + ": " + fmt(rt));
  }
  if (c.o.ok) c.o.detail = "sizes 2..16 squared, max err " + fmt(worst);
  return c.o;
}

Outcome sparsity_semantics() {
  Checker c;
  std::mt19937_64 rng(303);
  double worst = 0;
  int checks = 0;
  for (int t = 0; t < 100; ++t) {
    const int heads = dim(rng, 1, 3), ch = dim(rng, 1, 8);
    const Shape s{dim(rng, 1, 2), heads * ch, dim(rng, 1, 5), dim(rng, 1, 5)};
    TD q = oracle::random(s, rng), k = oracle::random(s, rng), v = oracle::random(s, rng);
    const double tau = std::uniform_real_distribution<double>(0.5, 4.0)(rng);
    const TD logits = channel_attention_logits(q, k, heads, tau);
    RowMask prev;
    for (int kk = 1; kk <= ch; ++kk) {
      RowMask m = topk_row_mask(logits, kk);
      for (int n = 0; n < s.n; ++n)
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < ch; ++i) c.expect(m.row_count(n, h, i) == kk, "row does not keep exactly k entries");
      if (kk > 1)
        for (std::size_t i = 0; i < m.keep.size(); ++i) c.expect(prev.keep[i] <= m.keep[i], "kept sets do not nest");
      prev = std::move(m);
      ++checks;
    }
    const TD sparse = masked_channel_attention(VD::leaf(q), VD::leaf(k), VD::leaf(v), heads, prev, tau).value();
    const double e = max_abs_diff(sparse, oracle::dense_attention(q, k, v, heads, tau));
    worst = std::max(worst, e);
    c.expect(e <= 1e-10, "k = C_h differs from dense attention by " + fmt(e));
  }
  if (c.o.ok) c.o.detail = "100 matrices, " + std::to_string(checks) + " (matrix, k) pairs, dense gap " + fmt(worst);
  return c.o;
}

struct EpgoNet {
  SpecList sl;
  ModelWeights<double> w;
  explicit EpgoNet(int channels) {
    EpgoParams<double>::specs(sl, Scope{"epgo"}, channels);
    for (const auto& s : sl.specs) w.set(s.name, TD(s.shape));
  }
  EpgoOutput<double> run(const TD& x, int head_dim) const {
    ParamBinder<double> b(w);
    return epgo(VD::leaf(x), EpgoParams<double>::bind(b, Scope{"epgo"}), head_dim);
  }
};

Outcome epgo_contract() {
  Checker c;
  std::mt19937_64 rng(404);
  for (int head_dim = 1; head_dim <= 16; ++head_dim) {
    EpgoNet net(8);
    for (const auto& t : net.run(oracle::random({2, 8, 4, 4}, rng, -5, 5), head_dim).traces) {
      c.expect(t.p == 0.5, "zero-weight p = " + fmt(t.p));
      const int want = std::max(1, static_cast<int>(std::lround(0.5 * head_dim)));
      c.expect(t.k_per_head == want, "zero-weight k = " + std::to_string(t.k_per_head) + " at C_h " +
                                         std::to_string(head_dim));
    }
  }
  double lo = 1, hi = 0;
  for (int t = 0; t < 1000; ++t) {
    const int ch = dim(rng, 1, 12);
    EpgoNet net(ch);
    const double scale = std::uniform_real_distribution<double>(0.05, 2.0)(rng);
    for (const auto& s : net.sl.specs) net.w.set(s.name, oracle::random(s.shape, rng, -scale, scale));
    const auto out = net.run(oracle::random({1, ch, dim(rng, 1, 4), dim(rng, 1, 4)}, rng, -3, 3), dim(rng, 1, 16));
    const double p = out.traces[0].p;
    lo = std::min(lo, p);
    hi = std::max(hi, p);
    c.expect(p > 0 && p < 1, "p outside (0, 1): " + fmt(p));
  }
  c.expect(k_from_fraction(0.8, 10) == 8, "k_from_fraction(0.8, 10) != 8");
  // A network whose output sits at 0.8 everywhere: zero mixes, bias logit(0.8).
  EpgoNet net(10);
  net.w.set("epgo.w2.bias", TD(net.w.at("epgo.w2.bias").shape(), std::log(4.0)));
  const auto out = net.run(oracle::random({1, 10, 3, 3}, rng), 10);
  c.expect(std::abs(out.traces[0].p - 0.8) < 1e-12, "bias logit(0.8) gives p = " + fmt(out.traces[0].p));
  c.expect(out.traces[0].k_per_head == 8, "80% of C_h = 10 keeps " + std::to_string(out.traces[0].k_per_head));
  if (c.o.ok) c.o.detail = "p in [" + fmt(lo) + ", " + fmt(hi) + "] over 1000 inputs; 80% of 10 keeps 8";
  return c.o;
}

Outcome identity_chain() {
  Checker c;
  const ModelConfig cfg = ModelConfig::tiny();
  const ModelWeights<float> w = zero_weights<float>(cfg);
  int images = 0;
  for (auto [wd, ht] : {std::pair{16, 16}, std::pair{32, 16}, std::pair{8, 128}, std::pair{64, 64}}) {
    const ImagePlanar img = noise_image(wd, ht, static_cast<std::uint64_t>(wd * 1000 + ht));
    const Tensor<float> x = to_tensor<float>(img);
    const Tensor<float> y = infer(cfg, w, x).image.value();
    c.expect(y == x, "output tensor differs at " + std::to_string(wd) + "x" + std::to_string(ht));
    c.expect(from_tensor(y).rgb == img.rgb, "output bytes differ");
    ++images;
  }
  if (c.o.ok) c.o.detail = std::to_string(images) + " images reproduced bit-exactly";
  return c.o;
}

Outcome gradient_checks() {
  Checker c;
  GradCheckOptions opts;
  opts.include = [](const std::string& n) { return !is_epgo_param(n); };
  std::ostringstream summary;
  auto run = [&](const std::string& label, const std::vector<GradCheckCase>& cases, double fraction) {
    GradCheckOptions o = opts;
    o.sample_fraction = fraction;
    const GradCheckReport r = run_gradcheck_cases(cases, o);
    c.expect(!r.entries.empty(), label + ": no parameters checked");
    c.expect(r.pass(), label + " max rel err " + fmt(r.global_max));
    summary << label << ' ' << fmt(r.global_max) << "; ";
  };
  for (auto& m : module_gradcheck_cases(0)) run(m.name, {m}, 1.0);
  run("block", block_gradcheck_cases(0), 1.0);
  run("model(5%)", {model_gradcheck_case(ModelConfig::tiny(), 8, 0)}, 0.05);
  if (c.o.ok) c.o.detail = summary.str().substr(0, summary.str().size() - 2);
  return c.o;
}

Outcome toy_trainability() {
  Checker c;
  const ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc;  // 300 steps, patch 32, L1, seed 0
  c.expect(tc.steps == 300 && tc.patch == 32 && tc.loss == "l1", "default TrainConfig drifted");
  const TrainResult a = train_toy(mc, tc);
  const auto [head, tail] = loss_windows(a.losses);
  c.expect(a.losses.size() == 300, "curve has " + std::to_string(a.losses.size()) + " steps");
  c.expect(tail <= 0.5 * head, "final-10% mean " + fmt(tail) + " > half of first-10% mean " + fmt(head));
  const TrainResult b = train_toy(mc, tc);
  c.expect(a.losses == b.losses && a.weights == b.weights, "second run with the same seed differs");

  std::string fixture_note;
  std::ifstream fx(std::string(CPRA_TEST_DATA_DIR) + "/data/toy_curve_seed0.csv");
  if (fx) {
    std::ostringstream now;
    write_loss_curve_csv(a.losses, now);
    std::stringstream committed;
    committed << fx.rdbuf();
    fixture_note = committed.str() == now.str() ? ", matches committed curve" : ", differs from committed curve";
  }
  if (c.o.ok) c.o.detail = "loss " + fmt(head) + " -> " + fmt(tail) + " (ratio " + fmt(tail / head) + "), repeatable" +
                           fixture_note;
  return c.o;
}

Outcome metric_fidelity() {
  Checker c;
  ImagePlanar a(48, 32), b(48, 32);
  std::fill(a.rgb.begin(), a.rgb.end(), 100);
  std::fill(b.rgb.begin(), b.rgb.end(), 101);  // Y moves by exactly one level
  const double closed_form = 20.0 * std::log10(255.0);
  const double p = psnr_y(a, b);
  c.expect(std::abs(p - 48.1308) <= 1e-3, "psnr_y = " + fmt(p));
  c.expect(std::abs(p - closed_form) <= 1e-9, "psnr_y differs from 20 log10(255)");
  const ImagePlanar r = noise_image(40, 30, 8);
  c.expect(ssim_y(r, r) == 1.0, "ssim_y(a, a) = " + fmt(ssim_y(r, r)));

  const fs::path dir = scratch_dir("eval");
  fs::create_directories(dir / "pred");
  fs::create_directories(dir / "gt");
  for (int i = 0; i < 4; ++i) {
    const ImagePlanar img = noise_image(24 + 8 * i, 20, static_cast<std::uint64_t>(i));
    const std::string name = "img" + std::to_string(i) + ".ppm";
    write_ppm(img, (dir / "pred" / name).string());
    write_ppm(img, (dir / "gt" / name).string());
  }
  const std::string pred = (dir / "pred").string(), gt = (dir / "gt").string(), rep = (dir / "m.csv").string();
  const char* argv[] = {"cpra", "eval", "--pred", pred.c_str(), "--gt", gt.c_str(), "--report", rep.c_str()};
  std::ostringstream out, err;
  c.expect(cli::run(8, argv, out, err) == 0, "eval failed: " + err.str());
  std::ifstream is(rep);
  std::string line;
  std::getline(is, line);
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    c.expect(line.size() > 20 && line.substr(line.find(',')) == ",100.0000,1.000000", "eval row '" + line + "'");
  }
  c.expect(rows == 4, "eval wrote " + std::to_string(rows) + " rows");
  fs::remove_all(dir);
  if (c.o.ok) c.o.detail = "psnr " + fmt(p) + " dB, ssim(a,a) 1, " + std::to_string(rows) + " capped eval rows";
  return c.o;
}

Outcome serialization() {
  Checker c;
  const ModelConfig cfg = ModelConfig::tiny();
  const ModelWeights<float> w = init_weights<float>(cfg, 99);
  const ImagePlanar img = noise_image(32, 32, 99);
  const Tensor<float> before = infer(cfg, w, to_tensor<float>(img)).image.value();
  const fs::path dir = scratch_dir("weights");
  const std::string path = (dir / "w.bin").string();
  save_weights(w, path);
  const ModelWeights<float> loaded = load_weights<float>(path);
  c.expect(loaded == w, "loaded weights differ");
  const Tensor<float> after = infer(cfg, loaded, to_tensor<float>(img)).image.value();
  c.expect(after == before, "inference after reload differs");
  c.expect(from_tensor(after).rgb == from_tensor(before).rgb, "output bytes differ");
  const auto bytes = fs::file_size(path);
  fs::remove_all(dir);
  if (c.o.ok) c.o.detail = std::to_string(w.size()) + " tensors, " + std::to_string(bytes) + " bytes, bit-identical";
  return c.o;
}

Outcome shape_conformance() {
  Checker c;
  const ModelConfig cfg = ModelConfig::paper();
  c.expect(cfg.base_channels == 48, "C != 48");
  c.expect(cfg.blocks_per_level == std::array<int, 4>{4, 6, 6, 8}, "N != {4,6,6,8}");
  c.expect(cfg.heads_per_level == std::array<int, 4>{1, 2, 4, 8}, "heads != {1,2,4,8}");
  // Frozen from tests/oracles/param_count.py, an independent enumeration.
  constexpr std::size_t kEnumerated = 34870027;
  const std::size_t counted = param_count(cfg);
  c.expect(counted == kEnumerated, "param_count " + std::to_string(counted) + " != " + std::to_string(kEnumerated));
  const ModelWeights<float> w = init_weights<float>(cfg, 1);
  c.expect(w.scalar_count() == counted, "instantiated weights hold " + std::to_string(w.scalar_count()) + " scalars");
  std::vector<LayerTrace> traces;
  ForwardContext ctx;
  ctx.traces = &traces;
  const ImagePlanar img = noise_image(64, 64, 3);
  const Tensor<float> y = infer(cfg, w, to_tensor<float>(img), ctx).image.value();
  c.expect(y.shape() == (Shape{1, 3, 64, 64}), "output shape differs from input");
  c.expect(y.all_finite(), "non-finite output");
  const std::size_t blocks = 2 * (4 + 6 + 6) + 8;
  c.expect(traces.size() == blocks, std::to_string(traces.size()) + " attention traces, want " + std::to_string(blocks));
  if (c.o.ok) c.o.detail = std::to_string(counted) + " parameters, 1x3x64x64 forward finite, " +
                           std::to_string(traces.size()) + " attention layers";
  return c.o;
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "oracle equivalence", 10, oracle_equivalence},
      {2, "FFT correctness", 5, fft_correctness},
      {3, "sparsity semantics", 10, sparsity_semantics},
      {4, "EPGO contract", 5, epgo_contract},
      {5, "identity chain", 1, identity_chain},
      {6, "gradient checks", 120, gradient_checks},
      {7, "toy trainability", 600, toy_trainability},
      {8, "metric fidelity", 5, metric_fidelity},
      {9, "serialization", 5, serialization},
      {10, "shape/profile conformance", 60, shape_conformance},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.ok && secs > cr.limit_s) o = {false, o.detail + "; over the " + fmt(cr.limit_s) + " s limit"};
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.2f s / %.0f s", secs, cr.limit_s);
    std::cout << (o.ok ? "PASS" : "FAIL") << "  " << cr.id << ". " << cr.name << " [" << timing << "]  " << o.detail
              << std::endl;
    failed += o.ok ? 0 : 1;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
