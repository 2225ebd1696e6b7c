#pragma once

// Command-line front end. run() never calls exit(), so tests drive it in-process.
//   0  success
//   1  usage error (unknown flag, missing required flag, bad flag value)
//   2  runtime error (missing file, malformed config, incompatible weights, failed check)

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpra/gradcheck.hpp"
#include "cpra/imaging.hpp"
#include "cpra/network.hpp"
#include "cpra/reports.hpp"
#include "cpra/training.hpp"

namespace cpra::cli {

class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::ofstream open_output(const std::string& path, const char* flag) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError(std::string("cannot write ") + flag + " '" + path + "'");
  return os;
}

inline void require_file(const std::string& path, const char* flag) {
  if (!std::filesystem::is_regular_file(path)) throw RuntimeError(std::string(flag) + ": no such file '" + path + "'");
}

inline ModelConfig read_config(const std::string& path) {
  require_file(path, "--config");
  try {
    return load_config(path);
  } catch (const std::exception& e) {
    throw RuntimeError(std::string("--config '") + path + "': " + e.what());
  }
}

inline ModelWeights<float> read_model_weights(const std::string& path, const ModelConfig& config) {
  require_file(path, "--weights");
  ModelWeights<float> w;
  try {
    w = load_weights<float>(path);
  } catch (const std::exception& e) {
    throw RuntimeError(std::string("--weights '") + path + "': " + e.what());
  }
  try {
    check_compatible(config, w);
  } catch (const std::exception& e) {
    throw RuntimeError(std::string("--weights '") + path + "' does not fit --config: " + e.what());
  }
  return w;
}

inline ImagePlanar read_image(const std::string& path, const char* flag) {
  require_file(path, flag);
  try {
    return read_ppm(path);
  } catch (const std::exception& e) {
    throw RuntimeError(std::string(flag) + " '" + path + "': " + e.what());
  }
}

inline std::vector<LayerTrace> run_model(const ModelConfig& config, const ModelWeights<float>& w, const ImagePlanar& img,
                                         ImagePlanar* restored) {
  std::vector<LayerTrace> traces;
  ForwardContext ctx;
  ctx.traces = &traces;
  ModelOutput<float> out;
  try {
    out = infer(config, w, to_tensor<float>(img), ctx);
  } catch (const ShapeError& e) {
    throw RuntimeError(std::string("--in: ") + e.what());
  }
  if (restored) *restored = from_tensor(out.image.value());
  return traces;
}

inline std::vector<std::string> ppm_names(const std::string& dir, const char* flag) {
  if (!std::filesystem::is_directory(dir)) throw RuntimeError(std::string(flag) + ": no such directory '" + dir + "'");
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace detail

struct InferArgs {
  std::string weights, config, in, out, trace;
};
struct TrainArgs {
  std::string config, out, curve;
  int steps = 300;
  std::uint64_t seed = 0;
};
struct GradcheckArgs {
  std::string config, scope = "block", report;
  std::optional<double> sample;
};
struct RainArgs {
  std::string in, out;
  double angle = 10.0, intensity = 0.6;
  int count = 60;
  std::uint64_t seed = 0;
};
struct EvalArgs {
  std::string pred, gt, report;
};
struct TraceArgs {
  std::string weights, config, in, out;
};

inline void cmd_infer(const InferArgs& a, std::ostream& out) {
  const ModelConfig config = detail::read_config(a.config);
  const ModelWeights<float> w = detail::read_model_weights(a.weights, config);
  const ImagePlanar img = detail::read_image(a.in, "--in");
  ImagePlanar restored;
  const auto traces = detail::run_model(config, w, img, &restored);
  auto os = detail::open_output(a.out, "--out");
  write_ppm(restored, os);
  if (!a.trace.empty()) {
    auto ts = detail::open_output(a.trace, "--trace");
    write_trace_csv(traces, ts);
  }
  out << "wrote " << a.out << " (" << img.width << "x" << img.height << ")\n";
}

inline void cmd_train(const TrainArgs& a, std::ostream& out) {
  if (a.steps < 0) throw RuntimeError("--steps must be non-negative");
  ModelConfig config = detail::read_config(a.config);
  config.seed = a.seed;
  TrainConfig tc;
  tc.steps = a.steps;
  tc.seed = a.seed;
  auto weights_os = detail::open_output(a.out, "--out");
  auto curve_os = detail::open_output(a.curve, "--curve");
  TrainResult r;
  try {
    r = train_toy(config, tc);
  } catch (const TrainingError& e) {
    throw RuntimeError(e.what());
  }
  write_weights(weights_os, r.weights);
  write_loss_curve_csv(r.losses, curve_os);
  const auto [head, tail] = loss_windows(r.losses);
  out << "steps " << r.losses.size() << ", first-10% mean loss " << head << ", last-10% mean loss " << tail << "\n";
}

inline bool cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const ModelConfig config = detail::read_config(a.config);
  GradCheckOptions opts;
  opts.seed = config.seed;
  opts.include = [](const std::string& n) { return !is_epgo_param(n); };
  std::vector<GradCheckCase> cases;
  if (a.scope == "ops") {
    cases = op_gradcheck_cases(config.seed);
    for (auto& c : module_gradcheck_cases(config.seed)) cases.push_back(std::move(c));
  } else if (a.scope == "block") {
    cases = block_gradcheck_cases(config.seed);
  } else {
    cases.push_back(model_gradcheck_case(config, 8, config.seed));
  }
  opts.sample_fraction = a.sample.value_or(a.scope == "model" ? 0.05 : 1.0);
  if (!(opts.sample_fraction > 0 && opts.sample_fraction <= 1)) throw RuntimeError("--sample must lie in (0, 1]");
  auto os = detail::open_output(a.report, "--report");
  const GradCheckReport r = run_gradcheck_cases(cases, opts);
  write_gradcheck_csv(r, os);
  out << "checked " << r.entries.size() << " tensors, global max relative error " << r.global_max
      << (r.pass() ? " (pass)\n" : " (FAIL)\n");
  return r.pass();
}

inline void cmd_rain(const RainArgs& a, std::ostream& out) {
  const ImagePlanar clean = detail::read_image(a.in, "--in");
  RainParams p;
  p.angle = a.angle;
  p.streak_count = a.count;
  p.intensity = a.intensity;
  p.seed = a.seed;
  try {
    p.validate();
  } catch (const std::exception& e) {
    throw RuntimeError(e.what());
  }
  auto os = detail::open_output(a.out, "--out");
  write_ppm(synth_rain(clean, p), os);
  out << "wrote " << a.out << "\n";
}

inline void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto pred = detail::ppm_names(a.pred, "--pred");
  const auto gt = detail::ppm_names(a.gt, "--gt");
  if (pred.empty()) throw RuntimeError("--pred '" + a.pred + "' holds no .ppm files");
  if (pred != gt) {
    for (const auto& n : pred)
      if (!std::binary_search(gt.begin(), gt.end(), n)) throw RuntimeError("--gt: no counterpart for '" + n + "'");
    for (const auto& n : gt)
      if (!std::binary_search(pred.begin(), pred.end(), n)) throw RuntimeError("--pred: no counterpart for '" + n + "'");
  }
  std::vector<MetricRow> rows;
  for (const auto& name : pred) {
    const ImagePlanar p = detail::read_image((std::filesystem::path(a.pred) / name).string(), "--pred");
    const ImagePlanar g = detail::read_image((std::filesystem::path(a.gt) / name).string(), "--gt");
    try {
      rows.push_back({name, psnr_y(p, g), ssim_y(p, g)});
    } catch (const std::exception& e) {
      throw RuntimeError("'" + name + "': " + e.what());
    }
  }
  auto os = detail::open_output(a.report, "--report");
  write_metrics_csv(rows, os);
  double psnr = 0, ssim = 0;
  for (const auto& r : rows) {
    psnr += r.psnr_db;
    ssim += r.ssim;
  }
  out << rows.size() << " pairs, mean PSNR " << psnr / rows.size() << " dB, mean SSIM " << ssim / rows.size() << "\n";
}

inline void cmd_trace(const TraceArgs& a, std::ostream& out) {
  const ModelConfig config = detail::read_config(a.config);
  const ModelWeights<float> w = detail::read_model_weights(a.weights, config);
  const ImagePlanar img = detail::read_image(a.in, "--in");
  const auto traces = detail::run_model(config, w, img, nullptr);
  auto os = detail::open_output(a.out, "--out");
  write_trace_csv(traces, os);
  out << "wrote " << traces.size() << " layer traces to " << a.out << "\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sparse prompt attention deraining network: inference, toy training, checks and metrics", "cpra"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand and exit");

  InferArgs infer_args;
  auto* infer = app.add_subcommand("infer", "Derain one PPM image");
  infer->add_option("--weights", infer_args.weights, "Weight file")->required();
  infer->add_option("--config", infer_args.config, "Model config JSON")->required();
  infer->add_option("--in", infer_args.in, "Input PPM (P6)")->required();
  infer->add_option("--out", infer_args.out, "Output PPM")->required();
  infer->add_option("--trace", infer_args.trace, "Optional sparsity trace CSV");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train-toy", "Train on procedural synthetic rain");
  train->add_option("--config", train_args.config, "Model config JSON")->required();
  train->add_option("--steps", train_args.steps, "Optimizer steps")->required();
  train->add_option("--seed", train_args.seed, "Seed for initialization and data")->required();
  train->add_option("--out", train_args.out, "Output weight file")->required();
  train->add_option("--curve", train_args.curve, "Loss curve CSV (step,loss)")->required();

  GradcheckArgs gc_args;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gc->add_option("--config", gc_args.config, "Model config JSON")->required();
  gc->add_option("--scope", gc_args.scope, "What to check")->required()->check(CLI::IsMember({"ops", "block", "model"}));
  gc->add_option("--sample", gc_args.sample, "Fraction of entries per tensor (default 1, model 0.05)");
  gc->add_option("--report", gc_args.report, "Report CSV (param,rel_err)")->required();

  RainArgs rain_args;
  auto* rain = app.add_subcommand("rain-synth", "Add synthetic rain streaks to an image");
  rain->add_option("--in", rain_args.in, "Clean PPM")->required();
  rain->add_option("--out", rain_args.out, "Rainy PPM")->required();
  rain->add_option("--angle", rain_args.angle, "Streak angle from vertical, degrees")->capture_default_str();
  rain->add_option("--count", rain_args.count, "Number of streaks")->capture_default_str();
  rain->add_option("--intensity", rain_args.intensity, "Peak streak amplitude in [0,1]")->capture_default_str();
  rain->add_option("--seed", rain_args.seed, "Streak placement seed")->capture_default_str();

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Y-channel PSNR/SSIM over same-named PPM pairs");
  eval->add_option("--pred", eval_args.pred, "Directory of restored images")->required();
  eval->add_option("--gt", eval_args.gt, "Directory of ground-truth images")->required();
  eval->add_option("--report", eval_args.report, "Metrics CSV (image,psnr_db,ssim)")->required();

  TraceArgs trace_args;
  auto* trace = app.add_subcommand("trace", "Export per-layer sparsity statistics");
  trace->add_option("--weights", trace_args.weights, "Weight file")->required();
  trace->add_option("--config", trace_args.config, "Model config JSON")->required();
  trace->add_option("--in", trace_args.in, "Input PPM")->required();
  trace->add_option("--out", trace_args.out, "Trace CSV (layer,head,p,k,retained_fraction)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\nRun with --help for usage.\n";
    return 1;
  }

  try {
    if (*infer) cmd_infer(infer_args, out);
    if (*train) cmd_train(train_args, out);
    if (*gc && !cmd_gradcheck(gc_args, out)) {
      err << "error: gradient check exceeded the 1e-4 threshold; see " << gc_args.report << "\n";
      return 2;
    }
    if (*rain) cmd_rain(rain_args, out);
    if (*eval) cmd_eval(eval_args, out);
    if (*trace) cmd_trace(trace_args, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace cpra::cli
