#pragma once

// Four-level encoder-decoder assembled from transformer blocks, plus model
// configuration, parameter enumeration, seeded initialization and the binary
// weight file.

#include <any>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpra/attention.hpp"
#include "cpra/context.hpp"
#include "cpra/ffn.hpp"
#include "cpra/fusion.hpp"
#include "cpra/ops.hpp"
#include "cpra/params.hpp"

namespace cpra {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class WeightFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kLevels = 4;

enum class Profile { Paper, Tiny };

inline const char* profile_name(Profile p) { return p == Profile::Paper ? "paper" : "tiny"; }

struct ModelConfig {
  int base_channels = 8;
  std::array<int, kLevels> blocks_per_level{1, 1, 1, 1};
  std::array<int, kLevels> heads_per_level{1, 2, 2, 4};
  double ffn_expansion = 2.0;
  Profile profile = Profile::Tiny;
  bool use_bias = true;
  std::uint64_t seed = 0;

  static ModelConfig paper() {
    ModelConfig c;
    c.base_channels = 48;
    c.blocks_per_level = {4, 6, 6, 8};
    c.heads_per_level = {1, 2, 4, 8};
    c.profile = Profile::Paper;
    return c;
  }
  static ModelConfig tiny() { return ModelConfig{}; }

  // Channels at level 1..4: C * 2^(level-1).
  int channels(int level) const { return base_channels << (level - 1); }

  void validate() const {
    if (base_channels < 1) throw ConfigError("config field 'base_channels' must be positive");
    if (!(ffn_expansion > 0)) throw ConfigError("config field 'ffn_expansion' must be positive");
    for (int i = 0; i < kLevels; ++i) {
      if (blocks_per_level[i] < 1) throw ConfigError("config field 'blocks_per_level' entries must be >= 1");
      if (heads_per_level[i] < 1 || channels(i + 1) % heads_per_level[i] != 0)
        throw ConfigError("config field 'heads_per_level': level " + std::to_string(i + 1) + " has " +
                          std::to_string(channels(i + 1)) + " channels, not divisible by " +
                          std::to_string(heads_per_level[i]) + " heads");
    }
    const ModelConfig ref = profile == Profile::Paper ? paper() : tiny();
    if (base_channels != ref.base_channels)
      throw ConfigError(std::string("config field 'base_channels' does not match profile '") + profile_name(profile) + "'");
    if (blocks_per_level != ref.blocks_per_level)
      throw ConfigError(std::string("config field 'blocks_per_level' does not match profile '") + profile_name(profile) + "'");
    if (heads_per_level != ref.heads_per_level)
      throw ConfigError(std::string("config field 'heads_per_level' does not match profile '") + profile_name(profile) + "'");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"base_channels", c.base_channels},     {"blocks_per_level", c.blocks_per_level},
          {"heads_per_level", c.heads_per_level}, {"ffn_expansion", c.ffn_expansion},
          {"profile", profile_name(c.profile)},   {"use_bias", c.use_bias},
          {"seed", c.seed}};
}

// Parses a config object carrying exactly the ModelConfig fields.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> fields{"base_channels", "blocks_per_level", "heads_per_level", "ffn_expansion",
                                            "profile",       "use_bias",         "seed"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!fields.count(key)) throw ConfigError("unknown config field '" + key + "'");
  for (const auto& f : fields)
    if (!j.contains(f)) throw ConfigError("missing config field '" + f + "'");

  ModelConfig c;
  auto field = [&](const char* name, auto& out) {
    try {
      j.at(name).get_to(out);
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("config field '") + name + "' has the wrong type");
    }
  };
  field("base_channels", c.base_channels);
  field("blocks_per_level", c.blocks_per_level);
  field("heads_per_level", c.heads_per_level);
  field("ffn_expansion", c.ffn_expansion);
  field("use_bias", c.use_bias);
  field("seed", c.seed);
  std::string profile;
  field("profile", profile);
  if (profile == "paper")
    c.profile = Profile::Paper;
  else if (profile == "tiny")
    c.profile = Profile::Tiny;
  else
    throw ConfigError("config field 'profile' must be \"paper\" or \"tiny\", got \"" + profile + "\"");
  c.validate();
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config JSON in '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Parameter naming and shape walk

inline std::string block_prefix(int level, int index) {
  return "level" + std::to_string(level) + ".block" + std::to_string(index);
}

// Encoder level i uses blocks [0, N_i), decoder level i uses [N_i, 2 N_i); the
// bottleneck (level 4) has only encoder blocks.
inline std::vector<std::string> encoder_blocks(const ModelConfig& c, int level) {
  std::vector<std::string> out;
  for (int j = 0; j < c.blocks_per_level[level - 1]; ++j) out.push_back(block_prefix(level, j));
  return out;
}
inline std::vector<std::string> decoder_blocks(const ModelConfig& c, int level) {
  std::vector<std::string> out;
  const int n = c.blocks_per_level[level - 1];
  for (int j = n; j < 2 * n; ++j) out.push_back(block_prefix(level, j));
  return out;
}

inline void block_specs(SpecList& out, const Scope& s, int channels, double expansion) {
  out.norm(s.child("norm1"), channels);
  SpcSaParams<double>::specs(out, s.child("spc"), channels);
  EpgoParams<double>::specs(out, s.child("spc").child("epgo"), channels);
  SprSaParams<double>::specs(out, s.child("spr"), channels);
  AafmParams<double>::specs(out, s.child("aafm"), channels);
  out.norm(s.child("norm2"), channels);
  MsgnParams<double>::specs(out, s.child("msgn"), channels, expansion);
}

inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  SpecList out;
  out.use_bias = c.use_bias;
  out.affine({"embed"}, c.base_channels, 3, 7);
  for (int level = 1; level <= kLevels; ++level) {
    for (const auto& b : encoder_blocks(c, level)) block_specs(out, {b}, c.channels(level), c.ffn_expansion);
    if (level < kLevels) {
      const int ch = c.channels(level);
      out.affine({"down" + std::to_string(level)}, 2 * ch, 4 * ch, 1);
    }
  }
  for (int level = kLevels - 1; level >= 1; --level) {
    const int ch = c.channels(level);
    out.affine({"up" + std::to_string(level)}, 4 * ch, 2 * ch, 1);
    out.affine({"fuse" + std::to_string(level)}, ch, 2 * ch, 1);
    for (const auto& b : decoder_blocks(c, level)) block_specs(out, {b}, ch, c.ffn_expansion);
  }
  out.affine({"head"}, 3, c.base_channels, 3);
  return out.specs;
}

inline std::size_t param_count(const ModelConfig& c) {
  std::size_t n = 0;
  for (const auto& s : param_specs(c)) n += s.shape.numel();
  return n;
}

inline bool is_epgo_param(const std::string& name) { return name.find(".epgo.") != std::string::npos; }

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

inline constexpr double kInitStd = 0.02;

// Truncated normal (|z| <= 2 sigma) for conv/linear weights, ones/zeros for the
// norm affine and zeros for biases. Each tensor draws from its own stream
// seeded by (seed, name).
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& c, std::uint64_t seed, double std_dev = kInitStd) {
  ModelWeights<T> w;
  for (const auto& spec : param_specs(c)) {
    Tensor<T> t(spec.shape);
    if (spec.init == InitKind::Ones) {
      t.fill(T(1));
    } else if (spec.init == InitKind::Normal) {
      std::mt19937_64 rng(detail::splitmix64(seed ^ detail::fnv1a(spec.name)));
      std::normal_distribution<double> normal(0.0, 1.0);
      for (auto& v : t.data()) {
        double z;
        do z = normal(rng);
        while (std::abs(z) > 2.0);
        v = static_cast<T>(z * std_dev);
      }
    }
    w.set(spec.name, std::move(t));
  }
  return w;
}

template <typename T>
ModelWeights<T> zero_weights(const ModelConfig& c) {
  ModelWeights<T> w;
  for (const auto& spec : param_specs(c)) w.set(spec.name, Tensor<T>(spec.shape));
  return w;
}

// Throws naming the first parameter whose presence or shape disagrees with the config.
template <typename T>
void check_compatible(const ModelConfig& c, const ModelWeights<T>& w) {
  const auto specs = param_specs(c);
  for (const auto& s : specs) {
    if (!w.contains(s.name)) throw WeightFileError("weights lack parameter '" + s.name + "' required by the config");
    if (w.at(s.name).shape() != s.shape)
      throw WeightFileError("parameter '" + s.name + "' has shape " + w.at(s.name).shape().str() + ", config expects " +
                            s.shape.str());
  }
  if (w.size() != specs.size()) {
    std::set<std::string> known;
    for (const auto& s : specs) known.insert(s.name);
    for (const auto& [name, _] : w)
      if (!known.count(name)) throw WeightFileError("weights carry parameter '" + name + "' unknown to the config");
  }
}

// ---------------------------------------------------------------------------
// Weight file: "CPRA", u32 version, then per parameter u32 name length, UTF-8
// name, u8 dtype tag (1 = f32, 2 = f64), 4 x u32 dims, little-endian payload.

inline constexpr std::uint32_t kWeightFormatVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
bool get_le(std::istream& is, U& v) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  std::memcpy(&v, b, sizeof(U));
  return true;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
  return std::is_same_v<T, float> ? 1 : 2;
}

}  // namespace detail

template <typename T>
void write_weights(std::ostream& os, const ModelWeights<T>& w) {
  os.write("CPRA", 4);
  detail::put_le<std::uint32_t>(os, kWeightFormatVersion);
  for (const auto& [name, t] : w) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint8_t>(os, detail::dtype_tag<T>());
    for (int d = 0; d < 4; ++d) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().dim(d)));
    for (T v : t.data()) detail::put_le<T>(os, v);
  }
}

template <typename T>
ModelWeights<T> read_weights(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CPRA", 4) != 0) throw WeightFileError("weight file: bad magic");
  std::uint32_t version = 0;
  if (!detail::get_le(is, version)) throw WeightFileError("weight file: truncated header");
  if (version != kWeightFormatVersion)
    throw WeightFileError("weight file: unsupported format version " + std::to_string(version));
  ModelWeights<T> w;
  std::uint32_t name_len = 0;
  while (detail::get_le(is, name_len) || is.gcount() != 0) {
    if (is.gcount() != 4) throw WeightFileError("weight file: truncated record header");
    if (name_len == 0 || name_len > 4096) throw WeightFileError("weight file: bad name length");
    std::string name(name_len, '\0');
    std::uint8_t tag = 0;
    std::array<std::uint32_t, 4> dims{};
    bool ok = static_cast<bool>(is.read(name.data(), name_len)) && detail::get_le(is, tag);
    for (auto& d : dims) ok = ok && detail::get_le(is, d);
    if (!ok) throw WeightFileError("weight file: truncated record for '" + name + "'");
    if (tag != 1 && tag != 2) throw WeightFileError("weight file: unknown dtype tag for '" + name + "'");
    for (auto d : dims)
      if (d == 0 || d > (1u << 24)) throw WeightFileError("weight file: bad dims for '" + name + "'");
    Tensor<T> t(Shape{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                      static_cast<int>(dims[3])});
    for (auto& v : t.data()) {
      bool got;
      if (tag == 1) {
        float f = 0;
        got = detail::get_le(is, f);
        v = static_cast<T>(f);
      } else {
        double d = 0;
        got = detail::get_le(is, d);
        v = static_cast<T>(d);
      }
      if (!got) throw WeightFileError("weight file: truncated payload for '" + name + "'");
    }
    if (w.contains(name)) throw WeightFileError("weight file: duplicate parameter '" + name + "'");
    w.set(name, std::move(t));
  }
  if (!is.eof()) throw WeightFileError("weight file: read error");
  return w;
}

template <typename T>
void save_weights(const ModelWeights<T>& w, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw WeightFileError("cannot open '" + path + "' for writing");
  write_weights(os, w);
  if (!os) throw WeightFileError("failed writing '" + path + "'");
}

template <typename T>
ModelWeights<T> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw WeightFileError("cannot open weight file '" + path + "'");
  return read_weights<T>(is);
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
struct BlockParams {
  Var<T> norm1_gamma, norm1_beta, norm2_gamma, norm2_beta;
  SpcSaParams<T> spc;
  EpgoParams<T> epgo;
  SprSaParams<T> spr;
  AafmParams<T> aafm;
  MsgnParams<T> msgn;

  static BlockParams bind(ParamBinder<T>& b, const Scope& s, int heads) {
    return {b.get(s.child("norm1").name("gamma")),
            b.get(s.child("norm1").name("beta")),
            b.get(s.child("norm2").name("gamma")),
            b.get(s.child("norm2").name("beta")),
            SpcSaParams<T>::bind(b, s.child("spc"), heads),
            EpgoParams<T>::bind(b, s.child("spc").child("epgo")),
            SprSaParams<T>::bind(b, s.child("spr")),
            AafmParams<T>::bind(b, s.child("aafm")),
            MsgnParams<T>::bind(b, s.child("msgn"))};
  }
};

template <typename T>
struct BlockOutput {
  Var<T> features;
  std::vector<SparsityTrace> traces;
};

// Pre-norm residual block:
//   F1 = F + AAFM(SPR(LN1 F), SPC(LN1 F)),  F2 = F1 + MSGN(LN2 F1).
template <typename T>
BlockOutput<T> block_forward(const Var<T>& f, const BlockParams<T>& p, ForwardContext& ctx,
                             const std::string& name = "block") {
  const T eps = static_cast<T>(kLayerNormEps);
  Var<T> normed = layernorm(f, p.norm1_gamma, p.norm1_beta, eps);
  Var<T> spr = spr_sa(normed, p.spr);
  SpcSaOutput<T> spc = spc_sa(normed, p.spc, p.epgo, ctx, name + ".spc");
  Var<T> f1 = add(f, aafm(spr, spc.features, p.aafm, AafmOptions{}, &ctx, name + ".aafm"));
  Var<T> f2 = add(f1, msgn(layernorm(f1, p.norm2_gamma, p.norm2_beta, eps), p.msgn));
  return {f2, spc.traces};
}

inline void require_model_input(const Shape& s) {
  const bool ok_h = is_power_of_two(s.h) && s.h >= 8;
  const bool ok_w = is_power_of_two(s.w) && s.w >= 8;
  if (s.c != 3) shape_fail("model input must have 3 channels, got ", s.str());
  if (!ok_h || !ok_w)
    shape_fail("model input ", s.str(), " unsupported: height and width must be powers of two >= 8 (8, 16, 32, 64, 128, ...)");
}

template <typename T>
Var<T> embed(const Var<T>& image, ParamBinder<T>& b) {
  require_model_input(image.shape());
  return conv2d(image, b.get("embed.weight"), b.maybe("embed.bias"));
}

// pixel_unshuffle(2) then pointwise 4C -> 2C.
template <typename T>
Var<T> downsample(const Var<T>& f, const Affine<T>& adjust) {
  return conv2d(pixel_unshuffle(f, 2), adjust.weight, adjust.bias);
}

// Pointwise C -> 2C then pixel_shuffle(2), giving C/2 channels.
template <typename T>
Var<T> upsample(const Var<T>& f, const Affine<T>& adjust) {
  return pixel_shuffle(conv2d(f, adjust.weight, adjust.bias), 2);
}

// Channel concat then pointwise 2C -> C.
template <typename T>
Var<T> skip_fuse(const Var<T>& decoder, const Var<T>& encoder, const Affine<T>& reduce) {
  return conv2d(concat_channels<T>({decoder, encoder}), reduce.weight, reduce.bias);
}

template <typename T>
struct ModelOutput {
  Var<T> image;
  std::vector<LayerTrace> traces;
};

// Execution order of the network's stages: embed, encoder blocks and
// downsamplers, then per decoder level up / fuse / blocks, then head.
inline std::vector<std::string> stage_names(const ModelConfig& c) {
  std::vector<std::string> out{"embed"};
  for (int level = 1; level <= kLevels; ++level) {
    for (auto& n : encoder_blocks(c, level)) out.push_back(n);
    if (level < kLevels) out.push_back("down" + std::to_string(level));
  }
  for (int level = kLevels - 1; level >= 1; --level) {
    out.push_back("up" + std::to_string(level));
    out.push_back("fuse" + std::to_string(level));
    for (auto& n : decoder_blocks(c, level)) out.push_back(n);
  }
  out.push_back("head");
  return out;
}

// Index into stage_names() of the stage owning a parameter.
inline std::size_t stage_of_param(const ModelConfig& c, const std::string& param) {
  const std::vector<std::string> names = stage_names(c);
  for (std::size_t i = 0; i < names.size(); ++i)
    if (param.size() > names[i].size() && param.compare(0, names[i].size(), names[i]) == 0 &&
        param[names[i].size()] == '.')
      return i;
  throw std::out_of_range("parameter '" + param + "' belongs to no stage");
}

namespace detail {

// Runs one stage unless a stage cache already holds its output.
template <typename T, typename F>
Var<T> run_stage(ForwardContext& ctx, std::size_t& index, F&& compute) {
  const std::size_t i = index++;
  StageCache* cache = ctx.stages;
  if (cache && !cache->record && i < cache->first_dirty && i < cache->outputs.size())
    return Var<T>::leaf(std::any_cast<const Tensor<T>&>(cache->outputs[i]));
  Var<T> out = compute();
  if (cache && cache->record) {
    if (cache->outputs.size() <= i) cache->outputs.resize(i + 1);
    cache->outputs[i] = out.value();
  }
  return out;
}

}  // namespace detail

// I_out = I_in + conv3x3(decoder(encoder(conv7x7(I_in)))). No clamping inside the graph.
template <typename T>
ModelOutput<T> model_forward(const ModelConfig& c, ParamBinder<T>& b, const Var<T>& image, ForwardContext ctx = {}) {
  std::vector<LayerTrace> traces;
  std::vector<LayerTrace>* outer = ctx.traces;
  ctx.traces = &traces;
  std::size_t stage = 0;
  auto block = [&](const std::string& name, int heads, Var<T>& f) {
    f = detail::run_stage<T>(ctx, stage, [&] {
      return block_forward(f, BlockParams<T>::bind(b, {name}, heads), ctx, name).features;
    });
  };

  std::array<Var<T>, kLevels> skips;
  Var<T> f = detail::run_stage<T>(ctx, stage, [&] { return embed(image, b); });
  for (int level = 1; level <= kLevels; ++level) {
    for (const auto& name : encoder_blocks(c, level)) block(name, c.heads_per_level[level - 1], f);
    skips[level - 1] = f;
    if (level < kLevels)
      f = detail::run_stage<T>(ctx, stage, [&] { return downsample(f, Affine<T>::bind(b, {"down" + std::to_string(level)})); });
  }
  for (int level = kLevels - 1; level >= 1; --level) {
    const std::string id = std::to_string(level);
    f = detail::run_stage<T>(ctx, stage, [&] { return upsample(f, Affine<T>::bind(b, {"up" + id})); });
    f = detail::run_stage<T>(ctx, stage,
                             [&] { return skip_fuse(f, skips[level - 1], Affine<T>::bind(b, {"fuse" + id})); });
    for (const auto& name : decoder_blocks(c, level)) block(name, c.heads_per_level[level - 1], f);
  }
  Var<T> residual = detail::run_stage<T>(ctx, stage, [&] { return conv2d(f, b.get("head.weight"), b.maybe("head.bias")); });
  if (outer) outer->insert(outer->end(), traces.begin(), traces.end());
  return {add(image, residual), std::move(traces)};
}

// Inference without a tape.
template <typename T>
ModelOutput<T> infer(const ModelConfig& c, const ModelWeights<T>& w, const Tensor<T>& image, ForwardContext ctx = {}) {
  NoGradScope<T> no_grad;
  ParamBinder<T> binder(w);
  return model_forward(c, binder, Var<T>::leaf(image), ctx);
}

}  // namespace cpra
