#pragma once

// Sparse prompt channel self-attention (dynamic top-k over C_h x C_h channel
// attention, with k set by the prompt-guide operator) and spatial pixel
// refinement self-attention (a convolutional approximation of spatial
// attention).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpra/context.hpp"
#include "cpra/ops.hpp"
#include "cpra/params.hpp"

namespace cpra {

inline constexpr double kLayerNormEps = 1e-6;

// Column indices of a row ordered by descending value; ties keep the lower
// index first. The first k entries are the row's top-k set, so the sets nest.
template <typename T>
std::vector<int> rank_row(std::span<const T> row) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row[a] > row[b]; });
  return idx;
}

// Keep-mask of the k largest entries in each row of M (shape N x heads x rows x cols).
template <typename T>
RowMask topk_row_mask(const Tensor<T>& m, int k) {
  const Shape& s = m.shape();
  if (k < 1 || k > s.w) throw std::out_of_range("topk_row_mask: k=" + std::to_string(k) + " outside [1, " +
                                                std::to_string(s.w) + "]");
  RowMask mask{s, std::vector<std::uint8_t>(s.numel(), 0)};
  const std::size_t rows = s.numel() / s.w;
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const T> row(m.vec().data() + r * s.w, s.w);
    const std::vector<int> order = rank_row(row);
    for (int j = 0; j < k; ++j) mask.keep[r * s.w + order[j]] = 1;
  }
  return mask;
}

inline int k_from_fraction(double p, int head_dim) {
  const long k = std::lround(head_dim * p);
  return static_cast<int>(std::clamp<long>(k, 1, head_dim));
}

inline int epgo_hidden_dim(int channels) { return std::max((channels + 3) / 4, 4); }

template <typename T>
struct EpgoParams {
  Var<T> ln_gamma;
  Var<T> ln_beta;
  Affine<T> w1;  // C -> hidden
  Affine<T> w2;  // hidden -> C

  static EpgoParams bind(ParamBinder<T>& b, const Scope& s) {
    return {b.get(s.child("ln").name("gamma")), b.get(s.child("ln").name("beta")), Affine<T>::bind(b, s.child("w1")),
            Affine<T>::bind(b, s.child("w2"))};
  }
  static void specs(SpecList& out, const Scope& s, int channels) {
    const int hidden = epgo_hidden_dim(channels);
    out.norm(s.child("ln"), channels);
    out.affine(s.child("w1"), hidden, channels, 1);
    out.affine(s.child("w2"), channels, hidden, 1);
  }
};

template <typename T>
struct EpgoOutput {
  Var<T> p;  // N x 1 x 1 x 1, graph-connected only in straight-through mode
  std::vector<SparsityTrace> traces;  // one per batch item
};

// Prompt-guide operator: p = mean(sigmoid(W2 relu(W1 LN(F)))) per batch item,
// linear layers acting on channels at each site; k = clamp(round(C_h p), 1, C_h).
template <typename T>
EpgoOutput<T> epgo(const Var<T>& f, const EpgoParams<T>& params, int head_dim) {
  Var<T> x = layernorm(f, params.ln_gamma, params.ln_beta, static_cast<T>(kLayerNormEps));
  x = relu(linear(x, params.w1.weight, params.w1.bias));
  x = sigmoid(linear(x, params.w2.weight, params.w2.bias));
  EpgoOutput<T> out{mean_per_item(x), {}};
  for (int n = 0; n < f.shape().n; ++n) {
    SparsityTrace t;
    t.p = static_cast<double>(out.p.value()[n]);
    t.head_dim = head_dim;
    t.k_per_head = k_from_fraction(t.p, head_dim);
    t.retained_fraction = static_cast<double>(t.k_per_head) / head_dim;
    out.traces.push_back(t);
  }
  return out;
}

namespace detail {

inline std::size_t mask_offset(const Shape& s, int n, int head) {
  return (static_cast<std::size_t>(n) * s.c + head) * s.h * s.w;
}

}  // namespace detail

// Multi-head channel attention softmax(T_k(Q K^T / tau)) V. q, k, v: N x C x H x W,
// rows are channels and the contraction runs over H*W. `mask` selects the kept
// logits per row; the rest are -inf before the softmax and so carry exactly
// zero weight.
template <typename T>
Var<T> masked_channel_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, const RowMask& mask,
                                T temperature) {
  const Shape& s = q.shape();
  require_same_shape(s, k.shape(), "channel_attention q/k");
  require_same_shape(s, v.shape(), "channel_attention q/v");
  if (heads < 1 || s.c % heads != 0) shape_fail("channel_attention: ", s.c, " channels not divisible by ", heads, " heads");
  const int ch = s.c / heads;
  if (mask.shape != Shape{s.n, heads, ch, ch})
    shape_fail("channel_attention: mask ", mask.shape.str(), " does not match ", Shape{s.n, heads, ch, ch}.str());
  const std::size_t hw = s.plane();

  auto attn = std::make_shared<Tensor<T>>(Shape{s.n, heads, ch, ch});
  Tensor<T> out(s);
  std::vector<T> logits(ch);
  for (int n = 0; n < s.n; ++n) {
    for (int h = 0; h < heads; ++h) {
      T* a = attn->vec().data() + detail::mask_offset(attn->shape(), n, h);
      for (int i = 0; i < ch; ++i) {
        const T* qi = q.value().plane(n, h * ch + i);
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < ch; ++j) {
          if (!mask.at(n, h, i, j)) continue;
          const T* kj = k.value().plane(n, h * ch + j);
          T dot = 0;
          for (std::size_t p = 0; p < hw; ++p) dot += qi[p] * kj[p];
          logits[j] = dot / temperature;
          mx = std::max(mx, logits[j]);
        }
        T sum = 0;
        for (int j = 0; j < ch; ++j) {
          a[i * ch + j] = mask.at(n, h, i, j) ? std::exp(logits[j] - mx) : T(0);
          sum += a[i * ch + j];
        }
        for (int j = 0; j < ch; ++j) a[i * ch + j] /= sum;
        T* oi = out.plane(n, h * ch + i);
        for (int j = 0; j < ch; ++j) {
          const T w = a[i * ch + j];
          if (w == T(0)) continue;
          const T* vj = v.value().plane(n, h * ch + j);
          for (std::size_t p = 0; p < hw; ++p) oi[p] += w * vj[p];
        }
      }
    }
  }

  return make_result<T>(std::move(out), any_requires_grad(q, k, v), "channel_attention",
                        [q, k, v, heads, ch, hw, attn, temperature](Node<T>& self) {
                          const Shape& s = q.shape();
                          Tensor<T>* dq = grad_sink(q);
                          Tensor<T>* dk = grad_sink(k);
                          Tensor<T>* dv = grad_sink(v);
                          std::vector<T> ds(static_cast<std::size_t>(ch) * ch);
                          for (int n = 0; n < s.n; ++n) {
                            for (int h = 0; h < heads; ++h) {
                              const T* a = attn->vec().data() + detail::mask_offset(attn->shape(), n, h);
                              for (int i = 0; i < ch; ++i) {
                                const T* go = self.grad.plane(n, h * ch + i);
                                T row_dot = 0;
                                for (int j = 0; j < ch; ++j) {
                                  const T* vj = v.value().plane(n, h * ch + j);
                                  T da = 0;
                                  for (std::size_t p = 0; p < hw; ++p) da += go[p] * vj[p];
                                  ds[i * ch + j] = da;
                                  row_dot += a[i * ch + j] * da;
                                  if (dv && a[i * ch + j] != T(0)) {
                                    T* dvj = dv->plane(n, h * ch + j);
                                    const T w = a[i * ch + j];
                                    for (std::size_t p = 0; p < hw; ++p) dvj[p] += w * go[p];
                                  }
                                }
                                for (int j = 0; j < ch; ++j)
                                  ds[i * ch + j] = a[i * ch + j] * (ds[i * ch + j] - row_dot) / temperature;
                              }
                              for (int i = 0; i < ch; ++i) {
                                for (int j = 0; j < ch; ++j) {
                                  const T g = ds[i * ch + j];
                                  if (g == T(0)) continue;
                                  const T* qi = q.value().plane(n, h * ch + i);
                                  const T* kj = k.value().plane(n, h * ch + j);
                                  if (dq) {
                                    T* d = dq->plane(n, h * ch + i);
                                    for (std::size_t p = 0; p < hw; ++p) d[p] += g * kj[p];
                                  }
                                  if (dk) {
                                    T* d = dk->plane(n, h * ch + j);
                                    for (std::size_t p = 0; p < hw; ++p) d[p] += g * qi[p];
                                  }
                                }
                              }
                            }
                          }
                        });
}

// Raw scaled logits Q K^T / tau per head: N x heads x C_h x C_h.
template <typename T>
Tensor<T> channel_attention_logits(const Tensor<T>& q, const Tensor<T>& k, int heads, T temperature) {
  const Shape& s = q.shape();
  const int ch = s.c / heads;
  Tensor<T> m(Shape{s.n, heads, ch, ch});
  for (int n = 0; n < s.n; ++n)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < ch; ++i)
        for (int j = 0; j < ch; ++j) {
          const T* qi = q.plane(n, h * ch + i);
          const T* kj = k.plane(n, h * ch + j);
          T dot = 0;
          for (std::size_t p = 0; p < s.plane(); ++p) dot += qi[p] * kj[p];
          m.at(n, h, i, j) = dot / temperature;
        }
  return m;
}

// Mask keeping k_per_item[n] entries per row for batch item n.
template <typename T>
RowMask dynamic_topk_mask(const Tensor<T>& logits, const std::vector<int>& k_per_item) {
  const Shape& s = logits.shape();
  RowMask mask{s, std::vector<std::uint8_t>(s.numel(), 0)};
  for (int n = 0; n < s.n; ++n) {
    const int k = k_per_item.at(n);
    if (k < 1 || k > s.w) throw std::out_of_range("top-k count " + std::to_string(k) + " outside row length");
    for (int h = 0; h < s.c; ++h)
      for (int i = 0; i < s.h; ++i) {
        const std::size_t base = ((static_cast<std::size_t>(n) * s.c + h) * s.h + i) * s.w;
        const std::vector<int> order = rank_row(std::span<const T>(logits.vec().data() + base, s.w));
        for (int j = 0; j < k; ++j) mask.keep[base + order[j]] = 1;
      }
  }
  return mask;
}

template <typename T>
struct SpcSaParams {
  Affine<T> qkv_pw;   // C -> 3C pointwise
  Affine<T> qkv_dw;   // 3x3 depthwise over 3C
  Affine<T> out_proj; // C -> C pointwise
  int heads = 1;

  static SpcSaParams bind(ParamBinder<T>& b, const Scope& s, int heads) {
    return {Affine<T>::bind(b, s.child("qkv_pw")), Affine<T>::bind(b, s.child("qkv_dw")),
            Affine<T>::bind(b, s.child("out_proj")), heads};
  }
  static void specs(SpecList& out, const Scope& s, int channels) {
    out.affine(s.child("qkv_pw"), 3 * channels, channels, 1);
    out.specs.push_back({s.child("qkv_dw").name("weight"), Shape{3 * channels, 1, 3, 3}, InitKind::Normal});
    if (out.use_bias) out.specs.push_back({s.child("qkv_dw").name("bias"), Shape{1, 3 * channels, 1, 1}, InitKind::Zeros});
    out.affine(s.child("out_proj"), channels, channels, 1);
  }
};

template <typename T>
struct SpcSaOutput {
  Var<T> features;
  std::vector<SparsityTrace> traces;  // one per batch item
};

template <typename T>
T attention_temperature(const Shape& s) {
  return std::sqrt(static_cast<T>(s.plane()));
}

// Sparse prompt channel self-attention. `layer` names the mask slot in ctx.masks.
template <typename T>
SpcSaOutput<T> spc_sa(const Var<T>& f, const SpcSaParams<T>& params, const EpgoParams<T>& epgo_params,
                      ForwardContext& ctx, const std::string& layer = "spc") {
  const Shape& s = f.shape();
  if (params.heads < 1 || s.c % params.heads != 0)
    shape_fail("spc_sa: ", s.c, " channels not divisible by ", params.heads, " heads");
  const int ch = s.c / params.heads;

  EpgoOutput<T> prompt;
  if (ctx.epgo_straight_through) {
    prompt = epgo(f, epgo_params, ch);
  } else {
    NoGradScope<T> no_grad;
    prompt = epgo(f, epgo_params, ch);
  }

  Var<T> qkv = depthwise_conv2d(conv2d(f, params.qkv_pw.weight, params.qkv_pw.bias), params.qkv_dw.weight,
                                params.qkv_dw.bias);
  std::vector<Var<T>> parts = split_channels(qkv, 3);
  const T tau = attention_temperature<T>(s);

  RowMask mask;
  const bool replay = ctx.masks && ctx.masks->mode == MaskMode::Replay;
  if (replay) {
    auto it = ctx.masks->masks.find(layer);
    if (it == ctx.masks->masks.end()) throw std::runtime_error("no frozen mask recorded for layer '" + layer + "'");
    mask = it->second;
  } else {
    std::vector<int> ks;
    for (const auto& t : prompt.traces) ks.push_back(t.k_per_head);
    mask = dynamic_topk_mask(channel_attention_logits(parts[0].value(), parts[1].value(), params.heads, tau), ks);
    if (ctx.masks && ctx.masks->mode == MaskMode::Record) ctx.masks->masks[layer] = mask;
  }
  if (replay) {
    for (int n = 0; n < s.n; ++n) {
      auto& t = prompt.traces[n];
      t.k_per_head = mask.row_count(n, 0, 0);
      t.retained_fraction = static_cast<double>(t.k_per_head) / ch;
    }
  }

  Var<T> attended = masked_channel_attention(parts[0], parts[1], parts[2], params.heads, mask, tau);
  if (ctx.epgo_straight_through) attended = mul(attended, straight_through_unit(prompt.p));
  Var<T> out = conv2d(attended, params.out_proj.weight, params.out_proj.bias);

  if (ctx.traces)
    for (int n = 0; n < s.n; ++n) ctx.traces->push_back({layer, n, params.heads, prompt.traces[n]});
  return {out, prompt.traces};
}

template <typename T>
struct SprSaParams {
  Affine<T> lin_in;
  Affine<T> dw3;
  Affine<T> pw_mid;
  Affine<T> pw_out;

  static SprSaParams bind(ParamBinder<T>& b, const Scope& s) {
    return {Affine<T>::bind(b, s.child("lin_in")), Affine<T>::bind(b, s.child("dw3")), Affine<T>::bind(b, s.child("pw_mid")),
            Affine<T>::bind(b, s.child("pw_out"))};
  }
  static void specs(SpecList& out, const Scope& s, int channels) {
    out.affine(s.child("lin_in"), channels, channels, 1);
    out.specs.push_back({s.child("dw3").name("weight"), Shape{channels, 1, 3, 3}, InitKind::Normal});
    if (out.use_bias) out.specs.push_back({s.child("dw3").name("bias"), Shape{1, channels, 1, 1}, InitKind::Zeros});
    out.affine(s.child("pw_mid"), channels, channels, 1);
    out.affine(s.child("pw_out"), channels, channels, 1);
  }
};

// F_L = PW(DW3(Linear(F))); F_SP = GAP(F_L); out = PW(gelu(F_SP * F_L)).
template <typename T>
Var<T> spr_sa(const Var<T>& f, const SprSaParams<T>& p) {
  Var<T> local = linear(f, p.lin_in.weight, p.lin_in.bias);
  local = depthwise_conv2d(local, p.dw3.weight, p.dw3.bias);
  local = conv2d(local, p.pw_mid.weight, p.pw_mid.bias);
  Var<T> pooled = gap(local);
  return conv2d(gelu(mul(pooled, local)), p.pw_out.weight, p.pw_out.bias);
}

}  // namespace cpra
