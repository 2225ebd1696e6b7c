#pragma once

// Forward and adjoint kernels over plain tensors. Every reduction runs in a
// fixed loop order, so results are bit-reproducible for identical inputs.

#include <cmath>
#include <numbers>
#include <vector>

#include "cpra/fft.hpp"
#include "cpra/tensor.hpp"

namespace cpra {

enum class Padding { Same, Valid };

namespace kernels {

struct ConvGeometry {
  int k = 1;
  int stride = 1;
  int pad = 0;
  int out_h = 0;
  int out_w = 0;
};

inline ConvGeometry conv_geometry(const Shape& in, int k, int stride, Padding padding) {
  if (k < 1 || k % 2 == 0) shape_fail("conv2d: kernel size must be odd, got ", k);
  if (stride != 1 && stride != 2) shape_fail("conv2d: stride must be 1 or 2, got ", stride);
  ConvGeometry g;
  g.k = k;
  g.stride = stride;
  g.pad = padding == Padding::Same ? k / 2 : 0;
  const int span_h = in.h + 2 * g.pad - k;
  const int span_w = in.w + 2 * g.pad - k;
  if (span_h < 0 || span_w < 0)
    shape_fail("conv2d: input ", in.str(), " smaller than ", k, "x", k, " kernel");
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;
  return g;
}

template <typename T>
void check_bias(const Tensor<T>* bias, int channels, const char* what) {
  if (bias && bias->size() != static_cast<std::size_t>(channels))
    shape_fail(what, ": bias ", bias->shape().str(), " does not match ", channels, " output channels");
}

// Valid output index range [lo, hi) such that 0 <= o*stride - pad + tap < extent.
inline void tap_range(int tap, int pad, int stride, int extent, int out_extent, int& lo, int& hi) {
  const int off = tap - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const int last = extent - 1 - off;  // o*stride <= last
  hi = last < 0 ? 0 : std::min(out_extent, last / stride + 1);
  if (hi < lo) hi = lo;
}

// weight: C_out x C_in x k x k; bias: C_out elements (any 4D layout).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias);
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& gy, Tensor<T>* dx,
                     Tensor<T>* dweight, Tensor<T>* dbias);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int stride,
                 Padding padding) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.c != xs.c)
    shape_fail("conv2d: weight ", ws.str(), " expects ", ws.c, " input channels but input is ", xs.str());
  if (ws.h != ws.w) shape_fail("conv2d: weight ", ws.str(), " must have a square kernel");
  check_bias(bias, ws.n, "conv2d");
  if (ws.h == 1 && stride == 1) return linear(x, weight, bias);
  const ConvGeometry g = conv_geometry(xs, ws.h, stride, padding);
  Tensor<T> y(Shape{xs.n, ws.n, g.out_h, g.out_w});
  for (int n = 0; n < xs.n; ++n) {
    for (int co = 0; co < ws.n; ++co) {
      T* out = y.plane(n, co);
      const T b = bias ? (*bias)[co] : T(0);
      std::fill(out, out + y.shape().plane(), b);
      for (int ci = 0; ci < xs.c; ++ci) {
        const T* in = x.plane(n, ci);
        for (int kh = 0; kh < g.k; ++kh) {
          int oh_lo, oh_hi;
          tap_range(kh, g.pad, g.stride, xs.h, g.out_h, oh_lo, oh_hi);
          for (int kw = 0; kw < g.k; ++kw) {
            const T wv = weight.at(co, ci, kh, kw);
            int ow_lo, ow_hi;
            tap_range(kw, g.pad, g.stride, xs.w, g.out_w, ow_lo, ow_hi);
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const T* row = in + static_cast<std::size_t>(oh * g.stride - g.pad + kh) * xs.w;
              T* orow = out + static_cast<std::size_t>(oh) * g.out_w;
              for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * row[ow * g.stride - g.pad + kw];
            }
          }
        }
      }
    }
  }
  return y;
}

// Accumulates adjoints of conv2d into dx / dweight / dbias (each may be null).
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& gy, int stride,
                     Padding padding, Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.h == 1 && stride == 1) return linear_backward(x, weight, gy, dx, dweight, dbias);
  const ConvGeometry g = conv_geometry(xs, ws.h, stride, padding);
  for (int n = 0; n < xs.n; ++n) {
    for (int co = 0; co < ws.n; ++co) {
      const T* go = gy.plane(n, co);
      if (dbias) {
        T s = 0;
        for (std::size_t i = 0; i < gy.shape().plane(); ++i) s += go[i];
        (*dbias)[co] += s;
      }
      for (int ci = 0; ci < xs.c; ++ci) {
        const T* in = x.plane(n, ci);
        T* din = dx ? dx->plane(n, ci) : nullptr;
        for (int kh = 0; kh < g.k; ++kh) {
          int oh_lo, oh_hi;
          tap_range(kh, g.pad, g.stride, xs.h, g.out_h, oh_lo, oh_hi);
          for (int kw = 0; kw < g.k; ++kw) {
            const T wv = weight.at(co, ci, kh, kw);
            int ow_lo, ow_hi;
            tap_range(kw, g.pad, g.stride, xs.w, g.out_w, ow_lo, ow_hi);
            T acc = 0;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const std::size_t irow = static_cast<std::size_t>(oh * g.stride - g.pad + kh) * xs.w;
              const T* grow = go + static_cast<std::size_t>(oh) * g.out_w;
              for (int ow = ow_lo; ow < ow_hi; ++ow) {
                const std::size_t ii = irow + ow * g.stride - g.pad + kw;
                acc += in[ii] * grow[ow];
                if (din) din[ii] += wv * grow[ow];
              }
            }
            if (dweight) dweight->at(co, ci, kh, kw) += acc;
          }
        }
      }
    }
  }
}

// Per-channel convolution, same padding, stride 1. weight: C x 1 x k x k.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.n != xs.c || ws.c != 1)
    shape_fail("depthwise_conv2d: weight ", ws.str(), " incompatible with input ", xs.str());
  if (ws.h != ws.w) shape_fail("depthwise_conv2d: weight ", ws.str(), " must have a square kernel");
  check_bias(bias, xs.c, "depthwise_conv2d");
  const ConvGeometry g = conv_geometry(xs, ws.h, 1, Padding::Same);
  Tensor<T> y(xs);
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      std::fill(out, out + xs.plane(), bias ? (*bias)[c] : T(0));
      for (int kh = 0; kh < g.k; ++kh) {
        int oh_lo, oh_hi;
        tap_range(kh, g.pad, 1, xs.h, xs.h, oh_lo, oh_hi);
        for (int kw = 0; kw < g.k; ++kw) {
          const T wv = weight.at(c, 0, kh, kw);
          int ow_lo, ow_hi;
          tap_range(kw, g.pad, 1, xs.w, xs.w, ow_lo, ow_hi);
          for (int oh = oh_lo; oh < oh_hi; ++oh) {
            const std::ptrdiff_t irow = static_cast<std::ptrdiff_t>(oh - g.pad + kh) * xs.w - g.pad + kw;
            T* orow = out + static_cast<std::size_t>(oh) * xs.w;
            for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * in[irow + ow];
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
void depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& gy,
                               Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias) {
  const Shape& xs = x.shape();
  const ConvGeometry g = conv_geometry(xs, weight.shape().h, 1, Padding::Same);
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const T* in = x.plane(n, c);
      const T* go = gy.plane(n, c);
      T* din = dx ? dx->plane(n, c) : nullptr;
      if (dbias) {
        T s = 0;
        for (std::size_t i = 0; i < xs.plane(); ++i) s += go[i];
        (*dbias)[c] += s;
      }
      for (int kh = 0; kh < g.k; ++kh) {
        int oh_lo, oh_hi;
        tap_range(kh, g.pad, 1, xs.h, xs.h, oh_lo, oh_hi);
        for (int kw = 0; kw < g.k; ++kw) {
          const T wv = weight.at(c, 0, kh, kw);
          int ow_lo, ow_hi;
          tap_range(kw, g.pad, 1, xs.w, xs.w, ow_lo, ow_hi);
          T acc = 0;
          for (int oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t irow = static_cast<std::size_t>(oh - g.pad + kh) * xs.w - g.pad + kw;
            const T* grow = go + static_cast<std::size_t>(oh) * xs.w;
            for (int ow = ow_lo; ow < ow_hi; ++ow) {
              acc += in[irow + ow] * grow[ow];
              if (din) din[irow + ow] += wv * grow[ow];
            }
          }
          if (dweight) dweight->at(c, 0, kh, kw) += acc;
        }
      }
    }
  }
}

// Channel-axis matrix product at every (n, h, w) site. weight: C_out x C_in (x 1 x 1).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.c != xs.c || ws.h != 1 || ws.w != 1)
    shape_fail("linear: weight ", ws.str(), " expects ", ws.c, " input channels but input is ", xs.str());
  check_bias(bias, ws.n, "linear");
  const std::size_t hw = xs.plane();
  Tensor<T> y(Shape{xs.n, ws.n, xs.h, xs.w});
  const T* wp = weight.vec().data();
  const std::size_t cin = static_cast<std::size_t>(xs.c);
  for (int n = 0; n < xs.n; ++n) {
    const T* in = x.plane(n, 0);
    for (int co = 0; co < ws.n; ++co) {
      T* out = y.plane(n, co);
      const T* wrow = wp + co * cin;
      const T b = bias ? (*bias)[co] : T(0);
      if (hw >= 16 && sizeof(T) <= sizeof(double)) {  // x87 long double prefers the register form
        std::fill(out, out + hw, b);
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T wv = wrow[ci];
          const T* src = in + ci * hw;
          for (std::size_t p = 0; p < hw; ++p) out[p] += wv * src[p];
        }
      } else {
        // tiny planes: keep the running sum in a register
        for (std::size_t p = 0; p < hw; ++p) {
          T acc = b;
          for (std::size_t ci = 0; ci < cin; ++ci) acc += wrow[ci] * in[ci * hw + p];
          out[p] = acc;
        }
      }
    }
  }
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& gy, Tensor<T>* dx,
                     Tensor<T>* dweight, Tensor<T>* dbias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const std::size_t hw = xs.plane();
  for (int n = 0; n < xs.n; ++n) {
    for (int co = 0; co < ws.n; ++co) {
      const T* go = gy.plane(n, co);
      if (dbias) {
        T s = 0;
        for (std::size_t p = 0; p < hw; ++p) s += go[p];
        (*dbias)[co] += s;
      }
      for (int ci = 0; ci < xs.c; ++ci) {
        const T* in = x.plane(n, ci);
        if (dweight) {
          T s = 0;
          for (std::size_t p = 0; p < hw; ++p) s += go[p] * in[p];
          dweight->at(co, ci, 0, 0) += s;
        }
        if (dx) {
          const T wv = weight.at(co, ci, 0, 0);
          T* din = dx->plane(n, ci);
          for (std::size_t p = 0; p < hw; ++p) din[p] += wv * go[p];
        }
      }
    }
  }
}

template <typename T>
struct LayerNormCache {
  Tensor<T> xhat;
  std::vector<T> rstd;  // one per (n, h, w) site
};

// Normalizes across channels independently at each spatial site.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                    LayerNormCache<T>* cache = nullptr) {
  const Shape& s = x.shape();
  if (gamma.size() != static_cast<std::size_t>(s.c) || beta.size() != static_cast<std::size_t>(s.c))
    shape_fail("layernorm: affine ", gamma.shape().str(), "/", beta.shape().str(), " does not match input ",
               s.str());
  const std::size_t hw = s.plane();
  Tensor<T> y(s);
  Tensor<T> xhat(s);
  std::vector<T> rstd(static_cast<std::size_t>(s.n) * hw);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      T mean = 0;
      for (int c = 0; c < s.c; ++c) mean += x.plane(n, c)[p];
      mean /= s.c;
      T var = 0;
      for (int c = 0; c < s.c; ++c) {
        const T d = x.plane(n, c)[p] - mean;
        var += d * d;
      }
      var /= s.c;
      const T r = T(1) / std::sqrt(var + eps);
      rstd[n * hw + p] = r;
      for (int c = 0; c < s.c; ++c) {
        const T xh = (x.plane(n, c)[p] - mean) * r;
        xhat.plane(n, c)[p] = xh;
        y.plane(n, c)[p] = xh * gamma[c] + beta[c];
      }
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(rstd)};
  return y;
}

template <typename T>
void layernorm_backward(const LayerNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& gy,
                        Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const Shape& s = gy.shape();
  const std::size_t hw = s.plane();
  std::vector<T> dxhat(s.c);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      T mean_d = 0, mean_dx = 0;
      for (int c = 0; c < s.c; ++c) {
        const T g = gy.plane(n, c)[p];
        const T xh = cache.xhat.plane(n, c)[p];
        if (dgamma) (*dgamma)[c] += g * xh;
        if (dbeta) (*dbeta)[c] += g;
        dxhat[c] = g * gamma[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xh;
      }
      if (!dx) continue;
      mean_d /= s.c;
      mean_dx /= s.c;
      const T r = cache.rstd[n * hw + p];
      for (int c = 0; c < s.c; ++c)
        dx->plane(n, c)[p] += r * (dxhat[c] - mean_d - cache.xhat.plane(n, c)[p] * mean_dx);
    }
  }
}

// Iterates the (outer, inner) decomposition of `axis`: element l of a line sits
// at base + l * stride.
struct AxisWalk {
  std::size_t outer = 1, length = 1, stride = 1;
};

inline AxisWalk axis_walk(const Shape& s, int axis) {
  if (axis < 0 || axis > 3) shape_fail("softmax: axis ", axis, " out of range");
  AxisWalk a;
  a.length = s.dim(axis);
  for (int d = axis + 1; d < 4; ++d) a.stride *= s.dim(d);
  a.outer = s.numel() / (a.length * a.stride);
  return a;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const AxisWalk a = axis_walk(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.stride; ++i) {
      const std::size_t base = o * a.length * a.stride + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < a.length; ++l) mx = std::max(mx, x[base + l * a.stride]);
      T sum = 0;
      for (std::size_t l = 0; l < a.length; ++l) {
        const T e = std::exp(x[base + l * a.stride] - mx);
        y[base + l * a.stride] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < a.length; ++l) y[base + l * a.stride] /= sum;
    }
  }
  return y;
}

template <typename T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& gy, int axis, Tensor<T>& dx) {
  const AxisWalk a = axis_walk(y.shape(), axis);
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.stride; ++i) {
      const std::size_t base = o * a.length * a.stride + i;
      T dot = 0;
      for (std::size_t l = 0; l < a.length; ++l) dot += y[base + l * a.stride] * gy[base + l * a.stride];
      for (std::size_t l = 0; l < a.length; ++l) {
        const std::size_t k = base + l * a.stride;
        dx[k] += y[k] * (gy[k] - dot);
      }
    }
  }
}

template <typename T>
T gelu(T v) {
  return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T v) {
  const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(2 * std::numbers::pi_v<T>);
  return cdf + v * pdf;
}

template <typename T>
T sigmoid(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F&& f) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

// Mean over H x W, giving N x C x 1 x 1.
template <typename T>
Tensor<T> gap(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> y(Shape{s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* in = x.plane(n, c);
      T sum = 0;
      for (std::size_t p = 0; p < s.plane(); ++p) sum += in[p];
      y.at(n, c, 0, 0) = sum / static_cast<T>(s.plane());
    }
  }
  return y;
}

// Output shape of a broadcasting binary op: each dim equal, or 1 on one side.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  Shape out;
  int* od[4] = {&out.n, &out.c, &out.h, &out.w};
  for (int d = 0; d < 4; ++d) {
    const int x = a.dim(d), y = b.dim(d);
    if (x != y && x != 1 && y != 1) shape_fail(what, ": cannot broadcast ", a.str(), " with ", b.str());
    *od[d] = std::max(x, y);
  }
  return out;
}

// Index of the element of a broadcast operand of shape `s` feeding output (n,c,h,w).
inline std::size_t broadcast_index(const Shape& s, int n, int c, int h, int w) {
  const int bn = s.n == 1 ? 0 : n, bc = s.c == 1 ? 0 : c;
  const int bh = s.h == 1 ? 0 : h, bw = s.w == 1 ? 0 : w;
  return ((static_cast<std::size_t>(bn) * s.c + bc) * s.h + bh) * s.w + bw;
}

template <typename T, typename F>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, F&& f, const char* what) {
  const Shape os = broadcast_shape(a.shape(), b.shape(), what);
  Tensor<T> y(os);
  std::size_t i = 0;
  for (int n = 0; n < os.n; ++n)
    for (int c = 0; c < os.c; ++c)
      for (int h = 0; h < os.h; ++h)
        for (int w = 0; w < os.w; ++w, ++i)
          y[i] = f(a[broadcast_index(a.shape(), n, c, h, w)], b[broadcast_index(b.shape(), n, c, h, w)]);
  return y;
}

// Adds g (output-shaped) into acc (operand-shaped), summing over broadcast dims.
// When `other` is given the contribution is g * other (for products).
template <typename T>
void reduce_broadcast_into(const Tensor<T>& g, Tensor<T>& acc, const Tensor<T>* other = nullptr) {
  const Shape& os = g.shape();
  std::size_t i = 0;
  for (int n = 0; n < os.n; ++n)
    for (int c = 0; c < os.c; ++c)
      for (int h = 0; h < os.h; ++h)
        for (int w = 0; w < os.w; ++w, ++i) {
          const T m = other ? (*other)[broadcast_index(other->shape(), n, c, h, w)] : T(1);
          acc[broadcast_index(acc.shape(), n, c, h, w)] += g[i] * m;
        }
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) shape_fail("concat: no inputs");
  Shape s = parts.front()->shape();
  int total = 0;
  for (const auto* p : parts) {
    const Shape& ps = p->shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w)
      shape_fail("concat: incompatible shapes ", s.str(), " and ", ps.str());
    total += ps.c;
  }
  s.c = total;
  Tensor<T> y(s);
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const auto* p : parts) {
      const std::size_t len = p->shape().plane() * p->shape().c;
      std::copy_n(p->plane(n, 0), len, y.plane(n, c0));
      c0 += p->shape().c;
    }
  }
  return y;
}

// Channel slice [c0, c0 + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int count) {
  const Shape& s = x.shape();
  if (c0 < 0 || count < 1 || c0 + count > s.c)
    shape_fail("slice_channels: [", c0, ", ", c0 + count, ") outside ", s.str());
  Tensor<T> y(Shape{s.n, count, s.h, s.w});
  for (int n = 0; n < s.n; ++n) std::copy_n(x.plane(n, c0), s.plane() * count, y.plane(n, 0));
  return y;
}

template <typename T>
void add_channel_slice(const Tensor<T>& g, Tensor<T>& acc, int c0) {
  const Shape& s = g.shape();
  for (int n = 0; n < s.n; ++n) {
    const T* src = g.plane(n, 0);
    T* dst = acc.plane(n, c0);
    for (std::size_t i = 0; i < s.plane() * s.c; ++i) dst[i] += src[i];
  }
}

// N x C x H x W -> N x C r^2 x H/r x W/r; channel c*r*r + i*r + j holds x[c, h*r+i, w*r+j].
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  const Shape& s = x.shape();
  if (r < 1 || s.h % r != 0 || s.w % r != 0)
    shape_fail("pixel_unshuffle: spatial dims of ", s.str(), " not divisible by ", r);
  Tensor<T> y(Shape{s.n, s.c * r * r, s.h / r, s.w / r});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j)
          for (int h = 0; h < s.h / r; ++h)
            for (int w = 0; w < s.w / r; ++w)
              y.at(n, c * r * r + i * r + j, h, w) = x.at(n, c, h * r + i, w * r + j);
  return y;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  const Shape& s = x.shape();
  if (r < 1 || s.c % (r * r) != 0) shape_fail("pixel_shuffle: channels of ", s.str(), " not divisible by ", r * r);
  const int co = s.c / (r * r);
  Tensor<T> y(Shape{s.n, co, s.h * r, s.w * r});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < co; ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j)
          for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
              y.at(n, c, h * r + i, w * r + j) = x.at(n, c * r * r + i * r + j, h, w);
  return y;
}

}  // namespace kernels
}  // namespace cpra
