#pragma once

// Adaptive alignment frequency module: spatial/channel alignment maps reweight
// the two attention branches, then the blend is mixed in the Fourier domain.

#include <algorithm>
#include <string>

#include "cpra/context.hpp"
#include "cpra/ops.hpp"
#include "cpra/params.hpp"

namespace cpra {

inline int align_reduced_channels(int channels) { return std::max((channels + 7) / 8, 1); }

template <typename T>
struct AafmParams {
  Affine<T> spatial_pw1;  // C -> C/8
  Affine<T> spatial_pw2;  // C/8 -> 1
  Affine<T> channel_pw1;  // C -> C/8
  Affine<T> channel_pw2;  // C/8 -> C
  Affine<T> lin_pre;      // C -> C
  Affine<T> lin_freq;     // 2C -> 2C over the stacked [R, I] spectrum

  static AafmParams bind(ParamBinder<T>& b, const Scope& s) {
    return {Affine<T>::bind(b, s.child("spatial_pw1")), Affine<T>::bind(b, s.child("spatial_pw2")),
            Affine<T>::bind(b, s.child("channel_pw1")), Affine<T>::bind(b, s.child("channel_pw2")),
            Affine<T>::bind(b, s.child("lin_pre")),     Affine<T>::bind(b, s.child("lin_freq"))};
  }
  static void specs(SpecList& out, const Scope& s, int channels) {
    const int r = align_reduced_channels(channels);
    out.affine(s.child("spatial_pw1"), r, channels, 1);
    out.affine(s.child("spatial_pw2"), 1, r, 1);
    out.affine(s.child("channel_pw1"), r, channels, 1);
    out.affine(s.child("channel_pw2"), channels, r, 1);
    out.affine(s.child("lin_pre"), channels, channels, 1);
    out.affine(s.child("lin_freq"), 2 * channels, 2 * channels, 1);
  }
};

struct AafmOptions {
  bool freq_skip = true;  // add the stage input back after the frequency mixing
};

// N x 1 x H x W map in (0, 1).
template <typename T>
Var<T> spatial_align_map(const Var<T>& f_spc, const AafmParams<T>& p) {
  Var<T> x = gelu(conv2d(f_spc, p.spatial_pw1.weight, p.spatial_pw1.bias));
  return sigmoid(conv2d(x, p.spatial_pw2.weight, p.spatial_pw2.bias));
}

// N x C x 1 x 1 map in (0, 1).
template <typename T>
Var<T> channel_align_map(const Var<T>& f_spr, const AafmParams<T>& p) {
  Var<T> x = gelu(conv2d(gap(f_spr), p.channel_pw1.weight, p.channel_pw1.bias));
  return sigmoid(conv2d(x, p.channel_pw2.weight, p.channel_pw2.bias));
}

// F_hat = F_spr * Map_S + F_spc * Map_C with Map_S from the channel-attention
// branch and Map_C from the spatial branch.
template <typename T>
Var<T> align_fuse(const Var<T>& f_spr, const Var<T>& f_spc, const AafmParams<T>& p) {
  require_same_shape(f_spr.shape(), f_spc.shape(), "align_fuse");
  Var<T> map_s = spatial_align_map(f_spc, p);
  Var<T> map_c = channel_align_map(f_spr, p);
  return add(mul(f_spr, map_s), mul(f_spc, map_c));
}

// out = Re IFFT(lin_freq([R, I])) with (R, I) = FFT(lin_pre(F_hat)), plus F_hat
// when the skip is on.
template <typename T>
Var<T> freq_interact(const Var<T>& f_hat, const AafmParams<T>& p, const AafmOptions& opts = {},
                     ForwardContext* ctx = nullptr, const std::string& layer = "aafm") {
  Var<T> spectrum = fft2d_stacked(linear(f_hat, p.lin_pre.weight, p.lin_pre.bias));
  Var<T> mixed = linear(spectrum, p.lin_freq.weight, p.lin_freq.bias);
  if (ctx && ctx->imag_energy) {
    const int c = f_hat.shape().c;
    ComplexPair<T> spec(kernels::slice_channels(mixed.value(), 0, c), kernels::slice_channels(mixed.value(), c, c));
    ComplexPair<T> back = ifft2d_complex(spec);
    ImagEnergy e{layer, 0.0, 0.0};
    for (T v : back.imag.data()) e.discarded_imag += static_cast<double>(v) * v;
    for (T v : back.real.data()) e.kept_real += static_cast<double>(v) * v;
    ctx->imag_energy->push_back(e);
  }
  Var<T> out = ifft2d_real_stacked(mixed);
  return opts.freq_skip ? add(out, f_hat) : out;
}

template <typename T>
Var<T> aafm(const Var<T>& f_spr, const Var<T>& f_spc, const AafmParams<T>& p, const AafmOptions& opts = {},
            ForwardContext* ctx = nullptr, const std::string& layer = "aafm") {
  return freq_interact(align_fuse(f_spr, f_spc, p), p, opts, ctx, layer);
}

}  // namespace cpra
