#pragma once

// Multi-scale gated feed-forward: a pointwise expansion split into two halves,
// a 3x3 depthwise gate times a 5x5 depthwise value, projected back.

#include <cmath>

#include "cpra/ops.hpp"
#include "cpra/params.hpp"

namespace cpra {

inline int ffn_hidden(int channels, double expansion) {
  return static_cast<int>(std::lround(channels * expansion));
}

template <typename T>
struct MsgnParams {
  Affine<T> pw_in;    // C -> 2 r C
  Affine<T> dw3;      // over r C
  Affine<T> dw5;      // over r C
  Affine<T> lin_out;  // r C -> C

  static MsgnParams bind(ParamBinder<T>& b, const Scope& s) {
    return {Affine<T>::bind(b, s.child("pw_in")), Affine<T>::bind(b, s.child("dw3")), Affine<T>::bind(b, s.child("dw5")),
            Affine<T>::bind(b, s.child("lin_out"))};
  }
  static void specs(SpecList& out, const Scope& s, int channels, double expansion) {
    const int hidden = ffn_hidden(channels, expansion);
    out.affine(s.child("pw_in"), 2 * hidden, channels, 1);
    for (auto [name, k] : {std::pair{"dw3", 3}, std::pair{"dw5", 5}}) {
      out.specs.push_back({s.child(name).name("weight"), Shape{hidden, 1, k, k}, InitKind::Normal});
      if (out.use_bias) out.specs.push_back({s.child(name).name("bias"), Shape{1, hidden, 1, 1}, InitKind::Zeros});
    }
    out.affine(s.child("lin_out"), channels, hidden, 1);
  }
};

template <typename T>
Var<T> msgn(const Var<T>& f, const MsgnParams<T>& p) {
  Var<T> expanded = conv2d(f, p.pw_in.weight, p.pw_in.bias);
  std::vector<Var<T>> halves = split_channels(expanded, 2);
  Var<T> gate = depthwise_conv2d(halves[0], p.dw3.weight, p.dw3.bias);
  Var<T> value = depthwise_conv2d(halves[1], p.dw5.weight, p.dw5.bias);
  return linear(mul(gate, value), p.lin_out.weight, p.lin_out.bias);
}

}  // namespace cpra
