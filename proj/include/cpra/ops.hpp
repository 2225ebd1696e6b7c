#pragma once

// Differentiable wrappers over the kernels. Each op computes its value with a
// kernel and, when recording, registers the matching adjoint.

#include <vector>

#include "cpra/autograd.hpp"
#include "cpra/fft.hpp"
#include "cpra/kernels.hpp"

namespace cpra {

template <typename T>
const Tensor<T>* value_or_null(const Var<T>& v) {
  return v.defined() ? &v.value() : nullptr;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}, int stride = 1,
              Padding padding = Padding::Same) {
  return make_result<T>(
      kernels::conv2d(x.value(), weight.value(), value_or_null(bias), stride, padding),
      any_requires_grad(x, weight, bias), "conv2d", [x, weight, bias, stride, padding](Node<T>& self) {
        kernels::conv2d_backward(x.value(), weight.value(), self.grad, stride, padding, grad_sink(x),
                                 grad_sink(weight), grad_sink(bias));
      });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}) {
  return make_result<T>(kernels::depthwise_conv2d(x.value(), weight.value(), value_or_null(bias)),
                        any_requires_grad(x, weight, bias), "depthwise_conv2d", [x, weight, bias](Node<T>& self) {
                          kernels::depthwise_conv2d_backward(x.value(), weight.value(), self.grad, grad_sink(x),
                                                             grad_sink(weight), grad_sink(bias));
                        });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}) {
  return make_result<T>(kernels::linear(x.value(), weight.value(), value_or_null(bias)),
                        any_requires_grad(x, weight, bias), "linear", [x, weight, bias](Node<T>& self) {
                          kernels::linear_backward(x.value(), weight.value(), self.grad, grad_sink(x),
                                                   grad_sink(weight), grad_sink(bias));
                        });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  auto cache = std::make_shared<kernels::LayerNormCache<T>>();
  Tensor<T> y = kernels::layernorm(x.value(), gamma.value(), beta.value(), eps, cache.get());
  return make_result<T>(std::move(y), any_requires_grad(x, gamma, beta), "layernorm",
                        [x, gamma, beta, cache](Node<T>& self) {
                          kernels::layernorm_backward(*cache, gamma.value(), self.grad, grad_sink(x),
                                                      grad_sink(gamma), grad_sink(beta));
                        });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  return make_result<T>(kernels::softmax(x.value(), axis), any_requires_grad(x), "softmax",
                        [x, axis](Node<T>& self) {
                          kernels::softmax_backward(self.value, self.grad, axis, *grad_sink(x));
                        });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  return make_result<T>(kernels::map(x.value(), [](T v) { return kernels::gelu(v); }), any_requires_grad(x), "gelu",
                        [x](Node<T>& self) {
                          Tensor<T>& dx = *grad_sink(x);
                          const Tensor<T>& xv = x.value();
                          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * kernels::gelu_grad(xv[i]);
                        });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return make_result<T>(kernels::map(x.value(), [](T v) { return v > 0 ? v : T(0); }), any_requires_grad(x), "relu",
                        [x](Node<T>& self) {
                          Tensor<T>& dx = *grad_sink(x);
                          const Tensor<T>& xv = x.value();
                          for (std::size_t i = 0; i < dx.size(); ++i)
                            if (xv[i] > 0) dx[i] += self.grad[i];
                        });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return make_result<T>(kernels::map(x.value(), [](T v) { return kernels::sigmoid(v); }), any_requires_grad(x),
                        "sigmoid", [x](Node<T>& self) {
                          Tensor<T>& dx = *grad_sink(x);
                          for (std::size_t i = 0; i < dx.size(); ++i) {
                            const T y = self.value[i];
                            dx[i] += self.grad[i] * y * (T(1) - y);
                          }
                        });
}

template <typename T>
Var<T> gap(const Var<T>& x) {
  return make_result<T>(kernels::gap(x.value()), any_requires_grad(x), "gap", [x](Node<T>& self) {
    Tensor<T>& dx = *grad_sink(x);
    const Shape& s = dx.shape();
    const T inv = T(1) / static_cast<T>(s.plane());
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T g = self.grad.at(n, c, 0, 0) * inv;
        T* d = dx.plane(n, c);
        for (std::size_t p = 0; p < s.plane(); ++p) d[p] += g;
      }
  });
}

// Broadcasting elementwise sum.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return make_result<T>(kernels::broadcast_binary(a.value(), b.value(), [](T x, T y) { return x + y; }, "add"),
                        any_requires_grad(a, b), "add", [a, b](Node<T>& self) {
                          if (auto* da = grad_sink(a)) kernels::reduce_broadcast_into(self.grad, *da);
                          if (auto* db = grad_sink(b)) kernels::reduce_broadcast_into(self.grad, *db);
                        });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return make_result<T>(kernels::broadcast_binary(a.value(), b.value(), [](T x, T y) { return x - y; }, "sub"),
                        any_requires_grad(a, b), "sub", [a, b](Node<T>& self) {
                          if (auto* da = grad_sink(a)) kernels::reduce_broadcast_into(self.grad, *da);
                          if (auto* db = grad_sink(b)) {
                            Tensor<T> neg(self.grad.shape());
                            for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
                            kernels::reduce_broadcast_into(neg, *db);
                          }
                        });
}

// Broadcasting Hadamard product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return make_result<T>(kernels::broadcast_binary(a.value(), b.value(), [](T x, T y) { return x * y; }, "mul"),
                        any_requires_grad(a, b), "mul", [a, b](Node<T>& self) {
                          if (auto* da = grad_sink(a)) kernels::reduce_broadcast_into(self.grad, *da, &b.value());
                          if (auto* db = grad_sink(b)) kernels::reduce_broadcast_into(self.grad, *db, &a.value());
                        });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  return make_result<T>(kernels::map(x.value(), [factor](T v) { return v * factor; }), any_requires_grad(x), "scale",
                        [x, factor](Node<T>& self) {
                          Tensor<T>& dx = *grad_sink(x);
                          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * factor;
                        });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  std::vector<const Tensor<T>*> values;
  bool needs = false;
  for (const auto& p : parts) {
    values.push_back(&p.value());
    needs = needs || p.requires_grad();
  }
  return make_result<T>(kernels::concat_channels(values), needs, "concat", [parts](Node<T>& self) {
    int c0 = 0;
    for (const auto& p : parts) {
      if (auto* dp = grad_sink(p)) {
        Tensor<T> g = kernels::slice_channels(self.grad, c0, p.shape().c);
        *dp += g;
      }
      c0 += p.shape().c;
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int c0, int count) {
  return make_result<T>(kernels::slice_channels(x.value(), c0, count), any_requires_grad(x), "slice",
                        [x, c0](Node<T>& self) { kernels::add_channel_slice(self.grad, *grad_sink(x), c0); });
}

// Splits the channel axis into `parts` equal chunks.
template <typename T>
std::vector<Var<T>> split_channels(const Var<T>& x, int parts) {
  const int c = x.shape().c;
  if (parts < 1 || c % parts != 0)
    shape_fail("split: channel count ", c, " of ", x.shape().str(), " not divisible into ", parts, " parts");
  std::vector<Var<T>> out;
  const int chunk = c / parts;
  for (int i = 0; i < parts; ++i) out.push_back(slice_channels(x, i * chunk, chunk));
  return out;
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, int r) {
  return make_result<T>(kernels::pixel_unshuffle(x.value(), r), any_requires_grad(x), "pixel_unshuffle",
                        [x, r](Node<T>& self) { *grad_sink(x) += kernels::pixel_shuffle(self.grad, r); });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  return make_result<T>(kernels::pixel_shuffle(x.value(), r), any_requires_grad(x), "pixel_shuffle",
                        [x, r](Node<T>& self) { *grad_sink(x) += kernels::pixel_unshuffle(self.grad, r); });
}

// Orthonormal 2D FFT of a real input, returned as [R, I] stacked along channels
// (N x 2C x H x W). The adjoint is the real part of the inverse transform of
// the cotangent spectrum.
template <typename T>
Var<T> fft2d_stacked(const Var<T>& x) {
  ComplexPair<T> spec = fft2d(x.value());
  Tensor<T> stacked = kernels::concat_channels<T>({&spec.real, &spec.imag});
  return make_result<T>(std::move(stacked), any_requires_grad(x), "fft2d", [x](Node<T>& self) {
    const int c = x.shape().c;
    ComplexPair<T> g(kernels::slice_channels(self.grad, 0, c), kernels::slice_channels(self.grad, c, c));
    *grad_sink(x) += ifft2d(g);
  });
}

// Real part of the orthonormal inverse FFT of a channel-stacked [R, I] spectrum.
// Adjoint: the forward FFT of the cotangent, split back into [R, I].
template <typename T>
Var<T> ifft2d_real_stacked(const Var<T>& spectrum) {
  const int c2 = spectrum.shape().c;
  if (c2 % 2 != 0) shape_fail("ifft2d: stacked spectrum ", spectrum.shape().str(), " needs an even channel count");
  const int c = c2 / 2;
  ComplexPair<T> spec(kernels::slice_channels(spectrum.value(), 0, c), kernels::slice_channels(spectrum.value(), c, c));
  return make_result<T>(ifft2d(spec), any_requires_grad(spectrum), "ifft2d", [spectrum](Node<T>& self) {
    ComplexPair<T> g = fft2d(self.grad);
    *grad_sink(spectrum) += kernels::concat_channels<T>({&g.real, &g.imag});
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  return make_result<T>(Tensor<T>(Shape{}, s), any_requires_grad(x), "sum", [x](Node<T>& self) {
    Tensor<T>& dx = *grad_sink(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[0];
  });
}

// Mean over C x H x W for each batch item: N x 1 x 1 x 1.
template <typename T>
Var<T> mean_per_item(const Var<T>& x) {
  const Shape& s = x.shape();
  const std::size_t per = s.numel() / s.n;
  Tensor<T> y(Shape{s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    T acc = 0;
    const T* p = x.value().plane(n, 0);
    for (std::size_t i = 0; i < per; ++i) acc += p[i];
    y[n] = acc / static_cast<T>(per);
  }
  return make_result<T>(std::move(y), any_requires_grad(x), "mean_per_item", [x, per](Node<T>& self) {
    Tensor<T>& dx = *grad_sink(x);
    for (int n = 0; n < dx.shape().n; ++n) {
      T* d = dx.plane(n, 0);
      const T g = self.grad[n] / static_cast<T>(per);
      for (std::size_t i = 0; i < per; ++i) d[i] += g;
    }
  });
}

// Value 1 everywhere with derivative 1/p: lets a quantity whose forward effect
// is discrete (a top-k count) receive a straight-through gradient.
template <typename T>
Var<T> straight_through_unit(const Var<T>& p) {
  return make_result<T>(Tensor<T>(p.shape(), T(1)), any_requires_grad(p), "straight_through", [p](Node<T>& self) {
    Tensor<T>& dp = *grad_sink(p);
    for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += self.grad[i] / p.value()[i];
  });
}

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::leaf(x.value(), false);
}

// Mean absolute difference, a 1 x 1 x 1 x 1 scalar.
template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred.shape(), target.shape(), "l1_loss");
  const std::size_t count = pred.value().size();
  T acc = 0;
  for (std::size_t i = 0; i < count; ++i) acc += std::abs(pred.value()[i] - target.value()[i]);
  return make_result<T>(Tensor<T>(Shape{}, acc / static_cast<T>(count)), any_requires_grad(pred, target), "l1_loss",
                        [pred, target, count](Node<T>& self) {
                          const T g = self.grad[0] / static_cast<T>(count);
                          auto* dp = grad_sink(pred);
                          auto* dt = grad_sink(target);
                          for (std::size_t i = 0; i < count; ++i) {
                            const T d = pred.value()[i] - target.value()[i];
                            const T sgn = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
                            if (dp) (*dp)[i] += g * sgn;
                            if (dt) (*dt)[i] -= g * sgn;
                          }
                        });
}

}  // namespace cpra
