#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "cpra/tensor.hpp"

namespace cpra {

constexpr bool is_power_of_two(int v) noexcept { return v >= 1 && (v & (v - 1)) == 0; }

namespace detail {

// In-place iterative radix-2 FFT, unnormalized. sign = -1 forward, +1 inverse.
template <typename T>
void fft_radix2(std::complex<T>* a, int len, int sign) {
  for (int i = 1, j = 0; i < len; ++i) {
    int bit = len >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int span = 2; span <= len; span <<= 1) {
    const int half = span / 2;
    for (int k = 0; k < half; ++k) {
      const T angle = sign * 2 * std::numbers::pi_v<T> * k / span;
      const std::complex<T> tw(std::cos(angle), std::sin(angle));
      for (int start = 0; start < len; start += span) {
        const std::complex<T> u = a[start + k];
        const std::complex<T> v = a[start + k + half] * tw;
        a[start + k] = u + v;
        a[start + k + half] = u - v;
      }
    }
  }
}

// Orthonormal 2D transform of one H x W plane.
template <typename T>
void fft2d_plane(std::vector<std::complex<T>>& buf, int h, int w, int sign) {
  for (int r = 0; r < h; ++r) fft_radix2(buf.data() + static_cast<std::size_t>(r) * w, w, sign);
  std::vector<std::complex<T>> col(h);
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) col[r] = buf[static_cast<std::size_t>(r) * w + c];
    fft_radix2(col.data(), h, sign);
    for (int r = 0; r < h; ++r) buf[static_cast<std::size_t>(r) * w + c] = col[r];
  }
  const T scale = T(1) / std::sqrt(static_cast<T>(h) * w);
  for (auto& z : buf) z *= scale;
}

inline void require_fft_size(const Shape& s) {
  if (!is_power_of_two(s.h) || !is_power_of_two(s.w))
    shape_fail("fft2d requires power-of-two spatial dims (radix-2), got ", s.str());
}

template <typename T>
ComplexPair<T> transform(const Tensor<T>& re, const Tensor<T>* im, int sign) {
  const Shape s = re.shape();
  require_fft_size(s);
  Tensor<T> out_re(s), out_im(s);
  std::vector<std::complex<T>> buf(s.plane());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* pr = re.plane(n, c);
      const T* pi = im ? im->plane(n, c) : nullptr;
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = {pr[i], pi ? pi[i] : T(0)};
      fft2d_plane(buf, s.h, s.w, sign);
      T* qr = out_re.plane(n, c);
      T* qi = out_im.plane(n, c);
      for (std::size_t i = 0; i < buf.size(); ++i) {
        qr[i] = buf[i].real();
        qi[i] = buf[i].imag();
      }
    }
  }
  return {std::move(out_re), std::move(out_im)};
}

}  // namespace detail

// Orthonormal 2D DFT over each (n, c) plane: X(u,v) = 1/sqrt(HW) sum x(h,w) e^{-j2pi(uh/H + vw/W)}.
template <typename T>
ComplexPair<T> fft2d(const Tensor<T>& x) {
  return detail::transform<T>(x, nullptr, -1);
}

template <typename T>
ComplexPair<T> fft2d(const ComplexPair<T>& x) {
  return detail::transform<T>(x.real, &x.imag, -1);
}

// Full complex inverse.
template <typename T>
ComplexPair<T> ifft2d_complex(const ComplexPair<T>& spec) {
  return detail::transform<T>(spec.real, &spec.imag, +1);
}

// Real part of the orthonormal inverse transform.
template <typename T>
Tensor<T> ifft2d(const ComplexPair<T>& spec) {
  return ifft2d_complex(spec).real;
}

}  // namespace cpra
