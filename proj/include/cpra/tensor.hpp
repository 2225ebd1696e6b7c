#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace cpra {

// Thrown for any dimension/shape contract violation. The message names the
// offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const noexcept {
    return static_cast<std::size_t>(h) * w;
  }
  constexpr bool valid() const noexcept { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  constexpr int dim(int axis) const {
    switch (axis) {
      case 0: return n;
      case 1: return c;
      case 2: return h;
      case 3: return w;
      default: throw ShapeError("axis out of range");
    }
  }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '[' << n << 'x' << c << 'x' << h << 'x' << w << ']';
    return os.str();
  }
};

template <typename... Args>
[[noreturn]] inline void shape_fail(Args&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  throw ShapeError(os.str());
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) shape_fail(what, ": shape mismatch ", a.str(), " vs ", b.str());
}

// Dense N x C x H x W array, row-major in that order.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor holds real scalars");

 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape) {
    if (!shape.valid()) shape_fail("invalid tensor shape ", shape.str());
    data_.assign(shape.numel(), fill);
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (!shape.valid()) shape_fail("invalid tensor shape ", shape.str());
    if (data_.size() != shape.numel())
      shape_fail("data length ", data_.size(), " does not match shape ", shape.str());
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // No span of a temporary: `for (v : f().data())` would dangle.
  std::span<T> data() & noexcept { return data_; }
  std::span<const T> data() const& noexcept { return data_; }
  std::span<const T> data() && = delete;
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const noexcept { return data_[offset(n, c, h, w)]; }

  // Pointer to the start of the (n, c) plane.
  T* plane(int n, int c) noexcept { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(int n, int c) const noexcept { return data_.data() + offset(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(shape_, o.shape_, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

// Real and imaginary halves of a spectrum.
template <typename T>
struct ComplexPair {
  Tensor<T> real;
  Tensor<T> imag;

  ComplexPair() = default;
  ComplexPair(Tensor<T> re, Tensor<T> im) : real(std::move(re)), imag(std::move(im)) {
    require_same_shape(real.shape(), imag.shape(), "ComplexPair");
  }
  const Shape& shape() const noexcept { return real.shape(); }
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// max |a-b| / max(max|b|, tiny): relative error of a against reference b.
template <typename T>
T max_rel_diff(const Tensor<T>& a, const Tensor<T>& ref) {
  T scale = 0;
  for (T v : ref.data()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, ref) / std::max(scale, std::numeric_limits<T>::min());
}

}  // namespace cpra
