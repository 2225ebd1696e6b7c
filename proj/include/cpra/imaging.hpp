#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpra/tensor.hpp"

namespace cpra {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit RGB raster, row-major interleaved triplets.
struct ImagePlanar {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  ImagePlanar() = default;
  ImagePlanar(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::size_t pixels() const noexcept { return static_cast<std::size_t>(width) * height; }
  std::uint8_t& at(int x, int y, int ch) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch]; }
  std::uint8_t at(int x, int y, int ch) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch]; }

  // Full-range BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B, in [0, 255].
  std::vector<double> y_plane() const {
    std::vector<double> y(pixels());
    for (std::size_t i = 0; i < y.size(); ++i)
      y[i] = (299.0 * rgb[3 * i] + 587.0 * rgb[3 * i + 1] + 114.0 * rgb[3 * i + 2]) / 1000.0;
    return y;
  }
  std::vector<double> cb_plane() const {
    std::vector<double> cb(pixels());
    for (std::size_t i = 0; i < cb.size(); ++i)
      cb[i] = 128.0 - 0.168736 * rgb[3 * i] - 0.331264 * rgb[3 * i + 1] + 0.5 * rgb[3 * i + 2];
    return cb;
  }
  std::vector<double> cr_plane() const {
    std::vector<double> cr(pixels());
    for (std::size_t i = 0; i < cr.size(); ++i)
      cr[i] = 128.0 + 0.5 * rgb[3 * i] - 0.418688 * rgb[3 * i + 1] - 0.081312 * rgb[3 * i + 2];
    return cr;
  }

  friend bool operator==(const ImagePlanar&, const ImagePlanar&) = default;
};

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255)

namespace detail {

inline void skip_ppm_space(std::istream& is) {
  for (;;) {
    const int ch = is.peek();
    if (ch == '#') {
      std::string comment;
      std::getline(is, comment);
    } else if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\v' || ch == '\f') {
      is.get();
    } else {
      return;
    }
  }
}

inline int read_ppm_int(std::istream& is, const char* field) {
  skip_ppm_space(is);
  if (!std::isdigit(is.peek())) throw ImageError(std::string("malformed PPM header: expected ") + field);
  long v = 0;
  while (std::isdigit(is.peek())) {
    v = v * 10 + (is.get() - '0');
    if (v > 1 << 20) throw ImageError(std::string("malformed PPM header: ") + field + " too large");
  }
  return static_cast<int>(v);
}

}  // namespace detail

inline ImagePlanar read_ppm(std::istream& is) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || magic[1] != '6') throw ImageError("malformed PPM header: expected P6 magic");
  const int w = detail::read_ppm_int(is, "width");
  const int h = detail::read_ppm_int(is, "height");
  const int maxval = detail::read_ppm_int(is, "maxval");
  if (w < 1 || h < 1) throw ImageError("malformed PPM header: zero dimension");
  if (maxval != 255) throw ImageError("unsupported PPM maxval " + std::to_string(maxval) + " (only 255)");
  const int sep = is.get();
  if (sep != ' ' && sep != '\t' && sep != '\n' && sep != '\r')
    throw ImageError("malformed PPM header: missing whitespace before raster");
  ImagePlanar img(w, h);
  if (!is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size())))
    throw ImageError("truncated PPM payload: expected " + std::to_string(img.rgb.size()) + " bytes");
  return img;
}

inline void write_ppm(const ImagePlanar& img, std::ostream& os) {
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

inline ImagePlanar read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("cannot open image '" + path + "'");
  try {
    return read_ppm(is);
  } catch (const ImageError& e) {
    throw ImageError(path + ": " + e.what());
  }
}

inline void write_ppm(const ImagePlanar& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageError("cannot open '" + path + "' for writing");
  write_ppm(img, os);
  if (!os) throw ImageError("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Metrics on the Y channel

inline constexpr double kPsnrCap = 100.0;

inline void require_same_size(const ImagePlanar& a, const ImagePlanar& b, const char* what) {
  if (a.width != b.width || a.height != b.height)
    throw ImageError(std::string(what) + ": dimension mismatch " + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
}

// 10 log10(255^2 / MSE_Y), capped at 100 dB (identical images).
inline double psnr_y(const ImagePlanar& a, const ImagePlanar& b) {
  require_same_size(a, b, "psnr_y");
  const auto ya = a.y_plane();
  const auto yb = b.y_plane();
  double se = 0;
  for (std::size_t i = 0; i < ya.size(); ++i) se += (ya[i] - yb[i]) * (ya[i] - yb[i]);
  const double mse = se / static_cast<double>(ya.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over all positions where the Gaussian window fits entirely.
inline double ssim_y(const ImagePlanar& a, const ImagePlanar& b, const SsimOptions& o = {}) {
  require_same_size(a, b, "ssim_y");
  if (o.window < 1 || a.width < o.window || a.height < o.window)
    throw ImageError("ssim_y: image " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " smaller than the " + std::to_string(o.window) + "x" + std::to_string(o.window) + " window");
  const auto ya = a.y_plane();
  const auto yb = b.y_plane();
  const int win = o.window;
  std::vector<double> g(win);
  double gsum = 0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * o.sigma * o.sigma));
    gsum += g[i];
  }
  for (auto& v : g) v /= gsum;
  const double c1 = (o.k1 * 255.0) * (o.k1 * 255.0);
  const double c2 = (o.k2 * 255.0) * (o.k2 * 255.0);
  const int w = a.width;
  double total = 0;
  std::size_t count = 0;
  for (int y0 = 0; y0 + win <= a.height; ++y0) {
    for (int x0 = 0; x0 + win <= w; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = 0; dy < win; ++dy)
        for (int dx = 0; dx < win; ++dx) {
          const double wt = g[dy] * g[dx];
          const std::size_t i = static_cast<std::size_t>(y0 + dy) * w + x0 + dx;
          ma += wt * ya[i];
          mb += wt * yb[i];
          saa += wt * ya[i] * ya[i];
          sbb += wt * yb[i] * yb[i];
          sab += wt * ya[i] * yb[i];
        }
      const double va = saa - ma * ma;
      const double vb = sbb - mb * mb;
      const double cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Synthetic rain: I_rain = clip(I_clean + S), S a sum of Gaussian-profile streaks.

struct RainParams {
  int streak_count = 60;
  double angle = 10.0;  // degrees from vertical
  double length = 12.0;
  double width = 1.0;
  double intensity = 0.6;  // peak streak amplitude as a fraction of 255
  std::uint64_t seed = 0;

  void validate() const {
    if (streak_count < 0) throw std::invalid_argument("rain: streak count must be non-negative");
    if (!(length > 0) || !(width > 0)) throw std::invalid_argument("rain: streak length and width must be positive");
    if (!(intensity >= 0 && intensity <= 1)) throw std::invalid_argument("rain: intensity must lie in [0, 1]");
  }
};

// Additive streak layer in luminance units, row-major height x width.
inline std::vector<double> rain_layer(int width, int height, const RainParams& p) {
  p.validate();
  std::vector<double> layer(static_cast<std::size_t>(width) * height, 0.0);
  if (p.intensity == 0.0) return layer;
  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<double> ux(-p.length / 2, width + p.length / 2);
  std::uniform_real_distribution<double> uy(-p.length / 2, height + p.length / 2);
  std::uniform_real_distribution<double> brightness(0.6, 1.0);
  const double theta = p.angle * std::numbers::pi / 180.0;
  const double dx = std::sin(theta), dy = std::cos(theta);
  const double sigma = p.width / 2.0;
  const double reach = p.length / 2 + 3 * sigma;
  for (int s = 0; s < p.streak_count; ++s) {
    const double cx = ux(rng), cy = uy(rng);
    const double amp = 255.0 * p.intensity * brightness(rng);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + reach)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double rx = x - cx, ry = y - cy;
        const double t = std::clamp(rx * dx + ry * dy, -p.length / 2, p.length / 2);
        const double ex = rx - t * dx, ey = ry - t * dy;
        const double d2 = ex * ex + ey * ey;
        layer[static_cast<std::size_t>(y) * width + x] += amp * std::exp(-d2 / (2 * sigma * sigma));
      }
  }
  return layer;
}

// Adds the streak layer equally to R, G and B (so to luminance) and clips.
inline ImagePlanar synth_rain(const ImagePlanar& clean, const RainParams& p) {
  const std::vector<double> layer = rain_layer(clean.width, clean.height, p);
  ImagePlanar out = clean;
  for (std::size_t i = 0; i < clean.pixels(); ++i)
    for (int ch = 0; ch < 3; ++ch) {
      const double v = std::round(clean.rgb[3 * i + ch] + layer[i]);
      out.rgb[3 * i + ch] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Image <-> tensor

template <typename T>
Tensor<T> to_tensor(const std::vector<ImagePlanar>& images) {
  if (images.empty()) throw ImageError("to_tensor: empty batch");
  const int w = images[0].width, h = images[0].height;
  Tensor<T> t(Shape{static_cast<int>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    require_same_size(images[0], images[n], "to_tensor");
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          t.at(static_cast<int>(n), ch, y, x) = static_cast<T>(images[n].at(x, y, ch)) / T(255);
  }
  return t;
}

template <typename T>
Tensor<T> to_tensor(const ImagePlanar& image) {
  return to_tensor<T>(std::vector<ImagePlanar>{image});
}

// Clamps to [0, 1] and quantizes; this is the only place outputs are clamped.
template <typename T>
ImagePlanar from_tensor(const Tensor<T>& t, int item = 0) {
  const Shape& s = t.shape();
  if (s.c != 3) shape_fail("from_tensor: expected 3 channels, got ", s.str());
  ImagePlanar img(s.w, s.h);
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const double v = std::clamp(static_cast<double>(t.at(item, ch, y, x)), 0.0, 1.0);
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

}  // namespace cpra
