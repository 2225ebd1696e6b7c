#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include <unistd.h>

#include "cpra/imaging.hpp"

namespace {

using namespace cpra;

ImagePlanar random_image(int w, int h, std::mt19937_64& rng, int lo = 0, int hi = 255) {
  std::uniform_int_distribution<int> u(lo, hi);
  ImagePlanar img(w, h);
  for (auto& b : img.rgb) b = static_cast<std::uint8_t>(u(rng));
  return img;
}

ImagePlanar gray(int w, int h, int v) {
  ImagePlanar img(w, h);
  std::fill(img.rgb.begin(), img.rgb.end(), static_cast<std::uint8_t>(v));
  return img;
}

ImagePlanar parse(const std::string& bytes) {
  std::istringstream is(bytes);
  return read_ppm(is);
}

double mean_y(const ImagePlanar& img) {
  double s = 0;
  for (double v : img.y_plane()) s += v;
  return s / static_cast<double>(img.pixels());
}

// SSIM by direct evaluation: explicit 2-D Gaussian window, per-window moments.
double ssim_oracle(const ImagePlanar& a, const ImagePlanar& b) {
  const int win = 11;
  const double sigma = 1.5, c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
  std::vector<double> w2(win * win);
  double z = 0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) z += w2[i * win + j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / (2 * sigma * sigma));
  for (double& v : w2) v /= z;
  auto y = [](const ImagePlanar& img, int x, int yy) {
    return 0.299 * img.at(x, yy, 0) + 0.587 * img.at(x, yy, 1) + 0.114 * img.at(x, yy, 2);
  };
  double total = 0;
  int count = 0;
  for (int y0 = 0; y0 + win <= a.height; ++y0)
    for (int x0 = 0; x0 + win <= a.width; ++x0) {
      double ma = 0, mb = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          ma += w2[i * win + j] * y(a, x0 + j, y0 + i);
          mb += w2[i * win + j] * y(b, x0 + j, y0 + i);
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double da = y(a, x0 + j, y0 + i) - ma, db = y(b, x0 + j, y0 + i) - mb;
          va += w2[i * win + j] * da * da;
          vb += w2[i * win + j] * db * db;
          cov += w2[i * win + j] * da * db;
        }
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

// ---- PPM

TEST(Ppm, WhitePixelBytes) {
  ImagePlanar img = gray(1, 1, 255);
  std::ostringstream os;
  write_ppm(img, os);
  EXPECT_EQ(os.str(), std::string("P6\n1 1\n255\n") + std::string(3, '\xFF'));
}

TEST(Ppm, RoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  for (auto [w, h] : {std::pair{1, 1}, std::pair{7, 3}, std::pair{64, 64}}) {
    ImagePlanar img = random_image(w, h, rng);
    std::ostringstream os;
    write_ppm(img, os);
    EXPECT_EQ(parse(os.str()), img);
  }
  const auto path = std::filesystem::temp_directory_path() / ("cpra_ppm_" + std::to_string(::getpid()) + ".ppm");
  ImagePlanar img = random_image(5, 9, rng);
  write_ppm(img, path.string());
  EXPECT_EQ(read_ppm(path.string()), img);
  std::filesystem::remove(path);
}

// Header variants a conforming reader must accept; the raster is always "AB#" "\n\t ".
TEST(Ppm, HeaderConformanceCorpus) {
  const std::string raster = std::string("AB#") + "\n\t ";
  const std::vector<std::string> headers{
      "P6\n2 1\n255\n",                    // canonical
      "P6 2 1 255 ",                       // single spaces, space before raster
      "P6\n# made by hand\n2 1\n255\n",    // comment line after magic
      "P6\n2 # width\n1 # height\n255\n",  // trailing comments on value lines
      "P6\t\n\n2\r\n1\f255\t",             // mixed whitespace, tab before raster
  };
  for (const auto& h : headers) {
    ImagePlanar img = parse(h + raster);
    EXPECT_EQ(img.width, 2) << h;
    EXPECT_EQ(img.height, 1) << h;
    EXPECT_EQ(std::string(img.rgb.begin(), img.rgb.end()), raster) << h;
  }
}

TEST(Ppm, MalformedInputsRejected) {
  const std::string px(3, 'x');
  for (const std::string& bad : {std::string("P3\n1 1\n255\n") + px, std::string("P6\n1 1\n65535\n") + px,
                                 std::string("P6\n0 1\n255\n"), std::string("P6\n1\n255\n") + px,
                                 std::string("P6\n1 1\n255\n") + "xx", std::string("P6\n1 1\n255"), std::string(""),
                                 std::string("P6\nw 1\n255\n") + px})
    EXPECT_THROW(parse(bad), ImageError) << bad;
  EXPECT_THROW(read_ppm("/nonexistent/dir/x.ppm"), ImageError);
}

// ---- color

TEST(Color, LumaEndpointsAndWeights) {
  EXPECT_EQ(gray(1, 1, 255).y_plane()[0], 255.0);
  EXPECT_EQ(gray(1, 1, 0).y_plane()[0], 0.0);
  ImagePlanar px(3, 1);
  px.at(0, 0, 0) = 255;
  px.at(1, 0, 1) = 255;
  px.at(2, 0, 2) = 255;
  const auto y = px.y_plane();
  EXPECT_NEAR(y[0], 0.299 * 255, 1e-12);
  EXPECT_NEAR(y[1], 0.587 * 255, 1e-12);
  EXPECT_NEAR(y[2], 0.114 * 255, 1e-12);
  EXPECT_NEAR(gray(1, 1, 77).cb_plane()[0], 128.0, 1e-9);
  EXPECT_NEAR(gray(1, 1, 77).cr_plane()[0], 128.0, 1e-9);
}

TEST(Color, PlaneSizes) {
  ImagePlanar img(5, 3);
  EXPECT_EQ(img.rgb.size(), 45u);
  EXPECT_EQ(img.y_plane().size(), 15u);
  EXPECT_EQ(img.cb_plane().size(), 15u);
  EXPECT_EQ(img.cr_plane().size(), 15u);
}

TEST(Color, TensorRoundTripAndClamp) {
  std::mt19937_64 rng(2);
  ImagePlanar img = random_image(8, 4, rng);
  Tensor<float> t = to_tensor<float>(img);
  EXPECT_EQ(t.shape(), (Shape{1, 3, 4, 8}));
  EXPECT_EQ(from_tensor(t), img);
  t.fill(2.0f);
  t[1] = -1.0f;
  ImagePlanar c = from_tensor(t);
  EXPECT_EQ(c.at(1, 0, 0), 0);
  EXPECT_EQ(c.at(0, 0, 0), 255);
  EXPECT_THROW(to_tensor<float>({gray(2, 2, 0), gray(2, 3, 0)}), ImageError);
}

// ---- PSNR

TEST(Psnr, IdenticalHitsCap) {
  std::mt19937_64 rng(3);
  ImagePlanar a = random_image(16, 16, rng);
  EXPECT_EQ(psnr_y(a, a), 100.0);
}

TEST(Psnr, OneLevelClosedForm) {
  const double want = 10.0 * std::log10(255.0 * 255.0);
  EXPECT_NEAR(psnr_y(gray(8, 8, 100), gray(8, 8, 101)), want, 1e-12);
  EXPECT_NEAR(want, 48.1308, 5e-5);
}

TEST(Psnr, SymmetricAndMonotoneInNoise) {
  std::mt19937_64 rng(4);
  ImagePlanar a = random_image(32, 32, rng, 40, 200);
  double last = 100.0;
  for (int amp : {2, 8, 30}) {
    ImagePlanar b = a;
    std::uniform_int_distribution<int> u(-amp, amp);
    for (auto& v : b.rgb) v = static_cast<std::uint8_t>(v + u(rng));
    const double p = psnr_y(a, b);
    EXPECT_EQ(p, psnr_y(b, a));
    EXPECT_LT(p, last) << amp;
    last = p;
  }
}

TEST(Psnr, SizeMismatchThrows) { EXPECT_THROW(psnr_y(gray(4, 4, 0), gray(4, 5, 0)), ImageError); }

// ---- SSIM

TEST(Ssim, IdenticalIsOne) {
  std::mt19937_64 rng(5);
  ImagePlanar a = random_image(24, 20, rng);
  EXPECT_EQ(ssim_y(a, a), 1.0);
  ImagePlanar b = a;
  b.at(3, 3, 1) ^= 0x40;
  EXPECT_LT(ssim_y(a, b), 1.0);
}

TEST(Ssim, InvertedImageIsDissimilar) {
  std::mt19937_64 rng(6);
  ImagePlanar a(32, 32);
  std::uniform_int_distribution<int> coin(0, 1), lo(0, 100), hi(155, 255);
  for (auto& v : a.rgb) v = static_cast<std::uint8_t>(coin(rng) ? lo(rng) : hi(rng));
  ImagePlanar inv = a;
  for (auto& v : inv.rgb) v = static_cast<std::uint8_t>(255 - v);
  const double s = ssim_y(a, inv);
  EXPECT_LT(s, 0.5);
  EXPECT_NEAR(s, ssim_oracle(a, inv), 1e-12);
}

TEST(Ssim, MatchesDirectEvaluationAndIsSymmetric) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    ImagePlanar a = random_image(16, 13, rng), b = random_image(16, 13, rng);
    for (std::size_t i = 0; i < a.rgb.size(); i += 2) b.rgb[i] = a.rgb[i];  // partly correlated
    const double s = ssim_y(a, b);
    EXPECT_NEAR(s, ssim_oracle(a, b), 1e-12);
    EXPECT_NEAR(s, ssim_y(b, a), 1e-15);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Ssim, ErrorsOnSizes) {
  EXPECT_THROW(ssim_y(gray(10, 10, 0), gray(10, 10, 0)), ImageError);
  EXPECT_THROW(ssim_y(gray(11, 11, 0), gray(12, 11, 0)), ImageError);
  EXPECT_NO_THROW(ssim_y(gray(11, 11, 0), gray(11, 11, 0)));
}

// ---- rain

TEST(Rain, ZeroIntensityIsIdentity) {
  std::mt19937_64 rng(8);
  ImagePlanar clean = random_image(32, 32, rng);
  RainParams p;
  p.intensity = 0.0;
  EXPECT_EQ(synth_rain(clean, p), clean);
}

TEST(Rain, SeededAndAdditive) {
  std::mt19937_64 rng(9);
  ImagePlanar clean = random_image(48, 32, rng, 0, 200);
  RainParams p;
  p.seed = 42;
  const ImagePlanar a = synth_rain(clean, p);
  EXPECT_EQ(synth_rain(clean, p), a);
  p.seed = 43;
  EXPECT_NE(synth_rain(clean, p), a);
  EXPECT_NE(a, clean);
  for (std::size_t i = 0; i < a.rgb.size(); ++i) EXPECT_GE(a.rgb[i], clean.rgb[i]);
}

TEST(Rain, MeanLuminanceGrowsWithIntensity) {
  const ImagePlanar clean = gray(64, 64, 90);
  double last = mean_y(clean);
  for (double intensity : {0.2, 0.5, 0.8}) {
    RainParams p;
    p.intensity = intensity;
    p.seed = 5;
    const double m = mean_y(synth_rain(clean, p));
    EXPECT_GT(m, last) << intensity;
    last = m;
  }
}

TEST(Rain, StreaksFollowTheAngle) {
  // one streak at 0 degrees is a thin vertical band, at 90 degrees a horizontal one
  for (double angle : {0.0, 90.0}) {
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 200 && checked < 5; ++seed) {
      RainParams p;
      p.streak_count = 1;
      p.angle = angle;
      p.seed = seed;
      const auto layer = rain_layer(32, 32, p);
      const double peak = *std::max_element(layer.begin(), layer.end());
      if (peak < 50) continue;
      int x0 = 32, x1 = -1, y0 = 32, y1 = -1;
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
          if (layer[y * 32 + x] > 0.3 * peak) {
            x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
          }
      if (x0 == 0 || y0 == 0 || x1 == 31 || y1 == 31) continue;  // clipped by the frame
      const int across = angle == 0.0 ? x1 - x0 : y1 - y0, along = angle == 0.0 ? y1 - y0 : x1 - x0;
      EXPECT_LE(across, 2) << angle << " seed " << seed;
      EXPECT_GE(along, 4) << angle << " seed " << seed;
      ++checked;
    }
    EXPECT_EQ(checked, 5);
  }
}

TEST(Rain, InvalidParamsRejected) {
  RainParams p;
  p.intensity = 1.5;
  EXPECT_THROW(synth_rain(gray(4, 4, 0), p), std::invalid_argument);
  p = RainParams{};
  p.width = 0;
  EXPECT_THROW(synth_rain(gray(4, 4, 0), p), std::invalid_argument);
}

}  // namespace
