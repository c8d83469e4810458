#include <fstream>

#include "dped/error.hpp"
#include "dped/image.hpp"
#include "test_support.hpp"

using namespace dped;

namespace {

// Independent Keys kernel (a = -0.5).
double keys(double t) {
  t = std::abs(t);
  if (t < 1) return 1.5 * t * t * t - 2.5 * t * t + 1;
  if (t < 2) return -0.5 * t * t * t + 2.5 * t * t - 4 * t + 2;
  return 0;
}

// Direct 2-D evaluation of antialiased bicubic downscaling with edge replication.
double reference_downscale(const ImageRGB& img, int c, int oy, int ox, int nh, int nw) {
  const double sy = static_cast<double>(img.height) / nh, sx = static_cast<double>(img.width) / nw;
  const double cy = (oy + 0.5) * sy - 0.5, cx = (ox + 0.5) * sx - 0.5;
  double acc = 0, total = 0;
  for (int iy = -20; iy < img.height + 20; ++iy) {
    const double wy = keys((iy - cy) / std::max(1.0, sy));
    if (wy == 0) continue;
    for (int ix = -20; ix < img.width + 20; ++ix) {
      const double wx = keys((ix - cx) / std::max(1.0, sx));
      if (wx == 0) continue;
      const int y = std::clamp(iy, 0, img.height - 1), x = std::clamp(ix, 0, img.width - 1);
      acc += wy * wx * img.at(c, y, x);
      total += wy * wx;
    }
  }
  return std::clamp(acc / total, 0.0, 1.0);
}

double energy(const ImageRGB& img) {
  double e = 0;
  for (float v : img.data) e += static_cast<double>(v) * v;
  return e;
}

}  // namespace

TEST(LoadImage, WhitePngMapsToOne) {
  auto dir = test::temp_dir("img");
  save_image(ImageRGB(2, 2, 1.0f), dir / "white.png");
  auto img = load_image(dir / "white.png");
  ASSERT_EQ(img.height, 2);
  ASSERT_EQ(img.width, 2);
  for (float v : img.data) EXPECT_EQ(v, 1.0f);
}

TEST(LoadImage, EightBitValuesDivideBy255) {
  auto dir = test::temp_dir("img");
  ImageRGB px(1, 1);
  px.at(0, 0, 0) = 128 / 255.0f;
  px.at(1, 0, 0) = 64 / 255.0f;
  px.at(2, 0, 0) = 0.0f;
  save_image(px, dir / "px.png");
  auto img = load_image(dir / "px.png");
  EXPECT_NEAR(img.at(0, 0, 0), 0.50196078, 1e-6);
  EXPECT_NEAR(img.at(1, 0, 0), 0.25098039, 1e-6);
  EXPECT_EQ(img.at(2, 0, 0), 0.0f);
}

TEST(LoadImage, MissingFileIsIoError) {
  EXPECT_THROW(load_image("/nonexistent/dir/none.png"), IoError);
}

TEST(LoadImage, CorruptFileIsDecodeError) {
  auto dir = test::temp_dir("img");
  {
    std::ofstream f(dir / "bad.png", std::ios::binary);
    f << "definitely not an image";
  }
  EXPECT_THROW(load_image(dir / "bad.png"), DecodeError);
  {
    std::ofstream f(dir / "trunc.png", std::ios::binary);
    f.write("\x89PNG\r\n\x1a\n\0\0\0\rIHDR", 16);
  }
  EXPECT_THROW(load_image(dir / "trunc.png"), DecodeError);
}

TEST(LoadImage, ReadsJpeg) {
  auto img = load_image(test::data_dir() / "rocket.jpg");
  EXPECT_GT(img.height, 100);
  EXPECT_GT(img.width, 100);
  for (float v : img.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(SaveImage, RoundTripWithinQuantization) {
  auto dir = test::temp_dir("img");
  save_image(ImageRGB(3, 5, 0.5f), dir / "half.png");
  for (float v : load_image(dir / "half.png").data) EXPECT_LE(std::abs(v - 0.5f), 1.0f / 255);

  std::mt19937_64 rng(3);
  auto img = test::random_image(17, 23, rng);
  save_image(img, dir / "rand.png");
  auto back = load_image(dir / "rand.png");
  for (std::size_t i = 0; i < img.data.size(); ++i) ASSERT_LE(std::abs(back.data[i] - img.data[i]), 1.0f / 255);
}

TEST(SaveImage, PreservesShape) {
  auto dir = test::temp_dir("img");
  save_image(ImageRGB(100, 100, 0.2f), dir / "sq.png");
  auto img = load_image(dir / "sq.png");
  EXPECT_EQ(img.height, 100);
  EXPECT_EQ(img.width, 100);
}

TEST(SaveImage, UnwritablePathIsIoError) {
  EXPECT_THROW(save_image(ImageRGB(2, 2), "/nonexistent/dir/out.png"), IoError);
}

TEST(Grayscale, Bt601Weights) {
  EXPECT_EQ(to_grayscale(ImageRGB(2, 2, 1.0f)).data, std::vector<float>(4, 1.0f));
  ImageRGB red(1, 1), blue(1, 1);
  red.at(0, 0, 0) = 1;
  blue.at(2, 0, 0) = 1;
  EXPECT_NEAR(to_grayscale(red).data[0], 0.299, 1e-7);
  EXPECT_NEAR(to_grayscale(blue).data[0], 0.114, 1e-7);
}

TEST(Grayscale, GrayInputPassesThroughExactlyAndStaysInRange) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0, 1);
  ImageRGB img(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const float v = u(rng);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = v;
    }
  auto g = to_grayscale(img);
  for (int i = 0; i < 256; ++i) EXPECT_EQ(g.data[i], img.data[i]);
  for (int trial = 0; trial < 20; ++trial) {
    for (float v : to_grayscale(test::random_image(8, 8, rng)).data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(GaussianKernel, DefaultsMatchClosedForm) {
  auto k = gaussian_kernel();
  EXPECT_EQ(k.radius, 7);
  EXPECT_DOUBLE_EQ(k.at(0, 0), 0.053);
  EXPECT_NEAR(k.at(1, 2), 0.053 * std::exp(-1.0 / 6 - 4.0 / 6), 1e-15);
  EXPECT_NEAR(k.sum(), 1.0, 1e-2);
  for (int a = -7; a <= 7; ++a)
    for (int b = -7; b <= 7; ++b) {
      EXPECT_EQ(k.at(a, b), k.at(-a, -b));
      EXPECT_GT(k.at(a, b), 0.0);
    }
}

TEST(GaussianKernel, OffsetsAndAnisotropy) {
  GaussianKernelSpec s;
  s.mu_x = 1;
  s.sigma_y = 5;
  s.radius = 3;
  auto k = gaussian_kernel(s);
  EXPECT_DOUBLE_EQ(k.at(1, 0), 0.053);
  EXPECT_NEAR(k.at(-1, 2), 0.053 * std::exp(-4.0 / 6 - 4.0 / 10), 1e-15);
}

TEST(GaussianKernel, RejectsInvalidSpec) {
  GaussianKernelSpec s;
  s.sigma_x = 0;
  EXPECT_THROW(gaussian_kernel(s), InvalidSpec);
  s = {};
  s.sigma_y = -1;
  EXPECT_THROW(gaussian_kernel(s), InvalidSpec);
  s = {};
  s.radius = 0;
  EXPECT_THROW(gaussian_kernel(s), InvalidSpec);
}

TEST(Blur, ConstantImageScalesByKernelMass) {
  auto k = gaussian_kernel();
  auto out = blur(ImageRGB(20, 20, 0.3f), k);
  for (float v : out.data) EXPECT_NEAR(v, 0.3 * k.sum(), 1e-6);
  for (float v : out.data) EXPECT_NEAR(v, 0.3, std::abs(k.sum() - 1) * 0.3 + 1e-6);
}

TEST(Blur, ImpulseCenterIsAmplitude) {
  ImageRGB img(31, 31, 0.0f);
  for (int c = 0; c < 3; ++c) img.at(c, 15, 15) = 1.0f;
  auto out = blur(img, gaussian_kernel());
  EXPECT_NEAR(out.at(0, 15, 15), 0.053, 1e-7);
  EXPECT_NEAR(out.at(1, 14, 17), 0.053 * std::exp(-1.0 / 6 - 4.0 / 6), 1e-7);
}

TEST(Blur, ReflectsAtBorders) {
  Kernel2D k;
  k.radius = 1;
  k.values = {0, 0, 0, 1, 0, 0, 0, 0, 0};  // picks the left neighbour
  ImageRGB img(3, 3);
  for (int x = 0; x < 3; ++x) img.at(0, 1, x) = static_cast<float>(x + 1);
  auto out = blur(img, k);
  EXPECT_EQ(out.at(0, 1, 0), 1.0f);  // reflect(-1) = 0
  EXPECT_EQ(out.at(0, 1, 1), 1.0f);
  EXPECT_EQ(out.at(0, 1, 2), 2.0f);
}

TEST(Blur, KernelLargerThanImageThrows) {
  EXPECT_THROW(blur(ImageRGB(14, 40), gaussian_kernel()), KernelTooLarge);
  EXPECT_NO_THROW(blur(ImageRGB(15, 15), gaussian_kernel()));
}

TEST(Blur, NonExpansive) {
  std::mt19937_64 rng(11);
  const auto k = gaussian_kernel();
  for (int i = 0; i < 10; ++i) {
    auto x = test::random_image(24, 24, rng);
    auto b1 = blur(x, k);
    EXPECT_LE(energy(blur(b1, k)), energy(b1));
  }
  const double mass2 = k.sum() * k.sum();
  for (int i = 0; i < 100; ++i) {
    auto x = test::random_image(16, 20, rng);
    auto y = test::random_image(16, 20, rng);
    auto bx = blur(x, k), by = blur(y, k);
    double lhs = 0, rhs = 0;
    for (std::size_t j = 0; j < x.data.size(); ++j) {
      lhs += std::pow(double(bx.data[j]) - by.data[j], 2);
      rhs += std::pow(double(x.data[j]) - y.data[j], 2);
    }
    EXPECT_LE(lhs, mass2 * rhs);
    EXPECT_EQ(bx.height, 16);
    EXPECT_EQ(bx.width, 20);
  }
}

TEST(Blur, AdjointMatchesTranspose) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  GaussianKernelSpec s;
  s.mu_x = 0.5;
  s.radius = 3;
  const auto k = gaussian_kernel(s);
  const int h = 9, w = 11;
  std::vector<double> a(h * w), b(h * w), ka(h * w), ktb(h * w, 0.0);
  for (auto& v : a) v = u(rng);
  for (auto& v : b) v = u(rng);
  blur_plane<double>(a.data(), ka.data(), h, w, k);
  blur_plane_adjoint<double>(b.data(), ktb.data(), h, w, k);
  double lhs = 0, rhs = 0;
  for (int i = 0; i < h * w; ++i) {
    lhs += ka[i] * b[i];
    rhs += a[i] * ktb[i];
  }
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Downscale, SameSizeIsIdentity) {
  std::mt19937_64 rng(1);
  auto img = test::random_image(12, 9, rng);
  EXPECT_EQ(downscale(img, 12, 9), img);
}

TEST(Downscale, ConstantStaysConstant) {
  for (auto [h, w] : {std::pair{7, 5}, std::pair{1, 1}, std::pair{13, 2}}) {
    auto out = downscale(ImageRGB(13, 11, 0.37f), h, w);
    EXPECT_EQ(out.height, h);
    EXPECT_EQ(out.width, w);
    for (float v : out.data) EXPECT_NEAR(v, 0.37f, 1e-6);
  }
}

TEST(Downscale, CheckerboardMatchesReferenceBicubic) {
  ImageRGB img(4, 4);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) img.at(c, y, x) = static_cast<float>((x + y) % 2);
  auto out = downscale(img, 2, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      const double ref = reference_downscale(img, 0, y, x, 2, 2);
      EXPECT_NEAR(out.at(0, y, x), ref, 1e-6);
      EXPECT_GE(out.at(0, y, x), 0.0f);
      EXPECT_LE(out.at(0, y, x), 1.0f);
    }
  std::mt19937_64 rng(8);
  auto r = test::random_image(23, 31, rng);
  auto small = downscale(r, 10, 7);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 7; ++x) EXPECT_NEAR(small.at(1, y, x), reference_downscale(r, 1, y, x, 10, 7), 1e-5);
}

TEST(Downscale, RejectsInvalidSize) {
  ImageRGB img(10, 10);
  EXPECT_THROW(downscale(img, 0, 5), InvalidSize);
  EXPECT_THROW(downscale(img, 11, 5), InvalidSize);
  EXPECT_THROW(downscale(img, 5, 11), InvalidSize);
}

TEST(ShiftReflect, MovesContentAndReflectsFill) {
  ImageRGB img(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) img.at(0, y, x) = static_cast<float>(y * 4 + x);
  auto s = shift_reflect(img, 1, 2);
  EXPECT_EQ(s.at(0, 2, 3), img.at(0, 1, 1));
  EXPECT_EQ(s.at(0, 0, 0), img.at(0, 0, 1));
  EXPECT_EQ(shift_reflect(img, 0, 0), img);
}

TEST(Blur, SeparablePathMatchesDenseKernel) {
  GaussianKernelSpec s;
  s.mu_y = -0.7;
  s.sigma_x = 2;
  const auto sep = gaussian_kernel(s);
  ASSERT_TRUE(sep.separable());
  auto dense = sep;
  dense.row_factor.clear();
  dense.col_factor.clear();
  std::mt19937_64 rng(4);
  auto img = test::random_image(19, 26, rng);
  auto a = blur(img, sep), b = blur(img, dense);
  for (std::size_t i = 0; i < a.data.size(); ++i) ASSERT_NEAR(a.data[i], b.data[i], 1e-6);

  std::vector<double> g(19 * 26), ga(19 * 26, 0.0), gb(19 * 26, 0.0);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : g) v = u(rng);
  blur_plane_adjoint<double>(g.data(), ga.data(), 19, 26, sep);
  blur_plane_adjoint<double>(g.data(), gb.data(), 19, 26, dense);
  for (std::size_t i = 0; i < g.size(); ++i) ASSERT_NEAR(ga[i], gb[i], 1e-13);
}
