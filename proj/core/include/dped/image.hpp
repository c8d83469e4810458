#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace dped {

/// Planar float raster with C channels, values in [0,1]. Storage is
/// channel-major: data[(c * height + y) * width + x].
template <int C>
struct Image {
  static constexpr int kChannels = C;

  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), data(static_cast<std::size_t>(C) * h * w, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::span<float> plane(int c) { return {data.data() + c * plane_size(), plane_size()}; }
  std::span<const float> plane(int c) const { return {data.data() + c * plane_size(), plane_size()}; }

  bool operator==(const Image&) const = default;
};

using ImageRGB = Image<3>;
using ImageGray = Image<1>;

/// Parameters of the Gaussian blur operator
///   G(k,l) = A * exp(-(k - mu_x)^2 / (2 sigma_x) - (l - mu_y)^2 / (2 sigma_y)).
/// sigma_x and sigma_y divide the squared offset directly, so they act as
/// variances. k runs along rows, l along columns.
struct GaussianKernelSpec {
  double amplitude = 0.053;
  double mu_x = 0.0;
  double mu_y = 0.0;
  double sigma_x = 3.0;
  double sigma_y = 3.0;
  int radius = 7;
};

/// Square correlation kernel with side 2*radius+1, row-major. When the
/// factor vectors are set, values(k, l) = row_factor[k] * col_factor[l] and
/// blurring runs as two 1-D passes.
struct Kernel2D {
  int radius = 0;
  std::vector<double> values;
  std::vector<double> row_factor;
  std::vector<double> col_factor;

  bool separable() const { return !row_factor.empty(); }
  int side() const { return 2 * radius + 1; }
  double at(int k, int l) const { return values[static_cast<std::size_t>(k + radius) * side() + (l + radius)]; }
  double sum() const;
};

ImageRGB load_image(const std::filesystem::path& path);
void save_image(const ImageRGB& img, const std::filesystem::path& path);
void save_image(const ImageGray& img, const std::filesystem::path& path);

/// BT.601 luma.
ImageGray to_grayscale(const ImageRGB& img);

Kernel2D gaussian_kernel(const GaussianKernelSpec& spec = {});

/// Per-channel correlation with symmetric-reflection borders. Not clamped.
ImageRGB blur(const ImageRGB& img, const Kernel2D& kernel);

/// Antialiased bicubic resampling to a smaller (or equal) size, clamped to [0,1].
ImageRGB downscale(const ImageRGB& img, int new_height, int new_width);

/// Half-sample symmetric reflection of an index into [0, n).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

/// Single-plane correlation with reflection padding; out may not alias in.
template <typename T>
void blur_plane(const T* in, T* out, int height, int width, const Kernel2D& kernel);

/// Adjoint of blur_plane: accumulates K^T * grad_out into grad_in.
template <typename T>
void blur_plane_adjoint(const T* grad_out, T* grad_in, int height, int width, const Kernel2D& kernel);

/// Keys cubic convolution weight (a = -0.5).
double cubic_weight(double t);

/// Bicubic sample of one channel at continuous (y, x); outside samples clamp
/// to the border. Result is not clamped.
float sample_bicubic(const ImageRGB& img, int c, double y, double x);
float sample_bilinear(const ImageGray& img, double y, double x);

template <int C>
Image<C> crop(const Image<C>& img, int top, int left, int h, int w);

/// Translates content by (dy, dx) pixels, filling uncovered area by reflection:
/// out(y, x) = in(reflect(y - dy), reflect(x - dx)).
ImageRGB shift_reflect(const ImageRGB& img, int dy, int dx);

}  // namespace dped
