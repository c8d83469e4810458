#include "dped/image.hpp"

#include <png.h>
// jpeglib.h needs FILE and size_t declared first.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <fstream>
#include <numeric>
#include <string>

#include "dped/error.hpp"

namespace dped {

double Kernel2D::sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading " + path.string());
  return bytes;
}

ImageRGB from_interleaved(const unsigned char* px, int h, int w) {
  ImageRGB img(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const unsigned char* p = px + (static_cast<std::size_t>(y) * w + x) * 3;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(p[c]) / 255.0f;
    }
  }
  return img;
}

ImageRGB decode_png(const std::vector<unsigned char>& bytes, const std::string& name) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DecodeError(name + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DecodeError(name + ": " + image.message);
  }
  return from_interleaved(buf.data(), static_cast<int>(image.height), static_cast<int>(image.width));
}

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

ImageRGB decode_jpeg(const std::vector<unsigned char>& bytes, const std::string& name) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  // Everything touched after setjmp lives in heap storage owned outside it.
  std::vector<unsigned char> pixels;
  int h = 0;
  int w = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DecodeError(name + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  h = static_cast<int>(cinfo.output_height);
  w = static_cast<int>(cinfo.output_width);
  pixels.resize(static_cast<std::size_t>(h) * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(pixels.data(), h, w);
}

unsigned char quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

void write_png(const std::filesystem::path& path, const std::vector<unsigned char>& buf, int h, int w,
               png_uint_32 format) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write " + path.string() + ": " + image.message);
  }
}

}  // namespace

ImageRGB load_image(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw IoError("no such file: " + path.string());
  const auto bytes = read_file(path);
  static constexpr std::array<unsigned char, 8> kPngMagic{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::equal(kPngMagic.begin(), kPngMagic.end(), bytes.begin())) {
    return decode_png(bytes, path.string());
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return decode_jpeg(bytes, path.string());
  }
  throw DecodeError(path.string() + ": not a PNG or JPEG file");
}

void save_image(const ImageRGB& img, const std::filesystem::path& path) {
  std::vector<unsigned char> buf(img.plane_size() * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) buf[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = quantize(img.at(c, y, x));
    }
  }
  write_png(path, buf, img.height, img.width, PNG_FORMAT_RGB);
}

void save_image(const ImageGray& img, const std::filesystem::path& path) {
  std::vector<unsigned char> buf(img.plane_size());
  std::transform(img.data.begin(), img.data.end(), buf.begin(), quantize);
  write_png(path, buf, img.height, img.width, PNG_FORMAT_GRAY);
}

ImageGray to_grayscale(const ImageRGB& img) {
  ImageGray out(img.height, img.width);
  const auto r = img.plane(0);
  const auto g = img.plane(1);
  const auto b = img.plane(2);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    // Gray inputs (r == g == b) must map to themselves exactly.
    if (r[i] == g[i] && g[i] == b[i]) {
      out.data[i] = r[i];
      continue;
    }
    const double y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    out.data[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
  }
  return out;
}

Kernel2D gaussian_kernel(const GaussianKernelSpec& spec) {
  if (!(spec.sigma_x > 0.0) || !(spec.sigma_y > 0.0)) throw InvalidSpec("gaussian kernel sigmas must be positive");
  if (spec.radius < 1) throw InvalidSpec("gaussian kernel radius must be >= 1");
  if (!(spec.amplitude >= 0.0)) throw InvalidSpec("gaussian kernel amplitude must be nonnegative");
  Kernel2D kernel;
  kernel.radius = spec.radius;
  kernel.values.resize(static_cast<std::size_t>(kernel.side()) * kernel.side());
  for (int k = -spec.radius; k <= spec.radius; ++k) {
    for (int l = -spec.radius; l <= spec.radius; ++l) {
      const double dk = k - spec.mu_x;
      const double dl = l - spec.mu_y;
      kernel.values[static_cast<std::size_t>(k + spec.radius) * kernel.side() + (l + spec.radius)] =
          spec.amplitude * std::exp(-dk * dk / (2.0 * spec.sigma_x) - dl * dl / (2.0 * spec.sigma_y));
    }
  }
  for (int k = -spec.radius; k <= spec.radius; ++k) {
    const double dk = k - spec.mu_x;
    const double dl = k - spec.mu_y;
    kernel.row_factor.push_back(spec.amplitude * std::exp(-dk * dk / (2.0 * spec.sigma_x)));
    kernel.col_factor.push_back(std::exp(-dl * dl / (2.0 * spec.sigma_y)));
  }
  return kernel;
}

namespace {

std::vector<int> reflected_columns(int width, int r) {
  std::vector<int> idx(static_cast<std::size_t>(width + 2 * r));
  for (int j = -r; j < width + r; ++j) idx[j + r] = reflect_index(j, width);
  return idx;
}

// out(i, j) = sum_k f[k] in(reflect(i + k), j)
template <typename T>
void correlate_rows(const T* in, T* out, int height, int width, const std::vector<double>& f, int r) {
  for (int i = 0; i < height; ++i) {
    T* o = out + static_cast<std::size_t>(i) * width;
    std::fill(o, o + width, T(0));
    for (int k = -r; k <= r; ++k) {
      const T w = static_cast<T>(f[k + r]);
      const T* src = in + static_cast<std::size_t>(reflect_index(i + k, height)) * width;
      for (int j = 0; j < width; ++j) o[j] += w * src[j];
    }
  }
}

// out(i, j) = sum_l f[l] in(i, reflect(j + l))
template <typename T>
void correlate_cols(const T* in, T* out, int height, int width, const std::vector<double>& f, int r) {
  const auto idx = reflected_columns(width, r);
  for (int i = 0; i < height; ++i) {
    const T* src = in + static_cast<std::size_t>(i) * width;
    T* o = out + static_cast<std::size_t>(i) * width;
    for (int j = 0; j < width; ++j) {
      T acc = 0;
      for (int l = -r; l <= r; ++l) acc += static_cast<T>(f[l + r]) * src[idx[j + r + l]];
      o[j] = acc;
    }
  }
}

template <typename T>
void correlate_rows_adjoint(const T* grad_out, T* grad_in, int height, int width, const std::vector<double>& f, int r) {
  for (int i = 0; i < height; ++i) {
    const T* g = grad_out + static_cast<std::size_t>(i) * width;
    for (int k = -r; k <= r; ++k) {
      const T w = static_cast<T>(f[k + r]);
      T* dst = grad_in + static_cast<std::size_t>(reflect_index(i + k, height)) * width;
      for (int j = 0; j < width; ++j) dst[j] += w * g[j];
    }
  }
}

template <typename T>
void correlate_cols_adjoint(const T* grad_out, T* grad_in, int height, int width, const std::vector<double>& f, int r) {
  const auto idx = reflected_columns(width, r);
  for (int i = 0; i < height; ++i) {
    const T* g = grad_out + static_cast<std::size_t>(i) * width;
    T* dst = grad_in + static_cast<std::size_t>(i) * width;
    for (int j = 0; j < width; ++j)
      for (int l = -r; l <= r; ++l) dst[idx[j + r + l]] += static_cast<T>(f[l + r]) * g[j];
  }
}

}  // namespace

template <typename T>
void blur_plane(const T* in, T* out, int height, int width, const Kernel2D& kernel) {
  const int r = kernel.radius;
  if (kernel.separable()) {
    std::vector<T> tmp(static_cast<std::size_t>(height) * width);
    correlate_rows(in, tmp.data(), height, width, kernel.row_factor, r);
    correlate_cols(tmp.data(), out, height, width, kernel.col_factor, r);
    return;
  }
  const int side = kernel.side();
  const auto col_index = reflected_columns(width, r);
  for (int i = 0; i < height; ++i) {
    T* out_row = out + static_cast<std::size_t>(i) * width;
    std::fill(out_row, out_row + width, T(0));
    for (int k = -r; k <= r; ++k) {
      const T* in_row = in + static_cast<std::size_t>(reflect_index(i + k, height)) * width;
      const double* g = kernel.values.data() + static_cast<std::size_t>(k + r) * side;
      for (int l = -r; l <= r; ++l) {
        const T w = static_cast<T>(g[l + r]);
        const int* idx = col_index.data() + r + l;
        for (int j = 0; j < width; ++j) out_row[j] += w * in_row[idx[j]];
      }
    }
  }
}

template <typename T>
void blur_plane_adjoint(const T* grad_out, T* grad_in, int height, int width, const Kernel2D& kernel) {
  const int r = kernel.radius;
  if (kernel.separable()) {
    std::vector<T> tmp(static_cast<std::size_t>(height) * width, T(0));
    correlate_cols_adjoint(grad_out, tmp.data(), height, width, kernel.col_factor, r);
    correlate_rows_adjoint(tmp.data(), grad_in, height, width, kernel.row_factor, r);
    return;
  }
  const int side = kernel.side();
  const auto col_index = reflected_columns(width, r);
  for (int i = 0; i < height; ++i) {
    const T* go_row = grad_out + static_cast<std::size_t>(i) * width;
    for (int k = -r; k <= r; ++k) {
      T* gi_row = grad_in + static_cast<std::size_t>(reflect_index(i + k, height)) * width;
      const double* g = kernel.values.data() + static_cast<std::size_t>(k + r) * side;
      for (int l = -r; l <= r; ++l) {
        const T w = static_cast<T>(g[l + r]);
        const int* idx = col_index.data() + r + l;
        for (int j = 0; j < width; ++j) gi_row[idx[j]] += w * go_row[j];
      }
    }
  }
}

template void blur_plane<float>(const float*, float*, int, int, const Kernel2D&);
template void blur_plane<double>(const double*, double*, int, int, const Kernel2D&);
template void blur_plane_adjoint<float>(const float*, float*, int, int, const Kernel2D&);
template void blur_plane_adjoint<double>(const double*, double*, int, int, const Kernel2D&);

ImageRGB blur(const ImageRGB& img, const Kernel2D& kernel) {
  if (kernel.side() > std::min(img.height, img.width)) {
    throw KernelTooLarge("kernel side " + std::to_string(kernel.side()) + " exceeds image size");
  }
  ImageRGB out(img.height, img.width);
  for (int c = 0; c < 3; ++c) blur_plane(img.plane(c).data(), out.plane(c).data(), img.height, img.width, kernel);
  return out;
}

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t < 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace {

struct ResampleTaps {
  std::vector<int> first;
  std::vector<int> count;
  std::vector<double> weights;  // count.size() rows of max_taps
  int max_taps = 0;
};

// Antialiased bicubic taps (support widened by the downscale factor).
ResampleTaps resample_taps(int in_size, int out_size) {
  ResampleTaps taps;
  const double scale = static_cast<double>(in_size) / out_size;
  const double support_scale = std::max(1.0, scale);
  const double support = 2.0 * support_scale;
  taps.max_taps = static_cast<int>(std::ceil(support)) * 2 + 1;
  taps.first.resize(out_size);
  taps.count.resize(out_size);
  taps.weights.assign(static_cast<std::size_t>(out_size) * taps.max_taps, 0.0);
  for (int o = 0; o < out_size; ++o) {
    const double center = (o + 0.5) * scale - 0.5;
    const int lo = static_cast<int>(std::floor(center - support)) + 1;
    const int hi = static_cast<int>(std::ceil(center + support)) - 1;
    // Collect weights per clamped source index.
    std::vector<double> w;
    double total = 0.0;
    for (int i = lo; i <= hi; ++i) {
      const double v = cubic_weight((i - center) / support_scale);
      w.push_back(v);
      total += v;
    }
    taps.first[o] = lo;
    taps.count[o] = static_cast<int>(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) taps.weights[static_cast<std::size_t>(o) * taps.max_taps + k] = w[k] / total;
  }
  return taps;
}

}  // namespace

ImageRGB downscale(const ImageRGB& img, int new_height, int new_width) {
  if (new_height < 1 || new_width < 1 || new_height > img.height || new_width > img.width) {
    throw InvalidSize("downscale target " + std::to_string(new_height) + "x" + std::to_string(new_width) +
                      " outside [1, " + std::to_string(img.height) + "]x[1, " + std::to_string(img.width) + "]");
  }
  if (new_height == img.height && new_width == img.width) return img;
  const auto th = resample_taps(img.height, new_height);
  const auto tw = resample_taps(img.width, new_width);
  ImageRGB out(new_height, new_width);
  std::vector<double> tmp(static_cast<std::size_t>(img.height) * new_width);
  for (int c = 0; c < 3; ++c) {
    const auto in = img.plane(c);
    for (int y = 0; y < img.height; ++y) {
      for (int ox = 0; ox < new_width; ++ox) {
        double acc = 0.0;
        for (int k = 0; k < tw.count[ox]; ++k) {
          const int sx = std::clamp(tw.first[ox] + k, 0, img.width - 1);
          acc += tw.weights[static_cast<std::size_t>(ox) * tw.max_taps + k] * in[static_cast<std::size_t>(y) * img.width + sx];
        }
        tmp[static_cast<std::size_t>(y) * new_width + ox] = acc;
      }
    }
    for (int oy = 0; oy < new_height; ++oy) {
      for (int ox = 0; ox < new_width; ++ox) {
        double acc = 0.0;
        for (int k = 0; k < th.count[oy]; ++k) {
          const int sy = std::clamp(th.first[oy] + k, 0, img.height - 1);
          acc += th.weights[static_cast<std::size_t>(oy) * th.max_taps + k] * tmp[static_cast<std::size_t>(sy) * new_width + ox];
        }
        out.at(c, oy, ox) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
    }
  }
  return out;
}

float sample_bicubic(const ImageRGB& img, int c, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  double wy[4];
  double wx[4];
  for (int k = 0; k < 4; ++k) {
    wy[k] = cubic_weight(y - (y0 - 1 + k));
    wx[k] = cubic_weight(x - (x0 - 1 + k));
  }
  double acc = 0.0;
  for (int i = 0; i < 4; ++i) {
    const int sy = std::clamp(y0 - 1 + i, 0, img.height - 1);
    double row = 0.0;
    for (int j = 0; j < 4; ++j) {
      const int sx = std::clamp(x0 - 1 + j, 0, img.width - 1);
      row += wx[j] * img.at(c, sy, sx);
    }
    acc += wy[i] * row;
  }
  return static_cast<float>(acc);
}

float sample_bilinear(const ImageGray& img, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0;
  const double fx = x - x0;
  auto px = [&](int yy, int xx) {
    return static_cast<double>(img.at(0, std::clamp(yy, 0, img.height - 1), std::clamp(xx, 0, img.width - 1)));
  };
  const double top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
  const double bottom = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bottom * fy);
}

template <int C>
Image<C> crop(const Image<C>& img, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > img.height || left + w > img.width) {
    throw InvalidSize("crop window outside image");
  }
  Image<C> out(h, w);
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < h; ++y) {
      const float* src = &img.data[(static_cast<std::size_t>(c) * img.height + top + y) * img.width + left];
      std::copy(src, src + w, &out.data[(static_cast<std::size_t>(c) * h + y) * w]);
    }
  }
  return out;
}

template ImageRGB crop<3>(const ImageRGB&, int, int, int, int);
template ImageGray crop<1>(const ImageGray&, int, int, int, int);

ImageRGB shift_reflect(const ImageRGB& img, int dy, int dx) {
  ImageRGB out(img.height, img.width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y) {
      const int sy = reflect_index(y - dy, img.height);
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, sy, reflect_index(x - dx, img.width));
    }
  }
  return out;
}

}  // namespace dped
