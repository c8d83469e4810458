#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include "dped/align.hpp"
#include "dped/error.hpp"

namespace dped {

namespace {

constexpr int kBorder = 5;
constexpr int kRefineSteps = 5;
constexpr int kOrientationBins = 36;
constexpr double kOrientationPeakRatio = 0.8;
constexpr double kOrientationSigmaFactor = 1.5;
constexpr double kOrientationRadiusFactor = 3.0 * kOrientationSigmaFactor;
constexpr int kDescriptorWidth = 4;
constexpr int kDescriptorBins = 8;
constexpr double kDescriptorScale = 3.0;
constexpr double kDescriptorClamp = 0.2;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Plane {
  int h = 0;
  int w = 0;
  std::vector<float> v;

  Plane() = default;
  Plane(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0.0f) {}
  float at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  float& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
};

std::vector<float> gaussian_taps(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> taps(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double t = std::exp(-0.5 * i * i / (sigma * sigma));
    taps[i + radius] = static_cast<float>(t);
    sum += t;
  }
  for (auto& t : taps) t = static_cast<float>(t / sum);
  return taps;
}

Plane gaussian_blur(const Plane& in, double sigma) {
  const auto taps = gaussian_taps(sigma);
  const int r = static_cast<int>(taps.size() / 2);
  Plane tmp(in.h, in.w);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      float acc = 0.0f;
      for (int k = -r; k <= r; ++k) acc += taps[k + r] * in.at(y, reflect_index(x + k, in.w));
      tmp.at(y, x) = acc;
    }
  }
  Plane out(in.h, in.w);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      float acc = 0.0f;
      for (int k = -r; k <= r; ++k) acc += taps[k + r] * tmp.at(reflect_index(y + k, in.h), x);
      out.at(y, x) = acc;
    }
  }
  return out;
}

Plane upsample2(const Plane& in) {
  Plane out(in.h * 2, in.w * 2);
  for (int y = 0; y < out.h; ++y) {
    const double sy = std::min(y / 2.0, in.h - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, in.h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < out.w; ++x) {
      const double sx = std::min(x / 2.0, in.w - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, in.w - 1);
      const double fx = sx - x0;
      const double top = in.at(y0, x0) * (1 - fx) + in.at(y0, x1) * fx;
      const double bottom = in.at(y1, x0) * (1 - fx) + in.at(y1, x1) * fx;
      out.at(y, x) = static_cast<float>(top * (1 - fy) + bottom * fy);
    }
  }
  return out;
}

Plane halve(const Plane& in) {
  Plane out(in.h / 2, in.w / 2);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) out.at(y, x) = in.at(2 * y, 2 * x);
  return out;
}

struct Extremum {
  int x = 0;
  int y = 0;
  int layer = 0;
  double dx = 0.0;
  double dy = 0.0;
  double ds = 0.0;
};

class Octave {
 public:
  Octave(std::vector<Plane> gauss, std::vector<Plane> dog, const SiftConfig& cfg)
      : gauss_(std::move(gauss)), dog_(std::move(dog)), cfg_(cfg) {}

  const std::vector<Plane>& gauss() const { return gauss_; }

  bool is_extremum(int s, int y, int x, float threshold) const {
    const float v = dog_[s].at(y, x);
    if (std::abs(v) <= threshold) return false;
    const bool is_max = v > 0;
    for (int ds = -1; ds <= 1; ++ds) {
      const auto& p = dog_[s + ds];
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (ds == 0 && dy == 0 && dx == 0) continue;
          const float n = p.at(y + dy, x + dx);
          if (is_max ? n > v : n < v) return false;
        }
      }
    }
    return true;
  }

  std::optional<Extremum> refine(int s, int y, int x) const {
    const int layers = cfg_.scales_per_octave;
    const auto& first = dog_[0];
    Eigen::Vector3d offset = Eigen::Vector3d::Zero();
    Eigen::Vector3d grad;
    int step = 0;
    for (; step < kRefineSteps; ++step) {
      const auto& prev = dog_[s - 1];
      const auto& cur = dog_[s];
      const auto& next = dog_[s + 1];
      const double c = cur.at(y, x);
      grad << 0.5 * (cur.at(y, x + 1) - cur.at(y, x - 1)), 0.5 * (cur.at(y + 1, x) - cur.at(y - 1, x)),
          0.5 * (next.at(y, x) - prev.at(y, x));
      Eigen::Matrix3d hess;
      const double dxx = cur.at(y, x + 1) + cur.at(y, x - 1) - 2 * c;
      const double dyy = cur.at(y + 1, x) + cur.at(y - 1, x) - 2 * c;
      const double dss = next.at(y, x) + prev.at(y, x) - 2 * c;
      const double dxy = 0.25 * (cur.at(y + 1, x + 1) - cur.at(y + 1, x - 1) - cur.at(y - 1, x + 1) + cur.at(y - 1, x - 1));
      const double dxs = 0.25 * (next.at(y, x + 1) - next.at(y, x - 1) - prev.at(y, x + 1) + prev.at(y, x - 1));
      const double dys = 0.25 * (next.at(y + 1, x) - next.at(y - 1, x) - prev.at(y + 1, x) + prev.at(y - 1, x));
      hess << dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss;
      const auto lu = hess.fullPivLu();
      if (!lu.isInvertible()) return std::nullopt;
      offset = -lu.solve(grad);
      if (offset.cwiseAbs().maxCoeff() < 0.5) break;
      if (offset.cwiseAbs().maxCoeff() > 1e6) return std::nullopt;
      x += static_cast<int>(std::lround(offset.x()));
      y += static_cast<int>(std::lround(offset.y()));
      s += static_cast<int>(std::lround(offset.z()));
      if (s < 1 || s > layers || x < kBorder || x >= first.w - kBorder || y < kBorder || y >= first.h - kBorder) {
        return std::nullopt;
      }
    }
    if (step == kRefineSteps) return std::nullopt;

    const auto& cur = dog_[s];
    const double contrast = cur.at(y, x) + 0.5 * grad.dot(offset);
    if (std::abs(contrast) < cfg_.contrast_threshold / layers) return std::nullopt;

    const double c = cur.at(y, x);
    const double dxx = cur.at(y, x + 1) + cur.at(y, x - 1) - 2 * c;
    const double dyy = cur.at(y + 1, x) + cur.at(y - 1, x) - 2 * c;
    const double dxy = 0.25 * (cur.at(y + 1, x + 1) - cur.at(y + 1, x - 1) - cur.at(y - 1, x + 1) + cur.at(y - 1, x - 1));
    const double tr = dxx + dyy;
    const double det = dxx * dyy - dxy * dxy;
    const double r = cfg_.edge_ratio;
    if (det <= 0 || tr * tr * r >= (r + 1) * (r + 1) * det) return std::nullopt;
    return Extremum{x, y, s, offset.x(), offset.y(), offset.z()};
  }

 private:
  std::vector<Plane> gauss_;
  std::vector<Plane> dog_;
  const SiftConfig& cfg_;
};

std::vector<double> dominant_orientations(const Plane& img, int x, int y, double sigma) {
  const int radius = static_cast<int>(std::lround(kOrientationRadiusFactor * sigma));
  const double weight_scale = -1.0 / (2.0 * std::pow(kOrientationSigmaFactor * sigma, 2));
  std::array<double, kOrientationBins> hist{};
  for (int i = -radius; i <= radius; ++i) {
    const int yy = y + i;
    if (yy <= 0 || yy >= img.h - 1) continue;
    for (int j = -radius; j <= radius; ++j) {
      const int xx = x + j;
      if (xx <= 0 || xx >= img.w - 1) continue;
      const double gx = img.at(yy, xx + 1) - img.at(yy, xx - 1);
      const double gy = img.at(yy + 1, xx) - img.at(yy - 1, xx);
      const double w = std::exp((i * i + j * j) * weight_scale);
      double angle = std::atan2(gy, gx);
      if (angle < 0) angle += kTwoPi;
      int bin = static_cast<int>(std::lround(angle * kOrientationBins / kTwoPi));
      if (bin >= kOrientationBins) bin -= kOrientationBins;
      hist[bin] += w * std::hypot(gx, gy);
    }
  }
  std::array<double, kOrientationBins> smooth{};
  for (int b = 0; b < kOrientationBins; ++b) {
    auto at = [&](int k) { return hist[(b + k + kOrientationBins) % kOrientationBins]; };
    smooth[b] = (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0;
  }
  const double peak = *std::max_element(smooth.begin(), smooth.end());
  std::vector<double> out;
  if (peak <= 0) return out;
  for (int b = 0; b < kOrientationBins; ++b) {
    const double l = smooth[(b + kOrientationBins - 1) % kOrientationBins];
    const double r = smooth[(b + 1) % kOrientationBins];
    const double c = smooth[b];
    if (c > l && c > r && c >= kOrientationPeakRatio * peak) {
      const double shift = 0.5 * (l - r) / (l - 2 * c + r);
      double bin = b + shift;
      if (bin < 0) bin += kOrientationBins;
      if (bin >= kOrientationBins) bin -= kOrientationBins;
      out.push_back(bin * kTwoPi / kOrientationBins);
    }
  }
  return out;
}

std::vector<float> describe(const Plane& img, double x, double y, double sigma, double orientation) {
  constexpr int d = kDescriptorWidth;
  constexpr int n = kDescriptorBins;
  const double hist_width = kDescriptorScale * sigma;
  const int radius = std::min(static_cast<int>(std::lround(hist_width * std::numbers::sqrt2 * (d + 1) * 0.5)),
                              static_cast<int>(std::hypot(img.w, img.h)));
  const double cos_t = std::cos(orientation) / hist_width;
  const double sin_t = std::sin(orientation) / hist_width;
  const double weight_scale = -1.0 / (0.5 * d * d);
  const int xi = static_cast<int>(std::lround(x));
  const int yi = static_cast<int>(std::lround(y));

  std::vector<double> hist(static_cast<std::size_t>((d + 2) * (d + 2) * (n + 2)), 0.0);
  auto cell = [&](int r, int c, int o) -> double& { return hist[(static_cast<std::size_t>(r) * (d + 2) + c) * (n + 2) + o]; };

  for (int i = -radius; i <= radius; ++i) {
    for (int j = -radius; j <= radius; ++j) {
      const double c_rot = j * cos_t + i * sin_t;
      const double r_rot = -j * sin_t + i * cos_t;
      const double rbin = r_rot + d / 2.0 - 0.5;
      const double cbin = c_rot + d / 2.0 - 0.5;
      const int yy = yi + i;
      const int xx = xi + j;
      if (rbin <= -1 || rbin >= d || cbin <= -1 || cbin >= d) continue;
      if (yy <= 0 || yy >= img.h - 1 || xx <= 0 || xx >= img.w - 1) continue;
      const double gx = img.at(yy, xx + 1) - img.at(yy, xx - 1);
      const double gy = img.at(yy + 1, xx) - img.at(yy - 1, xx);
      double angle = std::atan2(gy, gx) - orientation;
      angle = std::fmod(angle, kTwoPi);
      if (angle < 0) angle += kTwoPi;
      const double obin = angle * n / kTwoPi;
      const double mag = std::hypot(gx, gy) * std::exp((c_rot * c_rot + r_rot * r_rot) * weight_scale);

      const int r0 = static_cast<int>(std::floor(rbin));
      const int c0 = static_cast<int>(std::floor(cbin));
      int o0 = static_cast<int>(std::floor(obin));
      const double fr = rbin - r0;
      const double fc = cbin - c0;
      const double fo = obin - o0;
      if (o0 < 0) o0 += n;
      if (o0 >= n) o0 -= n;
      for (int dr = 0; dr <= 1; ++dr) {
        const double wr = dr ? fr : 1.0 - fr;
        for (int dc = 0; dc <= 1; ++dc) {
          const double wc = dc ? fc : 1.0 - fc;
          for (int dobin = 0; dobin <= 1; ++dobin) {
            const double wo = dobin ? fo : 1.0 - fo;
            cell(r0 + dr + 1, c0 + dc + 1, o0 + dobin) += mag * wr * wc * wo;
          }
        }
      }
    }
  }

  std::vector<double> raw(static_cast<std::size_t>(d * d * n), 0.0);
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < d; ++c) {
      cell(r + 1, c + 1, 0) += cell(r + 1, c + 1, n);
      for (int o = 0; o < n; ++o) raw[(static_cast<std::size_t>(r) * d + c) * n + o] = cell(r + 1, c + 1, o);
    }
  }
  auto norm = [&] {
    double s = 0.0;
    for (double v : raw) s += v * v;
    return std::sqrt(s);
  };
  const double n1 = norm();
  if (n1 <= 0) return {};
  for (auto& v : raw) v = std::min(v, kDescriptorClamp * n1);
  const double n2 = norm();
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>(raw[i] / n2);
  return out;
}

}  // namespace

std::vector<Keypoint> SiftDetector::detect(const ImageGray& img) const {
  if (img.height < kMinDetectSize || img.width < kMinDetectSize) {
    throw ImageTooSmall("feature detection needs at least 32x32, got " + std::to_string(img.width) + "x" +
                        std::to_string(img.height));
  }
  const auto& cfg = config_;
  if (cfg.scales_per_octave < 1 || cfg.sigma <= 0) throw InvalidSpec("invalid SIFT configuration");
  const int layers = cfg.scales_per_octave;

  Plane base(img.height, img.width);
  std::copy(img.data.begin(), img.data.end(), base.v.begin());
  double blur = cfg.assumed_blur;
  if (cfg.upsample) {
    base = upsample2(base);
    blur *= 2.0;
  }
  base = gaussian_blur(base, std::sqrt(std::max(cfg.sigma * cfg.sigma - blur * blur, 0.01)));

  int octaves = std::max(1, static_cast<int>(std::floor(std::log2(std::min(base.h, base.w)))) - 3);
  if (cfg.max_octaves > 0) octaves = std::min(octaves, cfg.max_octaves);

  std::vector<double> increments(layers + 3, 0.0);
  for (int i = 1; i < layers + 3; ++i) {
    const double prev = cfg.sigma * std::pow(2.0, (i - 1.0) / layers);
    const double total = prev * std::pow(2.0, 1.0 / layers);
    increments[i] = std::sqrt(total * total - prev * prev);
  }

  const float prefilter = static_cast<float>(0.5 * cfg.contrast_threshold / layers);
  std::vector<Keypoint> keypoints;
  for (int o = 0; o < octaves; ++o) {
    if (base.h < 2 * kBorder + 3 || base.w < 2 * kBorder + 3) break;
    std::vector<Plane> gauss{base};
    for (int i = 1; i < layers + 3; ++i) gauss.push_back(gaussian_blur(gauss.back(), increments[i]));
    std::vector<Plane> dog;
    for (int i = 0; i + 1 < static_cast<int>(gauss.size()); ++i) {
      Plane d(base.h, base.w);
      for (std::size_t k = 0; k < d.v.size(); ++k) d.v[k] = gauss[i + 1].v[k] - gauss[i].v[k];
      dog.push_back(std::move(d));
    }
    const Octave octave(std::move(gauss), std::move(dog), cfg);
    const double octave_scale = std::ldexp(1.0, o) / (cfg.upsample ? 2.0 : 1.0);

    for (int s = 1; s <= layers; ++s) {
      for (int y = kBorder; y < base.h - kBorder; ++y) {
        for (int x = kBorder; x < base.w - kBorder; ++x) {
          if (!octave.is_extremum(s, y, x, prefilter)) continue;
          const auto ext = octave.refine(s, y, x);
          if (!ext) continue;
          const double sigma_layer = cfg.sigma * std::pow(2.0, (ext->layer + ext->ds) / layers);
          const auto& layer_img = octave.gauss()[ext->layer];
          const double px = (ext->x + ext->dx) * octave_scale;
          const double py = (ext->y + ext->dy) * octave_scale;
          if (px < 0 || py < 0 || px >= img.width || py >= img.height) continue;
          for (double angle : dominant_orientations(layer_img, ext->x, ext->y, sigma_layer)) {
            auto desc = describe(layer_img, ext->x + ext->dx, ext->y + ext->dy, sigma_layer, angle);
            if (desc.empty()) continue;
            keypoints.push_back({px, py, sigma_layer * octave_scale, angle, std::move(desc)});
          }
        }
      }
    }
    base = halve(octave.gauss()[layers]);
  }
  return keypoints;
}

std::vector<Keypoint> detect_and_describe(const ImageGray& img) { return SiftDetector{}.detect(img); }

std::vector<Match> match_descriptors(const std::vector<Keypoint>& a, const std::vector<Keypoint>& b, double ratio) {
  if (!(ratio > 0.0)) throw InvalidSpec("ratio must be positive");
  std::vector<Match> out;
  if (a.empty() || b.empty()) return out;
  const std::size_t len = a.front().descriptor.size();
  for (const auto& k : a)
    if (k.descriptor.size() != len) throw ShapeError("descriptor lengths differ");
  for (const auto& k : b)
    if (k.descriptor.size() != len) throw ShapeError("descriptor lengths differ");

  Eigen::MatrixXf da(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(a.size()));
  Eigen::MatrixXf db(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < len; ++k) da(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = a[i].descriptor[k];
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t k = 0; k < len; ++k) db(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = b[i].descriptor[k];

  // Squared distances computed entry by entry keep exact zeros for identical descriptors.
  const auto na = static_cast<int>(a.size());
  const auto nb = static_cast<int>(b.size());
  Eigen::MatrixXd dist(na, nb);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) dist(i, j) = (da.col(i) - db.col(j)).cast<double>().squaredNorm();

  const double r2 = ratio * ratio;
  auto best_two = [&](auto&& value, int count) {
    int best = -1;
    double d1 = std::numeric_limits<double>::infinity();
    double d2 = d1;
    for (int k = 0; k < count; ++k) {
      const double v = value(k);
      if (v < d1) {
        d2 = d1;
        d1 = v;
        best = k;
      } else if (v < d2) {
        d2 = v;
      }
    }
    const bool passes = ratio >= 1.0 || d1 < r2 * d2;
    return std::pair{best, passes};
  };
  std::vector<int> b_to_a(nb, -1);
  for (int j = 0; j < nb; ++j) b_to_a[j] = best_two([&](int i) { return dist(i, j); }, na).first;
  for (int i = 0; i < na; ++i) {
    const auto [j, passes] = best_two([&](int k) { return dist(i, k); }, nb);
    if (passes && j >= 0 && b_to_a[j] == i) out.push_back({i, j});
  }
  return out;
}

}  // namespace dped
