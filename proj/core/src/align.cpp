#include "dped/align.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dped/error.hpp"

namespace dped {

using json = nlohmann::json;

void AlignConfig::validate() const {
  if (ransac_iters < 1) throw InvalidSpec("ransac_iters must be >= 1");
  if (!(ransac_inlier_px > 0)) throw InvalidSpec("ransac_inlier_px must be positive");
  if (!(ratio_test > 0 && ratio_test <= 1)) throw InvalidSpec("ratio_test must be in (0, 1]");
  if (patch_size < 8) throw InvalidSpec("patch_size must be >= 8");
  if (!(cc_threshold >= -1 && cc_threshold <= 1)) throw InvalidSpec("cc_threshold must be in [-1, 1]");
  if (max_shift < 0) throw InvalidSpec("max_shift must be >= 0");
  if (!(rotation_range >= 0)) throw InvalidSpec("rotation_range must be >= 0");
  if (rotation_range > 0 && !(rotation_step > 0)) throw InvalidSpec("rotation_step must be positive");
}

// ---------------------------------------------------------------------------
// Homography
// ---------------------------------------------------------------------------

namespace {

using Mat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;

Mat3 to_mat(const Homography& h) { return Eigen::Map<const Mat3>(h.m.data()); }

Homography from_mat(const Mat3& m) {
  if (std::abs(m(2, 2)) < 1e-300) throw DegenerateConfiguration("homography has zero scale entry");
  Homography h;
  const Mat3 n = m / m(2, 2);
  Eigen::Map<Mat3>(h.m.data()) = n;
  return h;
}

// Similarity taking the points to zero centroid and mean distance sqrt(2).
Mat3 normalizer(const std::vector<Point2>& pts) {
  double cx = 0;
  double cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean = 0;
  for (const auto& p : pts) mean += std::hypot(p.x - cx, p.y - cy);
  mean /= static_cast<double>(pts.size());
  if (mean < 1e-12) throw DegenerateConfiguration("all points coincide");
  const double s = std::numbers::sqrt2 / mean;
  Mat3 t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

bool collinear(const std::vector<Point2>& pts) {
  double cx = 0;
  double cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double sxx = 0;
  double syy = 0;
  double sxy = 0;
  for (const auto& p : pts) {
    sxx += (p.x - cx) * (p.x - cx);
    syy += (p.y - cy) * (p.y - cy);
    sxy += (p.x - cx) * (p.y - cy);
  }
  const double tr = sxx + syy;
  const double det = sxx * syy - sxy * sxy;
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det));
  const double small = tr / 2 - disc;
  return small <= 1e-10 * std::max(tr, 1e-300);
}

double reprojection_error(const Homography& h, const PointMatch& m) {
  const auto p = h.apply(m.src);
  return std::hypot(p.x - m.dst.x, p.y - m.dst.y);
}

}  // namespace

Point2 Homography::apply(Point2 p) const {
  const double w = m[6] * p.x + m[7] * p.y + m[8];
  return {(m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w};
}

double Homography::determinant() const { return to_mat(*this).determinant(); }

Homography Homography::inverse() const {
  const Mat3 a = to_mat(*this);
  if (std::abs(a.determinant()) <= 1e-12) throw DegenerateConfiguration("homography is singular");
  return from_mat(a.inverse());
}

Homography Homography::operator*(const Homography& rhs) const { return from_mat(to_mat(*this) * to_mat(rhs)); }

Homography fit_homography(const std::vector<PointMatch>& matches) {
  if (matches.size() < 4) throw DegenerateConfiguration("a homography needs at least 4 correspondences");
  std::vector<Point2> src;
  std::vector<Point2> dst;
  for (const auto& m : matches) {
    src.push_back(m.src);
    dst.push_back(m.dst);
  }
  if (collinear(src) || collinear(dst)) throw DegenerateConfiguration("correspondences are collinear");
  const Mat3 ts = normalizer(src);
  const Mat3 td = normalizer(dst);
  Eigen::MatrixXd a(2 * static_cast<Eigen::Index>(matches.size()), 9);
  for (std::size_t i = 0; i < matches.size(); ++i) {
    const Eigen::Vector3d s = ts * Eigen::Vector3d(src[i].x, src[i].y, 1);
    const Eigen::Vector3d d = td * Eigen::Vector3d(dst[i].x, dst[i].y, 1);
    const auto r = 2 * static_cast<Eigen::Index>(i);
    a.row(r) << -s.x(), -s.y(), -1, 0, 0, 0, d.x() * s.x(), d.x() * s.y(), d.x();
    a.row(r + 1) << 0, 0, 0, -s.x(), -s.y(), -1, d.y() * s.x(), d.y() * s.y(), d.y();
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Mat3 full = td.inverse() * hn * ts;
  const auto out = from_mat(full);
  if (!(std::abs(out.determinant()) > 1e-12)) throw DegenerateConfiguration("fitted homography is singular");
  return out;
}

RansacResult estimate_homography_ransac(const std::vector<PointMatch>& matches, const AlignConfig& cfg,
                                        std::uint64_t seed) {
  cfg.validate();
  const int n = static_cast<int>(matches.size());
  if (n < 4) throw DegenerateConfiguration("RANSAC needs at least 4 matches, got " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, n - 1);

  auto score = [&](const Homography& h, std::vector<bool>& mask) {
    int count = 0;
    mask.assign(n, false);
    for (int i = 0; i < n; ++i) {
      const double e = reprojection_error(h, matches[i]);
      if (e < cfg.ransac_inlier_px) {
        mask[i] = true;
        ++count;
      }
    }
    return count;
  };

  RansacResult best;
  best.inlier_count = -1;
  std::vector<bool> mask;
  for (int it = 0; it < cfg.ransac_iters; ++it) {
    std::array<int, 4> idx{};
    for (int k = 0; k < 4; ++k) {
      int v = 0;
      do {
        v = pick(rng);
      } while (std::find(idx.begin(), idx.begin() + k, v) != idx.begin() + k);
      idx[k] = v;
    }
    std::vector<PointMatch> sample;
    for (int k : idx) sample.push_back(matches[k]);
    Homography h;
    try {
      h = fit_homography(sample);
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    const int count = score(h, mask);
    if (count > best.inlier_count) {
      best.h = h;
      best.inlier_count = count;
      best.inliers = mask;
    }
  }
  if (best.inlier_count < 4) throw DegenerateConfiguration("RANSAC found fewer than 4 non-collinear inliers");

  for (int round = 0; round < 2; ++round) {
    std::vector<PointMatch> inliers;
    for (int i = 0; i < n; ++i)
      if (best.inliers[i]) inliers.push_back(matches[i]);
    const auto refit = fit_homography(inliers);
    const int count = score(refit, mask);
    if (count < 4) break;
    best.h = refit;
    best.inlier_count = count;
    best.inliers = mask;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Warping
// ---------------------------------------------------------------------------

namespace {

struct Rect {
  int left = 0;
  int top = 0;
  int width = 0;
  int height = 0;
};

// Largest all-true axis-aligned rectangle (row-histogram method).
Rect largest_rectangle(const std::vector<unsigned char>& valid, int h, int w) {
  std::vector<int> heights(w, 0);
  Rect best;
  long best_area = 0;
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) heights[x] = valid[static_cast<std::size_t>(y) * w + x] ? heights[x] + 1 : 0;
    stack.clear();
    for (int x = 0; x <= w; ++x) {
      const int cur = x < w ? heights[x] : 0;
      while (!stack.empty() && heights[stack.back()] >= cur) {
        const int hh = heights[stack.back()];
        stack.pop_back();
        const int left = stack.empty() ? 0 : stack.back() + 1;
        const long area = static_cast<long>(hh) * (x - left);
        if (area > best_area) {
          best_area = area;
          best = {left, y - hh + 1, x - left, hh};
        }
      }
      stack.push_back(x);
    }
  }
  return best;
}

Mat3 local_jacobian(const Homography& inv, Point2 p) {
  const double e = 0.5;
  const auto px = inv.apply({p.x + e, p.y});
  const auto mx = inv.apply({p.x - e, p.y});
  const auto py = inv.apply({p.x, p.y + e});
  const auto my = inv.apply({p.x, p.y - e});
  Mat3 j = Mat3::Identity();
  j(0, 0) = (px.x - mx.x) / (2 * e);
  j(1, 0) = (px.y - mx.y) / (2 * e);
  j(0, 1) = (py.x - my.x) / (2 * e);
  j(1, 1) = (py.y - my.y) / (2 * e);
  return j;
}

}  // namespace

WarpedPair warp_and_crop(const ImageRGB& phone, const ImageRGB& dslr, const Homography& h) {
  const Homography inv = h.inverse();
  const int ph = phone.height;
  const int pw = phone.width;
  const double eps = 1e-6;
  std::vector<unsigned char> valid(static_cast<std::size_t>(ph) * pw, 0);
  for (int y = 0; y < ph; ++y) {
    for (int x = 0; x < pw; ++x) {
      const double wden = inv.m[6] * x + inv.m[7] * y + inv.m[8];
      if (wden <= 0) continue;
      const auto q = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      valid[static_cast<std::size_t>(y) * pw + x] =
          q.x >= -eps && q.y >= -eps && q.x <= dslr.width - 1 + eps && q.y <= dslr.height - 1 + eps;
    }
  }
  const Rect r = largest_rectangle(valid, ph, pw);
  if (r.width < kMinOverlap || r.height < kMinOverlap) {
    throw EmptyIntersection("overlap " + std::to_string(r.width) + "x" + std::to_string(r.height) +
                            " is below " + std::to_string(kMinOverlap) + "x" + std::to_string(kMinOverlap));
  }

  WarpedPair out;
  out.left = r.left;
  out.top = r.top;
  out.phone = crop(phone, r.top, r.left, r.height, r.width);

  const Point2 center{r.left + (r.width - 1) / 2.0, r.top + (r.height - 1) / 2.0};
  const double density = std::sqrt(std::abs(local_jacobian(inv, center).determinant()));
  const double k = std::max(1.0, density);
  const int gh = std::max(r.height, static_cast<int>(std::lround(k * r.height)));
  const int gw = std::max(r.width, static_cast<int>(std::lround(k * r.width)));
  const double sy = static_cast<double>(r.height) / gh;
  const double sx = static_cast<double>(r.width) / gw;
  ImageRGB grid(gh, gw);
  for (int y = 0; y < gh; ++y) {
    const double py = r.top + (y + 0.5) * sy - 0.5;
    for (int x = 0; x < gw; ++x) {
      const double px = r.left + (x + 0.5) * sx - 0.5;
      auto q = inv.apply({px, py});
      q.x = std::clamp(q.x, 0.0, dslr.width - 1.0);
      q.y = std::clamp(q.y, 0.0, dslr.height - 1.0);
      for (int c = 0; c < 3; ++c) grid.at(c, y, x) = std::clamp(sample_bicubic(dslr, c, q.y, q.x), 0.0f, 1.0f);
    }
  }
  out.dslr = (gh == r.height && gw == r.width) ? std::move(grid) : downscale(grid, r.height, r.width);
  return out;
}

// ---------------------------------------------------------------------------
// Correlation and patch extraction
// ---------------------------------------------------------------------------

namespace {

// Mean-centres v in place and returns its L2 norm.
double centre(std::vector<double>& v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double& x : v) {
    x -= mean;
    ss += x * x;
  }
  return std::sqrt(ss);
}

Correlation zncc(std::vector<double> a, std::vector<double> b) {
  const double na = centre(a);
  const double nb = centre(b);
  const double floor = 1e-12 * std::sqrt(static_cast<double>(a.size()));
  if (na <= floor || nb <= floor) return {0.0, true};
  double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return {std::clamp(dot / (na * nb), -1.0, 1.0), false};
}

template <int C>
float bilinear(const Image<C>& img, int c, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const double fy = y - y0;
  const double fx = x - x0;
  auto px = [&](int yy, int xx) {
    return static_cast<double>(img.at(c, reflect_index(yy, img.height), reflect_index(xx, img.width)));
  };
  const double top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
  const double bottom = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
  return static_cast<float>(top * (1.0 - fy) + bottom * fy);
}

struct Candidate {
  int dx = 0;
  int dy = 0;
  double rotation = 0.0;
};

// Ordered so that ties favour no rotation and small shifts.
std::vector<Candidate> candidates(const AlignConfig& cfg) {
  std::vector<double> rotations{0.0};
  if (cfg.rotation_range > 0) {
    const int steps = static_cast<int>(std::floor(cfg.rotation_range / cfg.rotation_step + 1e-9));
    for (int k = 1; k <= steps; ++k) {
      rotations.push_back(-k * cfg.rotation_step);
      rotations.push_back(k * cfg.rotation_step);
    }
  }
  std::vector<Candidate> out;
  for (double rot : rotations)
    for (int dy = -cfg.max_shift; dy <= cfg.max_shift; ++dy)
      for (int dx = -cfg.max_shift; dx <= cfg.max_shift; ++dx) out.push_back({dx, dy, rot});
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    const double ra = std::abs(a.rotation);
    const double rb = std::abs(b.rotation);
    if (ra != rb) return ra < rb;
    return std::abs(a.dx) + std::abs(a.dy) < std::abs(b.dx) + std::abs(b.dy);
  });
  return out;
}

// Source coordinates of the adjusted phone window, row-major over the window.
template <typename F>
void for_each_sample(int top, int left, int size, const Candidate& cand, F&& f) {
  const double theta = cand.rotation * std::numbers::pi / 180.0;
  const double ct = std::cos(theta);
  const double st = std::sin(theta);
  const double c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      const double u = j - c;
      const double v = i - c;
      const double x = left + cand.dx + c + ct * u - st * v;
      const double y = top + cand.dy + c + st * u + ct * v;
      f(i, j, y, x);
    }
  }
}

bool inside(int top, int left, int size, const Candidate& cand, int h, int w) {
  bool ok = true;
  for_each_sample(top, left, size, cand, [&](int, int, double y, double x) {
    if (x < -1e-9 || y < -1e-9 || x > w - 1 + 1e-9 || y > h - 1 + 1e-9) ok = false;
  });
  return ok;
}

template <int C>
std::vector<double> gather(const Image<C>& img, int top, int left, int size, const Candidate& cand) {
  std::vector<double> out(static_cast<std::size_t>(C) * size * size);
  const bool integral = cand.rotation == 0.0;
  for_each_sample(top, left, size, cand, [&](int i, int j, double y, double x) {
    for (int c = 0; c < C; ++c) {
      const std::size_t k = (static_cast<std::size_t>(c) * size + i) * size + j;
      out[k] = integral ? img.at(c, reflect_index(static_cast<int>(std::lround(y)), img.height),
                                 reflect_index(static_cast<int>(std::lround(x)), img.width))
                        : bilinear(img, c, y, x);
    }
  });
  return out;
}

ImageRGB resample_window(const ImageRGB& img, int top, int left, int size, const Candidate& cand) {
  if (cand.rotation == 0.0) return crop(img, top + cand.dy, left + cand.dx, size, size);
  ImageRGB out(size, size);
  for_each_sample(top, left, size, cand, [&](int i, int j, double y, double x) {
    for (int c = 0; c < 3; ++c) out.at(c, i, j) = bilinear(img, c, y, x);
  });
  return out;
}

template <int C>
std::vector<double> window(const Image<C>& img, int top, int left, int size) {
  return gather(img, top, left, size, Candidate{});
}

}  // namespace

template <int C>
Correlation cross_correlation(const Image<C>& a, const Image<C>& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("cross_correlation: patch sizes differ");
  if (a.data.empty()) throw ShapeError("cross_correlation: empty patches");
  return zncc({a.data.begin(), a.data.end()}, {b.data.begin(), b.data.end()});
}

template Correlation cross_correlation<1>(const ImageGray&, const ImageGray&);
template Correlation cross_correlation<3>(const ImageRGB&, const ImageRGB&);

namespace {

template <int C>
std::vector<PatchPair> extract_impl(const Image<C>& phone_key, const Image<C>& dslr_key, const ImageRGB& phone,
                                    const ImageRGB& dslr, const AlignConfig& cfg, const std::string& origin) {
  const int size = cfg.patch_size;
  const auto cands = candidates(cfg);
  std::vector<PatchPair> out;
  for (int top = 0; top + size <= dslr.height; top += size) {
    for (int left = 0; left + size <= dslr.width; left += size) {
      const auto target = window(dslr_key, top, left, size);
      Correlation best{-2.0, true};
      const Candidate* best_cand = nullptr;
      for (const auto& cand : cands) {
        const auto c = zncc(gather(phone_key, top, left, size, cand), target);
        if (!c.zero_variance && c.score > best.score) {
          best = c;
          best_cand = &cand;
        }
      }
      if (!best_cand || !(best.score > cfg.cc_threshold)) continue;
      if (!inside(top, left, size, *best_cand, phone.height, phone.width)) continue;
      PatchPair p;
      p.source = resample_window(phone, top, left, size, *best_cand);
      p.target = crop(dslr, top, left, size, size);
      p.cc = best.score;
      p.shift_x = best_cand->dx;
      p.shift_y = best_cand->dy;
      p.rotation_deg = best_cand->rotation;
      p.origin_image = origin;
      p.row = top;
      p.col = left;
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace

std::vector<PatchPair> extract_patch_pairs(const ImageRGB& phone, const ImageRGB& dslr, const AlignConfig& cfg,
                                           const std::string& origin_image) {
  cfg.validate();
  if (phone.height != dslr.height || phone.width != dslr.width) {
    throw ShapeError("extract_patch_pairs: aligned images differ in size");
  }
  if (phone.height < cfg.patch_size || phone.width < cfg.patch_size) {
    throw ImageTooSmall("aligned images are smaller than one " + std::to_string(cfg.patch_size) + "px window");
  }
  if (cfg.rgb_correlation) return extract_impl(phone, dslr, phone, dslr, cfg, origin_image);
  return extract_impl(to_grayscale(phone), to_grayscale(dslr), phone, dslr, cfg, origin_image);
}

AlignReport align_photo_pair(const ImageRGB& phone, const ImageRGB& dslr, const AlignConfig& cfg, std::uint64_t seed,
                             const std::string& origin_image, const FeatureDetector* detector) {
  cfg.validate();
  const SiftDetector fallback;
  const FeatureDetector& det = detector ? *detector : fallback;
  const auto kp_phone = det.detect(to_grayscale(phone));
  const auto kp_dslr = det.detect(to_grayscale(dslr));
  const auto matches = match_descriptors(kp_dslr, kp_phone, cfg.ratio_test);
  std::vector<PointMatch> pts;
  pts.reserve(matches.size());
  for (const auto& m : matches) pts.push_back({{kp_dslr[m.a].x, kp_dslr[m.a].y}, {kp_phone[m.b].x, kp_phone[m.b].y}});

  AlignReport report;
  report.phone_keypoints = static_cast<int>(kp_phone.size());
  report.dslr_keypoints = static_cast<int>(kp_dslr.size());
  report.matches = static_cast<int>(matches.size());
  const auto ransac = estimate_homography_ransac(pts, cfg, seed);
  report.h = ransac.h;
  report.inliers = ransac.inlier_count;
  const auto warped = warp_and_crop(phone, dslr, ransac.h);
  report.pairs = extract_patch_pairs(warped.phone, warped.dslr, cfg, origin_image);
  for (auto& p : report.pairs) {
    p.row += warped.top;
    p.col += warped.left;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Dataset split and patch packs
// ---------------------------------------------------------------------------

DatasetSplit split_by_image(std::vector<std::string> ids, std::uint64_t seed, double val_fraction,
                            double test_fraction) {
  if (!(val_fraction >= 0 && test_fraction >= 0 && val_fraction + test_fraction < 1)) {
    throw InvalidSpec("split fractions must be nonnegative and sum below 1");
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(ids[i - 1], ids[pick(rng)]);
  }
  const auto n = static_cast<long>(ids.size());
  long n_test = std::lround(test_fraction * static_cast<double>(n));
  long n_val = std::lround(val_fraction * static_cast<double>(n));
  if (test_fraction > 0 && n >= 2) n_test = std::max(n_test, 1L);
  if (val_fraction > 0 && n >= 3) n_val = std::max(n_val, 1L);
  while (n_test + n_val >= n && n > 0 && (n_test > 0 || n_val > 0)) {
    if (n_val > 0) {
      --n_val;
    } else {
      --n_test;
    }
  }
  DatasetSplit s;
  s.test.assign(ids.begin(), ids.begin() + n_test);
  s.val.assign(ids.begin() + n_test, ids.begin() + n_test + n_val);
  s.train.assign(ids.begin() + n_test + n_val, ids.end());
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

std::vector<PatchPair> PatchPack::select(SplitPart part) const {
  const auto& ids = part == SplitPart::Train ? split.train : part == SplitPart::Val ? split.val : split.test;
  std::vector<PatchPair> out;
  for (const auto& p : pairs)
    if (std::binary_search(ids.begin(), ids.end(), p.origin_image)) out.push_back(p);
  return out;
}

std::vector<int> cc_histogram(const std::vector<PatchPair>& pairs, int bins) {
  if (bins < 1) throw InvalidSpec("histogram needs at least one bin");
  std::vector<int> hist(bins, 0);
  for (const auto& p : pairs) {
    const int b = static_cast<int>(std::floor((std::clamp(p.cc, -1.0, 1.0) + 1.0) / 2.0 * bins));
    ++hist[std::min(b, bins - 1)];
  }
  return hist;
}

namespace {

constexpr const char* kIndexHeader = "pair_id,origin_image,row,col,shift_x,shift_y,rotation_deg,cc";

std::string pair_id(std::size_t i) {
  std::ostringstream ss;
  ss << std::setw(6) << std::setfill('0') << i;
  return ss.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

}  // namespace

void write_patch_pack(const std::filesystem::path& dir, const PatchPack& pack, const PrepareStats& stats) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "patches", ec);
  if (ec) throw IoError("cannot create patch pack directory " + dir.string());
  std::ostringstream index;
  index << kIndexHeader << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < pack.pairs.size(); ++i) {
    const auto& p = pack.pairs[i];
    if (p.origin_image.find_first_of(",\n\r") != std::string::npos) {
      throw InvalidSpec("image id '" + p.origin_image + "' cannot be stored in index.csv");
    }
    const auto id = pair_id(i);
    save_image(p.source, dir / "patches" / (id + "_src.png"));
    save_image(p.target, dir / "patches" / (id + "_dst.png"));
    index << id << ',' << p.origin_image << ',' << p.row << ',' << p.col << ',' << p.shift_x << ',' << p.shift_y
          << ',' << p.rotation_deg << ',' << p.cc << '\n';
  }
  write_file(dir / "index.csv", index.str());
  write_file(dir / "split.json",
             json{{"train", pack.split.train}, {"val", pack.split.val}, {"test", pack.split.test}}.dump(2) + "\n");

  std::vector<std::string> images;
  for (const auto& p : pack.pairs) images.push_back(p.origin_image);
  std::sort(images.begin(), images.end());
  images.erase(std::unique(images.begin(), images.end()), images.end());
  json hist = json::array();
  const auto counts = cc_histogram(pack.pairs);
  for (int b = 0; b < kCcHistogramBins; ++b) {
    if (counts[b] == 0) continue;
    const double lo = -1.0 + 2.0 * b / kCcHistogramBins;
    hist.push_back({{"lo", lo}, {"hi", lo + 2.0 / kCcHistogramBins}, {"count", counts[b]}});
  }
  const json summary{
      {"processed", stats.processed},
      {"failed", stats.failed},
      {"failures", stats.failures},
      {"pairs", pack.pairs.size()},
      {"images_with_pairs", images.size()},
      {"split_pairs",
       {{"train", pack.select(SplitPart::Train).size()},
        {"val", pack.select(SplitPart::Val).size()},
        {"test", pack.select(SplitPart::Test).size()}}},
      {"cc_histogram", hist},
  };
  write_file(dir / "summary.json", summary.dump(2) + "\n");
}

PatchPack read_patch_pack(const std::filesystem::path& dir) {
  PatchPack pack;
  std::istringstream index(read_file(dir / "index.csv"));
  std::string line;
  if (!std::getline(index, line) || line != kIndexHeader) throw SchemaError("index.csv has an unexpected header");
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 8) throw SchemaError("index.csv row has " + std::to_string(f.size()) + " fields: " + line);
    PatchPair p;
    try {
      p.origin_image = f[1];
      p.row = std::stoi(f[2]);
      p.col = std::stoi(f[3]);
      p.shift_x = std::stoi(f[4]);
      p.shift_y = std::stoi(f[5]);
      p.rotation_deg = std::stod(f[6]);
      p.cc = std::stod(f[7]);
    } catch (const std::logic_error&) {
      throw SchemaError("index.csv row is malformed: " + line);
    }
    p.source = load_image(dir / "patches" / (f[0] + "_src.png"));
    p.target = load_image(dir / "patches" / (f[0] + "_dst.png"));
    pack.pairs.push_back(std::move(p));
  }
  try {
    const auto split = json::parse(read_file(dir / "split.json"));
    pack.split.train = split.at("train").get<std::vector<std::string>>();
    pack.split.val = split.at("val").get<std::vector<std::string>>();
    pack.split.test = split.at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw SchemaError("split.json: " + std::string(e.what()));
  }
  for (auto* part : {&pack.split.train, &pack.split.val, &pack.split.test}) std::sort(part->begin(), part->end());
  return pack;
}

}  // namespace dped
