#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dped/image.hpp"
#include "dped/patch.hpp"

namespace dped {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double scale = 0.0;
  double orientation = 0.0;  // radians
  std::vector<float> descriptor;
};

struct AlignConfig {
  int ransac_iters = 2000;
  double ransac_inlier_px = 3.0;
  double ratio_test = 0.8;
  int patch_size = 100;
  double cc_threshold = 0.9;
  int max_shift = 5;
  double rotation_range = 1.5;  // degrees, searched symmetrically
  double rotation_step = 0.5;
  /// Correlate all three channels jointly instead of the grayscale image.
  bool rgb_correlation = false;

  /// Throws InvalidSpec.
  void validate() const;
};

/// Keypoint detector with descriptors. Implementations must be deterministic.
class FeatureDetector {
 public:
  virtual ~FeatureDetector() = default;
  virtual std::vector<Keypoint> detect(const ImageGray& img) const = 0;
};

struct SiftConfig {
  int scales_per_octave = 3;
  double sigma = 1.6;
  double assumed_blur = 0.5;
  double contrast_threshold = 0.04;
  double edge_ratio = 10.0;
  /// Doubles the image before building the pyramid.
  bool upsample = true;
  /// 0 picks as many octaves as the image allows.
  int max_octaves = 0;
};

/// Difference-of-Gaussians extrema with 128-dim gradient-histogram descriptors.
class SiftDetector final : public FeatureDetector {
 public:
  explicit SiftDetector(SiftConfig config = {}) : config_(config) {}
  std::vector<Keypoint> detect(const ImageGray& img) const override;
  const SiftConfig& config() const { return config_; }

 private:
  SiftConfig config_;
};

inline constexpr int kMinDetectSize = 32;
inline constexpr int kDescriptorSize = 128;

/// SiftDetector with default settings. Throws ImageTooSmall below 32x32.
std::vector<Keypoint> detect_and_describe(const ImageGray& img);

struct Match {
  int a = 0;
  int b = 0;
  bool operator==(const Match&) const = default;
};

/// Mutual nearest neighbours where a's nearest/second-nearest distance ratio
/// in b is below `ratio`; ratio >= 1 disables the ratio test.
std::vector<Match> match_descriptors(const std::vector<Keypoint>& a, const std::vector<Keypoint>& b,
                                     double ratio = 0.8);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Correspondence src -> dst.
struct PointMatch {
  Point2 src;
  Point2 dst;
};

/// Row-major 3x3 projective transform with m[8] == 1.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty) { return {{1, 0, tx, 0, 1, ty, 0, 0, 1}}; }
  Point2 apply(Point2 p) const;
  double determinant() const;
  /// Throws DegenerateConfiguration when singular.
  Homography inverse() const;
  Homography operator*(const Homography& rhs) const;
  bool operator==(const Homography&) const = default;
};

/// Least-squares homography through Hartley-normalized DLT. Throws
/// DegenerateConfiguration for fewer than 4 points or collinear sets.
Homography fit_homography(const std::vector<PointMatch>& matches);

struct RansacResult {
  Homography h;
  std::vector<bool> inliers;
  int inlier_count = 0;
};

/// 4-point RANSAC scored by forward reprojection error, refit on inliers.
/// Deterministic for a given seed. Throws DegenerateConfiguration.
RansacResult estimate_homography_ransac(const std::vector<PointMatch>& matches, const AlignConfig& cfg,
                                        std::uint64_t seed);

struct WarpedPair {
  ImageRGB phone;
  ImageRGB dslr;
  /// Top-left of the crop in phone coordinates.
  int left = 0;
  int top = 0;
};

inline constexpr int kMinOverlap = 64;

/// `h` maps DSLR pixel coordinates to phone pixel coordinates. The DSLR image
/// is resampled (bicubic) into the phone frame, both are cropped to the
/// largest axis-aligned rectangle where the DSLR image is defined, and the
/// DSLR crop is rendered at its native density then downscaled to the phone
/// crop size. Throws EmptyIntersection when that rectangle is under 64x64.
WarpedPair warp_and_crop(const ImageRGB& phone, const ImageRGB& dslr, const Homography& h);

struct Correlation {
  double score = 0.0;
  bool zero_variance = false;
};

/// Zero-normalized cross-correlation. Constant inputs give score 0 with the
/// flag set. Throws ShapeError on size mismatch.
template <int C>
Correlation cross_correlation(const Image<C>& a, const Image<C>& b);

/// Lockstep non-overlapping windows; each phone window is adjusted by the
/// integer shift and rotation maximizing correlation with the DSLR window.
/// Windows whose best adjustment leaves the image, or whose score is not
/// above cfg.cc_threshold, are dropped. Throws ImageTooSmall and ShapeError.
std::vector<PatchPair> extract_patch_pairs(const ImageRGB& phone, const ImageRGB& dslr, const AlignConfig& cfg,
                                           const std::string& origin_image = {});

struct AlignReport {
  std::vector<PatchPair> pairs;
  Homography h;
  int phone_keypoints = 0;
  int dslr_keypoints = 0;
  int matches = 0;
  int inliers = 0;
};

/// Full pipeline for one photo pair: detect, match, RANSAC, warp, extract.
AlignReport align_photo_pair(const ImageRGB& phone, const ImageRGB& dslr, const AlignConfig& cfg, std::uint64_t seed,
                             const std::string& origin_image = {}, const FeatureDetector* detector = nullptr);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// Seeded split of source photographs. With at least two photos the test set
/// gets one or more; with at least three so does the validation set.
DatasetSplit split_by_image(std::vector<std::string> image_ids, std::uint64_t seed, double val_fraction = 0.05,
                            double test_fraction = 0.05);

enum class SplitPart { Train, Val, Test };

struct PrepareStats {
  int processed = 0;
  int failed = 0;
  std::vector<std::string> failures;
};

struct PatchPack {
  std::vector<PatchPair> pairs;
  DatasetSplit split;
  std::vector<PatchPair> select(SplitPart part) const;
};

/// Writes index.csv, patches/<id>_{src,dst}.png, split.json and summary.json
/// (counts and a cc histogram).
void write_patch_pack(const std::filesystem::path& dir, const PatchPack& pack, const PrepareStats& stats = {});
/// Throws IoError and SchemaError.
PatchPack read_patch_pack(const std::filesystem::path& dir);

inline constexpr int kCcHistogramBins = 200;
/// Counts over [-1, 1] in equal bins; a score of exactly 1 lands in the last.
std::vector<int> cc_histogram(const std::vector<PatchPair>& pairs, int bins = kCcHistogramBins);

}  // namespace dped
