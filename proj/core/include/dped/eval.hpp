#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dped/align.hpp"
#include "dped/image.hpp"
#include "dped/nets.hpp"
#include "dped/patch.hpp"
#include "dped/train.hpp"

namespace dped {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) over all values; identical images give kPsnrCap.
/// Throws ShapeError.
double psnr(const ImageRGB& x, const ImageRGB& y);

inline constexpr int kSsimWindow = 11;

struct SsimConfig {
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Single-scale SSIM with an 11x11 Gaussian window, averaged over every
/// position where the window fits. Throws ShapeError and ImageTooSmall.
double ssim(const ImageGray& x, const ImageGray& y, const SsimConfig& cfg = {});

enum class SsimChannels { Grayscale, PerChannelMean };

/// Grayscale SSIM by default, or the mean of the three per-channel scores.
double ssim(const ImageRGB& x, const ImageRGB& y, SsimChannels channels = SsimChannels::Grayscale,
            const SsimConfig& cfg = {});

/// Infer-mode generator pass over a whole image of any size >= 16x16.
ImageRGB enhance(const GeneratorWeights<float>& generator, const ImageRGB& image);

struct MetricsRow {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  int count = 0;
};

/// Identifier "<origin>:<row>:<col>" of a patch pair.
std::string pair_id(const PatchPair& pair);

/// Arithmetic means of the rows.
MetricsReport summarize(std::vector<MetricsRow> rows);

/// Enhances every source patch and scores it against its target.
/// Throws EmptyDataset.
MetricsReport evaluate_dataset(const GeneratorWeights<float>& generator, const std::vector<PatchPair>& test_pairs,
                               SsimChannels channels = SsimChannels::Grayscale);

/// Same report for a fixed prediction per pair, e.g. the raw phone patch.
MetricsReport evaluate_predictions(const std::vector<PatchPair>& pairs, const std::vector<ImageRGB>& predictions,
                                   SsimChannels channels = SsimChannels::Grayscale);

/// `id,psnr_db,ssim` rows at full double precision.
std::string metrics_csv(const MetricsReport& report);
/// {"count", "mean_psnr", "mean_ssim"}.
std::string metrics_json(const MetricsReport& report);
/// Writes the CSV to `csv_path` and the JSON next to it with a .json extension.
void write_metrics(const MetricsReport& report, const std::filesystem::path& csv_path);

struct ShiftCurve {
  std::vector<int> shifts;
  std::vector<double> mse_values;
  std::vector<double> color_values;
};

/// Shifts each image by n = 0..n_max pixels along a per-image seeded random
/// direction (reflected fill) and averages the per-value MSE and the color
/// loss normalized per value. Throws EmptyCorpus and InvalidSpec.
ShiftCurve shift_sensitivity_curve(const std::vector<ImageRGB>& corpus, int n_max,
                                   const GaussianKernelSpec& kernel = {}, std::uint64_t seed = 0);

/// `shift,mse,color_loss` rows.
std::string shift_curve_csv(const ShiftCurve& curve);

/// `per_image` seeded random size x size crops from each image large enough.
std::vector<ImageRGB> random_crops(const std::vector<ImageRGB>& images, int size, int per_image, std::uint64_t seed);

/// Digest of the identity and pixels of a pair list.
std::string pairs_hash(const std::vector<PatchPair>& pairs);

struct AblationRow {
  LossProfile profile = LossProfile::Full;
  MetricsReport report;
  std::string test_split_hash;
  std::filesystem::path checkpoint;
};

struct AblationOptions {
  std::filesystem::path out_dir;
  const VggWeights<float>* vgg = nullptr;
  std::vector<LossProfile> profiles{kAllProfiles.begin(), kAllProfiles.end()};
  std::function<void(const AblationRow&)> on_row;
};

/// Full-scale PSNR/SSIM of each profile for the iPhone subset, shown as context.
struct ProfileReference {
  LossProfile profile;
  double psnr_db;
  double ssim;
};
inline constexpr std::array<ProfileReference, 4> kProfileReference{{{LossProfile::Full, 20.08, 0.9201},
                                                                    {LossProfile::ContentTexture, 19.05, 0.9166},
                                                                    {LossProfile::MseTexture, 20.11, 0.9125},
                                                                    {LossProfile::Mse, 20.56, 0.9198}}};

/// Trains one model per profile on the pack's train split with the same
/// config and seed, evaluates each on the test split, and rewrites
/// ablation.csv and ablation.md under out_dir after every profile.
/// Throws EmptyDataset, InvalidSpec and anything train() throws.
std::vector<AblationRow> ablation_run(const PatchPack& pack, const TrainConfig& base_cfg,
                                      const AblationOptions& options);

std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_markdown(const std::vector<AblationRow>& rows);

struct PlotSeries {
  std::vector<double> y;
  std::array<float, 3> color{0.0f, 0.0f, 0.0f};
};

/// Line chart of several series over shared x values with axes and grid;
/// no text. Throws InvalidSpec.
ImageRGB render_line_plot(const std::vector<double>& x, const std::vector<PlotSeries>& series, int width = 640,
                          int height = 400);

}  // namespace dped
