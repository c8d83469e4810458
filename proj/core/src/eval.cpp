#include "dped/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dped/convert.hpp"
#include "dped/error.hpp"
#include "dped/losses.hpp"
#include "dped/parallel.hpp"
#include "dped/params.hpp"

namespace dped {

using json = nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <int C>
void require_same_shape(const Image<C>& a, const Image<C>& b, const char* what) {
  if (a.height != b.height || a.width != b.width)
    throw ShapeError(std::string(what) + ": images differ in size (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

// Valid-mode separable correlation of a double plane with a 1-D window.
std::vector<double> filter_valid(const std::vector<double>& in, int h, int w, const std::vector<double>& win) {
  const int k = static_cast<int>(win.size());
  const int ow = w - k + 1;
  const int oh = h - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int t = 0; t < k; ++t) s += win[t] * in[static_cast<std::size_t>(y) * w + x + t];
      rows[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int t = 0; t < k; ++t) s += win[t] * rows[static_cast<std::size_t>(y + t) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

double ssim_plane(std::span<const float> xs, std::span<const float> ys, int h, int w, const SsimConfig& cfg) {
  std::vector<double> win(kSsimWindow);
  const int r = kSsimWindow / 2;
  double total = 0;
  for (int t = 0; t < kSsimWindow; ++t) total += win[t] = std::exp(-0.5 * (t - r) * (t - r) / (cfg.sigma * cfg.sigma));
  for (auto& v : win) v /= total;

  const std::size_t n = xs.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = xs[i];
    y[i] = ys[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, h, w, win);
  const auto my = filter_valid(y, h, w, win);
  const auto sxx = filter_valid(xx, h, w, win);
  const auto syy = filter_valid(yy, h, w, win);
  const auto sxy = filter_valid(xy, h, w, win);
  const double c1 = std::pow(cfg.k1 * cfg.data_range, 2);
  const double c2 = std::pow(cfg.k2 * cfg.data_range, 2);
  double sum = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    sum += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return sum / static_cast<double>(mx.size());
}

template <int C>
void require_ssim_size(const Image<C>& x) {
  if (x.height < kSsimWindow || x.width < kSsimWindow)
    throw ImageTooSmall("ssim needs at least 11x11 pixels, got " + std::to_string(x.height) + "x" +
                        std::to_string(x.width));
}

MetricsRow score(const std::string& id, const ImageRGB& prediction, const ImageRGB& target, SsimChannels channels) {
  return {id, psnr(prediction, target), ssim(prediction, target, channels)};
}

std::string table_number(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

double psnr(const ImageRGB& x, const ImageRGB& y) {
  require_same_shape(x, y, "psnr");
  if (x.data.empty()) throw ShapeError("psnr: empty images");
  double s = 0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = static_cast<double>(x.data[i]) - y.data[i];
    s += d * d;
  }
  const double mse = s / static_cast<double>(x.data.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const ImageGray& x, const ImageGray& y, const SsimConfig& cfg) {
  require_same_shape(x, y, "ssim");
  require_ssim_size(x);
  return ssim_plane(x.plane(0), y.plane(0), x.height, x.width, cfg);
}

double ssim(const ImageRGB& x, const ImageRGB& y, SsimChannels channels, const SsimConfig& cfg) {
  require_same_shape(x, y, "ssim");
  require_ssim_size(x);
  if (channels == SsimChannels::Grayscale) return ssim(to_grayscale(x), to_grayscale(y), cfg);
  double s = 0;
  for (int c = 0; c < 3; ++c) s += ssim_plane(x.plane(c), y.plane(c), x.height, x.width, cfg);
  return s / 3.0;
}

ImageRGB enhance(const GeneratorWeights<float>& generator, const ImageRGB& image) {
  const auto out = generator_forward(generator, to_tensor<float>(image), Mode::Infer);
  return to_image<3>(out);
}

std::string pair_id(const PatchPair& pair) {
  return pair.origin_image + ":" + std::to_string(pair.row) + ":" + std::to_string(pair.col);
}

MetricsReport summarize(std::vector<MetricsRow> rows) {
  MetricsReport report;
  report.count = static_cast<int>(rows.size());
  for (const auto& r : rows) {
    report.mean_psnr += r.psnr_db;
    report.mean_ssim += r.ssim;
  }
  if (report.count > 0) {
    report.mean_psnr /= report.count;
    report.mean_ssim /= report.count;
  }
  report.rows = std::move(rows);
  return report;
}

MetricsReport evaluate_dataset(const GeneratorWeights<float>& generator, const std::vector<PatchPair>& test_pairs,
                               SsimChannels channels) {
  if (test_pairs.empty()) throw EmptyDataset("evaluate_dataset: no test pairs");
  std::vector<MetricsRow> rows(test_pairs.size());
  parallel_for(test_pairs.size(), [&](std::size_t i) {
    const auto& p = test_pairs[i];
    rows[i] = score(pair_id(p), enhance(generator, p.source), p.target, channels);
  });
  return summarize(std::move(rows));
}

MetricsReport evaluate_predictions(const std::vector<PatchPair>& pairs, const std::vector<ImageRGB>& predictions,
                                   SsimChannels channels) {
  if (pairs.empty()) throw EmptyDataset("evaluate_predictions: no pairs");
  if (pairs.size() != predictions.size()) throw ShapeError("evaluate_predictions: one prediction per pair required");
  std::vector<MetricsRow> rows(pairs.size());
  parallel_for(pairs.size(),
               [&](std::size_t i) { rows[i] = score(pair_id(pairs[i]), predictions[i], pairs[i].target, channels); });
  return summarize(std::move(rows));
}

std::string metrics_csv(const MetricsReport& report) {
  std::string out = "id,psnr_db,ssim\n";
  for (const auto& r : report.rows) out += r.id + "," + fmt(r.psnr_db) + "," + fmt(r.ssim) + "\n";
  return out;
}

std::string metrics_json(const MetricsReport& report) {
  return json{{"count", report.count}, {"mean_psnr", report.mean_psnr}, {"mean_ssim", report.mean_ssim}}.dump(2) +
         "\n";
}

void write_metrics(const MetricsReport& report, const std::filesystem::path& csv_path) {
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  write_file(csv_path, metrics_csv(report));
  auto json_path = csv_path;
  json_path.replace_extension(".json");
  write_file(json_path, metrics_json(report));
}

ShiftCurve shift_sensitivity_curve(const std::vector<ImageRGB>& corpus, int n_max, const GaussianKernelSpec& kernel,
                                   std::uint64_t seed) {
  if (corpus.empty()) throw EmptyCorpus("shift_sensitivity_curve: empty corpus");
  if (n_max < 1) throw InvalidSpec("shift_sensitivity_curve: n_max must be at least 1");
  const auto k = gaussian_kernel(kernel);

  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::vector<double> directions(corpus.size());
  for (auto& d : directions) d = angle(rng);

  ShiftCurve curve;
  for (int n = 0; n <= n_max; ++n) {
    std::vector<double> mse(corpus.size()), color(corpus.size());
    parallel_for(corpus.size(), [&](std::size_t i) {
      const auto& img = corpus[i];
      const int dy = static_cast<int>(std::lround(n * std::sin(directions[i])));
      const int dx = static_cast<int>(std::lround(n * std::cos(directions[i])));
      const auto x = to_tensor<double>(img);
      const auto y = to_tensor<double>(shift_reflect(img, dy, dx));
      mse[i] = mse_loss(x, y);
      color[i] = color_loss(x, y, k) / static_cast<double>(x.size());
    });
    double ms = 0, cs = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      ms += mse[i];
      cs += color[i];
    }
    curve.shifts.push_back(n);
    curve.mse_values.push_back(ms / static_cast<double>(corpus.size()));
    curve.color_values.push_back(cs / static_cast<double>(corpus.size()));
  }
  return curve;
}

std::string shift_curve_csv(const ShiftCurve& curve) {
  std::string out = "shift,mse,color_loss\n";
  for (std::size_t i = 0; i < curve.shifts.size(); ++i)
    out += std::to_string(curve.shifts[i]) + "," + fmt(curve.mse_values[i]) + "," + fmt(curve.color_values[i]) + "\n";
  return out;
}

std::vector<ImageRGB> random_crops(const std::vector<ImageRGB>& images, int size, int per_image, std::uint64_t seed) {
  if (size < 1 || per_image < 1) throw InvalidSpec("random_crops: size and per_image must be positive");
  std::mt19937_64 rng(splitmix64(seed));
  std::vector<ImageRGB> out;
  for (const auto& img : images) {
    if (img.height < size || img.width < size) continue;
    std::uniform_int_distribution<int> top(0, img.height - size), left(0, img.width - size);
    for (int k = 0; k < per_image; ++k) {
      const int t = top(rng);
      out.push_back(crop(img, t, left(rng), size, size));
    }
  }
  return out;
}

std::string pairs_hash(const std::vector<PatchPair>& pairs) {
  std::uint64_t h = fnv1a("");
  for (const auto& p : pairs) {
    h = fnv1a(pair_id(p), h);
    for (const auto* img : {&p.source, &p.target}) {
      const std::string dims = std::to_string(img->height) + "x" + std::to_string(img->width);
      h = fnv1a(dims, h);
      h = fnv1a({reinterpret_cast<const char*>(img->data.data()), img->data.size() * sizeof(float)}, h);
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<AblationRow> ablation_run(const PatchPack& pack, const TrainConfig& base_cfg,
                                      const AblationOptions& options) {
  const auto train_pairs = pack.select(SplitPart::Train);
  const auto test_pairs = pack.select(SplitPart::Test);
  if (train_pairs.empty()) throw EmptyDataset("ablation_run: empty train split");
  if (test_pairs.empty()) throw EmptyDataset("ablation_run: empty test split");
  if (options.profiles.empty()) throw InvalidSpec("ablation_run: no profiles");
  for (auto p : options.profiles)
    if (profile_terms(p).content && !options.vgg)
      throw InvalidSpec("ablation_run: profile " + std::string(profile_name(p)) + " needs VGG weights");
  const auto split_hash = pairs_hash(test_pairs);
  std::filesystem::create_directories(options.out_dir);

  std::vector<AblationRow> rows;
  for (auto profile : options.profiles) {
    auto cfg = base_cfg;
    cfg.profile = profile;
    TrainOptions topt;
    topt.out_dir = options.out_dir / std::string(profile_name(profile));
    topt.vgg = options.vgg;
    auto result = train(train_pairs, cfg, topt);

    AblationRow row;
    row.profile = profile;
    row.report = evaluate_dataset(result.state.generator, test_pairs);
    row.test_split_hash = pairs_hash(test_pairs);
    row.checkpoint = result.final_checkpoint;
    if (row.test_split_hash != split_hash) throw InvalidSpec("ablation_run: test split changed between profiles");
    rows.push_back(std::move(row));

    write_file(options.out_dir / "ablation.csv", ablation_csv(rows));
    write_file(options.out_dir / "ablation.md", ablation_markdown(rows));
    if (options.on_row) options.on_row(rows.back());
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "profile,psnr_db,ssim,count,test_split_hash\n";
  for (const auto& r : rows)
    out += std::string(profile_name(r.profile)) + "," + fmt(r.report.mean_psnr) + "," + fmt(r.report.mean_ssim) + "," +
           std::to_string(r.report.count) + "," + r.test_split_hash + "\n";
  return out;
}

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  std::string out =
      "| Profile | PSNR (dB) | SSIM | Test pairs | Test split | Full-scale PSNR | Full-scale SSIM |\n"
      "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto ref = std::find_if(kProfileReference.begin(), kProfileReference.end(),
                                  [&](const ProfileReference& p) { return p.profile == r.profile; });
    out += "| " + std::string(profile_name(r.profile)) + " | " + table_number(r.report.mean_psnr, 2) + " | " +
           table_number(r.report.mean_ssim, 4) + " | " + std::to_string(r.report.count) + " | `" + r.test_split_hash +
           "` | " + table_number(ref->psnr_db, 2) + " | " + table_number(ref->ssim, 4) + " |\n";
  }
  out += "\nFull-scale columns are the published iPhone results, shown for context only.\n";
  return out;
}

ImageRGB render_line_plot(const std::vector<double>& x, const std::vector<PlotSeries>& series, int width,
                          int height) {
  if (x.size() < 2) throw InvalidSpec("render_line_plot: need at least two x values");
  if (series.empty()) throw InvalidSpec("render_line_plot: no series");
  if (width < 64 || height < 64) throw InvalidSpec("render_line_plot: canvas must be at least 64x64");
  for (const auto& s : series)
    if (s.y.size() != x.size()) throw InvalidSpec("render_line_plot: series length differs from x");

  const auto [xmin_it, xmax_it] = std::minmax_element(x.begin(), x.end());
  double xmin = *xmin_it, xmax = *xmax_it;
  double ymin = 0.0, ymax = 0.0;
  for (const auto& s : series)
    for (double v : s.y) {
      if (!std::isfinite(v)) throw InvalidSpec("render_line_plot: non-finite value");
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;
  ymax += 0.05 * (ymax - ymin);

  ImageRGB img(height, width, 1.0f);
  const int left = 40, right = width - 16, top = 16, bottom = height - 32;
  auto px = [&](double v) { return left + (v - xmin) / (xmax - xmin) * (right - left); };
  auto py = [&](double v) { return bottom - (v - ymin) / (ymax - ymin) * (bottom - top); };
  auto put = [&](int yy, int xx, const std::array<float, 3>& c) {
    if (yy < 0 || xx < 0 || yy >= height || xx >= width) return;
    for (int ch = 0; ch < 3; ++ch) img.at(ch, yy, xx) = c[ch];
  };

  const std::array<float, 3> grid{0.88f, 0.88f, 0.88f}, axis{0.0f, 0.0f, 0.0f};
  for (int g = 0; g <= 5; ++g) {
    const int gy = static_cast<int>(std::lround(top + g * (bottom - top) / 5.0));
    const int gx = static_cast<int>(std::lround(left + g * (right - left) / 5.0));
    for (int xx = left; xx <= right; ++xx) put(gy, xx, grid);
    for (int yy = top; yy <= bottom; ++yy) put(yy, gx, grid);
  }
  for (int xx = left; xx <= right; ++xx) put(bottom, xx, axis);
  for (int yy = top; yy <= bottom; ++yy) put(yy, left, axis);

  for (const auto& s : series) {
    for (std::size_t i = 0; i + 1 < x.size(); ++i) {
      const double x0 = px(x[i]), y0 = py(s.y[i]), x1 = px(x[i + 1]), y1 = py(s.y[i + 1]);
      const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)) * 2)) + 1;
      for (int k = 0; k <= steps; ++k) {
        const double t = static_cast<double>(k) / steps;
        const int cx = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
        const int cy = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
        for (int oy = -1; oy <= 1; ++oy)
          for (int ox = -1; ox <= 1; ++ox) put(cy + oy, cx + ox, s.color);
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const int cx = static_cast<int>(std::lround(px(x[i])));
      const int cy = static_cast<int>(std::lround(py(s.y[i])));
      for (int oy = -3; oy <= 3; ++oy)
        for (int ox = -3; ox <= 3; ++ox)
          if (ox * ox + oy * oy <= 9) put(cy + oy, cx + ox, s.color);
    }
  }
  return img;
}

}  // namespace dped
