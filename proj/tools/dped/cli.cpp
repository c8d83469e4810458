#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "dped/align.hpp"
#include "dped/error.hpp"
#include "dped/eval.hpp"
#include "dped/params.hpp"
#include "dped/parallel.hpp"
#include "dped/train.hpp"

namespace dped::cli {

namespace fs = std::filesystem;

namespace {

class LayoutError : public Error {
 public:
  using Error::Error;
};

class EmptyResult : public Error {
 public:
  using Error::Error;
};

constexpr const char* kLayoutHelp =
    "expected layout: <root>/<phone>/NNN.{png,jpg} paired by stem with <root>/dslr/NNN.{png,jpg}";

struct GlobalFlags {
  std::uint64_t seed = 0;
  int threads = 1;
  bool deterministic = false;
};

struct PrepareFlags {
  fs::path raw_dir, out_dir;
  std::string phone;
  AlignConfig align;
  double val_fraction = 0.05;
  double test_fraction = 0.05;
};

struct TrainFlags {
  fs::path pack_dir, out_dir;
  std::string profile = "full";
  TrainConfig cfg;
  fs::path vgg;
  int vgg_width_divisor = 1;
  fs::path resume;
  int log_every = 100;
};

struct EnhanceFlags {
  fs::path checkpoint, input, output;
};

struct EvaluateFlags {
  fs::path checkpoint, pack_dir, out_csv;
  bool per_channel_ssim = false;
};

struct CurveFlags {
  fs::path corpus_dir, out_csv, plot;
  int max_shift = 10;
  int crop_size = 0;
  int crops_per_image = 1;
};

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::map<std::string, fs::path> images_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image(e.path())) out.emplace(e.path().stem().string(), e.path());
  return out;
}

std::vector<fs::path> sorted_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

struct RawPair {
  std::string stem;
  fs::path phone, dslr;
};

std::vector<RawPair> discover_pairs(const fs::path& root, std::string phone) {
  if (!fs::is_directory(root)) throw LayoutError(root.string() + " is not a directory; " + kLayoutHelp);
  if (!fs::is_directory(root / "dslr")) throw LayoutError("missing " + (root / "dslr").string() + "; " + kLayoutHelp);
  if (phone.empty()) {
    std::vector<std::string> candidates;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && e.path().filename() != "dslr") candidates.push_back(e.path().filename().string());
    if (candidates.size() != 1)
      throw LayoutError("found " + std::to_string(candidates.size()) +
                        " phone directories, pass --phone to pick one; " + kLayoutHelp);
    phone = candidates.front();
  }
  if (!fs::is_directory(root / phone)) throw LayoutError("missing " + (root / phone).string() + "; " + kLayoutHelp);
  const auto phones = images_by_stem(root / phone);
  const auto dslrs = images_by_stem(root / "dslr");
  std::vector<RawPair> pairs;
  for (const auto& [stem, path] : phones) {
    const auto it = dslrs.find(stem);
    if (it != dslrs.end()) pairs.push_back({stem, path, it->second});
  }
  if (pairs.empty()) throw LayoutError("no phone/dslr images share a stem under " + root.string() + "; " + kLayoutHelp);
  return pairs;
}

std::uint64_t image_seed(std::uint64_t seed, const std::string& stem) { return fnv1a(stem, seed ^ 0x9e3779b97f4a7c15ULL); }

void cmd_prepare(const PrepareFlags& f, const GlobalFlags& g, std::ostream& out) {
  f.align.validate();
  const auto raw = discover_pairs(f.raw_dir, f.phone);
  std::vector<std::vector<PatchPair>> found(raw.size());
  std::vector<std::string> errors(raw.size());
  parallel_for(raw.size(), [&](std::size_t i) {
    try {
      const auto report = align_photo_pair(load_image(raw[i].phone), load_image(raw[i].dslr), f.align,
                                           image_seed(g.seed, raw[i].stem), raw[i].stem);
      found[i] = report.pairs;
    } catch (const Error& e) {
      errors[i] = raw[i].stem + ": " + e.what();
    }
  });

  PatchPack pack;
  PrepareStats stats;
  std::vector<std::string> with_pairs;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!errors[i].empty()) {
      ++stats.failed;
      stats.failures.push_back(errors[i]);
      continue;
    }
    ++stats.processed;
    if (!found[i].empty()) with_pairs.push_back(raw[i].stem);
    for (auto& p : found[i]) pack.pairs.push_back(std::move(p));
  }
  for (const auto& e : stats.failures) out << "failed " << e << "\n";
  if (pack.pairs.empty()) {
    write_patch_pack(f.out_dir, pack, stats);
    throw EmptyResult("no patch pairs passed the correlation filter");
  }
  pack.split = split_by_image(with_pairs, g.seed, f.val_fraction, f.test_fraction);
  write_patch_pack(f.out_dir, pack, stats);
  out << "processed " << stats.processed << " of " << raw.size() << " photo pairs, " << pack.pairs.size()
      << " patch pairs written to " << f.out_dir.string() << "\n";
}

std::optional<VggWeights<float>> load_vgg_for(const TrainFlags& f, const TrainConfig& cfg) {
  if (!profile_terms(cfg.profile).content) return std::nullopt;
  if (f.vgg.empty())
    throw InvalidSpec("profile " + std::string(profile_name(cfg.profile)) + " needs VGG-19 weights, pass --vgg");
  return vgg_load(f.vgg, VggConfig{.width_divisor = f.vgg_width_divisor});
}

TrainConfig resolve_config(const TrainFlags& f, const GlobalFlags& g, const PatchPack& pack) {
  auto cfg = f.cfg;
  cfg.seed = g.seed;
  cfg.profile = parse_profile(f.profile);
  if (!pack.pairs.empty()) cfg.discriminator.input_size = pack.pairs.front().source.height;
  cfg.validate();
  return cfg;
}

void print_row(std::ostream& out, const LogRow& row) {
  out << "iter " << row.iter << " total " << row.losses.total << " d_acc " << row.d_acc << "\n";
}

void cmd_train(const TrainFlags& f, const GlobalFlags& g, std::ostream& out) {
  const auto pack = read_patch_pack(f.pack_dir);
  const auto data = pack.select(SplitPart::Train);
  if (data.empty()) throw EmptyDataset("the pack's train split is empty");
  auto cfg = resolve_config(f, g, pack);
  const auto vgg = load_vgg_for(f, cfg);

  TrainOptions opt;
  opt.out_dir = f.out_dir;
  opt.vgg = vgg ? &*vgg : nullptr;
  if (!f.resume.empty()) opt.resume_from = f.resume;
  opt.on_row = [&](const LogRow& row) {
    if (f.log_every > 0 && (row.iter % f.log_every == 0 || row.iter == cfg.iterations)) print_row(out, row);
  };
  const auto result = train(data, cfg, opt);
  if (result.pretrain_accuracy) out << "discriminator pretraining accuracy " << *result.pretrain_accuracy << "\n";
  out << "checkpoint " << result.final_checkpoint.string() << "\n";
}

GeneratorWeights<float> load_checkpoint_generator(const fs::path& checkpoint) {
  return load_generator(fs::is_directory(checkpoint) ? checkpoint / "generator.dpedw" : checkpoint);
}

void cmd_enhance(const EnhanceFlags& f, std::ostream& out) {
  const auto g = load_checkpoint_generator(f.checkpoint);
  const auto img = load_image(f.input);
  if (f.output.has_parent_path()) fs::create_directories(f.output.parent_path());
  save_image(enhance(g, img), f.output);
  out << "wrote " << f.output.string() << " (" << img.width << "x" << img.height << ")\n";
}

void cmd_evaluate(const EvaluateFlags& f, std::ostream& out) {
  const auto g = load_checkpoint_generator(f.checkpoint);
  const auto test = read_patch_pack(f.pack_dir).select(SplitPart::Test);
  if (test.empty()) throw EmptyDataset("the pack's test split is empty");
  const auto report =
      evaluate_dataset(g, test, f.per_channel_ssim ? SsimChannels::PerChannelMean : SsimChannels::Grayscale);
  write_metrics(report, f.out_csv);
  out << "pairs " << report.count << " mean_psnr " << report.mean_psnr << " mean_ssim " << report.mean_ssim << "\n";
}

void cmd_curve(const CurveFlags& f, const GlobalFlags& g, std::ostream& out) {
  std::vector<ImageRGB> images;
  for (const auto& p : sorted_images(f.corpus_dir)) images.push_back(load_image(p));
  if (f.crop_size > 0) images = random_crops(images, f.crop_size, f.crops_per_image, g.seed);
  if (images.empty()) throw EmptyCorpus("no usable images in " + f.corpus_dir.string());
  const auto curve = shift_sensitivity_curve(images, f.max_shift, {}, g.seed);
  if (f.out_csv.has_parent_path()) fs::create_directories(f.out_csv.parent_path());
  std::ofstream(f.out_csv) << shift_curve_csv(curve);
  out << "images " << images.size() << "\nshift mse color_loss mse/color\n";
  for (std::size_t i = 0; i < curve.shifts.size(); ++i) {
    out << curve.shifts[i] << " " << curve.mse_values[i] << " " << curve.color_values[i] << " ";
    if (curve.color_values[i] > 0)
      out << curve.mse_values[i] / curve.color_values[i];
    else
      out << "-";
    out << "\n";
  }
  if (!f.plot.empty()) {
    std::vector<double> x(curve.shifts.begin(), curve.shifts.end());
    const auto img = render_line_plot(
        x, {{curve.mse_values, {0.84f, 0.15f, 0.16f}}, {curve.color_values, {0.12f, 0.47f, 0.71f}}});
    if (f.plot.has_parent_path()) fs::create_directories(f.plot.parent_path());
    save_image(img, f.plot);
    out << "plot " << f.plot.string() << " (red: mse, blue: color loss)\n";
  }
}

void cmd_ablate(const TrainFlags& f, const GlobalFlags& g, std::ostream& out) {
  const auto pack = read_patch_pack(f.pack_dir);
  auto cfg = resolve_config(f, g, pack);
  if (f.vgg.empty()) throw InvalidSpec("ablation includes content-loss profiles and needs --vgg");
  const auto vgg = vgg_load(f.vgg, VggConfig{.width_divisor = f.vgg_width_divisor});
  AblationOptions opt;
  opt.out_dir = f.out_dir;
  opt.vgg = &vgg;
  opt.on_row = [&](const AblationRow& row) {
    out << profile_name(row.profile) << " psnr " << row.report.mean_psnr << " ssim " << row.report.mean_ssim
        << " split " << row.test_split_hash << "\n";
  };
  ablation_run(pack, cfg, opt);
  out << "table " << (f.out_dir / "ablation.md").string() << "\n";
}

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_profile) {
  auto& c = f.cfg;
  cmd->add_option("pack", f.pack_dir, "Patch pack directory")->required();
  cmd->add_option("out", f.out_dir, "Output directory")->required();
  if (with_profile)
    cmd->add_option("--profile", f.profile, "Loss profile")
        ->check(CLI::IsMember({"full", "content_texture", "mse_texture", "mse"}));
  cmd->add_option("--batch-size", c.batch_size, "Patches per batch")->check(CLI::PositiveNumber);
  cmd->add_option("--iterations", c.iterations, "Generator updates")->check(CLI::NonNegativeNumber);
  cmd->add_option("--lr", c.adam.lr, "Adam learning rate");
  cmd->add_option("--beta1", c.adam.beta1, "Adam beta1");
  cmd->add_option("--beta2", c.adam.beta2, "Adam beta2");
  cmd->add_option("--pretrain-iters", c.pretrain_iters, "Discriminator pretraining iterations");
  cmd->add_option("--d-steps", c.d_steps_per_g, "Discriminator updates per generator update");
  cmd->add_option("--checkpoint-every", c.checkpoint_every, "Iterations between checkpoints");
  cmd->add_option("--w-content", c.loss_weights.content, "Content loss weight");
  cmd->add_option("--w-texture", c.loss_weights.texture, "Texture loss weight");
  cmd->add_option("--w-color", c.loss_weights.color, "Color loss weight");
  cmd->add_option("--w-tv", c.loss_weights.tv, "Total variation weight");
  cmd->add_option("--w-mse", c.loss_weights.mse, "MSE weight for the mse profiles");
  cmd->add_option("--content-layer", c.content_layer, "VGG-19 layer for the content loss");
  cmd->add_option("--generator-channels", c.generator.channels, "Generator feature channels");
  cmd->add_option("--generator-blocks", c.generator.blocks, "Generator residual blocks");
  cmd->add_option("--vgg", f.vgg, "VGG-19 weights container (needed by content profiles)");
  cmd->add_option("--vgg-width-divisor", f.vgg_width_divisor, "Channel divisor of the VGG weights");
  cmd->add_option("--log-every", f.log_every, "Print a progress line every N iterations (0: never)");
  if (with_profile) cmd->add_option("--resume", f.resume, "Checkpoint directory to resume from");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NonFiniteLoss*>(&e) || dynamic_cast<const NonFiniteGradient*>(&e)) return kExitDivergence;
  if (dynamic_cast<const EmptyDataset*>(&e) || dynamic_cast<const EmptyCorpus*>(&e) ||
      dynamic_cast<const EmptyResult*>(&e))
    return kExitEmpty;
  return kExitUsage;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Phone photo enhancement: dataset preparation, training, enhancement and evaluation", "dped"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_config("--config", "", "Read flags from a TOML/INI file (flags on the command line win)");
  app.allow_config_extras(CLI::config_extras_mode::error);

  GlobalFlags g;
  app.add_option("--seed", g.seed, "Seed for every random choice");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", g.deterministic, "Serial execution everywhere");

  PrepareFlags pf;
  auto* prepare = app.add_subcommand("prepare", "Align phone/DSLR photos and extract patch pairs");
  prepare->add_option("raw", pf.raw_dir, "Dataset root with <phone>/ and dslr/ folders")->required();
  prepare->add_option("out", pf.out_dir, "Patch pack output directory")->required();
  prepare->add_option("--phone", pf.phone, "Phone folder name (default: the only non-dslr folder)");
  prepare->add_option("--cc-threshold", pf.align.cc_threshold, "Minimum cross-correlation of kept patches");
  prepare->add_option("--patch-size", pf.align.patch_size, "Patch side in pixels");
  prepare->add_option("--max-shift", pf.align.max_shift, "Largest window shift searched");
  prepare->add_option("--rotation-range", pf.align.rotation_range, "Largest window rotation searched, degrees");
  prepare->add_option("--rotation-step", pf.align.rotation_step, "Rotation grid step, degrees");
  prepare->add_option("--ransac-iters", pf.align.ransac_iters, "RANSAC iterations");
  prepare->add_option("--ransac-threshold", pf.align.ransac_inlier_px, "RANSAC inlier distance, pixels");
  prepare->add_option("--ratio", pf.align.ratio_test, "Descriptor ratio test");
  prepare->add_flag("--rgb-correlation", pf.align.rgb_correlation, "Correlate RGB instead of grayscale");
  prepare->add_option("--val-fraction", pf.val_fraction, "Share of photos held out for validation");
  prepare->add_option("--test-fraction", pf.test_fraction, "Share of photos held out for testing");

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train the generator on a patch pack");
  add_train_flags(train_cmd, tf, true);

  EnhanceFlags ef;
  auto* enhance_cmd = app.add_subcommand("enhance", "Enhance a full-resolution image");
  enhance_cmd->add_option("checkpoint", ef.checkpoint, "Checkpoint directory or generator weights")->required();
  enhance_cmd->add_option("input", ef.input, "Input image (PNG or JPEG)")->required();
  enhance_cmd->add_option("output", ef.output, "Output PNG")->required();

  EvaluateFlags vf;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "PSNR/SSIM of a checkpoint on the pack's test split");
  evaluate_cmd->add_option("checkpoint", vf.checkpoint, "Checkpoint directory or generator weights")->required();
  evaluate_cmd->add_option("pack", vf.pack_dir, "Patch pack directory")->required();
  evaluate_cmd->add_option("out", vf.out_csv, "Per-pair CSV; the aggregate JSON is written next to it")->required();
  evaluate_cmd->add_flag("--per-channel-ssim", vf.per_channel_ssim, "Average SSIM over RGB channels");

  CurveFlags cf;
  auto* curve_cmd = app.add_subcommand("curve", "MSE and color loss as functions of shift magnitude");
  curve_cmd->add_option("corpus", cf.corpus_dir, "Directory of images")->required();
  curve_cmd->add_option("out", cf.out_csv, "Output CSV")->required();
  curve_cmd->add_option("--max-shift", cf.max_shift, "Largest shift in pixels")->check(CLI::PositiveNumber);
  curve_cmd->add_option("--crop-size", cf.crop_size, "Random crop side (0: whole images)");
  curve_cmd->add_option("--crops-per-image", cf.crops_per_image, "Random crops per image");
  curve_cmd->add_option("--plot", cf.plot, "Also render the curve to this PNG");

  TrainFlags af;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate the four loss profiles");
  add_train_flags(ablate_cmd, af, false);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  set_num_threads(g.deterministic ? 1 : g.threads);
  try {
    if (*prepare) cmd_prepare(pf, g, out);
    if (*train_cmd) cmd_train(tf, g, out);
    if (*enhance_cmd) cmd_enhance(ef, out);
    if (*evaluate_cmd) cmd_evaluate(vf, out);
    if (*curve_cmd) cmd_curve(cf, g, out);
    if (*ablate_cmd) cmd_ablate(af, g, out);
  } catch (const std::exception& e) {
    err << "dped: " << e.what() << "\n";
    set_num_threads(1);
    return exit_code_for(e);
  }
  set_num_threads(1);
  return kExitOk;
}

}  // namespace dped::cli
