// Acceptance gate: one PASS/FAIL line per criterion. With no arguments every
// criterion runs; otherwise only the named ones. Exit status is non-zero when
// any selected criterion fails. `--expect-fail NAME` marks a criterion known
// to fail: it still runs and prints its line, and the exit status is non-zero
// if it passes or throws instead.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dped/align.hpp"
#include "dped/convert.hpp"
#include "dped/eval.hpp"
#include "dped/parallel.hpp"
#include "dped/train.hpp"
#include "test_support.hpp"

using namespace dped;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;  // 0 when the criterion sets no runtime bound
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<ImageRGB> natural_images() {
  std::vector<ImageRGB> images;
  for (const char* name :
       {"astronaut.png", "chelsea.png", "coffee.png", "motorcycle_left.png", "motorcycle_right.png", "rocket.jpg"})
    images.push_back(load_image(test::data_dir() / name));
  return images;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Shift sensitivity
// ---------------------------------------------------------------------------

Outcome shift_sensitivity() {
  const auto corpus = random_crops(natural_images(), 100, 40, 2024);
  const auto curve = shift_sensitivity_curve(corpus, 5, {}, 7);
  bool pass = corpus.size() >= 200;
  std::string detail = fmt("%zu crops; mse/color", corpus.size());
  for (int n = 3; n <= 5; ++n) {
    const double ratio = curve.mse_values[n] / curve.color_values[n];
    pass = pass && ratio >= 4.0 && ratio <= 15.0;
    detail += fmt(" n=%d:%.2f", n, ratio);
  }
  detail += " (need [4,15]); color/mse";
  for (int n = 1; n <= 2; ++n) {
    const double ratio = curve.color_values[n] / curve.mse_values[n];
    pass = pass && ratio < 0.1;
    detail += fmt(" n=%d:%.3f", n, ratio);
  }
  return {pass, detail + " (need <0.1)"};
}

// ---------------------------------------------------------------------------
// Gradient correctness
// ---------------------------------------------------------------------------

struct GradFixture {
  GeneratorWeights<double> g;
  DiscriminatorWeights<double> d;
  Tensor<double> x, y;
};

Tensor<double> concat(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out(a.n + b.n, a.c, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

// Weighted generator objective of a profile; fills dL/d(output) when asked.
double generator_objective(const GradFixture& f, const Tensor<double>& out, const VggWeights<double>& vgg,
                           const Kernel2D& kernel, LossProfile profile, Tensor<double>* grad) {
  const auto terms = profile_terms(profile);
  const LossWeights w;
  LossBreakdown parts;
  Tensor<double> g;
  Tensor<double>* gp = grad ? &g : nullptr;
  if (grad) *grad = Tensor<double>(out.n, out.c, out.h, out.w);
  const auto add = [&](const Tensor<double>& part, double weight) {
    for (std::size_t i = 0; i < part.data.size(); ++i) grad->data[i] += weight * part.data[i];
  };
  if (terms.content) {
    parts.content = content_loss(vgg, out, f.y, kDefaultContentLayer, gp);
    if (grad) add(g, w.content);
  }
  if (terms.texture) {
    parts.texture = texture_loss(f.d, grayscale_batch(out), Mode::Train, gp);
    if (grad) add(grayscale_batch_backward(g), w.texture);
  }
  if (terms.color) {
    parts.color = color_loss(out, f.y, kernel, gp);
    if (grad) add(g, w.color);
  }
  if (terms.tv) {
    parts.tv = tv_loss(out, gp);
    if (grad) add(g, w.tv);
  }
  if (terms.mse) {
    parts.mse = mse_loss(out, f.y, gp);
    if (grad) add(g, w.mse);
  }
  return total_loss(parts, w).total;
}

// Discriminator objective on fake and real items in one pass.
double discriminator_objective(const GradFixture& f, const Tensor<double>& fake_gray, const Tensor<double>& real_gray,
                               Gradients<double>* grads) {
  DiscriminatorTape<double> tape;
  const auto out = discriminator_forward(f.d, concat(fake_gray, real_gray), Mode::Train, grads ? &tape : nullptr);
  const std::vector<double> fake(out.probs.begin(), out.probs.begin() + fake_gray.n);
  const std::vector<double> real(out.probs.begin() + fake_gray.n, out.probs.end());
  std::vector<double> gf, gr;
  const double loss = discriminator_loss_from_probs(fake, real, grads ? &gf : nullptr, grads ? &gr : nullptr);
  if (grads) {
    gf.insert(gf.end(), gr.begin(), gr.end());
    *grads = discriminator_backward(f.d, tape, gf);
  }
  return loss;
}

Outcome gradient_correctness() {
  GeneratorConfig gc;
  gc.channels = 8;
  DiscriminatorConfig dc;
  dc.channels = {4, 6, 8, 8, 6};
  dc.fc_units = 16;
  dc.input_size = 32;
  const auto vgg = vgg_random(3, VggConfig{.width_divisor = 16}).cast<double>();
  const auto kernel = gaussian_kernel();
  std::mt19937_64 rng(99);
  test::GradCheckResult worst;
  int draws = 0;
  int checked = 0;
  int retries = 0;
  constexpr int kDrawsPerProfile = 5;
  // A small step keeps the window from straddling ReLU kinks, of which the
  // generator has about 1e5 at this size.
  constexpr double kStep = 1e-6;
  for (const auto profile : kAllProfiles) {
    for (int k = 0; k < kDrawsPerProfile; ++k, ++draws) {
      GradFixture f{generator_init(1000 + draws, gc).cast<double>(), discriminator_init(2000 + draws, dc).cast<double>(),
                    test::random_tensor<double>(2, 3, 32, 32, rng), test::random_tensor<double>(2, 3, 32, 32, rng)};
      // Smaller weights keep the scaled tanh away from its clamp.
      for (auto& t : f.g.params.tensors())
        if (t.name.ends_with(".weight"))
          for (auto& v : t.data) v *= 0.5;
      for (auto& t : f.g.params.tensors())
        if (t.name.ends_with("gamma") || t.name.ends_with("beta") || t.name.ends_with("bias"))
          for (auto& v : t.data) v += std::uniform_real_distribution<double>(-0.2, 0.2)(rng);

      GeneratorTape<double> tape;
      const auto out = generator_forward(f.g, f.x, Mode::Train, &tape);
      Tensor<double> grad_out;
      generator_objective(f, out, vgg, kernel, profile, &grad_out);
      const auto g_grads = generator_backward(f.g, tape, grad_out);
      const auto g_loss = [&] {
        return generator_objective(f, generator_forward(f.g, f.x, Mode::Train), vgg, kernel, profile, nullptr);
      };
      auto r = test::check_param_gradients(f.g.params, g_grads.params, g_loss, rng, 2, kStep);
      checked += r.checked;
      retries += r.kink_retries;
      if (r.max_rel > worst.max_rel) worst = r;

      if (!profile_terms(profile).texture) continue;
      const auto fake_gray = grayscale_batch(generator_forward(f.g, f.x, Mode::Train));
      const auto real_gray = grayscale_batch(f.y);
      Gradients<double> d_grads;
      discriminator_objective(f, fake_gray, real_gray, &d_grads);
      const auto d_loss = [&] { return discriminator_objective(f, fake_gray, real_gray, nullptr); };
      r = test::check_param_gradients(f.d.params, d_grads.params, d_loss, rng, 3, kStep);
      checked += r.checked;
      retries += r.kink_retries;
      if (r.max_rel > worst.max_rel) worst = r;
    }
  }
  const bool pass = draws >= 20 && worst.max_rel < 1e-4;
  return {pass, fmt("%d draws over 4 profiles, %d entries (%d re-measured at a smaller step), max rel err %.2e "
                    "(need <1e-4)%s%s",
                    draws, checked, retries, worst.max_rel, pass ? "" : "; worst ", pass ? "" : worst.worst.c_str())};
}

// ---------------------------------------------------------------------------
// Loss identities
// ---------------------------------------------------------------------------

Outcome loss_identities() {
  std::mt19937_64 rng(5);
  const auto x = test::random_tensor<double>(2, 3, 40, 36, rng);
  const auto vgg = vgg_random(4, VggConfig{.width_divisor = 16}).cast<double>();
  const double color = color_loss(x, x, gaussian_kernel());
  const double content = content_loss(vgg, x, x);
  Tensor<double> flat(2, 3, 40, 36);
  for (auto& v : flat.data) v = 0.37;
  const double tv_const = tv_loss(flat);
  auto shifted = x;
  for (auto& v : shifted.data) v += 0.25;
  const double tv_x = tv_loss(x);
  const double tv_offset = std::abs(tv_loss(shifted) - tv_x) / tv_x;
  DiscriminatorConfig dc;
  dc.input_size = 32;
  const auto d = discriminator_zeros<double>(dc);
  const double texture = texture_loss(d, test::random_tensor<double>(3, 1, 32, 32, rng));
  const double texture_err = std::abs(texture - std::numbers::ln2);
  LossBreakdown parts{.content = 0.7, .texture = 1.3, .color = 52.0, .tv = 0.002};
  const double expected = 0.7 + 0.4 * 1.3 + 0.1 * 52.0 + 400 * 0.002;
  const double total_err = std::abs(total_loss(parts).total - expected) / expected;
  const bool pass = color == 0.0 && content == 0.0 && tv_const == 0.0 && tv_offset < 1e-12 && texture_err < 1e-9 &&
                    total_err < 1e-6;
  return {pass, fmt("color(x,x)=%g content(x,x)=%g tv(const)=%g tv offset rel=%.1e |texture-ln2|=%.1e total rel=%.1e",
                    color, content, tv_const, tv_offset, texture_err, total_err)};
}

// ---------------------------------------------------------------------------
// Alignment oracle
// ---------------------------------------------------------------------------

Homography random_homography(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double s = 1.0 + 0.1 * u(rng);
  const double a = 5.0 * std::numbers::pi / 180.0 * u(rng);
  const double shear = 0.03 * u(rng);
  return {{s * std::cos(a), -s * std::sin(a) + shear, 20 * u(rng), s * std::sin(a), s * std::cos(a), 20 * u(rng),
           1e-4 * u(rng), 1e-4 * u(rng), 1.0}};
}

// dslr(q) = scene(h(q)), sampled bicubically.
ImageRGB render_through(const ImageRGB& scene, const Homography& h, int height, int width) {
  ImageRGB out(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto p = h.apply({static_cast<double>(x), static_cast<double>(y)});
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = std::clamp(sample_bicubic(scene, c, p.y, p.x), 0.0f, 1.0f);
    }
  }
  return out;
}

Outcome alignment_oracle() {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> coord(0.0, 500.0);
  std::normal_distribution<double> noise(0.0, 0.5);
  constexpr int kCases = 50;
  constexpr int kInliers = 140;
  constexpr int kOutliers = 60;  // 30% of all matches
  int recovered = 0;
  double worst = 0.0;
  for (int trial = 0; trial < kCases; ++trial) {
    const auto truth = random_homography(rng);
    std::vector<PointMatch> m;
    for (int i = 0; i < kInliers; ++i) {
      const Point2 p{coord(rng), coord(rng)};
      auto q = truth.apply(p);
      q.x += noise(rng);
      q.y += noise(rng);
      m.push_back({p, q});
    }
    for (int i = 0; i < kOutliers; ++i) m.push_back({{coord(rng), coord(rng)}, {coord(rng), coord(rng)}});
    std::shuffle(m.begin(), m.end(), rng);
    const auto r = estimate_homography_ransac(m, AlignConfig{}, static_cast<std::uint64_t>(trial));
    double err = 0.0;
    for (const auto& pm : m) {
      const auto t = truth.apply(pm.src);
      if (std::hypot(t.x - pm.dst.x, t.y - pm.dst.y) > 5.0) continue;  // an outlier
      const auto a = r.h.apply(pm.src);
      err = std::max(err, std::hypot(a.x - t.x, a.y - t.y));
    }
    worst = std::max(worst, err);
    if (err < 1.0) ++recovered;
  }

  // Full pipeline on rendered photo pairs; every emitted patch is checked.
  const AlignConfig cfg;
  int patches = 0;
  int violations = 0;
  const Homography scale{{1 / 1.25, 0, 0, 0, 1 / 1.25, 0, 0, 0, 1}};
  int photo = 0;
  for (const char* name : {"chelsea.png", "coffee.png", "astronaut.png"}) {
    const auto phone = load_image(test::data_dir() / name);
    const auto truth = random_homography(rng) * scale;
    const auto dslr = render_through(phone, truth, phone.height * 5 / 4, phone.width * 5 / 4);
    const auto report = align_photo_pair(phone, dslr, cfg, static_cast<std::uint64_t>(photo++), name);
    for (const auto& p : report.pairs) {
      ++patches;
      if (!(p.cc > 0.9) || std::abs(p.shift_x) > 5 || std::abs(p.shift_y) > 5) ++violations;
    }
  }
  const bool pass = recovered >= 48 && patches > 0 && violations == 0;
  return {pass, fmt("%d/%d homographies within 1px (need >=48, worst %.3f px); %d patches, %d with cc<=0.9 or "
                    "|shift|>5",
                    recovered, kCases, worst, patches, violations)};
}

// ---------------------------------------------------------------------------
// Overfit smoke test
// ---------------------------------------------------------------------------

Outcome overfit_smoke() {
  const auto crops = random_crops(natural_images(), 100, 2, 77);
  std::vector<PatchPair> data;
  for (int i = 0; i < 8; ++i) {
    PatchPair p;
    p.target = crops[static_cast<std::size_t>(i)];
    p.source = p.target;
    for (auto& v : p.source.data) v = 0.4f * v + 0.05f;
    p.origin_image = "photo" + std::to_string(i);
    data.push_back(std::move(p));
  }
  TrainConfig cfg;
  cfg.profile = LossProfile::Full;
  cfg.batch_size = 4;
  cfg.iterations = 500;
  cfg.pretrain_iters = 100;
  cfg.checkpoint_every = 500;
  cfg.seed = 3;
  cfg.generator.channels = 16;
  for (auto& c : cfg.discriminator.channels) c /= 4;
  cfg.discriminator.fc_units /= 4;
  cfg.discriminator.input_size = 100;
  const auto vgg = vgg_random(5, VggConfig{.width_divisor = 8});
  const auto dir = test::temp_dir("acceptance_smoke");
  const auto result = train(data, cfg, {.out_dir = dir, .vgg = &vgg});
  fs::remove_all(dir);
  const auto window_mean = [&](std::size_t end) {
    double s = 0;
    for (std::size_t i = end - 10; i < end; ++i) s += result.log[i].losses.total;
    return s / 10;
  };
  const double early = window_mean(10);
  const double late = window_mean(result.log.size());
  const double reduction = 1.0 - late / early;
  const double acc = result.pretrain_accuracy.value_or(0.0);
  const bool pass = result.log.size() == 500 && reduction >= 0.5 && acc > 0.9;
  return {pass, fmt("total loss %.4g -> %.4g (%.1f%% reduction, need >=50%%); pretrain accuracy %.3f (need >0.9)",
                    early, late, 100 * reduction, acc)};
}

// ---------------------------------------------------------------------------
// Determinism and resume
// ---------------------------------------------------------------------------

std::vector<PatchPair> brightness_pairs(int count, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<PatchPair> pairs;
  for (int i = 0; i < count; ++i) {
    PatchPair p;
    p.target = test::smooth_image(size, size, rng);
    p.source = p.target;
    for (auto& v : p.source.data) v *= 0.25f;
    p.origin_image = "img" + std::to_string(i);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// Files present in either directory whose bytes differ.
int differing_files(const fs::path& a, const fs::path& b, int& compared) {
  int diff = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto other = b / fs::relative(e.path(), a);
    ++compared;
    if (!fs::exists(other) || file_bytes(e.path()) != file_bytes(other)) ++diff;
  }
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file() && !fs::exists(a / fs::relative(e.path(), b))) ++diff;
  return diff;
}

Outcome determinism_and_resume() {
  const auto data = brightness_pairs(6, 32, 11);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.iterations = 6;
  cfg.checkpoint_every = 3;
  cfg.pretrain_iters = 3;
  cfg.content_layer = "relu2_2";
  cfg.seed = 17;
  cfg.generator.channels = 8;
  cfg.generator.blocks = 2;
  cfg.discriminator.channels = {4, 6, 8, 8, 6};
  cfg.discriminator.fc_units = 16;
  cfg.discriminator.input_size = 32;
  const auto vgg = vgg_random(3, VggConfig{.width_divisor = 16});

  const auto dir_a = test::temp_dir("acceptance_det_a");
  const auto dir_b = test::temp_dir("acceptance_det_b");
  const auto dir_r = test::temp_dir("acceptance_det_resume");
  const auto a = train(data, cfg, {.out_dir = dir_a, .vgg = &vgg});
  const auto b = train(data, cfg, {.out_dir = dir_b, .vgg = &vgg});
  auto half = cfg;
  half.iterations = cfg.iterations / 2;
  const auto first = train(data, half, {.out_dir = dir_r, .vgg = &vgg});
  const auto resumed = train(data, cfg, {.out_dir = dir_r, .vgg = &vgg, .resume_from = first.final_checkpoint});

  int compared_runs = 0;
  int compared_resume = 0;
  const int run_diff = differing_files(a.final_checkpoint, b.final_checkpoint, compared_runs);
  const int resume_diff = differing_files(a.final_checkpoint, resumed.final_checkpoint, compared_resume);
  for (const auto& d : {dir_a, dir_b, dir_r}) fs::remove_all(d);
  const bool pass = compared_runs > 0 && run_diff == 0 && resume_diff == 0 && resumed.state.iteration == cfg.iterations;
  return {pass, fmt("repeat run: %d/%d checkpoint files differ; resume at iteration %d: %d/%d differ", run_diff,
                    compared_runs, half.iterations, resume_diff, compared_resume)};
}

// ---------------------------------------------------------------------------
// Fully-convolutional contract
// ---------------------------------------------------------------------------

Outcome fully_convolutional() {
  const auto gen = generator_init(8);
  std::mt19937_64 rng(8);
  const std::vector<int> sizes{16, 17, 100, 137, 256};
  int shapes_ok = 0;
  int shapes = 0;
  for (int h : sizes) {
    for (int w : sizes) {
      const auto out = enhance(gen, test::smooth_image(h, w, rng));
      ++shapes;
      if (out.height == h && out.width == w) ++shapes_ok;
    }
  }
  // Two overlapping crops of one photo; pixels at least the receptive radius
  // from both crops' borders must agree.
  const auto photo = crop(load_image(test::data_dir() / "astronaut.png"), 100, 120, 160, 200);
  const int margin = gen.config.receptive_radius();
  const int top_b = 40;
  const int left_b = 50;
  const auto a = enhance(gen, crop(photo, 0, 0, 120, 150));
  const auto b = enhance(gen, crop(photo, top_b, left_b, 120, 150));
  double worst = 0.0;
  int compared = 0;
  for (int y = top_b + margin; y < 120 - margin; ++y) {
    for (int x = left_b + margin; x < 150 - margin; ++x) {
      for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(double(a.at(c, y, x)) - b.at(c, y - top_b, x - left_b)));
      ++compared;
    }
  }
  const bool pass = shapes_ok == shapes && compared > 0 && worst < 1e-3;
  return {pass, fmt("%d/%d shapes preserved; overlap interior (margin %d, %d px) max diff %.2e (need <1e-3)", shapes_ok,
                    shapes, margin, compared, worst)};
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

Outcome metric_oracles() {
  ImageRGB black(32, 32);
  ImageRGB gray(32, 32);
  for (auto& v : gray.data) v = 0.5f;
  const double p = psnr(black, gray);
  const auto photo = crop(load_image(test::data_dir() / "coffee.png"), 50, 60, 96, 128);
  std::mt19937_64 rng(6);
  const double self = ssim(photo, photo);
  const auto other = test::smooth_image(96, 128, rng);
  const double asym = std::abs(ssim(photo, other) - ssim(other, photo));
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> pattern(photo.data.size());
  for (auto& v : pattern) v = g(rng);
  bool monotone = true;
  double previous = std::numeric_limits<double>::infinity();
  for (const float sigma : {0.005f, 0.01f, 0.02f, 0.05f, 0.1f, 0.2f}) {
    auto noisy = photo;
    for (std::size_t i = 0; i < noisy.data.size(); ++i) noisy.data[i] += sigma * pattern[i];
    const double value = psnr(photo, noisy);
    monotone = monotone && value < previous;
    previous = value;
  }
  const bool pass = std::abs(p - 6.0206) <= 1e-3 && std::abs(self - 1.0) <= 1e-9 && asym <= 1e-12 && monotone;
  return {pass, fmt("PSNR(0,0.5)=%.5f dB; SSIM(X,X)-1=%.1e; |SSIM asymmetry|=%.1e; PSNR monotone under noise: %s", p,
                    self - 1.0, asym, monotone ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

Outcome ablation_structure() {
  std::mt19937_64 rng(9);
  PatchPack pack;
  for (int img = 0; img < 4; ++img) {
    for (int k = 0; k < 3; ++k) {
      PatchPair pr;
      pr.target = test::smooth_image(32, 32, rng);
      pr.source = pr.target;
      for (auto& v : pr.source.data) v *= 0.6f;
      pr.origin_image = "photo" + std::to_string(img);
      pr.row = 32 * k;
      pr.cc = 0.95;
      pack.pairs.push_back(std::move(pr));
    }
  }
  pack.split = split_by_image({"photo0", "photo1", "photo2", "photo3"}, 4, 0.25, 0.25);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.iterations = 2;
  cfg.pretrain_iters = 1;
  cfg.content_layer = "relu2_2";
  cfg.seed = 5;
  cfg.generator.channels = 6;
  cfg.generator.blocks = 1;
  cfg.discriminator.channels = {4, 6, 8, 8, 6};
  cfg.discriminator.fc_units = 16;
  cfg.discriminator.input_size = 32;
  const auto vgg = vgg_random(3, VggConfig{.width_divisor = 16});
  const auto dir = test::temp_dir("acceptance_ablate");
  AblationOptions opt;
  opt.out_dir = dir;
  opt.vgg = &vgg;
  const auto rows = ablation_run(pack, cfg, opt);
  const auto expected_hash = pairs_hash(pack.select(SplitPart::Test));
  bool order = rows.size() == kAllProfiles.size();
  bool hashes = !rows.empty();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    order = order && i < kAllProfiles.size() && rows[i].profile == kAllProfiles[i];
    hashes = hashes && rows[i].test_split_hash == expected_hash;
  }
  std::string names;
  for (const auto& r : rows) names += std::string(names.empty() ? "" : ",") + std::string(profile_name(r.profile));
  const bool files = fs::exists(dir / "ablation.csv") && fs::exists(dir / "ablation.md");
  fs::remove_all(dir);
  const bool pass = order && hashes && files;
  return {pass, fmt("profiles [%s]; test-split hash %s across rows; report files %s", names.c_str(),
                    hashes ? "identical" : "DIFFERS", files ? "written" : "missing")};
}

}  // namespace

int main(int argc, char** argv) {
  set_num_threads(1);
  const std::vector<Criterion> criteria{
      {"shift_sensitivity", 120, shift_sensitivity},
      {"gradient_correctness", 300, gradient_correctness},
      {"loss_identities", 0, loss_identities},
      {"alignment_oracle", 180, alignment_oracle},
      {"overfit_smoke", 600, overfit_smoke},
      {"determinism_resume", 0, determinism_and_resume},
      {"fully_convolutional", 0, fully_convolutional},
      {"metric_oracles", 0, metric_oracles},
      {"ablation_structure", 0, ablation_structure},
  };
  std::vector<std::string> selected;
  std::vector<std::string> expected_failures;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--expect-fail" && i + 1 < argc) {
      expected_failures.push_back(argv[++i]);
      selected.push_back(argv[i]);
    } else {
      selected.push_back(arg);
    }
  }
  for (const auto& name : selected) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.name == name; })) {
      std::fprintf(stderr, "unknown criterion: %s\n", name.c_str());
      return 2;
    }
  }
  int unexpected = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.name) == selected.end()) continue;
    const bool expect_fail =
        std::find(expected_failures.begin(), expected_failures.end(), c.name) != expected_failures.end();
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    bool threw = false;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
      threw = true;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string timing = fmt("%.1f s", secs);
    if (c.budget_s > 0) {
      timing += fmt(" (budget %.0f s)", c.budget_s);
      if (secs > c.budget_s) {
        o.pass = false;
        timing += " OVER BUDGET";
      }
    }
    std::printf("%s %s: %s [%s]%s\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str(), timing.c_str(),
                expect_fail ? " (expected failure)" : "");
    std::fflush(stdout);
    if (expect_fail ? (o.pass || threw) : !o.pass) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
