#include "dped/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dped/convert.hpp"

namespace dped {

using json = nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

const char* norm_name(NormConvention n) { return n == NormConvention::Squared ? "squared" : "plain"; }

json config_json(const TrainConfig& c) {
  const auto& w = c.loss_weights;
  const auto& k = c.color_kernel;
  const auto& g = c.generator;
  const auto& d = c.discriminator;
  return json{
      {"batch_size", c.batch_size},
      {"adam", {c.adam.lr, c.adam.beta1, c.adam.beta2, c.adam.eps}},
      {"pretrain_iters", c.pretrain_iters},
      {"loss_weights", {w.content, w.texture, w.color, w.tv, w.mse}},
      {"content_layer", c.content_layer},
      {"seed", c.seed},
      {"profile", profile_name(c.profile)},
      {"d_steps_per_g", c.d_steps_per_g},
      {"bn_momentum", c.bn_momentum},
      {"norm", norm_name(c.norm)},
      {"color_kernel", {k.amplitude, k.mu_x, k.mu_y, k.sigma_x, k.sigma_y, k.radius}},
      {"generator", {g.channels, g.blocks, g.tanh_scale, g.tanh_offset, g.bn_eps}},
      {"discriminator",
       {d.channels, d.kernels, d.strides, d.fc_units, d.input_size, d.leaky_slope, d.bn_eps}},
  };
}

Tensor<float> batch_tensor(const std::vector<const PatchPair*>& batch, bool source) {
  std::vector<ImageRGB> images;
  images.reserve(batch.size());
  for (const auto* p : batch) images.push_back(source ? p->source : p->target);
  return to_tensor<float>(images);
}

struct DStep {
  double loss = 0.0;
  double acc = 0.0;
};

Tensor<float> concat_batches(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.c != b.c || a.h != b.h || a.w != b.w) throw ShapeError("fake and real batches differ in shape");
  Tensor<float> out(a.n + b.n, a.c, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

// Fake and real items share one forward pass so batch normalization sees both.
DStep discriminator_update(TrainState& s, const Tensor<float>& fake_gray, const Tensor<float>& real_gray,
                           const TrainConfig& cfg) {
  auto& d = s.discriminator;
  DiscriminatorTape<float> tape;
  const auto out = discriminator_forward(d, concat_batches(fake_gray, real_gray), Mode::Train, &tape);
  const auto split = out.probs.begin() + fake_gray.n;
  const std::vector<float> fake_probs(out.probs.begin(), split);
  const std::vector<float> real_probs(split, out.probs.end());
  std::vector<float> g_fake;
  std::vector<float> g_real;
  DStep r;
  r.loss = discriminator_loss_from_probs(fake_probs, real_probs, &g_fake, &g_real);
  if (!std::isfinite(r.loss)) throw NonFiniteLoss("discriminator loss is not finite");
  r.acc = discriminator_accuracy(fake_probs, real_probs);
  g_fake.insert(g_fake.end(), g_real.begin(), g_real.end());
  const auto grads = discriminator_backward(d, tape, g_fake);
  adam_step(d.params, grads.params, s.d_moments, ++s.d_moments.step, cfg.adam);
  discriminator_update_running_stats(d, tape, cfg.bn_momentum);
  ++s.counters.discriminator_steps;
  return r;
}

void add_scaled(Tensor<float>& acc, const Tensor<float>& g, double weight) {
  const auto w = static_cast<float>(weight);
  for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += w * g.data[i];
}

json breakdown_json(const LossBreakdown& b) {
  return json{{"total", b.total}, {"content", b.content}, {"texture", b.texture},
              {"color", b.color}, {"tv", b.tv},           {"mse", b.mse}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
void append_moments(ParamSet<float>& out, const std::string& prefix, const AdamMoments<T>& m) {
  for (const auto& t : m.m.tensors()) out.add(prefix + ".m." + t.name, t.shape).data = t.data;
  for (const auto& t : m.v.tensors()) out.add(prefix + ".v." + t.name, t.shape).data = t.data;
}

AdamMoments<float> restore_moments(const ParamSet<float>& file, const std::string& prefix,
                                   const ParamSet<float>& params, long step) {
  auto m = adam_init(params);
  m.step = step;
  for (auto& t : m.m.tensors()) {
    const auto& src = file.at(prefix + ".m." + t.name);
    if (src.shape != t.shape) throw SchemaError("adam moments shape mismatch for " + t.name);
    t.data = src.data;
  }
  for (auto& t : m.v.tensors()) {
    const auto& src = file.at(prefix + ".v." + t.name);
    if (src.shape != t.shape) throw SchemaError("adam moments shape mismatch for " + t.name);
    t.data = src.data;
  }
  return m;
}

std::string iter_dir_name(long iter) {
  std::ostringstream ss;
  ss << std::setw(7) << std::setfill('0') << iter;
  return ss.str();
}

}  // namespace

std::string_view profile_name(LossProfile profile) {
  switch (profile) {
    case LossProfile::Full: return "full";
    case LossProfile::ContentTexture: return "content_texture";
    case LossProfile::MseTexture: return "mse_texture";
    case LossProfile::Mse: return "mse";
  }
  return "full";
}

LossProfile parse_profile(std::string_view name) {
  for (auto p : kAllProfiles)
    if (profile_name(p) == name) return p;
  throw InvalidSpec("unknown loss profile '" + std::string(name) + "'");
}

ProfileTerms profile_terms(LossProfile profile) {
  switch (profile) {
    case LossProfile::Full: return {.content = true, .texture = true, .color = true, .tv = true};
    case LossProfile::ContentTexture: return {.content = true, .texture = true, .tv = true};
    case LossProfile::MseTexture: return {.texture = true, .tv = true, .mse = true};
    case LossProfile::Mse: return {.mse = true};
  }
  return {};
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidSpec("batch_size must be >= 1");
  if (iterations < 1) throw InvalidSpec("iterations must be >= 1");
  if (!(adam.lr >= 0.0)) throw InvalidSpec("lr must be nonnegative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw InvalidSpec("beta1 must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw InvalidSpec("beta2 must be in [0, 1)");
  if (!(adam.eps > 0.0)) throw InvalidSpec("adam eps must be positive");
  if (pretrain_iters < 0) throw InvalidSpec("pretrain_iters must be >= 0");
  if (checkpoint_every < 1) throw InvalidSpec("checkpoint_every must be >= 1");
  if (d_steps_per_g < 1) throw InvalidSpec("d_steps_per_g must be >= 1");
  const auto& w = loss_weights;
  for (double v : {w.content, w.texture, w.color, w.tv, w.mse}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidSpec("loss weights must be finite and nonnegative");
  }
  parse_vgg_layer(content_layer);
}

std::string config_hash(const TrainConfig& cfg) { return fnv1a_hex(config_json(cfg).dump()); }

template <typename T>
AdamMoments<T> adam_init(const ParamSet<T>& params) {
  auto zeros = params.zeros_like_trainable();
  return {zeros, zeros, 0};
}

template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamMoments<T>& moments, long t, const AdamConfig& cfg) {
  if (t < 1) throw InvalidSpec("adam_step requires t >= 1");
  if (grads.size() != moments.m.size()) throw ShapeError("adam_step: gradient set does not match moments");
  for (const auto& g : grads.tensors()) {
    for (T v : g.data)
      if (!std::isfinite(static_cast<double>(v))) throw NonFiniteGradient("non-finite gradient in " + g.name);
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    const auto& g = grads.tensors()[k];
    auto& m = moments.m.tensors()[k];
    auto& v = moments.v.tensors()[k];
    auto* p = params.find(g.name);
    if (!p || m.name != g.name || p->data.size() != g.data.size() || m.data.size() != g.data.size()) {
      throw ShapeError("adam_step: tensor mismatch at " + g.name);
    }
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double gi = g.data[i];
      m.data[i] = static_cast<T>(cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi);
      v.data[i] = static_cast<T>(cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi);
      const double update = cfg.lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + cfg.eps);
      const T next = static_cast<T>(p->data[i] - update);
      if (!std::isfinite(static_cast<double>(next))) throw NonFiniteGradient("update made " + g.name + " non-finite");
      p->data[i] = next;
    }
  }
}

template AdamMoments<float> adam_init<float>(const ParamSet<float>&);
template AdamMoments<double> adam_init<double>(const ParamSet<double>&);
template void adam_step<float>(ParamSet<float>&, const ParamSet<float>&, AdamMoments<float>&, long, const AdamConfig&);
template void adam_step<double>(ParamSet<double>&, const ParamSet<double>&, AdamMoments<double>&, long,
                                const AdamConfig&);

TrainState make_train_state(const TrainConfig& cfg) {
  TrainState s;
  s.generator = generator_init(splitmix64(cfg.seed), cfg.generator);
  s.discriminator = discriminator_init(splitmix64(cfg.seed + 1), cfg.discriminator);
  s.g_moments = adam_init(s.generator.params);
  s.d_moments = adam_init(s.discriminator.params);
  s.rng.seed(splitmix64(cfg.seed + 2));
  return s;
}

std::vector<const PatchPair*> sample_batch(const std::vector<PatchPair>& data, int batch_size, std::mt19937_64& rng) {
  if (data.empty()) throw EmptyDataset("cannot sample from an empty dataset");
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<const PatchPair*> batch;
  batch.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) batch.push_back(&data[pick(rng)]);
  return batch;
}

StepResult train_step(TrainState& s, const std::vector<const PatchPair*>& batch, const TrainConfig& cfg,
                      const VggWeights<float>* vgg) {
  if (static_cast<int>(batch.size()) != cfg.batch_size) throw ShapeError("train_step: batch size differs from config");
  const auto terms = profile_terms(cfg.profile);
  if (terms.content && !vgg) throw InvalidSpec("profile " + std::string(profile_name(cfg.profile)) + " needs VGG weights");
  const auto src = batch_tensor(batch, true);
  const auto tgt = batch_tensor(batch, false);
  StepResult r;

  if (terms.texture) {
    const auto real_gray = grayscale_batch(tgt);
    for (int k = 0; k < cfg.d_steps_per_g; ++k) {
      const auto fake_gray = grayscale_batch(generator_forward(s.generator, src, Mode::Train));
      const auto d = discriminator_update(s, fake_gray, real_gray, cfg);
      r.d_loss = d.loss;
      r.d_acc = d.acc;
    }
  }

  GeneratorTape<float> tape;
  const auto out = generator_forward(s.generator, src, Mode::Train, &tape);
  Tensor<float> grad(out.n, out.c, out.h, out.w);
  Tensor<float> g;
  const auto& w = cfg.loss_weights;
  LossBreakdown parts;
  if (terms.content) {
    ++s.counters.content;
    parts.content = content_loss(*vgg, out, tgt, cfg.content_layer, w.content != 0.0 ? &g : nullptr, cfg.norm);
    if (w.content != 0.0) add_scaled(grad, g, w.content);
  }
  if (terms.texture) {
    ++s.counters.texture;
    parts.texture = texture_loss(s.discriminator, grayscale_batch(out), Mode::Train, w.texture != 0.0 ? &g : nullptr);
    if (w.texture != 0.0) add_scaled(grad, grayscale_batch_backward(g), w.texture);
  }
  if (terms.color) {
    ++s.counters.color;
    parts.color = color_loss(out, tgt, gaussian_kernel(cfg.color_kernel), w.color != 0.0 ? &g : nullptr);
    if (w.color != 0.0) add_scaled(grad, g, w.color);
  }
  if (terms.tv) {
    ++s.counters.tv;
    parts.tv = tv_loss(out, w.tv != 0.0 ? &g : nullptr, cfg.norm);
    if (w.tv != 0.0) add_scaled(grad, g, w.tv);
  }
  if (terms.mse) {
    ++s.counters.mse;
    parts.mse = mse_loss(out, tgt, w.mse != 0.0 ? &g : nullptr);
    if (w.mse != 0.0) add_scaled(grad, g, w.mse);
  }
  try {
    r.losses = total_loss(parts, w);
  } catch (const NonFiniteComponent& e) {
    throw NonFiniteLoss(std::string(e.what()) + " at iteration " + std::to_string(s.iteration + 1) + ": " +
                        breakdown_json(parts).dump());
  }

  const auto grads = generator_backward(s.generator, tape, grad);
  adam_step(s.generator.params, grads.params, s.g_moments, ++s.g_moments.step, cfg.adam);
  generator_update_running_stats(s.generator, tape, cfg.bn_momentum);
  ++s.iteration;
  s.loss_ema = s.iteration == 1 ? r.losses.total : 0.9 * s.loss_ema + 0.1 * r.losses.total;
  return r;
}

std::optional<double> pretrain_discriminator(TrainState& s, const std::vector<PatchPair>& data, const TrainConfig& cfg) {
  if (data.empty()) throw EmptyDataset("discriminator pretraining needs at least one patch pair");
  std::optional<double> acc;
  for (int it = 0; it < cfg.pretrain_iters; ++it) {
    const auto batch = sample_batch(data, cfg.batch_size, s.rng);
    const auto fake_gray = grayscale_batch(batch_tensor(batch, true));
    const auto real_gray = grayscale_batch(batch_tensor(batch, false));
    acc = discriminator_update(s, fake_gray, real_gray, cfg).acc;
  }
  s.d_moments = adam_init(s.discriminator.params);
  return acc;
}

std::string log_row_json(const LogRow& row) {
  return json{{"iter", row.iter},
              {"total", row.losses.total},
              {"content", row.losses.content},
              {"texture", row.losses.texture},
              {"color", row.losses.color},
              {"tv", row.losses.tv},
              {"d_loss", row.d_loss},
              {"d_acc", row.d_acc},
              {"wallclock_ms", row.wallclock_ms}}
      .dump();
}

void save_checkpoint(const TrainState& s, const TrainConfig& cfg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string());
  save_generator(s.generator, dir / "generator.dpedw");
  save_discriminator(s.discriminator, dir / "discriminator.dpedw");
  ParamSet<float> moments;
  append_moments(moments, "generator", s.g_moments);
  append_moments(moments, "discriminator", s.d_moments);
  write_weights(dir / "adam.dpedw", "adam", moments);
  std::ostringstream rng;
  rng << s.rng;
  write_text(dir / "rng.txt", rng.str());
  const auto& c = s.counters;
  const json manifest{
      {"iter", s.iteration},
      {"config_hash", config_hash(cfg)},
      {"seed", cfg.seed},
      {"generator_adam_step", s.g_moments.step},
      {"discriminator_adam_step", s.d_moments.step},
      {"loss_ema", s.loss_ema},
      {"counters", {c.content, c.texture, c.color, c.tv, c.mse, c.discriminator_steps}},
  };
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

TrainState load_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw SchemaError("checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("config_hash", std::string{}) != config_hash(cfg)) {
    throw InvalidSpec("checkpoint " + dir.string() + " was written with a different configuration");
  }
  TrainState s;
  s.generator = load_generator(dir / "generator.dpedw");
  s.discriminator = load_discriminator(dir / "discriminator.dpedw");
  s.discriminator.config = cfg.discriminator;
  const auto moments = read_weights(dir / "adam.dpedw", "adam");
  try {
    s.iteration = manifest.at("iter").get<long>();
    s.g_moments = restore_moments(moments, "generator", s.generator.params, manifest.at("generator_adam_step").get<long>());
    s.d_moments =
        restore_moments(moments, "discriminator", s.discriminator.params, manifest.at("discriminator_adam_step").get<long>());
    s.loss_ema = manifest.at("loss_ema").get<double>();
    const auto c = manifest.at("counters").get<std::vector<long>>();
    if (c.size() != 6) throw SchemaError("checkpoint counters malformed");
    s.counters = {c[0], c[1], c[2], c[3], c[4], c[5]};
  } catch (const json::exception& e) {
    throw SchemaError("checkpoint manifest: " + std::string(e.what()));
  }
  std::istringstream rng(read_text(dir / "rng.txt"));
  rng >> s.rng;
  if (!rng) throw SchemaError("checkpoint rng state malformed");
  return s;
}

TrainResult train(const std::vector<PatchPair>& data, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (data.size() < static_cast<std::size_t>(cfg.batch_size)) {
    throw EmptyDataset("training needs at least batch_size (" + std::to_string(cfg.batch_size) + ") pairs, found " +
                       std::to_string(data.size()));
  }
  const auto terms = profile_terms(cfg.profile);
  if (terms.content && !options.vgg) {
    throw InvalidSpec("profile " + std::string(profile_name(cfg.profile)) + " needs VGG weights");
  }
  std::error_code ec;
  std::filesystem::create_directories(options.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + options.out_dir.string());

  TrainResult res;
  if (options.resume_from) {
    res.state = load_checkpoint(*options.resume_from, cfg);
  } else {
    res.state = make_train_state(cfg);
    if (terms.texture) res.pretrain_accuracy = pretrain_discriminator(res.state, data, cfg);
  }
  auto& s = res.state;

  const auto log_path = options.out_dir / "train_log.ndjson";
  std::ofstream log(log_path, options.resume_from ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  const auto checkpoint_dir = [&](long iter) { return options.out_dir / "checkpoints" / iter_dir_name(iter); };

  bool saved_last = false;
  while (s.iteration < cfg.iterations) {
    const auto start = std::chrono::steady_clock::now();
    const auto batch = sample_batch(data, cfg.batch_size, s.rng);
    StepResult step;
    try {
      step = train_step(s, batch, cfg, options.vgg);
    } catch (const Error& e) {
      if (dynamic_cast<const NonFiniteLoss*>(&e) || dynamic_cast<const NonFiniteGradient*>(&e)) {
        const json dump{{"iter", s.iteration + 1}, {"error", e.what()}, {"loss_ema", s.loss_ema}};
        write_text(options.out_dir / "divergence.json", dump.dump(2) + "\n");
      }
      throw;
    }
    LogRow row;
    row.iter = s.iteration;
    row.losses = step.losses;
    row.d_loss = step.d_loss;
    row.d_acc = step.d_acc;
    row.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    log << log_row_json(row) << '\n' << std::flush;
    if (!log) throw IoError("failed writing " + log_path.string());
    if (options.on_row) options.on_row(row);
    res.log.push_back(row);
    saved_last = false;
    if (s.iteration % cfg.checkpoint_every == 0 || s.iteration == cfg.iterations) {
      save_checkpoint(s, cfg, checkpoint_dir(s.iteration));
      saved_last = true;
    }
  }
  if (!saved_last) save_checkpoint(s, cfg, checkpoint_dir(s.iteration));
  res.final_checkpoint = checkpoint_dir(s.iteration);
  return res;
}

}  // namespace dped
