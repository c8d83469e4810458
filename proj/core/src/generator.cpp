#include <algorithm>
#include <cmath>

#include "dped/nets.hpp"
#include "net_common.hpp"

namespace dped {

using detail::cspan;
using detail::mspan;

namespace {

std::string block_name(int b, const char* part) { return "res" + std::to_string(b) + "." + part; }

ParamSet<float> generator_layout(const GeneratorConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.channels);
  ParamSet<float> p;
  p.add("conv_in.weight", {c, 3, 9, 9});
  p.add("conv_in.bias", {c});
  for (int b = 0; b < cfg.blocks; ++b) {
    p.add(block_name(b, "convA.weight"), {c, c, 3, 3});
    p.add(block_name(b, "convA.bias"), {c});
    detail::add_batchnorm(p, block_name(b, "bnA"), c);
    p.add(block_name(b, "convB.weight"), {c, c, 3, 3});
    p.add(block_name(b, "convB.bias"), {c});
    detail::add_batchnorm(p, block_name(b, "bnB"), c);
  }
  p.add("conv_p1.weight", {c, c, 3, 3});
  p.add("conv_p1.bias", {c});
  p.add("conv_p2.weight", {c, c, 3, 3});
  p.add("conv_p2.bias", {c});
  p.add("conv_out.weight", {3, c, 9, 9});
  p.add("conv_out.bias", {3});
  return p;
}

template <typename T>
ConvGeometry gen_conv(int in_c, int out_c, int k, int h, int w) {
  return ConvGeometry::same(in_c, out_c, k, 1, h, w, Padding::Reflect);
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  leaky_relu_inplace(t, T(0));
}

template <typename T>
void relu_mask(Tensor<T>& grad, const Tensor<T>& act) {
  leaky_relu_backward_inplace(grad, act, T(0));
}

template <typename T>
void conv(const ParamSet<T>& p, const std::string& name, const Tensor<T>& x, const ConvGeometry& g, Tensor<T>& y) {
  conv2d_forward<T>(x, cspan(p, name + ".weight"), cspan(p, name + ".bias"), g, y);
}

template <typename T>
void conv_back(const ParamSet<T>& p, ParamSet<T>& grads, const std::string& name, const Tensor<T>& x,
               const Tensor<T>& dy, const ConvGeometry& g, Tensor<T>* dx) {
  conv2d_backward<T>(x, cspan(p, name + ".weight"), dy, g, dx, mspan(grads, name + ".weight"),
                     mspan(grads, name + ".bias"));
}

template <typename T>
void bn(const ParamSet<T>& p, const std::string& name, const Tensor<T>& x, Mode mode, double eps, Tensor<T>& y,
        Tensor<T>* xhat, BatchNormStats* stats) {
  if (mode == Mode::Train) {
    Tensor<T> xhat_scratch;
    BatchNormStats stats_scratch;
    batchnorm_forward_train<T>(x, cspan(p, name + ".gamma"), cspan(p, name + ".beta"), eps, y,
                               xhat ? *xhat : xhat_scratch, stats ? *stats : stats_scratch);
  } else {
    batchnorm_forward_infer<T>(x, cspan(p, name + ".gamma"), cspan(p, name + ".beta"), cspan(p, name + ".running_mean"),
                               cspan(p, name + ".running_var"), eps, y);
  }
}

}  // namespace

std::size_t generator_parameter_count(const GeneratorConfig& cfg) {
  const std::size_t c = cfg.channels;
  const std::size_t conv_in = c * 3 * 81 + c;
  const std::size_t block = 2 * (c * c * 9 + c) + 2 * (2 * c);  // two convs + two (gamma, beta)
  const std::size_t tail = 2 * (c * c * 9 + c) + (3 * c * 81 + 3);
  return conv_in + cfg.blocks * block + tail;
}

template <typename T>
GeneratorWeights<T> generator_zeros(const GeneratorConfig& config) {
  return {config, generator_layout(config).template cast<T>()};
}

GeneratorWeights<float> generator_init(std::uint64_t seed, const GeneratorConfig& config) {
  auto p = generator_layout(config);
  detail::he_init_tensors(p, seed);
  return {config, std::move(p)};
}

std::vector<double> identity_generator_knots(int hinges) {
  // Knots crowd toward 0 and 1 where the inverse tanh bends hardest, and are
  // snapped to the 8-bit grid.
  std::vector<double> knots;
  for (int j = 0; j < hinges; ++j) {
    const double w = -1.0 + 2.0 * j / hinges;
    const double t = (std::copysign(1.0 - std::pow(1.0 - std::abs(w), 1.5), w) + 1.0) / 2.0;
    knots.push_back(std::round(t * 255.0) / 255.0);
  }
  knots.erase(std::unique(knots.begin(), knots.end()), knots.end());
  return knots;
}

GeneratorWeights<float> identity_generator(const GeneratorConfig& config) {
  const int hinges = config.channels / 3;
  if (hinges < 1) throw InvalidSpec("identity_generator needs at least 3 channels");
  auto w = generator_zeros<float>(config);
  auto& p = w.params;
  const int c = config.channels;
  auto knots = identity_generator_knots(hinges);
  const int m = static_cast<int>(knots.size());
  auto inverse = [&](double v) {
    const double u = std::clamp((v - config.tanh_offset) / config.tanh_scale, -1.0 + 1e-12, 1.0 - 1e-12);
    return std::atanh(u);
  };
  std::vector<double> points = knots;
  points.push_back(1.0);
  std::vector<double> slopes(m);
  for (int j = 0; j < m; ++j) slopes[j] = (inverse(points[j + 1]) - inverse(points[j])) / (points[j + 1] - points[j]);

  auto tap = [](NamedTensor<float>& t, int o, int i, int k, int y, int x) -> float& {
    return t.data[((static_cast<std::size_t>(o) * t.shape[1] + i) * k + y) * k + x];
  };
  auto& conv_in_w = p.at("conv_in.weight");
  auto& conv_in_b = p.at("conv_in.bias");
  auto& out_w = p.at("conv_out.weight");
  auto& out_b = p.at("conv_out.bias");
  for (int col = 0; col < 3; ++col) {
    out_b.data[col] = static_cast<float>(inverse(points[0]));
    for (int j = 0; j < m; ++j) {
      const int ch = col * m + j;
      tap(conv_in_w, ch, col, 9, 4, 4) = 1.0f;
      conv_in_b.data[ch] = static_cast<float>(-knots[j]);
      const double coeff = j == 0 ? slopes[0] : slopes[j] - slopes[j - 1];
      tap(out_w, col, ch, 9, 4, 4) = static_cast<float>(coeff);
    }
  }
  for (const char* name : {"conv_p1.weight", "conv_p2.weight"}) {
    auto& t = p.at(name);
    for (int ch = 0; ch < c; ++ch) tap(t, ch, ch, 3, 1, 1) = 1.0f;
  }
  return w;
}

template <typename T>
Tensor<T> generator_forward(const GeneratorWeights<T>& w, const Tensor<T>& x, Mode mode, GeneratorTape<T>* tape) {
  const auto& cfg = w.config;
  const auto& p = w.params;
  if (x.c != 3) throw ShapeError("generator expects 3-channel input");
  if (x.h < 16 || x.w < 16) throw ShapeError("generator input must be at least 16x16");
  if (tape && mode != Mode::Train) throw ShapeError("generator tape requires train mode");
  const int c = cfg.channels;
  const int h = x.h;
  const int wd = x.w;
  const auto g_in = gen_conv<T>(3, c, 9, h, wd);
  const auto g_mid = gen_conv<T>(c, c, 3, h, wd);
  const auto g_out = gen_conv<T>(c, 3, 9, h, wd);

  if (tape) {
    tape->owner = &w;
    tape->valid = false;
    tape->input = x;
    tape->blocks.assign(cfg.blocks, {});
  }

  Tensor<T> act;
  conv(p, "conv_in", x, g_in, act);
  relu_inplace(act);
  if (tape) tape->act_in = act;

  Tensor<T> tmp;
  Tensor<T> normed;
  for (int b = 0; b < cfg.blocks; ++b) {
    auto* bt = tape ? &tape->blocks[b] : nullptr;
    if (bt) bt->input = act;
    conv(p, block_name(b, "convA"), act, g_mid, tmp);
    bn(p, block_name(b, "bnA"), tmp, mode, cfg.bn_eps, normed, bt ? &bt->xhat_a : nullptr, bt ? &bt->stats_a : nullptr);
    relu_inplace(normed);
    if (bt) bt->act_a = normed;
    conv(p, block_name(b, "convB"), normed, g_mid, tmp);
    bn(p, block_name(b, "bnB"), tmp, mode, cfg.bn_eps, normed, bt ? &bt->xhat_b : nullptr, bt ? &bt->stats_b : nullptr);
    relu_inplace(normed);
    if (bt) bt->act_b = normed;
    for (std::size_t k = 0; k < act.data.size(); ++k) act.data[k] += normed.data[k];
  }

  conv(p, "conv_p1", act, g_mid, tmp);
  relu_inplace(tmp);
  if (tape) tape->act_p1 = tmp;
  conv(p, "conv_p2", tmp, g_mid, act);
  relu_inplace(act);
  if (tape) tape->act_p2 = act;
  conv(p, "conv_out", act, g_out, tmp);

  const T scale = static_cast<T>(cfg.tanh_scale);
  const T offset = static_cast<T>(cfg.tanh_offset);
  Tensor<T> out(x.n, 3, h, wd);
  for (std::size_t k = 0; k < out.data.size(); ++k) {
    out.data[k] = std::clamp(scale * std::tanh(tmp.data[k]) + offset, T(0), T(1));
  }
  if (tape) {
    tape->pre_out = std::move(tmp);
    tape->output = out;
    tape->valid = true;
  }
  return out;
}

template <typename T>
Gradients<T> generator_backward(const GeneratorWeights<T>& w, GeneratorTape<T>& tape, const Tensor<T>& grad_output) {
  if (!tape.valid || tape.owner != &w) throw StaleTape("generator_backward without a matching forward pass");
  require_same_shape(grad_output, tape.output, "generator_backward");
  tape.valid = false;
  const auto& cfg = w.config;
  const auto& p = w.params;
  const int c = cfg.channels;
  const int h = tape.input.h;
  const int wd = tape.input.w;
  const auto g_in = gen_conv<T>(3, c, 9, h, wd);
  const auto g_mid = gen_conv<T>(c, c, 3, h, wd);
  const auto g_out = gen_conv<T>(c, 3, 9, h, wd);

  Gradients<T> grads;
  grads.params = p.zeros_like_trainable();
  auto& gp = grads.params;

  const T scale = static_cast<T>(cfg.tanh_scale);
  const T offset = static_cast<T>(cfg.tanh_offset);
  Tensor<T> dz(grad_output.n, 3, h, wd);
  for (std::size_t k = 0; k < dz.data.size(); ++k) {
    const T th = std::tanh(tape.pre_out.data[k]);
    const T y = scale * th + offset;
    dz.data[k] = (y < T(0) || y > T(1)) ? T(0) : grad_output.data[k] * scale * (T(1) - th * th);
  }

  Tensor<T> d_act;
  conv_back(p, gp, "conv_out", tape.act_p2, dz, g_out, &d_act);
  relu_mask(d_act, tape.act_p2);
  Tensor<T> d_tmp;
  conv_back(p, gp, "conv_p2", tape.act_p1, d_act, g_mid, &d_tmp);
  relu_mask(d_tmp, tape.act_p1);
  const Tensor<T>& last_input = cfg.blocks > 0 ? tape.blocks.back().input : tape.act_in;
  // act after the last block is last_input + last act_b; conv_p1 saw that sum.
  Tensor<T> block_out = last_input;
  if (cfg.blocks > 0) {
    const auto& ab = tape.blocks.back().act_b;
    for (std::size_t k = 0; k < block_out.data.size(); ++k) block_out.data[k] += ab.data[k];
  }
  Tensor<T> d_h;
  conv_back(p, gp, "conv_p1", block_out, d_tmp, g_mid, &d_h);

  Tensor<T> d_branch;
  Tensor<T> d_norm;
  for (int b = cfg.blocks - 1; b >= 0; --b) {
    auto& bt = tape.blocks[b];
    d_branch = d_h;
    relu_mask(d_branch, bt.act_b);
    batchnorm_backward<T>(d_branch, bt.xhat_b, cspan(p, block_name(b, "bnB.gamma")), bt.stats_b, d_norm,
                          mspan(gp, block_name(b, "bnB.gamma")), mspan(gp, block_name(b, "bnB.beta")));
    conv_back(p, gp, block_name(b, "convB"), bt.act_a, d_norm, g_mid, &d_branch);
    relu_mask(d_branch, bt.act_a);
    batchnorm_backward<T>(d_branch, bt.xhat_a, cspan(p, block_name(b, "bnA.gamma")), bt.stats_a, d_norm,
                          mspan(gp, block_name(b, "bnA.gamma")), mspan(gp, block_name(b, "bnA.beta")));
    conv_back(p, gp, block_name(b, "convA"), bt.input, d_norm, g_mid, &d_branch);
    for (std::size_t k = 0; k < d_h.data.size(); ++k) d_h.data[k] += d_branch.data[k];
  }

  relu_mask(d_h, tape.act_in);
  conv_back(p, gp, "conv_in", tape.input, d_h, g_in, &grads.input);
  return grads;
}

template <typename T>
void generator_update_running_stats(GeneratorWeights<T>& w, const GeneratorTape<T>& tape, double momentum) {
  for (int b = 0; b < static_cast<int>(tape.blocks.size()); ++b) {
    const auto& bt = tape.blocks[b];
    batchnorm_update_running<T>(bt.stats_a, momentum, mspan(w.params, block_name(b, "bnA.running_mean")),
                                mspan(w.params, block_name(b, "bnA.running_var")));
    batchnorm_update_running<T>(bt.stats_b, momentum, mspan(w.params, block_name(b, "bnB.running_mean")),
                                mspan(w.params, block_name(b, "bnB.running_var")));
  }
}

void save_generator(const GeneratorWeights<float>& w, const std::filesystem::path& path) {
  write_weights(path, kGeneratorKind, w.params);
}

GeneratorWeights<float> generator_from_params(ParamSet<float> params) {
  const auto* conv_in = params.find("conv_in.weight");
  if (!conv_in || conv_in->shape.size() != 4) throw SchemaError("generator: missing conv_in.weight");
  GeneratorConfig cfg;
  cfg.channels = static_cast<int>(conv_in->shape[0]);
  cfg.blocks = 0;
  while (params.find(block_name(cfg.blocks, "convA.weight"))) ++cfg.blocks;
  return {cfg, detail::conform_to_layout(params, generator_layout(cfg), "generator")};
}

GeneratorWeights<float> load_generator(const std::filesystem::path& path) {
  return generator_from_params(read_weights(path, kGeneratorKind));
}

#define DPED_INSTANTIATE_GENERATOR(T)                                                                             \
  template GeneratorWeights<T> generator_zeros<T>(const GeneratorConfig&);                                        \
  template Tensor<T> generator_forward<T>(const GeneratorWeights<T>&, const Tensor<T>&, Mode, GeneratorTape<T>*); \
  template Gradients<T> generator_backward<T>(const GeneratorWeights<T>&, GeneratorTape<T>&, const Tensor<T>&);   \
  template void generator_update_running_stats<T>(GeneratorWeights<T>&, const GeneratorTape<T>&, double);

DPED_INSTANTIATE_GENERATOR(float)
DPED_INSTANTIATE_GENERATOR(double)

#undef DPED_INSTANTIATE_GENERATOR

}  // namespace dped
