#include <cmath>

#include "dped/nets.hpp"
#include "net_common.hpp"

namespace dped {

using detail::cspan;
using detail::mspan;

namespace {

std::string conv_name(int i) { return "conv" + std::to_string(i + 1); }
std::string bn_name(int i) { return "bn" + std::to_string(i + 1); }

// Batch-norm follows every convolution except the first.
bool has_bn(int i) { return i > 0; }

std::array<ConvGeometry, 5> geometries(const DiscriminatorConfig& cfg) {
  std::array<ConvGeometry, 5> g;
  int in_c = 1;
  int size = cfg.input_size;
  for (int i = 0; i < 5; ++i) {
    g[i] = ConvGeometry::same(in_c, cfg.channels[i], cfg.kernels[i], cfg.strides[i], size, size, Padding::Zero);
    in_c = cfg.channels[i];
    size = g[i].out_h;
  }
  return g;
}

ParamSet<float> discriminator_layout(const DiscriminatorConfig& cfg) {
  ParamSet<float> p;
  std::size_t in_c = 1;
  for (int i = 0; i < 5; ++i) {
    const auto out_c = static_cast<std::size_t>(cfg.channels[i]);
    const auto k = static_cast<std::size_t>(cfg.kernels[i]);
    p.add(conv_name(i) + ".weight", {out_c, in_c, k, k});
    p.add(conv_name(i) + ".bias", {out_c});
    if (has_bn(i)) detail::add_batchnorm(p, bn_name(i), out_c);
    in_c = out_c;
  }
  const auto flat = static_cast<std::size_t>(cfg.channels[4]) * cfg.final_size() * cfg.final_size();
  p.add("fc1.weight", {static_cast<std::size_t>(cfg.fc_units), flat});
  p.add("fc1.bias", {static_cast<std::size_t>(cfg.fc_units)});
  p.add("fc2.weight", {1, static_cast<std::size_t>(cfg.fc_units)});
  p.add("fc2.bias", {1});
  return p;
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace

int DiscriminatorConfig::final_size() const {
  int size = input_size;
  for (int s : strides) size = (size + s - 1) / s;
  return size;
}

template <typename T>
DiscriminatorWeights<T> discriminator_zeros(const DiscriminatorConfig& config) {
  return {config, discriminator_layout(config).template cast<T>()};
}

DiscriminatorWeights<float> discriminator_init(std::uint64_t seed, const DiscriminatorConfig& config) {
  auto p = discriminator_layout(config);
  detail::he_init_tensors(p, seed);
  return {config, std::move(p)};
}

template <typename T>
DiscriminatorOutput<T> discriminator_forward(const DiscriminatorWeights<T>& w, const Tensor<T>& x, Mode mode,
                                             DiscriminatorTape<T>* tape) {
  const auto& cfg = w.config;
  const auto& p = w.params;
  if (x.c != 1 || x.h != cfg.input_size || x.w != cfg.input_size) {
    throw ShapeError("discriminator expects N x 1 x " + std::to_string(cfg.input_size) + " x " +
                     std::to_string(cfg.input_size) + " input");
  }
  if (tape && mode != Mode::Train) throw ShapeError("discriminator tape requires train mode");
  const auto geo = geometries(cfg);
  const T slope = static_cast<T>(cfg.leaky_slope);
  if (tape) {
    tape->owner = &w;
    tape->valid = false;
    tape->input = x;
  }

  Tensor<T> act = x;
  Tensor<T> tmp;
  for (int i = 0; i < 5; ++i) {
    conv2d_forward<T>(act, cspan(p, conv_name(i) + ".weight"), cspan(p, conv_name(i) + ".bias"), geo[i], tmp);
    if (has_bn(i)) {
      const auto n = bn_name(i);
      if (mode == Mode::Train) {
        Tensor<T> xhat_scratch;
        BatchNormStats stats_scratch;
        batchnorm_forward_train<T>(tmp, cspan(p, n + ".gamma"), cspan(p, n + ".beta"), cfg.bn_eps, act,
                                   tape ? tape->xhats[i] : xhat_scratch, tape ? tape->stats[i] : stats_scratch);
      } else {
        batchnorm_forward_infer<T>(tmp, cspan(p, n + ".gamma"), cspan(p, n + ".beta"), cspan(p, n + ".running_mean"),
                                   cspan(p, n + ".running_var"), cfg.bn_eps, act);
      }
    } else {
      act = std::move(tmp);
    }
    leaky_relu_inplace(act, slope);
    if (tape) tape->acts[i] = act;
  }

  dense_forward<T>(act, cspan(p, "fc1.weight"), cspan(p, "fc1.bias"), cfg.fc_units, tmp);
  leaky_relu_inplace(tmp, slope);
  if (tape) tape->fc_act = tmp;
  Tensor<T> logits;
  dense_forward<T>(tmp, cspan(p, "fc2.weight"), cspan(p, "fc2.bias"), 1, logits);

  DiscriminatorOutput<T> out;
  out.logits = logits.data;
  out.probs.resize(out.logits.size());
  for (std::size_t i = 0; i < out.logits.size(); ++i) out.probs[i] = sigmoid(out.logits[i]);
  if (tape) tape->valid = true;
  return out;
}

template <typename T>
Gradients<T> discriminator_backward(const DiscriminatorWeights<T>& w, DiscriminatorTape<T>& tape,
                                    const std::vector<T>& grad_logits, bool want_param_grads) {
  if (!tape.valid || tape.owner != &w) throw StaleTape("discriminator_backward without a matching forward pass");
  if (grad_logits.size() != static_cast<std::size_t>(tape.input.n)) throw ShapeError("discriminator_backward: batch size");
  tape.valid = false;
  const auto& cfg = w.config;
  const auto& p = w.params;
  const auto geo = geometries(cfg);
  const T slope = static_cast<T>(cfg.leaky_slope);

  Gradients<T> grads;
  if (want_param_grads) grads.params = p.zeros_like_trainable();
  auto& gp = grads.params;
  auto grad_span = [&](const std::string& name) { return want_param_grads ? mspan(gp, name) : std::span<T>{}; };

  Tensor<T> d_logits(tape.input.n, 1, 1, 1);
  d_logits.data = grad_logits;
  Tensor<T> d_fc;
  dense_backward<T>(tape.fc_act, cspan(p, "fc2.weight"), d_logits, &d_fc, grad_span("fc2.weight"), grad_span("fc2.bias"));
  leaky_relu_backward_inplace(d_fc, tape.fc_act, slope);
  Tensor<T> d_act;
  dense_backward<T>(tape.acts[4], cspan(p, "fc1.weight"), d_fc, &d_act, grad_span("fc1.weight"), grad_span("fc1.bias"));
  d_act.n = tape.acts[4].n;
  d_act.c = tape.acts[4].c;
  d_act.h = tape.acts[4].h;
  d_act.w = tape.acts[4].w;

  Tensor<T> d_pre;
  for (int i = 4; i >= 0; --i) {
    leaky_relu_backward_inplace(d_act, tape.acts[i], slope);
    if (has_bn(i)) {
      const auto n = bn_name(i);
      batchnorm_backward<T>(d_act, tape.xhats[i], cspan(p, n + ".gamma"), tape.stats[i], d_pre, grad_span(n + ".gamma"),
                            grad_span(n + ".beta"));
    } else {
      d_pre = std::move(d_act);
    }
    const Tensor<T>& input = i == 0 ? tape.input : tape.acts[i - 1];
    conv2d_backward<T>(input, cspan(p, conv_name(i) + ".weight"), d_pre, geo[i], &d_act,
                       grad_span(conv_name(i) + ".weight"), grad_span(conv_name(i) + ".bias"));
  }
  grads.input = std::move(d_act);
  return grads;
}

template <typename T>
void discriminator_update_running_stats(DiscriminatorWeights<T>& w, const DiscriminatorTape<T>& tape, double momentum) {
  for (int i = 0; i < 5; ++i) {
    if (!has_bn(i)) continue;
    const auto n = bn_name(i);
    batchnorm_update_running<T>(tape.stats[i], momentum, mspan(w.params, n + ".running_mean"),
                                mspan(w.params, n + ".running_var"));
  }
}

void save_discriminator(const DiscriminatorWeights<float>& w, const std::filesystem::path& path) {
  write_weights(path, kDiscriminatorKind, w.params);
}

DiscriminatorWeights<float> discriminator_from_params(ParamSet<float> params) {
  DiscriminatorConfig cfg;
  for (int i = 0; i < 5; ++i) {
    const auto* t = params.find(conv_name(i) + ".weight");
    if (!t || t->shape.size() != 4) throw SchemaError("discriminator: missing " + conv_name(i) + ".weight");
    cfg.channels[i] = static_cast<int>(t->shape[0]);
    cfg.kernels[i] = static_cast<int>(t->shape[2]);
  }
  const auto* fc1 = params.find("fc1.weight");
  if (!fc1 || fc1->shape.size() != 2) throw SchemaError("discriminator: missing fc1.weight");
  cfg.fc_units = static_cast<int>(fc1->shape[0]);
  const auto flat = fc1->shape[1];
  bool found = false;
  for (int size = 8; size <= 4096 && !found; ++size) {
    cfg.input_size = size;
    const auto f = static_cast<std::size_t>(cfg.final_size());
    found = f * f * static_cast<std::size_t>(cfg.channels[4]) == flat;
  }
  if (!found) throw SchemaError("discriminator: fc1 input width matches no input size");
  // Several sizes share a final grid; the canonical patch size wins when it fits.
  DiscriminatorConfig canonical = cfg;
  canonical.input_size = 100;
  if (static_cast<std::size_t>(canonical.final_size() * canonical.final_size()) * cfg.channels[4] == flat) cfg = canonical;
  return {cfg, detail::conform_to_layout(params, discriminator_layout(cfg), "discriminator")};
}

DiscriminatorWeights<float> load_discriminator(const std::filesystem::path& path) {
  return discriminator_from_params(read_weights(path, kDiscriminatorKind));
}

#define DPED_INSTANTIATE_DISCRIMINATOR(T)                                                                      \
  template DiscriminatorWeights<T> discriminator_zeros<T>(const DiscriminatorConfig&);                         \
  template DiscriminatorOutput<T> discriminator_forward<T>(const DiscriminatorWeights<T>&, const Tensor<T>&,   \
                                                           Mode, DiscriminatorTape<T>*);                       \
  template Gradients<T> discriminator_backward<T>(const DiscriminatorWeights<T>&, DiscriminatorTape<T>&,       \
                                                  const std::vector<T>&, bool);                                \
  template void discriminator_update_running_stats<T>(DiscriminatorWeights<T>&, const DiscriminatorTape<T>&, double);

DPED_INSTANTIATE_DISCRIMINATOR(float)
DPED_INSTANTIATE_DISCRIMINATOR(double)

#undef DPED_INSTANTIATE_DISCRIMINATOR

}  // namespace dped
