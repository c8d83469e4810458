#include <charconv>
#include <fstream>
#include <iterator>

#include "dped/nets.hpp"
#include "net_common.hpp"

namespace dped {

using detail::cspan;

namespace {

std::string conv_name(int block, int index) {
  return "conv" + std::to_string(block) + "_" + std::to_string(index);
}

int block_width(const VggConfig& cfg, int block) {
  const int w = kVggBlockWidth[block - 1] / cfg.width_divisor;
  if (w < 1) throw InvalidSpec("vgg width_divisor too large");
  return w;
}

}  // namespace

ParamSet<float> vgg_layout(const VggConfig& config) {
  if (config.width_divisor < 1) throw InvalidSpec("vgg width_divisor must be >= 1");
  ParamSet<float> p;
  std::size_t in_c = 3;
  for (int b = 1; b <= 5; ++b) {
    const auto out_c = static_cast<std::size_t>(block_width(config, b));
    for (int i = 1; i <= kVggBlockDepth[b - 1]; ++i) {
      p.add(conv_name(b, i) + ".weight", {out_c, in_c, 3, 3}, false);
      p.add(conv_name(b, i) + ".bias", {out_c}, false);
      in_c = out_c;
    }
  }
  return p;
}

VggWeights<float> vgg_random(std::uint64_t seed, const VggConfig& config) {
  VggWeights<float> w{config, vgg_layout(config), {}};
  detail::he_init_tensors(w.params, seed);
  std::string bytes;
  for (const auto& t : w.params.tensors()) {
    bytes.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  w.checksum = fnv1a_hex(bytes);
  return w;
}

VggWeights<float> vgg_load(const std::filesystem::path& path, const VggConfig& config) {
  auto file = read_weights(path);
  if (file.network_kind != kVggKind) throw SchemaError(path.string() + ": not a vgg19 container");
  const auto layout = vgg_layout(config);
  // Extra tensors (classifier layers) are ignored; the feature stack must be complete.
  ParamSet<float> features;
  for (const auto& ref : layout.tensors()) {
    const auto* t = file.params.find(ref.name);
    if (!t) throw SchemaError(path.string() + ": missing tensor " + ref.name);
    if (t->shape != ref.shape) throw SchemaError(path.string() + ": tensor " + ref.name + " has wrong shape");
    features.add(ref.name, ref.shape, false).data = t->data;
  }
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {config, std::move(features), fnv1a_hex(bytes)};
}

void vgg_save(const VggWeights<float>& w, const std::filesystem::path& path) { write_weights(path, kVggKind, w.params); }

VggLayer parse_vgg_layer(std::string_view name) {
  auto fail = [&] { return UnknownLayer("unknown VGG-19 layer '" + std::string(name) + "'"); };
  if (name.size() < 7 || name.substr(0, 4) != "relu") throw fail();
  const auto sep = name.find('_', 4);
  if (sep == std::string_view::npos) throw fail();
  VggLayer layer;
  auto parse = [&](std::string_view s, int& out) {
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw fail();
  };
  parse(name.substr(4, sep - 4), layer.block);
  parse(name.substr(sep + 1), layer.index);
  if (layer.block < 1 || layer.block > 5 || layer.index < 1 || layer.index > kVggBlockDepth[layer.block - 1]) throw fail();
  return layer;
}

template <typename T>
Tensor<T> vgg_features(const VggWeights<T>& w, const Tensor<T>& x, std::string_view layer_name, VggTape<T>* tape) {
  const VggLayer layer = parse_vgg_layer(layer_name);
  if (x.c != 3) throw ShapeError("vgg expects 3-channel input");
  if (x.h < 32 || x.w < 32) throw ShapeError("vgg input must be at least 32x32");
  if (tape) {
    tape->owner = &w;
    tape->valid = false;
    tape->layer = layer;
    tape->conv_inputs.clear();
    tape->relu_outputs.clear();
    tape->pool_inputs.clear();
  }

  Tensor<T> act = x;
  for (int ch = 0; ch < 3; ++ch) {
    const T mean = static_cast<T>(kVggMeanRgb[ch]);
    for (int i = 0; i < x.n; ++i) {
      T* p = act.plane(i, ch);
      for (std::size_t k = 0; k < act.plane_size(); ++k) p[k] = p[k] * T(255) - mean;
    }
  }

  Tensor<T> tmp;
  for (int b = 1; b <= layer.block; ++b) {
    if (b > 1) {
      if (tape) tape->pool_inputs.push_back(act);
      maxpool2_forward(act, tmp);
      act = std::move(tmp);
    }
    const int depth = b == layer.block ? layer.index : kVggBlockDepth[b - 1];
    for (int i = 1; i <= depth; ++i) {
      const auto name = conv_name(b, i);
      const auto& weight = w.params.at(name + ".weight");
      const auto g = ConvGeometry::same(act.c, static_cast<int>(weight.shape[0]), 3, 1, act.h, act.w, Padding::Zero);
      if (tape) tape->conv_inputs.push_back(act);
      conv2d_forward<T>(act, cspan(w.params, name + ".weight"), cspan(w.params, name + ".bias"), g, tmp);
      leaky_relu_inplace(tmp, T(0));
      if (tape) tape->relu_outputs.push_back(tmp);
      act = std::move(tmp);
    }
  }
  if (tape) tape->valid = true;
  return act;
}

template <typename T>
Tensor<T> vgg_backward_input(const VggWeights<T>& w, VggTape<T>& tape, const Tensor<T>& grad_features) {
  if (!tape.valid || tape.owner != &w) throw StaleTape("vgg_backward_input without a matching forward pass");
  if (tape.relu_outputs.empty() || !grad_features.same_shape(tape.relu_outputs.back())) {
    throw ShapeError("vgg_backward_input: gradient shape");
  }
  tape.valid = false;
  Tensor<T> grad = grad_features;
  Tensor<T> tmp;
  int conv_k = static_cast<int>(tape.conv_inputs.size()) - 1;
  int pool_k = static_cast<int>(tape.pool_inputs.size()) - 1;
  for (int b = tape.layer.block; b >= 1; --b) {
    const int depth = b == tape.layer.block ? tape.layer.index : kVggBlockDepth[b - 1];
    for (int i = depth; i >= 1; --i, --conv_k) {
      const auto name = conv_name(b, i);
      leaky_relu_backward_inplace(grad, tape.relu_outputs[conv_k], T(0));
      const auto& input = tape.conv_inputs[conv_k];
      const auto& weight = w.params.at(name + ".weight");
      const auto g = ConvGeometry::same(input.c, static_cast<int>(weight.shape[0]), 3, 1, input.h, input.w, Padding::Zero);
      conv2d_backward<T>(input, cspan(w.params, name + ".weight"), grad, g, &tmp, {}, {});
      grad = std::move(tmp);
    }
    if (b > 1) {
      maxpool2_backward(tape.pool_inputs[pool_k], grad, tmp);
      grad = std::move(tmp);
      --pool_k;
    }
  }
  for (auto& v : grad.data) v *= T(255);
  return grad;
}

template Tensor<float> vgg_features<float>(const VggWeights<float>&, const Tensor<float>&, std::string_view,
                                           VggTape<float>*);
template Tensor<double> vgg_features<double>(const VggWeights<double>&, const Tensor<double>&, std::string_view,
                                             VggTape<double>*);
template Tensor<float> vgg_backward_input<float>(const VggWeights<float>&, VggTape<float>&, const Tensor<float>&);
template Tensor<double> vgg_backward_input<double>(const VggWeights<double>&, VggTape<double>&, const Tensor<double>&);

}  // namespace dped
