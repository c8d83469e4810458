#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dped/layers.hpp"
#include "dped/params.hpp"
#include "dped/tensor.hpp"

namespace dped {

// ---------------------------------------------------------------------------
// Generator: 9x9 conv, residual blocks, two 3x3 convs, 9x9 conv, scaled tanh.
// ---------------------------------------------------------------------------

struct GeneratorConfig {
  int channels = 64;
  int blocks = 4;
  double tanh_scale = 0.58;
  double tanh_offset = 0.5;
  double bn_eps = 1e-5;

  /// Pixels of context each output pixel depends on, per side.
  int receptive_radius() const { return 4 + 2 * blocks + 2 + 4; }
  bool operator==(const GeneratorConfig&) const = default;
};

template <typename T>
struct GeneratorWeights {
  GeneratorConfig config;
  ParamSet<T> params;

  template <typename U>
  GeneratorWeights<U> cast() const {
    return {config, params.template cast<U>()};
  }
};

/// Closed-form parameter count (trainable tensors only).
std::size_t generator_parameter_count(const GeneratorConfig& config);

/// All-zero convolutions, identity batch-norm (gamma 1, running var 1).
template <typename T>
GeneratorWeights<T> generator_zeros(const GeneratorConfig& config = {});

/// He-scaled truncated-normal convolutions, zero biases; deterministic per seed.
GeneratorWeights<float> generator_init(std::uint64_t seed, const GeneratorConfig& config = {});

/// Weights whose output reproduces the input to within 0.0011 per pixel for
/// the default 64-channel configuration. The scaled tanh is inverted by a
/// piecewise-linear ReLU expansion; inputs on its knots are reproduced exactly.
GeneratorWeights<float> identity_generator(const GeneratorConfig& config = {});

/// Knot positions used by identity_generator, in [0, 1).
std::vector<double> identity_generator_knots(int hinges);

template <typename T>
struct GeneratorTape {
  struct Block {
    Tensor<T> input, xhat_a, act_a, xhat_b, act_b;
    BatchNormStats stats_a, stats_b;
  };
  const void* owner = nullptr;
  bool valid = false;
  Tensor<T> input, act_in, act_p1, act_p2, pre_out, output;
  std::vector<Block> blocks;
};

template <typename T>
struct Gradients {
  ParamSet<T> params;
  Tensor<T> input;
};

/// NCHW batch with 3 channels, H, W >= 16. Train mode uses batch statistics;
/// pass a tape (train mode only) to enable generator_backward.
template <typename T>
Tensor<T> generator_forward(const GeneratorWeights<T>& w, const Tensor<T>& x, Mode mode,
                            GeneratorTape<T>* tape = nullptr);

/// Consumes the tape; a second call or a tape from different weights throws StaleTape.
template <typename T>
Gradients<T> generator_backward(const GeneratorWeights<T>& w, GeneratorTape<T>& tape, const Tensor<T>& grad_output);

template <typename T>
void generator_update_running_stats(GeneratorWeights<T>& w, const GeneratorTape<T>& tape, double momentum = 0.1);

void save_generator(const GeneratorWeights<float>& w, const std::filesystem::path& path);
GeneratorWeights<float> load_generator(const std::filesystem::path& path);
/// Validates names and shapes, inferring the configuration from tensor shapes.
GeneratorWeights<float> generator_from_params(ParamSet<float> params);

// ---------------------------------------------------------------------------
// Discriminator: five strided convolutions, dense layer, sigmoid output.
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
  std::array<int, 5> channels{48, 128, 192, 192, 128};
  std::array<int, 5> kernels{11, 5, 3, 3, 3};
  std::array<int, 5> strides{4, 2, 1, 1, 2};
  int fc_units = 1024;
  int input_size = 100;
  double leaky_slope = 0.2;
  double bn_eps = 1e-5;

  /// Spatial side after the last convolution.
  int final_size() const;
  bool operator==(const DiscriminatorConfig&) const = default;
};

template <typename T>
struct DiscriminatorWeights {
  DiscriminatorConfig config;
  ParamSet<T> params;

  template <typename U>
  DiscriminatorWeights<U> cast() const {
    return {config, params.template cast<U>()};
  }
};

template <typename T>
DiscriminatorWeights<T> discriminator_zeros(const DiscriminatorConfig& config = {});
DiscriminatorWeights<float> discriminator_init(std::uint64_t seed, const DiscriminatorConfig& config = {});

template <typename T>
struct DiscriminatorOutput {
  std::vector<T> logits;
  std::vector<T> probs;
};

template <typename T>
struct DiscriminatorTape {
  const void* owner = nullptr;
  bool valid = false;
  Tensor<T> input, fc_act;
  std::array<Tensor<T>, 5> acts;
  std::array<Tensor<T>, 5> xhats;
  std::array<BatchNormStats, 5> stats;
};

/// Input is N x 1 x S x S grayscale with S = config.input_size.
template <typename T>
DiscriminatorOutput<T> discriminator_forward(const DiscriminatorWeights<T>& w, const Tensor<T>& x, Mode mode,
                                             DiscriminatorTape<T>* tape = nullptr);

/// grad_logits holds dL/dlogit per batch item. Without want_param_grads only
/// the input gradient is computed and params stays empty.
template <typename T>
Gradients<T> discriminator_backward(const DiscriminatorWeights<T>& w, DiscriminatorTape<T>& tape,
                                    const std::vector<T>& grad_logits, bool want_param_grads = true);

template <typename T>
void discriminator_update_running_stats(DiscriminatorWeights<T>& w, const DiscriminatorTape<T>& tape,
                                        double momentum = 0.1);

void save_discriminator(const DiscriminatorWeights<float>& w, const std::filesystem::path& path);
DiscriminatorWeights<float> load_discriminator(const std::filesystem::path& path);
DiscriminatorWeights<float> discriminator_from_params(ParamSet<float> params);

// ---------------------------------------------------------------------------
// VGG-19 feature extractor (frozen).
// ---------------------------------------------------------------------------

struct VggConfig {
  /// Divides every canonical channel count; 1 is the canonical network.
  int width_divisor = 1;
  bool operator==(const VggConfig&) const = default;
};

inline constexpr std::array<int, 5> kVggBlockDepth{2, 2, 4, 4, 4};
inline constexpr std::array<int, 5> kVggBlockWidth{64, 128, 256, 512, 512};
inline constexpr std::array<double, 3> kVggMeanRgb{123.68, 116.779, 103.939};
inline constexpr std::string_view kDefaultContentLayer = "relu5_4";

template <typename T>
struct VggWeights {
  VggConfig config;
  ParamSet<T> params;
  std::string checksum;

  template <typename U>
  VggWeights<U> cast() const {
    return {config, params.template cast<U>(), checksum};
  }
};

/// Canonical tensor names and shapes ([out, in, 3, 3] weights, [out] biases).
ParamSet<float> vgg_layout(const VggConfig& config = {});
VggWeights<float> vgg_random(std::uint64_t seed, const VggConfig& config = {});
VggWeights<float> vgg_load(const std::filesystem::path& path, const VggConfig& config = {});
void vgg_save(const VggWeights<float>& w, const std::filesystem::path& path);

struct VggLayer {
  int block = 0;  // 1-based
  int index = 0;  // 1-based within block
};
/// Parses "reluB_I"; throws UnknownLayer.
VggLayer parse_vgg_layer(std::string_view name);

template <typename T>
struct VggTape {
  const void* owner = nullptr;
  bool valid = false;
  VggLayer layer;
  std::vector<Tensor<T>> conv_inputs;
  std::vector<Tensor<T>> relu_outputs;
  std::vector<Tensor<T>> pool_inputs;
};

/// Features after the named ReLU for an NCHW batch in [0,1] (H, W >= 32).
template <typename T>
Tensor<T> vgg_features(const VggWeights<T>& w, const Tensor<T>& x, std::string_view layer,
                       VggTape<T>* tape = nullptr);

/// Input gradient only; VGG parameters are frozen.
template <typename T>
Tensor<T> vgg_backward_input(const VggWeights<T>& w, VggTape<T>& tape, const Tensor<T>& grad_features);

inline constexpr std::string_view kGeneratorKind = "generator";
inline constexpr std::string_view kDiscriminatorKind = "discriminator";
inline constexpr std::string_view kVggKind = "vgg19";

}  // namespace dped
