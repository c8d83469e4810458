#pragma once

#include <span>
#include <vector>

#include "dped/tensor.hpp"

namespace dped {

enum class Mode { Train, Infer };

enum class Padding { Zero, Reflect };

/// Geometry of a 2-D convolution (cross-correlation) over an NCHW batch.
/// Weights are laid out [out_c, in_c, kernel, kernel].
struct ConvGeometry {
  int in_c = 0;
  int out_c = 0;
  int kernel = 1;
  int stride = 1;
  int in_h = 0;
  int in_w = 0;
  int out_h = 0;
  int out_w = 0;
  int pad_top = 0;
  int pad_left = 0;
  Padding padding = Padding::Zero;

  /// "Same" geometry: out = ceil(in / stride); any odd leftover padding goes
  /// to the bottom/right edge.
  static ConvGeometry same(int in_c, int out_c, int kernel, int stride, int in_h, int in_w, Padding padding);

  std::size_t weight_size() const { return static_cast<std::size_t>(out_c) * in_c * kernel * kernel; }
};

template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias, const ConvGeometry& g,
                    Tensor<T>& y);

/// Accumulates into dweight and dbias (skipped when dweight is empty); writes dx
/// when non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& dy, const ConvGeometry& g,
                     Tensor<T>* dx, std::span<T> dweight, std::span<T> dbias);

/// Per-channel statistics recorded by a train-mode batch-norm forward.
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;      // biased, used for normalization
  std::vector<double> inv_std;  // 1 / sqrt(var + eps)
  std::size_t count = 0;        // elements per channel
};

template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta, double eps,
                             Tensor<T>& y, Tensor<T>& xhat, BatchNormStats& stats);

template <typename T>
void batchnorm_forward_infer(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             std::span<const T> running_mean, std::span<const T> running_var, double eps, Tensor<T>& y);

/// Accumulates dgamma/dbeta unless they are empty.
template <typename T>
void batchnorm_backward(const Tensor<T>& dy, const Tensor<T>& xhat, std::span<const T> gamma, const BatchNormStats& stats,
                        Tensor<T>& dx, std::span<T> dgamma, std::span<T> dbeta);

/// running <- (1 - momentum) * running + momentum * batch (unbiased variance).
template <typename T>
void batchnorm_update_running(const BatchNormStats& stats, double momentum, std::span<T> running_mean,
                              std::span<T> running_var);

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope);

/// dy scaled in place where the activation output is nonpositive.
template <typename T>
void leaky_relu_backward_inplace(Tensor<T>& dy, const Tensor<T>& y, T slope);

template <typename T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y);

template <typename T>
void maxpool2_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx);

/// y[n, o] = sum_i W[o, i] x[n, i] + b[o]; x is flattened per item.
template <typename T>
void dense_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias, int out_features,
                   Tensor<T>& y);

/// Accumulates dweight/dbias unless dweight is empty.
template <typename T>
void dense_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& dy, Tensor<T>* dx,
                    std::span<T> dweight, std::span<T> dbias);

}  // namespace dped
