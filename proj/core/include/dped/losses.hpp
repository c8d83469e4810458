#pragma once

#include <string_view>
#include <vector>

#include "dped/image.hpp"
#include "dped/nets.hpp"
#include "dped/tensor.hpp"

namespace dped {

/// Coefficients of the weighted generator objective. `mse` weights the
/// pixelwise MSE term used by the MSE loss profiles.
struct LossWeights {
  double content = 1.0;
  double texture = 0.4;
  double color = 0.1;
  double tv = 400.0;
  double mse = 1.0;
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double total = 0.0;
  double content = 0.0;
  double texture = 0.0;
  double color = 0.0;
  double tv = 0.0;
  double mse = 0.0;
};

/// How a distance enters the content and TV losses: squared L2 (default) or
/// the plain L2 norm.
enum class NormConvention { Squared, Plain };

inline constexpr double kProbabilityEps = 1e-8;

/// Every loss is a mean over the batch. When `grad` is non-null it receives
/// dL/d(first argument), shaped like that argument.

/// Sum over pixels and channels of (blur(X) - blur(Y))^2 per item.
template <typename T>
double color_loss(const Tensor<T>& x, const Tensor<T>& y, const Kernel2D& kernel, Tensor<T>* grad = nullptr);

/// -log D per item from discriminator probabilities, D clamped to [eps, 1-eps].
/// grad_logits receives dL/dlogit per item (zero where the clamp is active).
template <typename T>
double texture_loss_from_probs(const std::vector<T>& probs, std::vector<T>* grad_logits = nullptr);

/// Texture loss of grayscale images under a frozen discriminator. The
/// discriminator runs in `mode` (train mode uses batch statistics).
template <typename T>
double texture_loss(const DiscriminatorWeights<T>& d, const Tensor<T>& enhanced_gray, Mode mode = Mode::Train,
                    Tensor<T>* grad = nullptr);

/// ||psi(enhanced) - psi(target)||^2 / (C H W) per item on the named VGG layer.
template <typename T>
double content_loss(const VggWeights<T>& vgg, const Tensor<T>& enhanced, const Tensor<T>& target,
                    std::string_view layer = kDefaultContentLayer, Tensor<T>* grad = nullptr,
                    NormConvention norm = NormConvention::Squared);

/// Same, with the target features precomputed by vgg_features.
template <typename T>
double content_loss_features(const VggWeights<T>& vgg, const Tensor<T>& enhanced, const Tensor<T>& target_features,
                             std::string_view layer = kDefaultContentLayer, Tensor<T>* grad = nullptr,
                             NormConvention norm = NormConvention::Squared);

/// (||dx||^2 + ||dy||^2) / (C H W) per item with forward differences.
template <typename T>
double tv_loss(const Tensor<T>& x, Tensor<T>* grad = nullptr, NormConvention norm = NormConvention::Squared);

/// Mean squared error over every element.
template <typename T>
double mse_loss(const Tensor<T>& x, const Tensor<T>& y, Tensor<T>* grad = nullptr);

/// Fills `total` from the components; throws NonFiniteComponent.
LossBreakdown total_loss(const LossBreakdown& parts, const LossWeights& weights = {});

/// Binary cross-entropy with real = 1, fake = 0, averaged over all 2N
/// predictions. Gradients are per-logit.
template <typename T>
double discriminator_loss_from_probs(const std::vector<T>& fake_probs, const std::vector<T>& real_probs,
                                     std::vector<T>* grad_fake_logits = nullptr,
                                     std::vector<T>* grad_real_logits = nullptr);

/// Runs the discriminator separately on the fake and real batches.
template <typename T>
double discriminator_loss(const DiscriminatorWeights<T>& d, const Tensor<T>& fake_gray, const Tensor<T>& real_gray,
                          Mode mode = Mode::Train);

/// Fraction of predictions on the correct side of 0.5.
template <typename T>
double discriminator_accuracy(const std::vector<T>& fake_probs, const std::vector<T>& real_probs);

}  // namespace dped
