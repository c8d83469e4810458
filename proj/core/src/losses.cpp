#include "dped/losses.hpp"

#include <algorithm>
#include <cmath>

namespace dped {

namespace {

template <typename T>
void require_rgb_pair(const Tensor<T>& x, const Tensor<T>& y, const char* what) {
  require_same_shape(x, y, what);
  if (x.n < 1) throw ShapeError(std::string(what) + ": empty batch");
}

// In double: 1 - 1e-8 rounds to 1 in float.
double clamp_prob(double p) { return std::clamp(p, kProbabilityEps, 1.0 - kProbabilityEps); }

bool clamp_active(double p) { return p < kProbabilityEps || p > 1.0 - kProbabilityEps; }

}  // namespace

template <typename T>
double color_loss(const Tensor<T>& x, const Tensor<T>& y, const Kernel2D& kernel, Tensor<T>* grad) {
  require_rgb_pair(x, y, "color_loss");
  if (kernel.side() > std::min(x.h, x.w)) throw KernelTooLarge("color_loss: kernel larger than image");
  const std::size_t plane = x.plane_size();
  std::vector<T> diff(plane);
  std::vector<T> blurred(plane);
  if (grad) *grad = Tensor<T>(x.n, x.c, x.h, x.w);
  double total = 0.0;
  const T scale = static_cast<T>(2.0 / x.n);
  for (int i = 0; i < x.n; ++i) {
    for (int c = 0; c < x.c; ++c) {
      const T* a = x.plane(i, c);
      const T* b = y.plane(i, c);
      for (std::size_t k = 0; k < plane; ++k) diff[k] = a[k] - b[k];
      // blur is linear, so blur(X) - blur(Y) = blur(X - Y).
      blur_plane(diff.data(), blurred.data(), x.h, x.w, kernel);
      double s = 0.0;
      for (std::size_t k = 0; k < plane; ++k) s += static_cast<double>(blurred[k]) * blurred[k];
      total += s;
      if (grad) {
        for (auto& v : blurred) v *= scale;
        blur_plane_adjoint(blurred.data(), grad->plane(i, c), x.h, x.w, kernel);
      }
    }
  }
  return total / x.n;
}

template <typename T>
double texture_loss_from_probs(const std::vector<T>& probs, std::vector<T>* grad_logits) {
  if (probs.empty()) throw ShapeError("texture_loss: empty batch");
  const double n = static_cast<double>(probs.size());
  double total = 0.0;
  if (grad_logits) grad_logits->assign(probs.size(), T(0));
  for (std::size_t i = 0; i < probs.size(); ++i) {
    total -= std::log(clamp_prob(probs[i]));
    // d(-log sigmoid(z))/dz = -(1 - p)
    if (grad_logits && !clamp_active(probs[i])) (*grad_logits)[i] = static_cast<T>(-(1.0 - probs[i]) / n);
  }
  return total / n;
}

template <typename T>
double texture_loss(const DiscriminatorWeights<T>& d, const Tensor<T>& enhanced_gray, Mode mode, Tensor<T>* grad) {
  if (grad && mode != Mode::Train) throw ShapeError("texture_loss gradients require train mode");
  DiscriminatorTape<T> tape;
  auto out = discriminator_forward(d, enhanced_gray, mode, grad ? &tape : nullptr);
  std::vector<T> g_logits;
  const double loss = texture_loss_from_probs(out.probs, grad ? &g_logits : nullptr);
  if (grad) *grad = discriminator_backward(d, tape, g_logits, false).input;
  return loss;
}

template <typename T>
double content_loss_features(const VggWeights<T>& vgg, const Tensor<T>& enhanced, const Tensor<T>& target_features,
                             std::string_view layer, Tensor<T>* grad, NormConvention norm) {
  VggTape<T> tape;
  const auto feats = vgg_features(vgg, enhanced, layer, grad ? &tape : nullptr);
  require_same_shape(feats, target_features, "content_loss");
  if (feats.n < 1) throw ShapeError("content_loss: empty batch");
  const double denom = static_cast<double>(feats.item_size());
  Tensor<T> g_feats;
  if (grad) g_feats = Tensor<T>(feats.n, feats.c, feats.h, feats.w);
  double total = 0.0;
  for (int i = 0; i < feats.n; ++i) {
    const T* a = feats.item(i);
    const T* b = target_features.item(i);
    double ss = 0.0;
    for (std::size_t k = 0; k < feats.item_size(); ++k) ss += std::pow(static_cast<double>(a[k]) - b[k], 2);
    const double dist = norm == NormConvention::Squared ? ss : std::sqrt(ss);
    total += dist / denom;
    if (grad) {
      double coeff = 0.0;
      if (norm == NormConvention::Squared) {
        coeff = 2.0 / (denom * feats.n);
      } else if (dist > 0.0) {
        coeff = 1.0 / (dist * denom * feats.n);
      }
      T* g = g_feats.item(i);
      for (std::size_t k = 0; k < feats.item_size(); ++k) g[k] = static_cast<T>(coeff * (a[k] - b[k]));
    }
  }
  if (grad) *grad = vgg_backward_input(vgg, tape, g_feats);
  return total / feats.n;
}

template <typename T>
double content_loss(const VggWeights<T>& vgg, const Tensor<T>& enhanced, const Tensor<T>& target,
                    std::string_view layer, Tensor<T>* grad, NormConvention norm) {
  require_rgb_pair(enhanced, target, "content_loss");
  return content_loss_features(vgg, enhanced, vgg_features(vgg, target, layer), layer, grad, norm);
}

template <typename T>
double tv_loss(const Tensor<T>& x, Tensor<T>* grad, NormConvention norm) {
  if (x.h < 2 || x.w < 2) throw ShapeError("tv_loss requires H, W >= 2");
  if (x.n < 1) throw ShapeError("tv_loss: empty batch");
  const double denom = static_cast<double>(x.item_size());
  if (grad) *grad = Tensor<T>(x.n, x.c, x.h, x.w);
  double total = 0.0;
  for (int i = 0; i < x.n; ++i) {
    double sx = 0.0;
    double sy = 0.0;
    for (int c = 0; c < x.c; ++c) {
      const T* p = x.plane(i, c);
      for (int y = 0; y < x.h; ++y) {
        for (int xx = 0; xx < x.w; ++xx) {
          const std::size_t k = static_cast<std::size_t>(y) * x.w + xx;
          if (xx + 1 < x.w) sx += std::pow(static_cast<double>(p[k + 1]) - p[k], 2);
          if (y + 1 < x.h) sy += std::pow(static_cast<double>(p[k + x.w]) - p[k], 2);
        }
      }
    }
    double cx = 0.0;
    double cy = 0.0;
    if (norm == NormConvention::Squared) {
      total += (sx + sy) / denom;
      cx = cy = 2.0 / (denom * x.n);
    } else {
      total += (std::sqrt(sx) + std::sqrt(sy)) / denom;
      cx = sx > 0.0 ? 1.0 / (std::sqrt(sx) * denom * x.n) : 0.0;
      cy = sy > 0.0 ? 1.0 / (std::sqrt(sy) * denom * x.n) : 0.0;
    }
    if (!grad) continue;
    for (int c = 0; c < x.c; ++c) {
      const T* p = x.plane(i, c);
      T* g = grad->plane(i, c);
      for (int y = 0; y < x.h; ++y) {
        for (int xx = 0; xx < x.w; ++xx) {
          const std::size_t k = static_cast<std::size_t>(y) * x.w + xx;
          if (xx + 1 < x.w) {
            const T d = static_cast<T>(cx * (p[k + 1] - p[k]));
            g[k + 1] += d;
            g[k] -= d;
          }
          if (y + 1 < x.h) {
            const T d = static_cast<T>(cy * (p[k + x.w] - p[k]));
            g[k + x.w] += d;
            g[k] -= d;
          }
        }
      }
    }
  }
  return total / x.n;
}

template <typename T>
double mse_loss(const Tensor<T>& x, const Tensor<T>& y, Tensor<T>* grad) {
  require_rgb_pair(x, y, "mse_loss");
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) s += std::pow(static_cast<double>(x.data[k]) - y.data[k], 2);
  if (grad) {
    *grad = Tensor<T>(x.n, x.c, x.h, x.w);
    for (std::size_t k = 0; k < x.size(); ++k) grad->data[k] = static_cast<T>(2.0 * (x.data[k] - y.data[k]) / n);
  }
  return s / n;
}

LossBreakdown total_loss(const LossBreakdown& parts, const LossWeights& w) {
  const std::pair<const char*, double> comps[] = {
      {"content", parts.content}, {"texture", parts.texture}, {"color", parts.color}, {"tv", parts.tv}, {"mse", parts.mse}};
  for (const auto& [name, v] : comps) {
    if (!std::isfinite(v)) throw NonFiniteComponent(std::string("loss component ") + name + " is not finite");
  }
  LossBreakdown out = parts;
  out.total = w.content * parts.content + w.texture * parts.texture + w.color * parts.color + w.tv * parts.tv +
              w.mse * parts.mse;
  return out;
}

template <typename T>
double discriminator_loss_from_probs(const std::vector<T>& fake_probs, const std::vector<T>& real_probs,
                                     std::vector<T>* grad_fake_logits, std::vector<T>* grad_real_logits) {
  if (fake_probs.size() != real_probs.size() || fake_probs.empty()) {
    throw ShapeError("discriminator_loss: fake and real batches must be equal and nonempty");
  }
  const double m = 2.0 * static_cast<double>(fake_probs.size());
  double total = 0.0;
  if (grad_fake_logits) grad_fake_logits->assign(fake_probs.size(), T(0));
  if (grad_real_logits) grad_real_logits->assign(real_probs.size(), T(0));
  for (std::size_t i = 0; i < fake_probs.size(); ++i) {
    const T pr = real_probs[i];
    const T pf = fake_probs[i];
    total -= std::log(clamp_prob(pr));
    total -= std::log(1.0 - clamp_prob(pf));
    if (grad_real_logits && !clamp_active(pr)) (*grad_real_logits)[i] = static_cast<T>(-(1.0 - pr) / m);
    if (grad_fake_logits && !clamp_active(pf)) (*grad_fake_logits)[i] = static_cast<T>(pf / m);
  }
  return total / m;
}

template <typename T>
double discriminator_loss(const DiscriminatorWeights<T>& d, const Tensor<T>& fake_gray, const Tensor<T>& real_gray,
                          Mode mode) {
  require_same_shape(fake_gray, real_gray, "discriminator_loss");
  const auto fake = discriminator_forward(d, fake_gray, mode);
  const auto real = discriminator_forward(d, real_gray, mode);
  return discriminator_loss_from_probs(fake.probs, real.probs);
}

template <typename T>
double discriminator_accuracy(const std::vector<T>& fake_probs, const std::vector<T>& real_probs) {
  const std::size_t total = fake_probs.size() + real_probs.size();
  if (total == 0) return 0.0;
  std::size_t correct = 0;
  for (T p : fake_probs) correct += p < T(0.5);
  for (T p : real_probs) correct += p > T(0.5);
  return static_cast<double>(correct) / static_cast<double>(total);
}

#define DPED_INSTANTIATE_LOSSES(T)                                                                                 \
  template double color_loss<T>(const Tensor<T>&, const Tensor<T>&, const Kernel2D&, Tensor<T>*);                 \
  template double texture_loss_from_probs<T>(const std::vector<T>&, std::vector<T>*);                             \
  template double texture_loss<T>(const DiscriminatorWeights<T>&, const Tensor<T>&, Mode, Tensor<T>*);            \
  template double content_loss<T>(const VggWeights<T>&, const Tensor<T>&, const Tensor<T>&, std::string_view,    \
                                  Tensor<T>*, NormConvention);                                                    \
  template double content_loss_features<T>(const VggWeights<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                           std::string_view, Tensor<T>*, NormConvention);                        \
  template double tv_loss<T>(const Tensor<T>&, Tensor<T>*, NormConvention);                                       \
  template double mse_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                                    \
  template double discriminator_loss_from_probs<T>(const std::vector<T>&, const std::vector<T>&, std::vector<T>*, \
                                                   std::vector<T>*);                                              \
  template double discriminator_loss<T>(const DiscriminatorWeights<T>&, const Tensor<T>&, const Tensor<T>&, Mode); \
  template double discriminator_accuracy<T>(const std::vector<T>&, const std::vector<T>&);

DPED_INSTANTIATE_LOSSES(float)
DPED_INSTANTIATE_LOSSES(double)

#undef DPED_INSTANTIATE_LOSSES

}  // namespace dped
