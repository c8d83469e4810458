#pragma once

#include <vector>

#include "dped/image.hpp"
#include "dped/tensor.hpp"

namespace dped {

template <typename T, int C>
Tensor<T> to_tensor(const std::vector<Image<C>>& images);

template <typename T, int C>
Tensor<T> to_tensor(const Image<C>& image) {
  return to_tensor<T, C>(std::vector<Image<C>>{image});
}

/// Item `i` of a batch as an image; values are copied unclamped.
template <int C, typename T>
Image<C> to_image(const Tensor<T>& t, int i = 0);

/// BT.601 luma over an N x 3 x H x W batch. Strictly linear (no gray
/// passthrough or clamping) so that it has an exact adjoint.
template <typename T>
Tensor<T> grayscale_batch(const Tensor<T>& rgb);

/// Adjoint of grayscale_batch.
template <typename T>
Tensor<T> grayscale_batch_backward(const Tensor<T>& grad_gray);

}  // namespace dped
