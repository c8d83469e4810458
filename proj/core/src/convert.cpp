#include "dped/convert.hpp"

#include <algorithm>

namespace dped {

namespace {
constexpr double kLuma[3] = {0.299, 0.587, 0.114};
}

template <typename T, int C>
Tensor<T> to_tensor(const std::vector<Image<C>>& images) {
  if (images.empty()) return {};
  const int h = images.front().height;
  const int w = images.front().width;
  Tensor<T> t(static_cast<int>(images.size()), C, h, w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != h || images[i].width != w) throw ShapeError("to_tensor: images differ in size");
    std::transform(images[i].data.begin(), images[i].data.end(), t.item(static_cast<int>(i)),
                   [](float v) { return static_cast<T>(v); });
  }
  return t;
}

template <int C, typename T>
Image<C> to_image(const Tensor<T>& t, int i) {
  if (t.c != C) throw ShapeError("to_image: channel count mismatch");
  Image<C> img(t.h, t.w);
  std::transform(t.item(i), t.item(i) + t.item_size(), img.data.begin(), [](T v) { return static_cast<float>(v); });
  return img;
}

template <typename T>
Tensor<T> grayscale_batch(const Tensor<T>& rgb) {
  if (rgb.c != 3) throw ShapeError("grayscale_batch expects 3 channels");
  Tensor<T> g(rgb.n, 1, rgb.h, rgb.w);
  const std::size_t plane = rgb.plane_size();
  for (int i = 0; i < rgb.n; ++i) {
    const T* r = rgb.plane(i, 0);
    const T* gr = rgb.plane(i, 1);
    const T* b = rgb.plane(i, 2);
    T* o = g.plane(i, 0);
    for (std::size_t k = 0; k < plane; ++k) o[k] = static_cast<T>(kLuma[0] * r[k] + kLuma[1] * gr[k] + kLuma[2] * b[k]);
  }
  return g;
}

template <typename T>
Tensor<T> grayscale_batch_backward(const Tensor<T>& grad_gray) {
  Tensor<T> g(grad_gray.n, 3, grad_gray.h, grad_gray.w);
  const std::size_t plane = grad_gray.plane_size();
  for (int i = 0; i < grad_gray.n; ++i) {
    const T* src = grad_gray.plane(i, 0);
    for (int c = 0; c < 3; ++c) {
      T* o = g.plane(i, c);
      for (std::size_t k = 0; k < plane; ++k) o[k] = static_cast<T>(kLuma[c] * src[k]);
    }
  }
  return g;
}

#define DPED_INSTANTIATE_CONVERT(T)                                             \
  template Tensor<T> to_tensor<T, 1>(const std::vector<Image<1>>&);             \
  template Tensor<T> to_tensor<T, 3>(const std::vector<Image<3>>&);             \
  template Image<1> to_image<1, T>(const Tensor<T>&, int);                      \
  template Image<3> to_image<3, T>(const Tensor<T>&, int);                      \
  template Tensor<T> grayscale_batch<T>(const Tensor<T>&);                      \
  template Tensor<T> grayscale_batch_backward<T>(const Tensor<T>&);

DPED_INSTANTIATE_CONVERT(float)
DPED_INSTANTIATE_CONVERT(double)

#undef DPED_INSTANTIATE_CONVERT

}  // namespace dped
