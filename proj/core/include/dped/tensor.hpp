#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "dped/error.hpp"

namespace dped {

/// Dense NCHW batch tensor.
template <typename T>
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t item_size() const { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }

  T* item(int i) { return data.data() + i * item_size(); }
  const T* item(int i) const { return data.data() + i * item_size(); }
  T* plane(int i, int ch) { return item(i) + ch * plane_size(); }
  const T* plane(int i, int ch) const { return item(i) + ch * plane_size(); }

  T& at(int i, int ch, int y, int x) { return plane(i, ch)[static_cast<std::size_t>(y) * w + x]; }
  T at(int i, int ch, int y, int x) const { return plane(i, ch)[static_cast<std::size_t>(y) * w + x]; }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n, c, h, w);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": tensor shapes differ");
}

}  // namespace dped
