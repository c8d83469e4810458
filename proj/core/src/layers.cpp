#include "dped/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dped/image.hpp"
#include "dped/parallel.hpp"

namespace dped {

ConvGeometry ConvGeometry::same(int in_c, int out_c, int kernel, int stride, int in_h, int in_w, Padding padding) {
  ConvGeometry g;
  g.in_c = in_c;
  g.out_c = out_c;
  g.kernel = kernel;
  g.stride = stride;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_h = (in_h + stride - 1) / stride;
  g.out_w = (in_w + stride - 1) / stride;
  const int pad_h = std::max((g.out_h - 1) * stride + kernel - in_h, 0);
  const int pad_w = std::max((g.out_w - 1) * stride + kernel - in_w, 0);
  g.pad_top = pad_h / 2;
  g.pad_left = pad_w / 2;
  g.padding = padding;
  return g;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
using Strided = Eigen::OuterStride<>;

// Upper bound on im2col buffer entries per chunk.
constexpr std::size_t kColumnBudget = std::size_t{1} << 21;

// Source index for each (kernel tap, output coordinate) along one axis; -1 marks zero padding.
std::vector<int> axis_index(int out, int in, int kernel, int stride, int pad, Padding padding) {
  std::vector<int> idx(static_cast<std::size_t>(kernel) * out);
  for (int k = 0; k < kernel; ++k) {
    for (int o = 0; o < out; ++o) {
      int i = o * stride - pad + k;
      if (i < 0 || i >= in) i = padding == Padding::Reflect ? reflect_index(i, in) : -1;
      idx[static_cast<std::size_t>(k) * out + o] = i;
    }
  }
  return idx;
}

struct ConvPlan {
  std::vector<int> rows;  // [kernel][out_h]
  std::vector<int> cols;  // [kernel][out_w]
  int chunk_rows = 1;
  std::size_t k_dim = 0;

  explicit ConvPlan(const ConvGeometry& g)
      : rows(axis_index(g.out_h, g.in_h, g.kernel, g.stride, g.pad_top, g.padding)),
        cols(axis_index(g.out_w, g.in_w, g.kernel, g.stride, g.pad_left, g.padding)),
        k_dim(static_cast<std::size_t>(g.in_c) * g.kernel * g.kernel) {
    const std::size_t per_row = k_dim * g.out_w;
    chunk_rows = static_cast<int>(std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_row, 1), 1, g.out_h));
  }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, const ConvPlan& plan, int r0, int r1, T* col) {
  const int ow = g.out_w;
  const std::size_t p = static_cast<std::size_t>(r1 - r0) * ow;
  const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  std::size_t row = 0;
  for (int ci = 0; ci < g.in_c; ++ci) {
    const T* xc = x + ci * plane;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx, ++row) {
        T* dst = col + row * p;
        const int* cidx = plan.cols.data() + static_cast<std::size_t>(kx) * ow;
        for (int r = r0; r < r1; ++r) {
          const int iy = plan.rows[static_cast<std::size_t>(ky) * g.out_h + r];
          T* d = dst + static_cast<std::size_t>(r - r0) * ow;
          if (iy < 0) {
            std::fill(d, d + ow, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * g.in_w;
          for (int o = 0; o < ow; ++o) {
            const int ix = cidx[o];
            d[o] = ix < 0 ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, const ConvPlan& plan, int r0, int r1, T* dx) {
  const int ow = g.out_w;
  const std::size_t p = static_cast<std::size_t>(r1 - r0) * ow;
  const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  std::size_t row = 0;
  for (int ci = 0; ci < g.in_c; ++ci) {
    T* dc = dx + ci * plane;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx, ++row) {
        const T* src = col + row * p;
        const int* cidx = plan.cols.data() + static_cast<std::size_t>(kx) * ow;
        for (int r = r0; r < r1; ++r) {
          const int iy = plan.rows[static_cast<std::size_t>(ky) * g.out_h + r];
          if (iy < 0) continue;
          const T* s = src + static_cast<std::size_t>(r - r0) * ow;
          T* d = dc + static_cast<std::size_t>(iy) * g.in_w;
          for (int o = 0; o < ow; ++o) {
            const int ix = cidx[o];
            if (ix >= 0) d[ix] += s[o];
          }
        }
      }
    }
  }
}

// Stride-1 convolutions run one GEMM per kernel tap over a padded copy of each
// input plane. Outputs are computed at the padded width and the extra columns
// dropped; `slack` keeps the last tap's window inside the plane buffer.
struct TapPlan {
  std::vector<int> rows;  // source row per padded row, -1 for zero padding
  std::vector<int> cols;
  int wp = 0;
  Eigen::Index plane = 0;
  Eigen::Index span = 0;

  explicit TapPlan(const ConvGeometry& g) {
    const int hp = g.out_h + g.kernel - 1;
    wp = g.out_w + g.kernel - 1;
    rows.resize(static_cast<std::size_t>(hp));
    cols.resize(static_cast<std::size_t>(wp));
    const auto source = [&](int i, int n) {
      if (i >= 0 && i < n) return i;
      return g.padding == Padding::Reflect ? reflect_index(i, n) : -1;
    };
    for (int r = 0; r < hp; ++r) rows[static_cast<std::size_t>(r)] = source(r - g.pad_top, g.in_h);
    for (int c = 0; c < wp; ++c) cols[static_cast<std::size_t>(c)] = source(c - g.pad_left, g.in_w);
    plane = static_cast<Eigen::Index>(hp) * wp + g.kernel;
    span = static_cast<Eigen::Index>(g.out_h) * wp;
  }

  Eigen::Index offset(int ky, int kx) const { return static_cast<Eigen::Index>(ky) * wp + kx; }
};

template <typename T>
void pad_planes(const T* x, const ConvGeometry& g, const TapPlan& tp, std::vector<T>& out) {
  out.assign(static_cast<std::size_t>(tp.plane) * g.in_c, T(0));
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  for (int ci = 0; ci < g.in_c; ++ci) {
    const T* src = x + ci * in_plane;
    T* dst = out.data() + ci * tp.plane;
    for (std::size_t r = 0; r < tp.rows.size(); ++r) {
      if (tp.rows[r] < 0) continue;
      const T* s = src + static_cast<std::size_t>(tp.rows[r]) * g.in_w;
      T* d = dst + r * tp.wp;
      for (std::size_t c = 0; c < tp.cols.size(); ++c) {
        if (tp.cols[c] >= 0) d[c] = s[tp.cols[c]];
      }
    }
  }
}

template <typename T>
void fold_planes_add(const std::vector<T>& padded, const ConvGeometry& g, const TapPlan& tp, T* dx) {
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  for (int ci = 0; ci < g.in_c; ++ci) {
    const T* src = padded.data() + ci * tp.plane;
    T* dst = dx + ci * in_plane;
    for (std::size_t r = 0; r < tp.rows.size(); ++r) {
      if (tp.rows[r] < 0) continue;
      const T* s = src + r * tp.wp;
      T* d = dst + static_cast<std::size_t>(tp.rows[r]) * g.in_w;
      for (std::size_t c = 0; c < tp.cols.size(); ++c) {
        if (tp.cols[c] >= 0) d[tp.cols[c]] += s[c];
      }
    }
  }
}

// Weight slice for each tap as a contiguous out_c x in_c matrix.
template <typename T>
std::vector<RowMat<T>> tap_weights(std::span<const T> weight, const ConvGeometry& g) {
  const int taps = g.kernel * g.kernel;
  std::vector<RowMat<T>> w(static_cast<std::size_t>(taps), RowMat<T>(g.out_c, g.in_c));
  for (int o = 0; o < g.out_c; ++o) {
    for (int ci = 0; ci < g.in_c; ++ci) {
      const T* src = weight.data() + (static_cast<std::size_t>(o) * g.in_c + ci) * taps;
      for (int t = 0; t < taps; ++t) w[static_cast<std::size_t>(t)](o, ci) = src[t];
    }
  }
  return w;
}

template <typename T>
void conv2d_forward_taps(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias, const ConvGeometry& g,
                         Tensor<T>& y) {
  const TapPlan tp(g);
  const auto wt = tap_weights(weight, g);
  parallel_for(static_cast<std::size_t>(x.n), [&](std::size_t i) {
    std::vector<T> padded;
    pad_planes(x.item(static_cast<int>(i)), g, tp, padded);
    RowMat<T> acc = RowMat<T>::Zero(g.out_c, tp.span);
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const Eigen::Map<const RowMat<T>, 0, Strided> xs(padded.data() + tp.offset(ky, kx), g.in_c, tp.span,
                                                          Strided(tp.plane));
        acc.noalias() += wt[static_cast<std::size_t>(ky * g.kernel + kx)] * xs;
      }
    }
    for (int o = 0; o < g.out_c; ++o) {
      T* dst = y.plane(static_cast<int>(i), o);
      for (int r = 0; r < g.out_h; ++r) {
        const T* src = acc.row(o).data() + static_cast<std::size_t>(r) * tp.wp;
        for (int c = 0; c < g.out_w; ++c) dst[static_cast<std::size_t>(r) * g.out_w + c] = src[c] + bias[o];
      }
    }
  });
}

template <typename T>
void conv2d_backward_taps(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& dy, const ConvGeometry& g,
                          Tensor<T>* dx, std::vector<RowMat<T>>& item_dw, std::vector<ColVec<T>>& item_db,
                          bool want_params) {
  const TapPlan tp(g);
  const auto wt = tap_weights(weight, g);
  const int taps = g.kernel * g.kernel;
  parallel_for(static_cast<std::size_t>(x.n), [&](std::size_t i) {
    RowMat<T> dyw = RowMat<T>::Zero(g.out_c, tp.span);
    for (int o = 0; o < g.out_c; ++o) {
      const T* src = dy.plane(static_cast<int>(i), o);
      for (int r = 0; r < g.out_h; ++r) {
        std::copy_n(src + static_cast<std::size_t>(r) * g.out_w, g.out_w,
                    dyw.row(o).data() + static_cast<std::size_t>(r) * tp.wp);
      }
    }
    std::vector<T> padded;
    if (want_params) {
      auto& dw = item_dw[i];
      auto& db = item_db[i];
      dw = RowMat<T>::Zero(g.out_c, static_cast<Eigen::Index>(g.weight_size() / g.out_c));
      db = ColVec<T>::Zero(g.out_c);
      pad_planes(x.item(static_cast<int>(i)), g, tp, padded);
      RowMat<T> dwt(g.out_c, g.in_c);
      for (int t = 0; t < taps; ++t) {
        const Eigen::Map<const RowMat<T>, 0, Strided> xs(padded.data() + tp.offset(t / g.kernel, t % g.kernel), g.in_c,
                                                          tp.span, Strided(tp.plane));
        dwt.noalias() = dyw * xs.transpose();
        for (int o = 0; o < g.out_c; ++o) {
          for (int ci = 0; ci < g.in_c; ++ci) dw(o, static_cast<Eigen::Index>(ci) * taps + t) = dwt(o, ci);
        }
      }
      for (int o = 0; o < g.out_c; ++o) {
        const T* row = dy.plane(static_cast<int>(i), o);
        T sum = T(0);
        for (std::size_t k = 0; k < static_cast<std::size_t>(g.out_h) * g.out_w; ++k) sum += row[k];
        db[o] = sum;
      }
    }
    if (dx) {
      padded.assign(static_cast<std::size_t>(tp.plane) * g.in_c, T(0));
      for (int t = 0; t < taps; ++t) {
        Eigen::Map<RowMat<T>, 0, Strided> ds(padded.data() + tp.offset(t / g.kernel, t % g.kernel), g.in_c, tp.span,
                                             Strided(tp.plane));
        ds.noalias() += wt[static_cast<std::size_t>(t)].transpose() * dyw;
      }
      fold_planes_add(padded, g, tp, dx->item(static_cast<int>(i)));
    }
  });
}

// im2col wins when a few input channels feed many outputs.
bool use_taps(const ConvGeometry& g) { return g.stride == 1 && g.in_c * 8 >= g.out_c; }

void check_conv_input(int c, int h, int w, const ConvGeometry& g) {
  if (c != g.in_c || h != g.in_h || w != g.in_w) throw ShapeError("conv2d: input does not match geometry");
}

}  // namespace

template <typename T>
void conv2d_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias, const ConvGeometry& g,
                    Tensor<T>& y) {
  check_conv_input(x.c, x.h, x.w, g);
  if (weight.size() != g.weight_size() || bias.size() != static_cast<std::size_t>(g.out_c)) {
    throw ShapeError("conv2d: parameter size mismatch");
  }
  y = Tensor<T>(x.n, g.out_c, g.out_h, g.out_w);
  if (use_taps(g)) {
    conv2d_forward_taps(x, weight, bias, g, y);
    return;
  }
  const ConvPlan plan(g);
  const Eigen::Map<const RowMat<T>> wmat(weight.data(), g.out_c, static_cast<Eigen::Index>(plan.k_dim));
  const Eigen::Map<const ColVec<T>> bvec(bias.data(), g.out_c);
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  parallel_for(static_cast<std::size_t>(x.n), [&](std::size_t i) {
    std::vector<T> col(plan.k_dim * static_cast<std::size_t>(plan.chunk_rows) * g.out_w);
    for (int r0 = 0; r0 < g.out_h; r0 += plan.chunk_rows) {
      const int r1 = std::min(g.out_h, r0 + plan.chunk_rows);
      const auto p = static_cast<Eigen::Index>(r1 - r0) * g.out_w;
      im2col(x.item(static_cast<int>(i)), g, plan, r0, r1, col.data());
      const Eigen::Map<const RowMat<T>> cmat(col.data(), static_cast<Eigen::Index>(plan.k_dim), p);
      Eigen::Map<RowMat<T>, 0, Strided> ymat(y.item(static_cast<int>(i)) + static_cast<std::size_t>(r0) * g.out_w,
                                             g.out_c, p, Strided(static_cast<Eigen::Index>(out_plane)));
      ymat.noalias() = wmat * cmat;
      ymat.colwise() += bvec;
    }
  });
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& dy, const ConvGeometry& g,
                     Tensor<T>* dx, std::span<T> dweight, std::span<T> dbias) {
  check_conv_input(x.c, x.h, x.w, g);
  if (dy.n != x.n || dy.c != g.out_c || dy.h != g.out_h || dy.w != g.out_w) throw ShapeError("conv2d: gradient shape");
  const bool want_params = !dweight.empty();
  if (want_params && (dweight.size() != g.weight_size() || dbias.size() != static_cast<std::size_t>(g.out_c))) {
    throw ShapeError("conv2d: gradient buffer size mismatch");
  }
  const ConvPlan plan(g);
  if (dx) *dx = Tensor<T>(x.n, x.c, x.h, x.w);
  const Eigen::Map<const RowMat<T>> wmat(weight.data(), g.out_c, static_cast<Eigen::Index>(plan.k_dim));
  const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;

  // Per-item parameter gradients, reduced in item order so results do not
  // depend on the thread count.
  std::vector<RowMat<T>> item_dw(static_cast<std::size_t>(x.n));
  std::vector<ColVec<T>> item_db(static_cast<std::size_t>(x.n));
  if (use_taps(g)) {
    conv2d_backward_taps(x, weight, dy, g, dx, item_dw, item_db, want_params);
  } else {
    parallel_for(static_cast<std::size_t>(x.n), [&](std::size_t i) {
      auto& dw = item_dw[i];
      auto& db = item_db[i];
      if (want_params) {
        dw = RowMat<T>::Zero(g.out_c, static_cast<Eigen::Index>(plan.k_dim));
        db = ColVec<T>::Zero(g.out_c);
      }
      std::vector<T> col(want_params ? plan.k_dim * static_cast<std::size_t>(plan.chunk_rows) * g.out_w : 0);
      RowMat<T> dcol;
      for (int r0 = 0; r0 < g.out_h; r0 += plan.chunk_rows) {
        const int r1 = std::min(g.out_h, r0 + plan.chunk_rows);
        const auto p = static_cast<Eigen::Index>(r1 - r0) * g.out_w;
        const Eigen::Map<const RowMat<T>, 0, Strided> dymat(
            dy.item(static_cast<int>(i)) + static_cast<std::size_t>(r0) * g.out_w, g.out_c, p,
            Strided(static_cast<Eigen::Index>(out_plane)));
        if (want_params) {
          im2col(x.item(static_cast<int>(i)), g, plan, r0, r1, col.data());
          const Eigen::Map<const RowMat<T>> cmat(col.data(), static_cast<Eigen::Index>(plan.k_dim), p);
          dw.noalias() += dymat * cmat.transpose();
          for (int o = 0; o < g.out_c; ++o) {
            const T* row = dy.plane(static_cast<int>(i), o) + static_cast<std::size_t>(r0) * g.out_w;
            db[o] += std::accumulate(row, row + p, T(0));
          }
        }
        if (dx) {
          dcol.noalias() = wmat.transpose() * dymat;
          col2im_add(dcol.data(), g, plan, r0, r1, dx->item(static_cast<int>(i)));
        }
      }
    });
  }
  if (!want_params) return;
  Eigen::Map<RowMat<T>> dw_total(dweight.data(), g.out_c, static_cast<Eigen::Index>(plan.k_dim));
  Eigen::Map<ColVec<T>> db_total(dbias.data(), g.out_c);
  for (int i = 0; i < x.n; ++i) {
    dw_total += item_dw[static_cast<std::size_t>(i)];
    db_total += item_db[static_cast<std::size_t>(i)];
  }
}

template <typename T>
void batchnorm_forward_train(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta, double eps,
                             Tensor<T>& y, Tensor<T>& xhat, BatchNormStats& stats) {
  const int c = x.c;
  const std::size_t plane = x.plane_size();
  stats.mean.assign(c, 0.0);
  stats.var.assign(c, 0.0);
  stats.inv_std.assign(c, 0.0);
  stats.count = plane * x.n;
  y = Tensor<T>(x.n, x.c, x.h, x.w);
  xhat = Tensor<T>(x.n, x.c, x.h, x.w);
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.plane(i, ch);
      for (std::size_t k = 0; k < plane; ++k) sum += p[k];
    }
    const double mean = sum / static_cast<double>(stats.count);
    double sq = 0.0;
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.plane(i, ch);
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = p[k] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(stats.count);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    stats.mean[ch] = mean;
    stats.var[ch] = var;
    stats.inv_std[ch] = inv_std;
    const T m = static_cast<T>(mean);
    const T s = static_cast<T>(inv_std);
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.plane(i, ch);
      T* h = xhat.plane(i, ch);
      T* o = y.plane(i, ch);
      for (std::size_t k = 0; k < plane; ++k) {
        h[k] = (p[k] - m) * s;
        o[k] = gamma[ch] * h[k] + beta[ch];
      }
    }
  }
}

template <typename T>
void batchnorm_forward_infer(const Tensor<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             std::span<const T> running_mean, std::span<const T> running_var, double eps, Tensor<T>& y) {
  y = Tensor<T>(x.n, x.c, x.h, x.w);
  const std::size_t plane = x.plane_size();
  for (int ch = 0; ch < x.c; ++ch) {
    const T scale = static_cast<T>(gamma[ch] / std::sqrt(static_cast<double>(running_var[ch]) + eps));
    const T shift = beta[ch] - scale * running_mean[ch];
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.plane(i, ch);
      T* o = y.plane(i, ch);
      for (std::size_t k = 0; k < plane; ++k) o[k] = scale * p[k] + shift;
    }
  }
}

template <typename T>
void batchnorm_backward(const Tensor<T>& dy, const Tensor<T>& xhat, std::span<const T> gamma, const BatchNormStats& stats,
                        Tensor<T>& dx, std::span<T> dgamma, std::span<T> dbeta) {
  require_same_shape(dy, xhat, "batchnorm_backward");
  dx = Tensor<T>(dy.n, dy.c, dy.h, dy.w);
  const std::size_t plane = dy.plane_size();
  const double m = static_cast<double>(stats.count);
  for (int ch = 0; ch < dy.c; ++ch) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int i = 0; i < dy.n; ++i) {
      const T* g = dy.plane(i, ch);
      const T* h = xhat.plane(i, ch);
      for (std::size_t k = 0; k < plane; ++k) {
        sum_dy += g[k];
        sum_dy_xhat += static_cast<double>(g[k]) * h[k];
      }
    }
    if (!dgamma.empty()) {
      dgamma[ch] += static_cast<T>(sum_dy_xhat);
      dbeta[ch] += static_cast<T>(sum_dy);
    }
    const double scale = gamma[ch] * stats.inv_std[ch] / m;
    const T a = static_cast<T>(scale * m);
    const T b = static_cast<T>(scale * sum_dy);
    const T c = static_cast<T>(scale * sum_dy_xhat);
    for (int i = 0; i < dy.n; ++i) {
      const T* g = dy.plane(i, ch);
      const T* h = xhat.plane(i, ch);
      T* o = dx.plane(i, ch);
      for (std::size_t k = 0; k < plane; ++k) o[k] = a * g[k] - b - c * h[k];
    }
  }
}

template <typename T>
void batchnorm_update_running(const BatchNormStats& stats, double momentum, std::span<T> running_mean,
                              std::span<T> running_var) {
  const double correction = stats.count > 1 ? static_cast<double>(stats.count) / (stats.count - 1) : 1.0;
  for (std::size_t ch = 0; ch < stats.mean.size(); ++ch) {
    running_mean[ch] = static_cast<T>((1.0 - momentum) * running_mean[ch] + momentum * stats.mean[ch]);
    running_var[ch] = static_cast<T>((1.0 - momentum) * running_var[ch] + momentum * stats.var[ch] * correction);
  }
}

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope) {
  for (auto& v : x.data) {
    if (v < T(0)) v *= slope;
  }
}

template <typename T>
void leaky_relu_backward_inplace(Tensor<T>& dy, const Tensor<T>& y, T slope) {
  for (std::size_t k = 0; k < dy.data.size(); ++k) {
    if (!(y.data[k] > T(0))) dy.data[k] *= slope;
  }
}

template <typename T>
void maxpool2_forward(const Tensor<T>& x, Tensor<T>& y) {
  const int oh = x.h / 2;
  const int ow = x.w / 2;
  if (oh < 1 || ow < 1) throw ShapeError("maxpool2: input smaller than 2x2");
  y = Tensor<T>(x.n, x.c, oh, ow);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const T* p = x.plane(i, ch);
      T* o = y.plane(i, ch);
      for (int r = 0; r < oh; ++r) {
        const T* a = p + static_cast<std::size_t>(2 * r) * x.w;
        const T* b = a + x.w;
        for (int q = 0; q < ow; ++q) {
          o[static_cast<std::size_t>(r) * ow + q] = std::max(std::max(a[2 * q], a[2 * q + 1]), std::max(b[2 * q], b[2 * q + 1]));
        }
      }
    }
  }
}

template <typename T>
void maxpool2_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
  dx = Tensor<T>(x.n, x.c, x.h, x.w);
  const int oh = dy.h;
  const int ow = dy.w;
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const T* p = x.plane(i, ch);
      const T* g = dy.plane(i, ch);
      T* d = dx.plane(i, ch);
      for (int r = 0; r < oh; ++r) {
        for (int q = 0; q < ow; ++q) {
          // First maximum in row-major window order receives the gradient.
          std::size_t best = static_cast<std::size_t>(2 * r) * x.w + 2 * q;
          for (int dr = 0; dr < 2; ++dr) {
            for (int dq = 0; dq < 2; ++dq) {
              const std::size_t k = static_cast<std::size_t>(2 * r + dr) * x.w + 2 * q + dq;
              if (p[k] > p[best]) best = k;
            }
          }
          d[best] += g[static_cast<std::size_t>(r) * ow + q];
        }
      }
    }
  }
}

template <typename T>
void dense_forward(const Tensor<T>& x, std::span<const T> weight, std::span<const T> bias, int out_features,
                   Tensor<T>& y) {
  const auto in_features = static_cast<Eigen::Index>(x.item_size());
  if (weight.size() != static_cast<std::size_t>(out_features) * in_features ||
      bias.size() != static_cast<std::size_t>(out_features)) {
    throw ShapeError("dense: parameter size mismatch");
  }
  y = Tensor<T>(x.n, out_features, 1, 1);
  const Eigen::Map<const RowMat<T>> xm(x.data.data(), x.n, in_features);
  const Eigen::Map<const RowMat<T>> wm(weight.data(), out_features, in_features);
  Eigen::Map<RowMat<T>> ym(y.data.data(), x.n, out_features);
  ym.noalias() = xm * wm.transpose();
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data(), out_features);
  ym.rowwise() += b;
}

template <typename T>
void dense_backward(const Tensor<T>& x, std::span<const T> weight, const Tensor<T>& dy, Tensor<T>* dx,
                    std::span<T> dweight, std::span<T> dbias) {
  const auto in_features = static_cast<Eigen::Index>(x.item_size());
  const auto out_features = static_cast<Eigen::Index>(dy.item_size());
  const Eigen::Map<const RowMat<T>> xm(x.data.data(), x.n, in_features);
  const Eigen::Map<const RowMat<T>> wm(weight.data(), out_features, in_features);
  const Eigen::Map<const RowMat<T>> dym(dy.data.data(), dy.n, out_features);
  if (!dweight.empty()) {
    Eigen::Map<RowMat<T>> dwm(dweight.data(), out_features, in_features);
    dwm.noalias() += dym.transpose() * xm;
    for (int i = 0; i < dy.n; ++i) {
      const T* row = dy.item(i);
      for (Eigen::Index o = 0; o < out_features; ++o) dbias[o] += row[o];
    }
  }
  if (dx) {
    *dx = Tensor<T>(x.n, x.c, x.h, x.w);
    Eigen::Map<RowMat<T>> dxm(dx->data.data(), x.n, in_features);
    dxm.noalias() = dym * wm;
  }
}

#define DPED_INSTANTIATE_LAYERS(T)                                                                                  \
  template void conv2d_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, const ConvGeometry&,   \
                                  Tensor<T>&);                                                                     \
  template void conv2d_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&, const ConvGeometry&,    \
                                   Tensor<T>*, std::span<T>, std::span<T>);                                        \
  template void batchnorm_forward_train<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, double,      \
                                           Tensor<T>&, Tensor<T>&, BatchNormStats&);                               \
  template void batchnorm_forward_infer<T>(const Tensor<T>&, std::span<const T>, std::span<const T>,              \
                                           std::span<const T>, std::span<const T>, double, Tensor<T>&);            \
  template void batchnorm_backward<T>(const Tensor<T>&, const Tensor<T>&, std::span<const T>,                     \
                                      const BatchNormStats&, Tensor<T>&, std::span<T>, std::span<T>);              \
  template void batchnorm_update_running<T>(const BatchNormStats&, double, std::span<T>, std::span<T>);            \
  template void leaky_relu_inplace<T>(Tensor<T>&, T);                                                              \
  template void leaky_relu_backward_inplace<T>(Tensor<T>&, const Tensor<T>&, T);                                   \
  template void maxpool2_forward<T>(const Tensor<T>&, Tensor<T>&);                                                 \
  template void maxpool2_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                              \
  template void dense_forward<T>(const Tensor<T>&, std::span<const T>, std::span<const T>, int, Tensor<T>&);       \
  template void dense_backward<T>(const Tensor<T>&, std::span<const T>, const Tensor<T>&, Tensor<T>*, std::span<T>, \
                                  std::span<T>);

DPED_INSTANTIATE_LAYERS(float)
DPED_INSTANTIATE_LAYERS(double)

#undef DPED_INSTANTIATE_LAYERS

}  // namespace dped
