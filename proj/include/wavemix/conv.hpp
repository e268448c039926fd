#pragma once

// 2-D convolution and transposed convolution lowered onto GEMM via im2col.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "wavemix/tensor.hpp"

namespace wavemix {

using Rng = std::mt19937_64;

/// floor((in + 2p - k) / s) + 1, or an error when the window does not fit.
inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                 std::int64_t padding) {
  const std::int64_t span = in + 2 * padding - kernel;
  if (span < 0 || stride <= 0) {
    throw ShapeError("convolution output would be empty (in=" + std::to_string(in) +
                     ", k=" + std::to_string(kernel) + ", s=" + std::to_string(stride) +
                     ", p=" + std::to_string(padding) + ")");
  }
  return span / stride + 1;
}

/// (in - 1) * s - 2p + k
inline std::int64_t deconv_out_dim(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                   std::int64_t padding) {
  const std::int64_t out = (in - 1) * stride - 2 * padding + kernel;
  if (out <= 0) throw ShapeError("transposed convolution output would be empty");
  return out;
}

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::int64_t channels, height, width;   // image side
  std::int64_t kernel, stride, padding;
  std::int64_t out_h, out_w;              // window grid

  std::int64_t rows() const { return channels * kernel * kernel; }
  std::int64_t cols() const { return out_h * out_w; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

// cols[(c*k + i)*k + j][oh*out_w + ow] = image[c][oh*s - p + i][ow*s - p + j] (zero outside)
template <class T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::int64_t i = 0; i < g.kernel; ++i) {
      for (std::int64_t j = 0; j < g.kernel; ++j) {
        T* row = cols + ((c * g.kernel + i) * g.kernel + j) * ncols;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + i;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + j;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into the image.
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* image) {
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::int64_t i = 0; i < g.kernel; ++i) {
      for (std::int64_t j = 0; j < g.kernel; ++j) {
        const T* row = cols + ((c * g.kernel + i) * g.kernel + j) * ncols;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + i;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = row + oh * g.out_w;
          T* dst = plane + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + j;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <class T>
void add_channel_bias(T* y, std::int64_t channels, std::int64_t plane, const T* bias) {
  for (std::int64_t c = 0; c < channels; ++c) {
    const T b = bias[c];
    T* row = y + c * plane;
    for (std::int64_t i = 0; i < plane; ++i) row[i] += b;
  }
}

template <class T>
void accumulate_channel_sums(const T* dy, std::int64_t channels, std::int64_t plane, T* db) {
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* row = dy + c * plane;
    T acc = T(0);
    for (std::int64_t i = 0; i < plane; ++i) acc += row[i];
    db[c] += acc;
  }
}

}  // namespace detail

/// Cross-correlation with zero padding. `weight` is (C_out, C_in, k, k); `bias`
/// is (1, C_out, 1, 1) or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::int64_t stride,
                 std::int64_t padding) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  const std::int64_t c_out = ws.n;
  const std::int64_t k = ws.h;
  if (s.c != ws.c) {
    throw ShapeError("conv2d: input has " + std::to_string(s.c) + " channels, layer expects " +
                     std::to_string(ws.c));
  }
  const detail::ConvGeometry g{s.c, s.h, s.w, k, stride, padding,
                               conv_out_dim(s.h, k, stride, padding), conv_out_dim(s.w, k, stride, padding)};
  const Shape os{s.n, c_out, g.out_h, g.out_w};
  Tensor<T> out(os);

  using Mat = detail::RowMatrix<T>;
  Eigen::Map<const Mat> w(weight.data().data(), c_out, g.rows());
  std::vector<T> cols(g.is_pointwise() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
  const std::int64_t in_stride = s.c * s.plane();
  const std::int64_t out_stride = c_out * g.cols();
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* xn = x.data().data() + n * in_stride;
    const T* src = xn;
    if (!g.is_pointwise()) {
      detail::im2col(xn, g, cols.data());
      src = cols.data();
    }
    Eigen::Map<const Mat> col_mat(src, g.rows(), g.cols());
    Eigen::Map<Mat> y(out.data().data() + n * out_stride, c_out, g.cols());
    y.noalias() = w * col_mat;
    if (bias.defined()) detail::add_channel_bias(y.data(), c_out, g.cols(), bias.data().data());
  }

  const bool has_bias = bias.defined();
  detail::record_if(x.requires_grad() || weight.requires_grad() || (has_bias && bias.requires_grad()), out,
                    [ys = out.shared(), xs = x.shared(), wsp = weight.shared(),
                     bsp = has_bias ? bias.shared() : nullptr, g, c_out] {
                      if (ys->grad.empty()) return;
                      using Mat = detail::RowMatrix<T>;
                      const std::int64_t batch = xs->shape.n;
                      const std::int64_t in_stride = g.channels * g.height * g.width;
                      const std::int64_t out_stride = c_out * g.cols();
                      Eigen::Map<const Mat> w(wsp->data.data(), c_out, g.rows());
                      std::vector<T> cols(static_cast<std::size_t>(g.rows() * g.cols()));
                      T* dw_ptr = wsp->requires_grad ? wsp->ensure_grad().data() : nullptr;
                      T* db_ptr = (bsp && bsp->requires_grad) ? bsp->ensure_grad().data() : nullptr;
                      T* dx_ptr = xs->requires_grad ? xs->ensure_grad().data() : nullptr;
                      for (std::int64_t n = 0; n < batch; ++n) {
                        const T* dyn = ys->grad.data() + n * out_stride;
                        Eigen::Map<const Mat> dy(dyn, c_out, g.cols());
                        if (db_ptr) detail::accumulate_channel_sums(dyn, c_out, g.cols(), db_ptr);
                        if (dw_ptr) {
                          const T* xn = xs->data.data() + n * in_stride;
                          const T* src = xn;
                          if (!g.is_pointwise()) {
                            detail::im2col(xn, g, cols.data());
                            src = cols.data();
                          }
                          Eigen::Map<const Mat> col_mat(src, g.rows(), g.cols());
                          Eigen::Map<Mat> dw(dw_ptr, c_out, g.rows());
                          dw.noalias() += dy * col_mat.transpose();
                        }
                        if (dx_ptr) {
                          T* dxn = dx_ptr + n * in_stride;
                          if (g.is_pointwise()) {
                            Eigen::Map<Mat> dx(dxn, g.rows(), g.cols());
                            dx.noalias() += w.transpose() * dy;
                          } else {
                            Eigen::Map<Mat> dcols(cols.data(), g.rows(), g.cols());
                            dcols.noalias() = w.transpose() * dy;
                            detail::col2im(cols.data(), g, dxn);
                          }
                        }
                      }
                    });
  return out;
}

/// Gradient-of-convolution semantics. `weight` is (C_in, C_out, k, k); output
/// spatial size is (H - 1) * stride - 2 * padding + k.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::int64_t stride, std::int64_t padding) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  const std::int64_t c_out = ws.c;
  const std::int64_t k = ws.h;
  if (s.c != ws.n) {
    throw ShapeError("conv_transpose2d: input has " + std::to_string(s.c) + " channels, layer expects " +
                     std::to_string(ws.n));
  }
  const std::int64_t oh = deconv_out_dim(s.h, k, stride, padding);
  const std::int64_t ow = deconv_out_dim(s.w, k, stride, padding);
  // Geometry of the forward convolution this layer is the adjoint of: the
  // output image is the "image" side and the input grid is the window grid.
  const detail::ConvGeometry g{c_out, oh, ow, k, stride, padding, s.h, s.w};
  const Shape os{s.n, c_out, oh, ow};
  Tensor<T> out(os);

  using Mat = detail::RowMatrix<T>;
  Eigen::Map<const Mat> w(weight.data().data(), s.c, g.rows());
  std::vector<T> cols(static_cast<std::size_t>(g.rows() * g.cols()));
  const std::int64_t in_stride = s.c * s.plane();
  const std::int64_t out_stride = c_out * oh * ow;
  for (std::int64_t n = 0; n < s.n; ++n) {
    Eigen::Map<const Mat> xn(x.data().data() + n * in_stride, s.c, g.cols());
    T* yn = out.data().data() + n * out_stride;
    if (g.is_pointwise()) {
      Eigen::Map<Mat> y(yn, c_out, g.cols());
      y.noalias() = w.transpose() * xn;
    } else {
      Eigen::Map<Mat> col_mat(cols.data(), g.rows(), g.cols());
      col_mat.noalias() = w.transpose() * xn;
      detail::col2im(cols.data(), g, yn);
    }
    if (bias.defined()) detail::add_channel_bias(yn, c_out, oh * ow, bias.data().data());
  }

  const bool has_bias = bias.defined();
  detail::record_if(x.requires_grad() || weight.requires_grad() || (has_bias && bias.requires_grad()), out,
                    [ys = out.shared(), xs = x.shared(), wsp = weight.shared(),
                     bsp = has_bias ? bias.shared() : nullptr, g] {
                      if (ys->grad.empty()) return;
                      using Mat = detail::RowMatrix<T>;
                      const std::int64_t batch = xs->shape.n;
                      const std::int64_t c_in = xs->shape.c;
                      const std::int64_t in_stride = c_in * g.cols();
                      const std::int64_t out_stride = g.channels * g.height * g.width;
                      Eigen::Map<const Mat> w(wsp->data.data(), c_in, g.rows());
                      std::vector<T> cols(g.is_pointwise() ? 0 : static_cast<std::size_t>(g.rows() * g.cols()));
                      T* dw_ptr = wsp->requires_grad ? wsp->ensure_grad().data() : nullptr;
                      T* db_ptr = (bsp && bsp->requires_grad) ? bsp->ensure_grad().data() : nullptr;
                      T* dx_ptr = xs->requires_grad ? xs->ensure_grad().data() : nullptr;
                      for (std::int64_t n = 0; n < batch; ++n) {
                        const T* dyn = ys->grad.data() + n * out_stride;
                        if (db_ptr) detail::accumulate_channel_sums(dyn, g.channels, g.height * g.width, db_ptr);
                        const T* src = dyn;
                        if (!g.is_pointwise()) {
                          detail::im2col(dyn, g, cols.data());
                          src = cols.data();
                        }
                        Eigen::Map<const Mat> gcols(src, g.rows(), g.cols());
                        if (dx_ptr) {
                          Eigen::Map<Mat> dx(dx_ptr + n * in_stride, c_in, g.cols());
                          dx.noalias() += w * gcols;
                        }
                        if (dw_ptr) {
                          Eigen::Map<const Mat> xn(xs->data.data() + n * in_stride, c_in, g.cols());
                          Eigen::Map<Mat> dw(dw_ptr, c_in, g.rows());
                          dw.noalias() += xn * gcols.transpose();
                        }
                      }
                    });
  return out;
}

/// Fills `t` from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), i.e. Kaiming-uniform with
/// negative slope sqrt(5). Draws are made in f64 so f32 and f64 models built from
/// one seed start from the same values (up to rounding).
template <class T>
void kaiming_uniform(Tensor<T>& t, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
}

template <class T>
struct Conv2dLayer {
  Parameter<T> weight;
  Parameter<T> bias;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;

  Conv2dLayer() = default;

  Conv2dLayer(const std::string& name, std::int64_t in_channels, std::int64_t out_channels,
              std::int64_t kernel_size, std::int64_t stride_, std::int64_t padding_, Rng& rng)
      : kernel(kernel_size), stride(stride_), padding(padding_) {
    weight = {name + ".weight",
              {out_channels, in_channels, kernel_size, kernel_size},
              Tensor<T>(Shape{out_channels, in_channels, kernel_size, kernel_size}, T(0), true)};
    bias = {name + ".bias", {out_channels}, Tensor<T>(Shape{1, out_channels, 1, 1}, T(0), true)};
    kaiming_uniform(weight.value, in_channels * kernel_size * kernel_size, rng);
  }

  std::int64_t in_channels() const { return weight.value.shape().c; }
  std::int64_t out_channels() const { return weight.value.shape().n; }
  std::int64_t out_dim(std::int64_t in) const { return conv_out_dim(in, kernel, stride, padding); }

  std::vector<Parameter<T>> parameters() const { return {weight, bias}; }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight.value, bias.value, stride, padding);
  }
};

template <class T>
struct ConvTranspose2dLayer {
  Parameter<T> weight;
  Parameter<T> bias;
  std::int64_t kernel = 4;
  std::int64_t stride = 2;
  std::int64_t padding = 1;

  ConvTranspose2dLayer() = default;

  ConvTranspose2dLayer(const std::string& name, std::int64_t in_channels, std::int64_t out_channels,
                       std::int64_t kernel_size, std::int64_t stride_, std::int64_t padding_, Rng& rng)
      : kernel(kernel_size), stride(stride_), padding(padding_) {
    weight = {name + ".weight",
              {in_channels, out_channels, kernel_size, kernel_size},
              Tensor<T>(Shape{in_channels, out_channels, kernel_size, kernel_size}, T(0), true)};
    bias = {name + ".bias", {out_channels}, Tensor<T>(Shape{1, out_channels, 1, 1}, T(0), true)};
    // PyTorch computes the transposed-conv fan-in from weight dim 1.
    kaiming_uniform(weight.value, out_channels * kernel_size * kernel_size, rng);
  }

  std::int64_t in_channels() const { return weight.value.shape().n; }
  std::int64_t out_channels() const { return weight.value.shape().c; }
  std::int64_t out_dim(std::int64_t in) const { return deconv_out_dim(in, kernel, stride, padding); }

  std::vector<Parameter<T>> parameters() const { return {weight, bias}; }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv_transpose2d(x, weight.value, bias.value, stride, padding);
  }
};

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dLayer<T>& layer) {
  return layer(x);
}

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const ConvTranspose2dLayer<T>& layer) {
  return layer(x);
}

}  // namespace wavemix
