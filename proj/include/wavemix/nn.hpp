#pragma once

// Activation, normalization, pooling and resampling layers.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "wavemix/conv.hpp"
#include "wavemix/ops.hpp"
#include "wavemix/tensor.hpp"

namespace wavemix {

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ArrayMap = Eigen::Map<Array>;
  using ConstArrayMap = Eigen::Map<const Array>;
  const auto n = static_cast<Eigen::Index>(x.numel());
  ConstArrayMap xv(x.data().data(), n);
  Array cdf = T(0.5) * (T(1) + (xv * (T(1) / std::numbers::sqrt2_v<T>)).erf());
  Tensor<T> out(x.shape());
  ArrayMap(out.data().data(), n) = xv * cdf;
  detail::record(out, {&x}, [ys = out.shared(), xs = x.shared(), cdf = std::move(cdf)] {
    if (ys->grad.empty()) return;
    const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    const auto n = static_cast<Eigen::Index>(xs->data.size());
    ConstArrayMap xv(xs->data.data(), n);
    ConstArrayMap dy(ys->grad.data(), n);
    const Array local = dy * (cdf + xv * inv_sqrt2pi * (T(-0.5) * xv.square()).exp());
    xs->accumulate_grad(local.data());
  });
  return out;
}

/// Per-channel batch normalization with running statistics.
template <class T>
struct BatchNorm2d {
  Parameter<T> gamma;
  Parameter<T> beta;
  Parameter<T> running_mean;  // buffers: requires_grad = false
  Parameter<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  bool training = true;

  BatchNorm2d() = default;

  BatchNorm2d(const std::string& name, std::int64_t channels) {
    const Shape s{1, channels, 1, 1};
    gamma = {name + ".weight", {channels}, Tensor<T>(s, T(1), true)};
    beta = {name + ".bias", {channels}, Tensor<T>(s, T(0), true)};
    running_mean = {name + ".running_mean", {channels}, Tensor<T>(s, T(0))};
    running_var = {name + ".running_var", {channels}, Tensor<T>(s, T(1))};
  }

  std::int64_t channels() const { return gamma.value.numel(); }
  std::vector<Parameter<T>> parameters() const { return {gamma, beta}; }
  std::vector<Parameter<T>> buffers() const { return {running_mean, running_var}; }
};

/// Training mode normalizes with batch statistics and updates the running
/// buffers (unbiased variance, as PyTorch does); eval mode uses the buffers.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, BatchNorm2d<T>& layer) {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  using ArrayMap = Eigen::Map<Array>;
  using ConstArrayMap = Eigen::Map<const Array>;
  const Shape s = x.shape();
  const std::int64_t channels = s.c;
  if (channels != layer.channels()) {
    throw ShapeError("batch_norm2d: input has " + std::to_string(channels) + " channels, layer expects " +
                     std::to_string(layer.channels()));
  }
  const std::int64_t count = s.n * s.plane();
  if (layer.training && count < 2) {
    throw ValueError("batch_norm2d: training mode needs at least 2 values per channel, got " + s.str());
  }
  const std::int64_t plane = s.plane();
  const T* xd = x.data().data();
  auto plane_of = [&](const T* base, std::int64_t n, std::int64_t c) {
    return ConstArrayMap(base + (n * channels + c) * plane, plane);
  };
  std::vector<T> mean(static_cast<std::size_t>(channels));
  std::vector<T> inv_std(static_cast<std::size_t>(channels));
  auto rm = layer.running_mean.value.data();
  auto rv = layer.running_var.value.data();
  if (layer.training) {
    for (std::int64_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::int64_t n = 0; n < s.n; ++n) acc += plane_of(xd, n, c).sum();
      const double mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::int64_t n = 0; n < s.n; ++n) sq += (plane_of(xd, n, c) - static_cast<T>(mu)).square().sum();
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + layer.eps));
      const double unbiased = sq / static_cast<double>(count - 1);
      rm[c] = static_cast<T>((1.0 - layer.momentum) * rm[c] + layer.momentum * mu);
      rv[c] = static_cast<T>((1.0 - layer.momentum) * rv[c] + layer.momentum * unbiased);
    }
  } else {
    for (std::int64_t c = 0; c < channels; ++c) {
      mean[c] = rm[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + layer.eps));
    }
  }

  Tensor<T> out(s);
  T* yd = out.data().data();
  auto gd = layer.gamma.value.data();
  auto bd = layer.beta.value.data();
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      ArrayMap(yd + (n * channels + c) * plane, plane) =
          (plane_of(xd, n, c) - mean[c]) * (inv_std[c] * gd[c]) + bd[c];
    }

  const Tensor<T>& gamma = layer.gamma.value;
  const Tensor<T>& beta = layer.beta.value;
  detail::record(out, {&x, &gamma, &beta},
                 [ys = out.shared(), xs = x.shared(), gs = gamma.shared(), bs = beta.shared(),
                  mean = std::move(mean), inv_std = std::move(inv_std), training = layer.training] {
                   if (ys->grad.empty()) return;
                   const Shape s = xs->shape;
                   const std::int64_t channels = s.c;
                   const std::int64_t plane = s.plane();
                   const double count = static_cast<double>(s.n * plane);
                   auto map = [&](const T* base, std::int64_t n, std::int64_t c) {
                     return ConstArrayMap(base + (n * channels + c) * plane, plane);
                   };
                   const T* dy = ys->grad.data();
                   const T* xd = xs->data.data();
                   // sum(dy) and sum(dy * xhat) per channel
                   std::vector<double> sum_dy(static_cast<std::size_t>(channels), 0.0);
                   std::vector<double> sum_dy_h(static_cast<std::size_t>(channels), 0.0);
                   for (std::int64_t n = 0; n < s.n; ++n)
                     for (std::int64_t c = 0; c < channels; ++c) {
                       const auto g = map(dy, n, c);
                       sum_dy[c] += g.sum();
                       sum_dy_h[c] += static_cast<double>((g * (map(xd, n, c) - mean[c])).sum()) * inv_std[c];
                     }
                   if (gs->requires_grad) {
                     auto dg = gs->ensure_grad();
                     for (std::int64_t c = 0; c < channels; ++c) dg[c] += static_cast<T>(sum_dy_h[c]);
                   }
                   if (bs->requires_grad) {
                     auto db = bs->ensure_grad();
                     for (std::int64_t c = 0; c < channels; ++c) db[c] += static_cast<T>(sum_dy[c]);
                   }
                   if (!xs->requires_grad) return;
                   T* dx = xs->ensure_grad().data();
                   for (std::int64_t n = 0; n < s.n; ++n)
                     for (std::int64_t c = 0; c < channels; ++c) {
                       ArrayMap dxp(dx + (n * channels + c) * plane, plane);
                       const T k = gs->data[c] * inv_std[c];
                       if (training) {
                         const T mean_dy = static_cast<T>(sum_dy[c] / count);
                         const T mean_dy_h = static_cast<T>(sum_dy_h[c] / count);
                         dxp += k * (map(dy, n, c) - mean_dy - (map(xd, n, c) - mean[c]) * (inv_std[c] * mean_dy_h));
                       } else {
                         dxp += k * map(dy, n, c);
                       }
                     }
                 });
  return out;
}

/// 2x2 max pooling with stride 2; ties go to the first element in row-major order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("max_pool2d: odd spatial dims " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(os);
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(os.numel()));
  auto xd = x.data();
  auto yd = out.data();
  std::size_t o = 0;
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const std::int64_t base = nc * s.plane();
    for (std::int64_t i = 0; i < os.h; ++i) {
      for (std::int64_t j = 0; j < os.w; ++j, ++o) {
        std::int64_t best = base + (2 * i) * s.w + 2 * j;
        for (std::int64_t di = 0; di < 2; ++di)
          for (std::int64_t dj = 0; dj < 2; ++dj) {
            const std::int64_t idx = base + (2 * i + di) * s.w + 2 * j + dj;
            if (xd[idx] > xd[best]) best = idx;
          }
        argmax[o] = best;
        yd[o] = xd[best];
      }
    }
  }
  detail::record(out, {&x}, [ys = out.shared(), xs = x.shared(), argmax = std::move(argmax)] {
    if (ys->grad.empty()) return;
    auto gx = xs->ensure_grad();
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += ys->grad[i];
  });
  return out;
}

namespace detail {

// Source taps for align_corners=false linear resampling of one axis.
struct LinearTap {
  std::int64_t lo, hi;
  double frac;
};

inline std::vector<LinearTap> linear_taps(std::int64_t in, std::int64_t factor) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(in * factor));
  for (std::int64_t o = 0; o < in * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0.0) src = 0.0;
    std::int64_t lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::int64_t hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling by an integer factor (align_corners = false), done as a
/// horizontal pass followed by a vertical pass.
template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::int64_t factor = 2) {
  if (factor < 1) throw ValueError("upsample_bilinear: factor must be >= 1");
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  Tensor<T> out(os);
  auto rows = detail::linear_taps(s.h, factor);
  auto cols = detail::linear_taps(s.w, factor);
  std::vector<T> wide(static_cast<std::size_t>(s.h * os.w));
  const T* xd = x.data().data();
  T* yd = out.data().data();
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = xd + nc * s.plane();
    T* dst = yd + nc * os.plane();
    for (std::int64_t i = 0; i < s.h; ++i) {
      const T* r = src + i * s.w;
      T* wr = wide.data() + i * os.w;
      for (std::int64_t j = 0; j < os.w; ++j) {
        const auto& q = cols[static_cast<std::size_t>(j)];
        const T f = static_cast<T>(q.frac);
        wr[j] = r[q.lo] + (r[q.hi] - r[q.lo]) * f;
      }
    }
    for (std::int64_t i = 0; i < os.h; ++i) {
      const auto& r = rows[static_cast<std::size_t>(i)];
      const T f = static_cast<T>(r.frac);
      const T* lo = wide.data() + r.lo * os.w;
      const T* hi = wide.data() + r.hi * os.w;
      T* __restrict d = dst + i * os.w;
      for (std::int64_t j = 0; j < os.w; ++j) d[j] = lo[j] + (hi[j] - lo[j]) * f;
    }
  }
  detail::record(out, {&x}, [ys = out.shared(), xs = x.shared(), rows = std::move(rows), cols = std::move(cols)] {
    if (ys->grad.empty()) return;
    const Shape s = xs->shape;
    const Shape os = ys->shape;
    T* gx = xs->ensure_grad().data();
    std::vector<T> wide(static_cast<std::size_t>(s.h * os.w));
    for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
      const T* g = ys->grad.data() + nc * os.plane();
      std::fill(wide.begin(), wide.end(), T(0));
      for (std::int64_t i = 0; i < os.h; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        const T f = static_cast<T>(r.frac);
        const T* gr = g + i * os.w;
        T* __restrict lo = wide.data() + r.lo * os.w;
        for (std::int64_t j = 0; j < os.w; ++j) lo[j] += gr[j] * (T(1) - f);
        T* __restrict hi = wide.data() + r.hi * os.w;
        for (std::int64_t j = 0; j < os.w; ++j) hi[j] += gr[j] * f;
      }
      T* dst = gx + nc * s.plane();
      for (std::int64_t i = 0; i < s.h; ++i) {
        const T* wr = wide.data() + i * os.w;
        T* d = dst + i * s.w;
        for (std::int64_t j = 0; j < os.w; ++j) {
          const auto& q = cols[static_cast<std::size_t>(j)];
          const T f = static_cast<T>(q.frac);
          d[q.lo] += wr[j] * (T(1) - f);
          d[q.hi] += wr[j] * f;
        }
      }
    }
  });
  return out;
}

/// Mean over H x W per channel -> (N, C, 1, 1).
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.plane() < 1) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  auto xd = x.data();
  auto yd = out.data();
  const std::int64_t plane = s.plane();
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    T acc = T(0);
    for (std::int64_t i = 0; i < plane; ++i) acc += xd[nc * plane + i];
    yd[nc] = acc / static_cast<T>(plane);
  }
  detail::record(out, {&x}, [ys = out.shared(), xs = x.shared()] {
    if (ys->grad.empty()) return;
    const std::int64_t plane = xs->shape.plane();
    auto gx = xs->ensure_grad();
    const T inv = T(1) / static_cast<T>(plane);
    for (std::size_t nc = 0; nc < ys->grad.size(); ++nc) {
      const T g = ys->grad[nc] * inv;
      for (std::int64_t i = 0; i < plane; ++i) gx[nc * plane + i] += g;
    }
  });
  return out;
}

}  // namespace wavemix
