#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wavemix/tensor.hpp"

namespace wavemix {

namespace detail {

// Shared softmax focal kernel; gamma == 0 is plain cross-entropy. Targets are
// laid out (n, h, w) and the loss is averaged over all N*H*W positions.
template <class T>
Tensor<T> softmax_focal(const Tensor<T>& logits, std::span<const std::int32_t> targets, double gamma,
                        const char* name) {
  const Shape s = logits.shape();
  const std::int64_t positions = s.n * s.plane();
  if (static_cast<std::int64_t>(targets.size()) != positions) {
    throw ShapeError(std::string(name) + ": expected " + std::to_string(positions) + " targets, got " +
                     std::to_string(targets.size()));
  }
  if (gamma < 0) throw ValueError(std::string(name) + ": gamma must be >= 0");
  for (std::int32_t t : targets) {
    if (t < 0 || t >= s.c) {
      throw ValueError(std::string(name) + ": target " + std::to_string(t) + " outside [0, " +
                       std::to_string(s.c) + ")");
    }
  }
  const std::int64_t plane = s.plane();
  auto z = logits.data();
  // probs laid out like logits; kept for backward.
  std::vector<double> probs(static_cast<std::size_t>(s.numel()));
  double total = 0.0;
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t p = 0; p < plane; ++p) {
      const std::int64_t base = n * s.c * plane + p;
      double mx = z[base];
      for (std::int64_t c = 1; c < s.c; ++c) mx = std::max(mx, static_cast<double>(z[base + c * plane]));
      double denom = 0.0;
      for (std::int64_t c = 0; c < s.c; ++c) denom += std::exp(z[base + c * plane] - mx);
      const double lse = mx + std::log(denom);
      for (std::int64_t c = 0; c < s.c; ++c) probs[base + c * plane] = std::exp(z[base + c * plane] - lse);
      const std::int32_t t = targets[n * plane + p];
      const double log_pt = z[base + t * plane] - lse;
      const double pt = std::exp(log_pt);
      const double weight = gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, gamma);
      total += -weight * log_pt;
    }
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(total / static_cast<double>(positions)));
  detail::record(out, {&logits},
                 [ys = out.shared(), zs = logits.shared(), probs = std::move(probs),
                  tgt = std::vector<std::int32_t>(targets.begin(), targets.end()), gamma] {
                   if (ys->grad.empty()) return;
                   const Shape s = zs->shape;
                   const std::int64_t plane = s.plane();
                   const double scale = static_cast<double>(ys->grad[0]) / static_cast<double>(s.n * plane);
                   auto gz = zs->ensure_grad();
                   for (std::int64_t n = 0; n < s.n; ++n) {
                     for (std::int64_t p = 0; p < plane; ++p) {
                       const std::int64_t base = n * s.c * plane + p;
                       const std::int32_t t = tgt[n * plane + p];
                       const double pt = probs[base + t * plane];
                       // dL/dz_j = coef * (onehot_j - p_j)
                       double coef = -1.0;
                       if (gamma != 0.0) {
                         const double q = 1.0 - pt;
                         const double log_pt = std::log(std::max(pt, 1e-300));
                         const double mod = std::pow(q, gamma);
                         const double dmod = q > 0.0 ? gamma * std::pow(q, gamma - 1.0) * pt * log_pt : 0.0;
                         coef = dmod - mod;
                       }
                       for (std::int64_t c = 0; c < s.c; ++c) {
                         const double onehot = c == t ? 1.0 : 0.0;
                         gz[base + c * plane] += static_cast<T>(scale * coef * (onehot - probs[base + c * plane]));
                       }
                     }
                   }
                 });
  return out;
}

}  // namespace detail

/// Mean softmax cross-entropy over every (batch, pixel) position. `logits` is
/// (N, C, H, W) (H = W = 1 for classification); `targets` holds N*H*W class ids.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  return detail::softmax_focal(logits, targets, 0.0, "softmax_cross_entropy");
}

/// Mean of -(1 - p_t)^gamma * log(p_t) over every (batch, pixel) position.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets, double gamma = 2.0) {
  return detail::softmax_focal(logits, targets, gamma, "focal_loss");
}

}  // namespace wavemix
