#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "wavemix/tensor.hpp"

namespace wavemix {

/// Compares reverse-mode gradients of the scalar `loss_fn()` with respect to each
/// tensor in `wrt` against central differences. Returns
/// max |analytic - numeric| / max(1, |numeric|) over all checked elements.
/// `wrt` must be leaves with requires_grad set; their gradients are overwritten.
inline double grad_check_tensors(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> wrt,
                                 double eps = 1e-5) {
  clear_graph<double>();
  for (auto& t : wrt) t.zero_grad();
  Tensor<double> loss = loss_fn();
  backward(loss);
  double worst = 0.0;
  for (auto& t : wrt) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.data();
    NoGradGuard<double> no_grad;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss_fn().item();
      values[i] = saved - eps;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

/// Single-input form: `f(x)` must return a scalar.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                         double eps = 1e-5) {
  Tensor<double> leaf = x.detach();
  leaf.set_requires_grad(true);
  return grad_check_tensors([&] { return f(leaf); }, {leaf}, eps);
}

}  // namespace wavemix
