#pragma once

// AdamW with decoupled weight decay, SGD with momentum, and the two-phase
// schedule that hands the last `sgd_tail` epochs to SGD.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "wavemix/errors.hpp"
#include "wavemix/tensor.hpp"

namespace wavemix {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  bool decay_norm_and_bias = true;  // false: skip 1-D parameters (BN affine, biases)
};

struct SgdConfig {
  double lr = 1e-3;
  double momentum = 0.9;
};

namespace detail {

template <class T>
std::span<const T> checked_grad(const Parameter<T>& p) {
  if (!p.value.has_grad()) throw ValueError("parameter '" + p.name + "' has no gradient");
  return p.value.grad();
}

}  // namespace detail

/// Per-parameter moment buffers plus the shared step counter.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<Parameter<T>> params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
      v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
  }

  void step() {
    for (const auto& p : params_) detail::checked_grad(p);
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T> value = params_[k].value;
      auto theta = value.data();
      const auto g = value.grad();
      const bool decays = cfg_.decay_norm_and_bias || params_[k].dims.size() > 1;
      const double keep = 1.0 - cfg_.lr * (decays ? cfg_.weight_decay : 0.0);
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = g[i];
        const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
        theta[i] = static_cast<T>(theta[i] * keep - update);
      }
    }
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

 private:
  std::vector<Parameter<T>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t t_ = 0;
};

template <class T>
class Sgd {
 public:
  Sgd() = default;
  Sgd(std::vector<Parameter<T>> params, SgdConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) buf_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
  }

  void step() {
    for (const auto& p : params_) detail::checked_grad(p);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T> value = params_[k].value;
      auto theta = value.data();
      const auto g = value.grad();
      auto& b = buf_[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        b[i] = static_cast<T>(cfg_.momentum * b[i] + g[i]);
        theta[i] = static_cast<T>(theta[i] - cfg_.lr * b[i]);
      }
    }
  }

  const SgdConfig& config() const { return cfg_; }
  std::vector<std::vector<T>>& momentum_buffers() { return buf_; }
  const std::vector<std::vector<T>>& momentum_buffers() const { return buf_; }

 private:
  std::vector<Parameter<T>> params_;
  SgdConfig cfg_;
  std::vector<std::vector<T>> buf_;
};

enum class Phase { kAdamW, kSgd };

inline std::string to_string(Phase p) { return p == Phase::kAdamW ? "adamw" : "sgd"; }

struct Schedule {
  std::int64_t total_epochs = 150;
  std::int64_t sgd_tail = 20;

  /// Requested tail clipped to half the run.
  std::int64_t tail() const { return std::max<std::int64_t>(0, std::min(sgd_tail, total_epochs / 2)); }
  std::int64_t first_sgd_epoch() const { return total_epochs - tail(); }
};

inline Phase select_optimizer(std::int64_t epoch, const Schedule& sched) {
  return epoch < sched.first_sgd_epoch() ? Phase::kAdamW : Phase::kSgd;
}

}  // namespace wavemix
