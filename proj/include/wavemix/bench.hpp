#pragma once

// Throughput measurement on synthetic input.

#include <algorithm>
#include <chrono>
#include <random>
#include <cstdint>
#include <vector>

#include "wavemix/model.hpp"
#include "wavemix/ops.hpp"

namespace wavemix {

struct BenchResult {
  std::int64_t batch = 0;
  std::int64_t timed_iters = 0;
  double forward_ms = 0.0;   // median per batch
  double training_ms = 0.0;  // forward + backward, median per batch
  double forward_images_per_sec() const { return 1e3 * static_cast<double>(batch) / forward_ms; }
  double training_images_per_sec() const { return 1e3 * static_cast<double>(batch) / training_ms; }
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

/// Runs `iters` passes of each mode; the first of each is discarded as warmup.
template <class T = float>
BenchResult bench(const ModelSpec& spec, const Shape& input, std::int64_t iters, std::uint64_t seed = 0) {
  if (iters < 3) throw ValueError("bench needs at least 3 iterations (the first is discarded)");
  WaveMixModel<T> model(spec, seed);
  model.check_input(input);
  Tensor<T> x(input);
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (T& v : x.data()) v = static_cast<T>(unit(rng));
  using clock = std::chrono::steady_clock;
  std::vector<double> fwd, train;
  model.set_training(false);
  for (std::int64_t i = 0; i < iters; ++i) {
    NoGradGuard<T> guard;
    const auto t0 = clock::now();
    const auto y = model.forward(x);
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    if (i > 0) fwd.push_back(ms);
  }
  model.set_training(true);
  for (std::int64_t i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    model.zero_grad();
    backward(sum(model.forward(x)));
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    if (i > 0) train.push_back(ms);
  }
  return {input.n, iters - 1, detail::median(fwd), detail::median(train)};
}

}  // namespace wavemix
