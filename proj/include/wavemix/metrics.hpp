#pragma once

// Top-1 accuracy and mean intersection-over-union.

#include <cstdint>
#include <span>
#include <vector>

#include "wavemix/errors.hpp"
#include "wavemix/tensor.hpp"

namespace wavemix {

/// Per-position argmax over channels of (N, C, H, W) logits, in (n, h, w) order.
/// Ties go to the lower class index.
template <class T>
std::vector<std::int32_t> argmax_channels(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  const std::int64_t plane = s.plane();
  const auto d = logits.data();
  std::vector<std::int32_t> out(static_cast<std::size_t>(s.n * plane));
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t p = 0; p < plane; ++p) {
      const T* base = d.data() + n * s.c * plane + p;
      std::int32_t best = 0;
      for (std::int64_t c = 1; c < s.c; ++c)
        if (base[c * plane] > base[best * plane]) best = static_cast<std::int32_t>(c);
      out[static_cast<std::size_t>(n * plane + p)] = best;
    }
  return out;
}

/// Number of rows of (N, C, 1, 1) logits whose argmax equals the label.
template <class T>
std::int64_t count_correct(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  const auto pred = argmax_channels(logits);
  if (pred.size() != labels.size()) {
    throw ShapeError("logits " + logits.shape().str() + " do not match " + std::to_string(labels.size()) + " labels");
  }
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return hits;
}

template <class T>
double top1_accuracy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  if (labels.empty()) return 0.0;
  return static_cast<double>(count_correct(logits, labels)) / static_cast<double>(labels.size());
}

/// Intersection and union pixel counts per class, accumulated across batches.
class IouAccumulator {
 public:
  explicit IouAccumulator(std::int64_t classes)
      : inter_(static_cast<std::size_t>(classes), 0), uni_(static_cast<std::size_t>(classes), 0) {}

  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth) {
    if (pred.size() != truth.size()) throw ShapeError("prediction and ground-truth masks differ in size");
    const auto classes = static_cast<std::int32_t>(inter_.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const std::int32_t p = pred[i], t = truth[i];
      if (p < 0 || p >= classes || t < 0 || t >= classes) throw ValueError("mask value outside [0, classes)");
      if (p == t) {
        ++inter_[static_cast<std::size_t>(p)];
        ++uni_[static_cast<std::size_t>(p)];
      } else {
        ++uni_[static_cast<std::size_t>(p)];
        ++uni_[static_cast<std::size_t>(t)];
      }
    }
  }

  /// Mean IoU over classes present in either mask; 0 when no class is present.
  double mean() const {
    double total = 0.0;
    std::int64_t counted = 0;
    for (std::size_t c = 0; c < inter_.size(); ++c) {
      if (uni_[c] == 0) continue;
      total += static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
      ++counted;
    }
    return counted ? total / static_cast<double>(counted) : 0.0;
  }

 private:
  std::vector<std::int64_t> inter_, uni_;
};

inline double mean_iou(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::int64_t classes) {
  IouAccumulator acc(classes);
  acc.add(pred, truth);
  return acc.mean();
}

}  // namespace wavemix
