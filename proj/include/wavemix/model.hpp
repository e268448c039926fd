#pragma once

// WaveMix-Lite block, classifier and segmenter.
//
//   stem:   conv3x3(in -> E/2) -> conv3x3(E/2 -> E)
//   block:  x + bn(expand(mlp2(gelu(mlp1(mix(reduce(x)))))))
//   head:   classify -> global average pool -> linear(E -> classes)
//           segment  -> one deconv(k4, s2, p1) per stride-2 stem conv -> conv1x1(E -> classes)

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wavemix/conv.hpp"
#include "wavemix/model_spec.hpp"
#include "wavemix/nn.hpp"
#include "wavemix/ops.hpp"
#include "wavemix/wavelet.hpp"

namespace wavemix {

template <class T>
struct WaveMixBlock {
  Conv2dLayer<T> reduce;
  MixerKind mixer;
  Conv2dLayer<T> mlp1;
  Conv2dLayer<T> mlp2;
  std::vector<ConvTranspose2dLayer<T>> expand;  // deconv mode
  std::int64_t upsample_factor = 1;             // bilinear mode
  BatchNorm2d<T> bn;

  WaveMixBlock() = default;

  WaveMixBlock(const std::string& name, const ModelSpec& spec, Rng& rng) : mixer(spec.mixer) {
    const std::int64_t e = spec.embed;
    const std::int64_t hidden = spec.mul * e;
    const std::int64_t mixed = (e / 4) * mixer.channel_factor();
    reduce = Conv2dLayer<T>(name + ".reduce", e, e / 4, 1, 1, 0, rng);
    mlp1 = Conv2dLayer<T>(name + ".mlp1", mixed, hidden, 1, 1, 0, rng);
    const std::int64_t down = mixer.downscale();
    if (spec.uses_deconv()) {
      mlp2 = Conv2dLayer<T>(name + ".mlp2", hidden, spec.ff, 1, 1, 0, rng);
      std::int64_t in = spec.ff;
      for (std::int64_t f = down, j = 0; f > 1; f /= 2, ++j) {
        expand.emplace_back(name + ".expand." + std::to_string(j), in, e, 4, 2, 1, rng);
        in = e;
      }
    } else {
      mlp2 = Conv2dLayer<T>(name + ".mlp2", hidden, e, 1, 1, 0, rng);
      upsample_factor = down;
    }
    bn = BatchNorm2d<T>(name + ".bn", e);
  }

  std::int64_t embed() const { return bn.channels(); }

  std::vector<Parameter<T>> parameters() const {
    std::vector<Parameter<T>> out;
    for (const auto* l : {&reduce, &mlp1, &mlp2})
      for (auto& p : l->parameters()) out.push_back(p);
    for (const auto& d : expand)
      for (auto& p : d.parameters()) out.push_back(p);
    for (auto& p : bn.parameters()) out.push_back(p);
    return out;
  }

  /// The branch before the residual add; exposed for activation accounting.
  Tensor<T> branch(const Tensor<T>& x) {
    Tensor<T> h = mix(reduce(x), mixer);
    h = mlp2(gelu(mlp1(h)));
    for (const auto& d : expand) h = d(h);
    if (upsample_factor > 1) h = upsample_bilinear(h, upsample_factor);
    return batch_norm2d(h, bn);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    const Shape s = x.shape();
    if (s.c != embed()) {
      throw ShapeError("block expects " + std::to_string(embed()) + " channels, got " + s.str());
    }
    const std::int64_t f = mixer.downscale();
    if (s.h % f != 0 || s.w % f != 0) {
      throw ShapeError("block input H and W must be divisible by " + std::to_string(f) + ", got " + s.str());
    }
    return add(x, branch(x));
  }
};

template <class T>
Tensor<T> block_forward(const Tensor<T>& x, WaveMixBlock<T>& block) {
  return block.forward(x);
}

struct ParamRow {
  std::string module;  // layer path, e.g. "blocks.3.mlp1"
  std::string group;   // stem | blocks | head
  std::int64_t count = 0;
};

template <class T>
class WaveMixModel {
 public:
  explicit WaveMixModel(ModelSpec spec, std::uint64_t seed = 0) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    const std::int64_t e = spec_.embed;
    stem_.emplace_back("stem.0", spec_.in_channels, e / 2, 3, spec_.stem_strides[0], 1, rng);
    stem_.emplace_back("stem.1", e / 2, e, 3, spec_.stem_strides[1], 1, rng);
    for (std::int64_t i = 0; i < spec_.depth; ++i) blocks_.emplace_back("blocks." + std::to_string(i), spec_, rng);
    build_head(rng);
    collect();
  }

  WaveMixModel(const WaveMixModel&) = delete;
  WaveMixModel& operator=(const WaveMixModel&) = delete;
  WaveMixModel(WaveMixModel&&) noexcept = default;
  WaveMixModel& operator=(WaveMixModel&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }

  /// Parameters in enumeration order: stem, blocks (reduce, mlp1, mlp2, expand, bn), head.
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  /// Batch-norm running statistics, in block order.
  const std::vector<Parameter<T>>& buffers() const { return buffers_; }

  std::vector<WaveMixBlock<T>>& blocks() { return blocks_; }

  std::int64_t param_count() const {
    std::int64_t total = 0;
    for (const auto& p : params_) total += p.numel();
    return total;
  }

  std::vector<ParamRow> param_table() const {
    std::vector<ParamRow> rows;
    for (const auto& p : params_) {
      const std::string module = p.name.substr(0, p.name.rfind('.'));
      const std::string group = p.name.substr(0, p.name.find('.'));
      if (rows.empty() || rows.back().module != module) rows.push_back({module, group, 0});
      rows.back().count += p.numel();
    }
    return rows;
  }

  void set_training(bool training) {
    training_ = training;
    for (auto& b : blocks_) b.bn.training = training;
  }
  bool training() const { return training_; }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// Throws ShapeError unless `s` matches the stem's channel count and divisibility.
  void check_input(const Shape& s) const {
    if (s.c != spec_.in_channels) {
      throw ShapeError("model expects " + std::to_string(spec_.in_channels) + " input channels, got " + s.str());
    }
    const std::int64_t d = spec_.required_divisor();
    if (s.h % d != 0 || s.w % d != 0) {
      throw ShapeError("input H and W must be divisible by " + std::to_string(d) + " (stem stride " +
                       std::to_string(spec_.stem_stride()) + " x mixer downscale " +
                       std::to_string(spec_.mixer.downscale()) + "), got " + s.str());
    }
  }

  /// Stem followed by every block.
  Tensor<T> features(const Tensor<T>& x) {
    check_input(x.shape());
    Tensor<T> h = x;
    for (const auto& conv : stem_) h = conv(h);
    for (auto& b : blocks_) h = b.forward(h);
    return h;
  }

  /// Logits: (N, classes, 1, 1) for classification, (N, classes, H, W) for segmentation.
  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h = features(x);
    if (spec_.task == Task::kClassify) return linear(global_avg_pool(h), fc_weight_.value, fc_bias_.value);
    for (const auto& up : seg_up_) h = up(h);
    return seg_out_(h);
  }

  Tensor<T> operator()(const Tensor<T>& x) { return forward(x); }

  /// Fresh initialization of the task head only (backbone reuse).
  void reset_head(std::uint64_t seed) {
    Rng rng(seed);
    build_head(rng);
    collect();
  }

  static bool is_head_parameter(const std::string& name) { return name.rfind("head.", 0) == 0; }

 private:
  void build_head(Rng& rng) {
    const std::int64_t e = spec_.embed;
    seg_up_.clear();
    if (spec_.task == Task::kClassify) {
      fc_weight_ = {"head.fc.weight", {spec_.classes, e}, Tensor<T>(Shape{spec_.classes, e, 1, 1}, T(0), true)};
      fc_bias_ = {"head.fc.bias", {spec_.classes}, Tensor<T>(Shape{1, spec_.classes, 1, 1}, T(0), true)};
      kaiming_uniform(fc_weight_.value, e, rng);
    } else {
      std::int64_t j = 0;
      for (std::int64_t s : spec_.stem_strides) {
        if (s == 2) seg_up_.emplace_back("head.up." + std::to_string(j++), e, e, 4, 2, 1, rng);
      }
      seg_out_ = Conv2dLayer<T>("head.out", e, spec_.classes, 1, 1, 0, rng);
    }
  }

  void collect() {
    params_.clear();
    buffers_.clear();
    for (const auto& conv : stem_)
      for (auto& p : conv.parameters()) params_.push_back(p);
    for (const auto& b : blocks_) {
      for (auto& p : b.parameters()) params_.push_back(p);
      for (auto& p : b.bn.buffers()) buffers_.push_back(p);
    }
    if (spec_.task == Task::kClassify) {
      params_.push_back(fc_weight_);
      params_.push_back(fc_bias_);
    } else {
      for (const auto& up : seg_up_)
        for (auto& p : up.parameters()) params_.push_back(p);
      for (auto& p : seg_out_.parameters()) params_.push_back(p);
    }
  }

  ModelSpec spec_;
  std::vector<Conv2dLayer<T>> stem_;
  std::vector<WaveMixBlock<T>> blocks_;
  Parameter<T> fc_weight_;
  Parameter<T> fc_bias_;
  std::vector<ConvTranspose2dLayer<T>> seg_up_;
  Conv2dLayer<T> seg_out_;
  std::vector<Parameter<T>> params_;
  std::vector<Parameter<T>> buffers_;
  bool training_ = true;
};

template <class T = float>
WaveMixModel<T> build_model(const ModelSpec& spec, std::uint64_t seed = 0) {
  return WaveMixModel<T>(spec, seed);
}

/// Closed-form parameter count of one block; matches the enumerated registry.
inline std::int64_t block_param_count(const ModelSpec& spec) {
  const std::int64_t e = spec.embed;
  const std::int64_t hidden = spec.mul * e;
  const std::int64_t mixed = (e / 4) * spec.mixer.channel_factor();
  std::int64_t n = (e * (e / 4) + e / 4) + (mixed * hidden + hidden);
  if (spec.uses_deconv()) {
    n += hidden * spec.ff + spec.ff;
    std::int64_t in = spec.ff;
    for (std::int64_t f = spec.mixer.downscale(); f > 1; f /= 2) {
      n += 16 * in * e + e;
      in = e;
    }
  } else {
    n += hidden * e + e;
  }
  return n + 2 * e;
}

/// Parameter count of a spec without allocating the model.
inline std::int64_t param_count(const ModelSpec& spec) {
  const std::int64_t e = spec.embed;
  std::int64_t n = (9 * spec.in_channels * (e / 2) + e / 2) + (9 * (e / 2) * e + e);
  n += spec.depth * block_param_count(spec);
  if (spec.task == Task::kClassify) {
    n += e * spec.classes + spec.classes;
  } else {
    for (std::int64_t s : spec.stem_strides)
      if (s == 2) n += 16 * e * e + e;
    n += e * spec.classes + spec.classes;
  }
  return n;
}

}  // namespace wavemix
