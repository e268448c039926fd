#pragma once

// Analytic parameter, FLOP and activation estimates, layer by layer.

#include <cstdint>
#include <string>
#include <vector>

#include "wavemix/conv.hpp"
#include "wavemix/model_spec.hpp"
#include "wavemix/tensor.hpp"

namespace wavemix {

inline constexpr const char* kFlopConvention =
    "FLOPs = 2 x multiply-accumulates for conv, deconv and linear layers, plus one add per output for biases; "
    "Haar DWT = 8*C*H*W per level (input size); DFT = 4*C*H*W*(H+W) + C*H*W; max pool = 3 per output; "
    "bilinear upsample = 8 per output; GELU, batch norm (eval) and residual add = 1, 2 and 1 per element; "
    "global average pool = 1 per input element. Activations count the scalars of every new layer output.";

struct CostRow {
  std::string layer;  // e.g. "blocks.2.mlp1"
  std::string kind;   // conv3x3, conv1x1, dwt, deconv, gelu, bn, add, ...
  Shape output;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t activations = 0;
};

struct CostReport {
  ModelSpec spec;
  Shape input;
  std::vector<CostRow> rows;

  std::int64_t total_params() const { return sum(&CostRow::params); }
  std::int64_t total_flops() const { return sum(&CostRow::flops); }
  std::int64_t total_activations() const { return sum(&CostRow::activations); }

  /// Activation scalars of one block's MLP (mlp1, GELU, mlp2).
  std::int64_t block_mlp_activations(std::int64_t block) const {
    const std::string prefix = "blocks." + std::to_string(block) + ".";
    std::int64_t total = 0;
    for (const auto& r : rows)
      if (r.layer == prefix + "mlp1" || r.layer == prefix + "gelu" || r.layer == prefix + "mlp2") total += r.activations;
    return total;
  }

  const CostRow* find(const std::string& layer) const {
    for (const auto& r : rows)
      if (r.layer == layer) return &r;
    return nullptr;
  }

 private:
  std::int64_t sum(std::int64_t CostRow::*field) const {
    std::int64_t total = 0;
    for (const auto& r : rows) total += r.*field;
    return total;
  }
};

namespace detail {

class CostWalker {
 public:
  explicit CostWalker(CostReport& r) : r_(r) {}

  Shape conv(const std::string& name, const Shape& in, std::int64_t out_c, std::int64_t k, std::int64_t stride,
             std::int64_t pad) {
    const Shape out{in.n, out_c, conv_out_dim(in.h, k, stride, pad), conv_out_dim(in.w, k, stride, pad)};
    const std::int64_t macs = k * k * in.c * out_c * out.plane() * in.n;
    push(name, "conv" + std::to_string(k) + "x" + std::to_string(k), out, k * k * in.c * out_c + out_c,
         2 * macs + out.numel());
    return out;
  }

  Shape deconv(const std::string& name, const Shape& in, std::int64_t out_c) {
    const Shape out{in.n, out_c, deconv_out_dim(in.h, 4, 2, 1), deconv_out_dim(in.w, 4, 2, 1)};
    const std::int64_t macs = 16 * in.c * out_c * in.plane() * in.n;
    push(name, "deconv4x4", out, 16 * in.c * out_c + out_c, 2 * macs + out.numel());
    return out;
  }

  Shape elementwise(const std::string& name, const std::string& kind, const Shape& s, std::int64_t per_element,
                    std::int64_t params = 0) {
    push(name, kind, s, params, per_element * s.numel());
    return s;
  }

  void push(const std::string& layer, const std::string& kind, const Shape& out, std::int64_t params,
            std::int64_t flops, bool new_output = true) {
    r_.rows.push_back({layer, kind, out, params, flops, new_output ? out.numel() : 0});
  }

 private:
  CostReport& r_;
};

}  // namespace detail

/// Walks the architecture for an (N, C, H, W) input without allocating it.
inline CostReport estimate_cost(const ModelSpec& spec, const Shape& input) {
  spec.validate();
  if (input.n < 1 || input.c != spec.in_channels) {
    throw ShapeError("cost input " + input.str() + " must have N >= 1 and " + std::to_string(spec.in_channels) +
                     " channels");
  }
  const std::int64_t div = spec.required_divisor();
  if (input.h < 1 || input.w < 1 || input.h % div != 0 || input.w % div != 0) {
    throw ShapeError("cost input " + input.str() + " needs H and W divisible by " + std::to_string(div));
  }
  CostReport report{spec, input, {}};
  detail::CostWalker w(report);
  const std::int64_t e = spec.embed;
  Shape h = w.conv("stem.0", input, e / 2, 3, spec.stem_strides[0], 1);
  h = w.conv("stem.1", h, e, 3, spec.stem_strides[1], 1);

  for (std::int64_t b = 0; b < spec.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    Shape t = w.conv(p + "reduce", h, e / 4, 1, 1, 0);
    const MixerKind& m = spec.mixer;
    switch (m.type) {
      case MixerKind::Type::kIdentity:
        w.push(p + "mix", "identity", t, 0, 0, false);
        break;
      case MixerKind::Type::kDwt: {
        std::int64_t flops = 0;
        Shape cur = t;
        for (int level = 0; level < m.levels; ++level) {
          flops += 8 * cur.numel();
          cur = Shape{cur.n, cur.c * 4, cur.h / 2, cur.w / 2};
        }
        t = cur;
        w.push(p + "mix", "dwt", t, 0, flops);
        break;
      }
      case MixerKind::Type::kMaxPool:
        t = m.output_shape(t);
        w.push(p + "mix", "maxpool", t, 0, 3 * t.numel());
        break;
      case MixerKind::Type::kDftReal:
        w.push(p + "mix", "dft", t, 0, 4 * t.numel() * (t.h + t.w) + t.numel());
        break;
    }
    t = w.conv(p + "mlp1", t, spec.mul * e, 1, 1, 0);
    t = w.elementwise(p + "gelu", "gelu", t, 1);
    if (spec.uses_deconv()) {
      t = w.conv(p + "mlp2", t, spec.ff, 1, 1, 0);
      for (std::int64_t f = m.downscale(), j = 0; f > 1; f /= 2, ++j) t = w.deconv(p + "expand." + std::to_string(j), t, e);
    } else {
      t = w.conv(p + "mlp2", t, e, 1, 1, 0);
      if (m.downscale() > 1) {
        t = Shape{t.n, t.c, t.h * m.downscale(), t.w * m.downscale()};
        w.elementwise(p + "upsample", "bilinear", t, 8);
      }
    }
    w.elementwise(p + "bn", "batchnorm", t, 2, 2 * e);
    h = w.elementwise(p + "add", "residual", h, 1);
  }

  if (spec.task == Task::kClassify) {
    const Shape pooled{h.n, e, 1, 1};
    w.push("head.pool", "gap", pooled, 0, h.numel());
    const Shape logits{h.n, spec.classes, 1, 1};
    w.push("head.fc", "linear", logits, e * spec.classes + spec.classes, 2 * h.n * e * spec.classes + logits.numel());
  } else {
    std::int64_t j = 0;
    for (std::int64_t s : spec.stem_strides)
      if (s == 2) h = w.deconv("head.up." + std::to_string(j++), h, e);
    w.conv("head.out", h, spec.classes, 1, 1, 0);
  }
  return report;
}

}  // namespace wavemix
