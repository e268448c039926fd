#pragma once

// Parameter-free token mixers: orthonormal 2-D Haar DWT (and inverse), real part
// of the 2-D DFT, 2x2 max pooling and identity.
//
// Subbands are concatenated channel-major: for input channel c, output channels
// 4c..4c+3 hold LL, LH, HL, HH.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "wavemix/nn.hpp"
#include "wavemix/tensor.hpp"

namespace wavemix {

namespace detail {

// For each 2x2 block [[a, b], [c, d]]:
//   LL = (a+b+c+d)/2, LH = (a-b+c-d)/2, HL = (a+b-c-d)/2, HH = (a-b-c+d)/2.
template <class T>
void haar_forward_raw(const T* x, const Shape& s, T* y) {
  const std::int64_t oh = s.h / 2;
  const std::int64_t ow = s.w / 2;
  const std::int64_t oplane = oh * ow;
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x + nc * s.plane();
    T* ll = y + (nc * 4 + 0) * oplane;
    T* lh = ll + oplane;
    T* hl = lh + oplane;
    T* hh = hl + oplane;
    for (std::int64_t i = 0; i < oh; ++i) {
      const T* r0 = src + (2 * i) * s.w;
      const T* r1 = r0 + s.w;
      for (std::int64_t j = 0; j < ow; ++j) {
        const T a = r0[2 * j], b = r0[2 * j + 1], c = r1[2 * j], d = r1[2 * j + 1];
        const std::int64_t o = i * ow + j;
        ll[o] = T(0.5) * (a + b + c + d);
        lh[o] = T(0.5) * (a - b + c - d);
        hl[o] = T(0.5) * (a + b - c - d);
        hh[o] = T(0.5) * (a - b - c + d);
      }
    }
  }
}

// `s` is the shape of the subband tensor (N, 4C, H, W); output is (N, C, 2H, 2W).
template <class T>
void haar_inverse_raw(const T* y, const Shape& s, T* x) {
  const std::int64_t plane = s.plane();
  const std::int64_t ow = 2 * s.w;
  const std::int64_t channels = s.c / 4;
  for (std::int64_t nc = 0; nc < s.n * channels; ++nc) {
    const T* ll = y + (nc * 4) * plane;
    const T* lh = ll + plane;
    const T* hl = lh + plane;
    const T* hh = hl + plane;
    T* dst = x + nc * 4 * plane;
    for (std::int64_t i = 0; i < s.h; ++i) {
      T* r0 = dst + (2 * i) * ow;
      T* r1 = r0 + ow;
      for (std::int64_t j = 0; j < s.w; ++j) {
        const std::int64_t o = i * s.w + j;
        r0[2 * j] = T(0.5) * (ll[o] + lh[o] + hl[o] + hh[o]);
        r0[2 * j + 1] = T(0.5) * (ll[o] - lh[o] + hl[o] - hh[o]);
        r1[2 * j] = T(0.5) * (ll[o] + lh[o] - hl[o] - hh[o]);
        r1[2 * j + 1] = T(0.5) * (ll[o] - lh[o] - hl[o] + hh[o]);
      }
    }
  }
}

}  // namespace detail

/// Level-1 orthonormal Haar DWT: (N, C, H, W) -> (N, 4C, H/2, W/2).
template <class T>
Tensor<T> haar_dwt2d(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("haar_dwt2d: spatial dims must be even, got " + s.str());
  }
  Tensor<T> out(Shape{s.n, 4 * s.c, s.h / 2, s.w / 2});
  detail::haar_forward_raw(x.data().data(), s, out.data().data());
  detail::record(out, {&x}, [ys = out.shared(), xs = x.shared()] {
    if (ys->grad.empty()) return;
    // Orthonormal: the adjoint is the inverse transform.
    std::vector<T> tmp(ys->grad.size());
    detail::haar_inverse_raw(ys->grad.data(), ys->shape, tmp.data());
    auto gx = xs->ensure_grad();
    for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
  });
  return out;
}

/// Inverse of haar_dwt2d: (N, 4C, H, W) -> (N, C, 2H, 2W).
template <class T>
Tensor<T> haar_idwt2d(const Tensor<T>& y) {
  const Shape s = y.shape();
  if (s.c % 4 != 0) throw ShapeError("haar_idwt2d: channel count must be divisible by 4, got " + s.str());
  Tensor<T> out(Shape{s.n, s.c / 4, 2 * s.h, 2 * s.w});
  detail::haar_inverse_raw(y.data().data(), s, out.data().data());
  detail::record(out, {&y}, [xs = out.shared(), ys = y.shared()] {
    if (xs->grad.empty()) return;
    std::vector<T> tmp(xs->grad.size());
    detail::haar_forward_raw(xs->grad.data(), xs->shape, tmp.data());
    auto gy = ys->ensure_grad();
    for (std::size_t i = 0; i < tmp.size(); ++i) gy[i] += tmp[i];
  });
  return out;
}

namespace detail {

// Re(sum_{m,n} x[m,n] e^{-2 pi i (k m / H + l n / W)}) = (Ch X Cw - Sh X Sw)[k,l].
// Both Ch and Sh are symmetric, so the map is self-adjoint.
template <class T>
void dft2_real_raw(const T* x, const Shape& s, T* y) {
  auto table = [](std::int64_t len, bool sine) {
    std::vector<double> m(static_cast<std::size_t>(len * len));
    for (std::int64_t a = 0; a < len; ++a)
      for (std::int64_t b = 0; b < len; ++b) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>((a * b) % len) / static_cast<double>(len);
        m[a * len + b] = sine ? std::sin(angle) : std::cos(angle);
      }
    return m;
  };
  const auto ch = table(s.h, false), sh = table(s.h, true);
  const auto cw = table(s.w, false), sw = table(s.w, true);
  std::vector<double> xc(static_cast<std::size_t>(s.plane()));  // X Cw
  std::vector<double> xs(static_cast<std::size_t>(s.plane()));  // X Sw
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = x + nc * s.plane();
    T* dst = y + nc * s.plane();
    for (std::int64_t m = 0; m < s.h; ++m)
      for (std::int64_t l = 0; l < s.w; ++l) {
        double ac = 0.0, as = 0.0;
        for (std::int64_t n = 0; n < s.w; ++n) {
          ac += src[m * s.w + n] * cw[n * s.w + l];
          as += src[m * s.w + n] * sw[n * s.w + l];
        }
        xc[m * s.w + l] = ac;
        xs[m * s.w + l] = as;
      }
    for (std::int64_t k = 0; k < s.h; ++k)
      for (std::int64_t l = 0; l < s.w; ++l) {
        double acc = 0.0;
        for (std::int64_t m = 0; m < s.h; ++m) acc += ch[k * s.h + m] * xc[m * s.w + l] - sh[k * s.h + m] * xs[m * s.w + l];
        dst[k * s.w + l] = static_cast<T>(acc);
      }
  }
}

}  // namespace detail

/// Real part of the unnormalized 2-D DFT over (H, W), per channel.
template <class T>
Tensor<T> dft2_real(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  detail::dft2_real_raw(x.data().data(), x.shape(), out.data().data());
  detail::record(out, {&x}, [ys = out.shared(), xs = x.shared()] {
    if (ys->grad.empty()) return;
    std::vector<T> tmp(ys->grad.size());
    detail::dft2_real_raw(ys->grad.data(), ys->shape, tmp.data());
    auto gx = xs->ensure_grad();
    for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
  });
  return out;
}

struct MixerKind {
  enum class Type { kDwt, kMaxPool, kDftReal, kIdentity };

  Type type = Type::kDwt;
  int levels = 1;  // only meaningful for kDwt

  static MixerKind dwt(int levels = 1) { return {Type::kDwt, levels}; }
  static MixerKind maxpool() { return {Type::kMaxPool, 1}; }
  static MixerKind dft_real() { return {Type::kDftReal, 1}; }
  static MixerKind identity() { return {Type::kIdentity, 1}; }

  friend bool operator==(const MixerKind&, const MixerKind&) = default;

  /// Spatial downscale factor applied by the mixer (2^levels, 2 or 1).
  std::int64_t downscale() const {
    switch (type) {
      case Type::kDwt: return std::int64_t{1} << levels;
      case Type::kMaxPool: return 2;
      default: return 1;
    }
  }

  /// Output-to-input channel ratio (4^levels for dwt, 1 otherwise).
  std::int64_t channel_factor() const {
    return type == Type::kDwt ? (std::int64_t{1} << (2 * levels)) : 1;
  }

  Shape output_shape(const Shape& in) const {
    const std::int64_t f = downscale();
    if (in.h % f != 0 || in.w % f != 0) {
      throw ShapeError(name() + " mixer needs H and W divisible by " + std::to_string(f) + ", got " + in.str());
    }
    return {in.n, in.c * channel_factor(), in.h / f, in.w / f};
  }

  std::string name() const {
    switch (type) {
      case Type::kDwt: return "dwt";
      case Type::kMaxPool: return "maxpool";
      case Type::kDftReal: return "dft";
      case Type::kIdentity: return "none";
    }
    return "?";
  }

  /// Mixers never own parameters.
  static constexpr std::int64_t parameter_count() { return 0; }
};

/// Applies the token mixer. Multi-level DWT re-applies the level-1 transform to
/// the whole concatenated subband stack, giving 4^levels * C channels.
template <class T>
Tensor<T> mix(const Tensor<T>& x, const MixerKind& kind) {
  switch (kind.type) {
    case MixerKind::Type::kDwt: {
      if (kind.levels < 1 || kind.levels > 4) throw ValueError("dwt levels must be in [1, 4]");
      kind.output_shape(x.shape());
      Tensor<T> y = haar_dwt2d(x);
      for (int l = 1; l < kind.levels; ++l) y = haar_dwt2d(y);
      return y;
    }
    case MixerKind::Type::kMaxPool: return max_pool2d(x);
    case MixerKind::Type::kDftReal: return dft2_real(x);
    case MixerKind::Type::kIdentity: return x;
  }
  return x;
}

}  // namespace wavemix
