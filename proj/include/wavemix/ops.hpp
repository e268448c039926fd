#pragma once

// Element-wise and shape primitives.

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "wavemix/tensor.hpp"

namespace wavemix {

namespace detail {

inline bool broadcastable(const Shape& a, const Shape& b) {
  auto dim_ok = [](std::int64_t da, std::int64_t db) { return db == da || db == 1; };
  return b.c == a.c && dim_ok(a.n, b.n) && dim_ok(a.h, b.h) && dim_ok(a.w, b.w);
}

// Index into a broadcast operand for element (n,c,h,w) of the full shape.
inline std::int64_t broadcast_index(const Shape& b, std::int64_t n, std::int64_t c, std::int64_t h,
                                    std::int64_t w) {
  const std::int64_t bn = b.n == 1 ? 0 : n;
  const std::int64_t bh = b.h == 1 ? 0 : h;
  const std::int64_t bw = b.w == 1 ? 0 : w;
  return ((bn * b.c + c) * b.h + bh) * b.w + bw;
}

}  // namespace detail

/// a + b. `b` may broadcast over N, H and W (size-1 dims) but must match C.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (!detail::broadcastable(sa, sb)) {
    throw ShapeError("add: cannot broadcast " + sb.str() + " onto " + sa.str());
  }
  Tensor<T> out(sa);
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  const bool same = sa == sb;
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] + db[i];
  } else {
    std::size_t i = 0;
    for (std::int64_t n = 0; n < sa.n; ++n)
      for (std::int64_t c = 0; c < sa.c; ++c)
        for (std::int64_t h = 0; h < sa.h; ++h)
          for (std::int64_t w = 0; w < sa.w; ++w, ++i)
            o[i] = da[i] + db[static_cast<std::size_t>(detail::broadcast_index(sb, n, c, h, w))];
  }
  detail::record(out, {&a, &b}, [os = out.shared(), as = a.shared(), bs = b.shared(), same] {
    if (os->grad.empty()) return;
    const auto& g = os->grad;
    if (as->requires_grad) as->accumulate_grad(g.data());
    if (bs->requires_grad) {
      if (same) {
        bs->accumulate_grad(g.data());
      } else {
        auto gb = bs->ensure_grad();
        const Shape s = os->shape;
        std::size_t i = 0;
        for (std::int64_t n = 0; n < s.n; ++n)
          for (std::int64_t c = 0; c < s.c; ++c)
            for (std::int64_t h = 0; h < s.h; ++h)
              for (std::int64_t w = 0; w < s.w; ++w, ++i)
                gb[static_cast<std::size_t>(detail::broadcast_index(bs->shape, n, c, h, w))] += g[i];
      }
    }
  });
  return out;
}

/// Element-wise product of equally shaped tensors.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] * db[i];
  detail::record(out, {&a, &b}, [os = out.shared(), as = a.shared(), bs = b.shared()] {
    if (os->grad.empty()) return;
    const auto& g = os->grad;
    if (as->requires_grad) {
      auto ga = as->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs->data[i];
    }
    if (bs->requires_grad) {
      auto gb = bs->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as->data[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto da = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] * factor;
  detail::record(out, {&a}, [os = out.shared(), as = a.shared(), factor] {
    if (os->grad.empty()) return;
    auto ga = as->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += os->grad[i] * factor;
  });
  return out;
}

/// Sum of all elements as a (1,1,1,1) tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  auto da = a.data();
  Tensor<T> out(Shape{1, 1, 1, 1}, std::accumulate(da.begin(), da.end(), T(0)));
  detail::record(out, {&a}, [os = out.shared(), as = a.shared()] {
    if (os->grad.empty()) return;
    const T g = os->grad[0];
    for (T& v : as->ensure_grad()) v += g;
  });
  return out;
}

/// Stacks tensors along C in list order.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty list");
  const Shape first = parts.front().shape();
  std::int64_t channels = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: N/H/W mismatch " + s.str() + " vs " + first.str());
    }
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  Tensor<T> out(os);
  auto o = out.data();
  const std::int64_t plane = os.plane();
  std::int64_t c0 = 0;
  for (const auto& p : parts) {
    auto src = p.data();
    const std::int64_t pc = p.shape().c;
    for (std::int64_t n = 0; n < os.n; ++n) {
      std::copy_n(src.begin() + n * pc * plane, pc * plane, o.begin() + (n * channels + c0) * plane);
    }
    c0 += pc;
  }
  bool any = false;
  std::vector<std::shared_ptr<detail::TensorStorage<T>>> stores;
  for (const auto& p : parts) {
    any = any || p.requires_grad();
    stores.push_back(p.shared());
  }
  detail::record_if(any, out, [osp = out.shared(), stores = std::move(stores)] {
    if (osp->grad.empty()) return;
    const Shape s = osp->shape;
    const std::int64_t plane = s.plane();
    std::int64_t c0 = 0;
    for (const auto& st : stores) {
      const std::int64_t pc = st->shape.c;
      if (st->requires_grad) {
        auto g = st->ensure_grad();
        for (std::int64_t n = 0; n < s.n; ++n) {
          const T* src = osp->grad.data() + (n * s.c + c0) * plane;
          T* dst = g.data() + n * pc * plane;
          for (std::int64_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
        }
      }
      c0 += pc;
    }
  });
  return out;
}

/// Channels [begin, begin + count) of `x`.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t count) {
  const Shape s = x.shape();
  if (begin < 0 || count < 0 || begin + count > s.c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + s.str());
  }
  const Shape os{s.n, count, s.h, s.w};
  Tensor<T> out(os);
  const std::int64_t plane = s.plane();
  auto src = x.data();
  auto dst = out.data();
  for (std::int64_t n = 0; n < s.n; ++n) {
    std::copy_n(src.begin() + (n * s.c + begin) * plane, count * plane, dst.begin() + n * count * plane);
  }
  detail::record(out, {&x}, [os_ = out.shared(), xs = x.shared(), begin, count] {
    if (os_->grad.empty()) return;
    const Shape s = xs->shape;
    const std::int64_t plane = s.plane();
    auto g = xs->ensure_grad();
    for (std::int64_t n = 0; n < s.n; ++n) {
      const T* src = os_->grad.data() + n * count * plane;
      T* dst = g.data() + (n * s.c + begin) * plane;
      for (std::int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
  return out;
}

/// y = W x + b for x of shape (N, C_in, 1, 1). `weight` has engine shape
/// (C_out, C_in, 1, 1) and `bias` (1, C_out, 1, 1).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape s = x.shape();
  const std::int64_t out_f = weight.shape().n;
  const std::int64_t in_f = weight.shape().c;
  if (s.h != 1 || s.w != 1) throw ShapeError("linear: input must be (N,C,1,1), got " + s.str());
  if (in_f != s.c) {
    throw ShapeError("linear: weight expects " + std::to_string(in_f) + " inputs, got " + s.str());
  }
  if (bias.numel() != out_f) throw ShapeError("linear: bias size mismatch");
  Tensor<T> out(Shape{s.n, out_f, 1, 1});
  auto xd = x.data();
  auto wd = weight.data();
  auto bd = bias.data();
  auto yd = out.data();
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t o = 0; o < out_f; ++o) {
      T acc = bd[o];
      for (std::int64_t i = 0; i < in_f; ++i) acc += wd[o * in_f + i] * xd[n * in_f + i];
      yd[n * out_f + o] = acc;
    }
  }
  detail::record(out, {&x, &weight, &bias},
                 [ys = out.shared(), xs = x.shared(), ws = weight.shared(), bs = bias.shared(), in_f, out_f] {
                   if (ys->grad.empty()) return;
                   const auto& dy = ys->grad;
                   const std::int64_t batch = xs->shape.n;
                   if (ws->requires_grad) {
                     auto dw = ws->ensure_grad();
                     for (std::int64_t n = 0; n < batch; ++n)
                       for (std::int64_t o = 0; o < out_f; ++o)
                         for (std::int64_t i = 0; i < in_f; ++i)
                           dw[o * in_f + i] += dy[n * out_f + o] * xs->data[n * in_f + i];
                   }
                   if (bs->requires_grad) {
                     auto db = bs->ensure_grad();
                     for (std::int64_t n = 0; n < batch; ++n)
                       for (std::int64_t o = 0; o < out_f; ++o) db[o] += dy[n * out_f + o];
                   }
                   if (xs->requires_grad) {
                     auto dx = xs->ensure_grad();
                     for (std::int64_t n = 0; n < batch; ++n)
                       for (std::int64_t o = 0; o < out_f; ++o)
                         for (std::int64_t i = 0; i < in_f; ++i)
                           dx[n * in_f + i] += ws->data[o * in_f + i] * dy[n * out_f + o];
                   }
                 });
  return out;
}

}  // namespace wavemix
