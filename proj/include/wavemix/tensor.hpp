#pragma once

// Dense 4-D (N, C, H, W) tensors with reverse-mode automatic differentiation.
//
// Every operation that sees an input with requires_grad appends one entry to a
// thread-local tape; backward() replays the tape in reverse insertion order and
// then discards it. One tape exists per scalar type and per thread, so f32 and
// f64 graphs never mix and concurrent forward passes on different threads do not
// interfere.

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wavemix/errors.hpp"

namespace wavemix {

struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  constexpr std::int64_t numel() const noexcept { return n * c * h * w; }
  constexpr std::int64_t plane() const noexcept { return h * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

template <class T>
class Tensor;

namespace detail {

/// Per-thread cache of freed tensor buffers, keyed by byte size. Training
/// allocates the same shapes every step; reusing them avoids returning pages to
/// the kernel and faulting them back in.
class BufferPool {
 public:
  static constexpr std::size_t kAlign = 64;
  static constexpr std::size_t kMaxCachedBytes = std::size_t{1} << 30;

  static BufferPool& local() {
    thread_local BufferPool pool;
    return pool;
  }

  void* take(std::size_t bytes) {
    auto it = free_.find(bytes);
    if (it != free_.end() && !it->second.empty()) {
      void* p = it->second.back();
      it->second.pop_back();
      cached_ -= bytes;
      return p;
    }
    return ::operator new(bytes, std::align_val_t{kAlign});
  }

  void give(void* p, std::size_t bytes) noexcept {
    if (cached_ + bytes > kMaxCachedBytes) {
      ::operator delete(p, std::align_val_t{kAlign});
      return;
    }
    try {
      free_[bytes].push_back(p);
      cached_ += bytes;
    } catch (...) {
      ::operator delete(p, std::align_val_t{kAlign});
    }
  }

  void release() noexcept {
    for (auto& [bytes, list] : free_)
      for (void* p : list) ::operator delete(p, std::align_val_t{kAlign});
    free_.clear();
    cached_ = 0;
  }

  ~BufferPool() { release(); }

 private:
  std::unordered_map<std::size_t, std::vector<void*>> free_;
  std::size_t cached_ = 0;
};

/// 64-byte aligned, pooled allocation. Alignment makes vectorized kernels split
/// every buffer the same way, so results depend only on shapes, not addresses.
template <class T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(BufferPool::local().take(bytes(n))); }
  void deallocate(T* p, std::size_t n) noexcept { BufferPool::local().give(p, bytes(n)); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }

 private:
  static std::size_t bytes(std::size_t n) {
    return (n * sizeof(T) + BufferPool::kAlign - 1) / BufferPool::kAlign * BufferPool::kAlign;
  }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct TensorStorage {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::int64_t node = -1;
  std::uint64_t generation = 0;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }

  /// grad += g, copying instead when no buffer exists yet.
  void accumulate_grad(const T* g) {
    if (grad.empty()) {
      grad.assign(g, g + data.size());
      return;
    }
    T* __restrict dst = grad.data();
    const std::size_t n = grad.size();
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
  }
};

template <class T>
struct Tape {
  std::vector<std::function<void()>> entries;
  std::uint64_t generation = 1;
  int no_grad_depth = 0;
};

template <class T>
Tape<T>& tape() {
  thread_local Tape<T> instance;
  return instance;
}

}  // namespace detail

/// Disables graph recording for the current thread and scalar type while alive.
template <class T>
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::tape<T>().no_grad_depth; }
  ~NoGradGuard() { --detail::tape<T>().no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
bool grad_enabled() {
  return detail::tape<T>().no_grad_depth == 0;
}

/// Drops every recorded-but-not-yet-consumed node on this thread's tape.
template <class T>
void clear_graph() {
  auto& t = detail::tape<T>();
  t.entries.clear();
  ++t.generation;
}

template <class T>
std::size_t graph_size() {
  return detail::tape<T>().entries.size();
}

/// Reference-counted handle to a tensor buffer. Copies share storage.
template <class T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Tensor supports f32 and f64 only");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorStorage<T>>()) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ShapeError("negative dimension in shape " + shape.str());
    }
    impl_->shape = shape;
    impl_->data.assign(static_cast<std::size_t>(shape.numel()), fill);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorStorage<T>>()) {
    if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match shape " + shape.str());
    }
    impl_->shape = shape;
    impl_->data.assign(values.begin(), values.end());
    impl_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }

  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return impl_->data[static_cast<std::size_t>(offset(n, c, h, w))];
  }
  T at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return impl_->data[static_cast<std::size_t>(offset(n, c, h, w))];
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
    return impl_->data[0];
  }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }

  /// Only valid on leaves; interior nodes inherit requires_grad from their inputs.
  void set_requires_grad(bool value) {
    if (impl_->node >= 0) throw GraphError("cannot change requires_grad of a non-leaf tensor");
    impl_->requires_grad = value;
    if (!value) impl_->grad.clear();
  }

  bool is_leaf() const noexcept { return impl_->node < 0; }

  bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  /// Sets the gradient buffer to zeros (allocating it if needed).
  void zero_grad() {
    if (!impl_->requires_grad) return;
    impl_->grad.assign(impl_->data.size(), T(0));
  }

  /// Fresh buffer holding a copy of the values, outside any graph.
  Tensor detach() const {
    Tensor t(shape());
    t.impl_->data = impl_->data;
    return t;
  }

  detail::TensorStorage<T>* storage() const noexcept { return impl_.get(); }
  const std::shared_ptr<detail::TensorStorage<T>>& shared() const noexcept { return impl_; }

 private:
  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const Shape& s = impl_->shape;
    return ((n * s.c + c) * s.h + h) * s.w + w;
  }

  std::shared_ptr<detail::TensorStorage<T>> impl_;
};

/// Named trainable tensor. `dims` is the natural rank-1..4 shape used for
/// checkpoints and reporting; `value` always carries the 4-D engine shape.
template <class T>
struct Parameter {
  std::string name;
  std::vector<std::int64_t> dims;
  Tensor<T> value;

  std::int64_t numel() const { return value.numel(); }
};

namespace detail {

/// Appends a backward closure for `out` when grad mode is on and any input needs grad.
template <class T, class Fn>
void record_if(bool any_input_requires_grad, Tensor<T>& out, Fn&& backward_fn) {
  if (!grad_enabled<T>() || !any_input_requires_grad) return;
  auto& t = tape<T>();
  auto* s = out.storage();
  s->requires_grad = true;
  s->node = static_cast<std::int64_t>(t.entries.size());
  s->generation = t.generation;
  t.entries.emplace_back(std::forward<Fn>(backward_fn));
}

template <class T, class Fn>
void record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, Fn&& backward_fn) {
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
  record_if(any, out, std::forward<Fn>(backward_fn));
}

}  // namespace detail

/// Propagates d(loss)/d(node) to every tensor reachable from `loss`, accumulating
/// into existing gradient buffers. Consumes the graph.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw GraphError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) throw GraphError("loss is not attached to any graph");
  auto* s = loss.storage();
  auto& t = detail::tape<T>();
  if (s->node < 0) {
    s->ensure_grad()[0] += T(1);
    return;
  }
  if (s->generation != t.generation || s->node >= static_cast<std::int64_t>(t.entries.size())) {
    throw GraphError("graph has already been consumed by a previous backward");
  }
  s->ensure_grad()[0] += T(1);
  for (std::int64_t i = s->node; i >= 0; --i) t.entries[static_cast<std::size_t>(i)]();
  t.entries.clear();
  ++t.generation;
}

}  // namespace wavemix
