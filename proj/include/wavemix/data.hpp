#pragma once

// Dataset readers (IDX, CIFAR-10 binary), the synthetic shapes segmentation set,
// and deterministic shuffled batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "wavemix/errors.hpp"
#include "wavemix/tensor.hpp"

namespace wavemix {

struct LabeledImageSet {
  Tensor<float> images;  // (N, C, H, W), values in [0, 1]
  std::vector<std::int32_t> labels;
  std::int64_t classes = 10;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

struct SegmentationSet {
  Tensor<float> images;               // (N, 3, H, W)
  std::vector<std::int32_t> masks;    // (N, H, W)
  std::int64_t classes = 4;

  std::int64_t size() const { return images.defined() ? images.shape().n : 0; }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write '" + path.string() + "'");
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) b.push_back(static_cast<unsigned char>(v >> shift));
}

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> bytes;
  std::size_t payload = 0;  // offset of the first data byte
};

inline IdxFile read_idx(const std::filesystem::path& path, std::uint32_t magic) {
  IdxFile f;
  f.bytes = read_file(path);
  const std::size_t rank = magic & 0xff;
  if (f.bytes.size() < 4) {
    throw FormatError(FormatError::Kind::kTruncated, "'" + path.string() + "' is truncated (no IDX header)");
  }
  const std::uint32_t got = read_be32(f.bytes, 0);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x (expected 0x%08x)", got, magic);
    throw FormatError(FormatError::Kind::kBadMagic, "'" + path.string() + "': " + buf);
  }
  f.payload = 4 + 4 * rank;
  if (f.bytes.size() < f.payload) {
    throw FormatError(FormatError::Kind::kTruncated, "'" + path.string() + "' is truncated (short IDX header)");
  }
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    f.dims.push_back(read_be32(f.bytes, 4 + 4 * d));
    count *= f.dims.back();
  }
  if (f.bytes.size() - f.payload < count) {
    throw FormatError(FormatError::Kind::kTruncated, "'" + path.string() + "' is truncated: expected " +
                                                         std::to_string(count) + " data bytes, found " +
                                                         std::to_string(f.bytes.size() - f.payload));
  }
  return f;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Reads an IDX image/label pair (MNIST, Fashion-MNIST, EMNIST layout).
inline LabeledImageSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                std::int64_t classes = 10) {
  const auto img = detail::read_idx(images_path, kIdxImagesMagic);
  const auto lab = detail::read_idx(labels_path, kIdxLabelsMagic);
  const std::int64_t n = img.dims[0];
  if (lab.dims[0] != img.dims[0]) {
    throw FormatError(FormatError::Kind::kCountMismatch, "image count " + std::to_string(img.dims[0]) +
                                                             " does not match label count " +
                                                             std::to_string(lab.dims[0]));
  }
  if (n == 0) throw FormatError(FormatError::Kind::kTruncated, "'" + images_path.string() + "' holds no images");
  const std::int64_t h = img.dims[1], w = img.dims[2];
  LabeledImageSet set;
  set.classes = classes;
  set.images = Tensor<float>(Shape{n, 1, h, w});
  auto px = set.images.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img.bytes[img.payload + i]) / 255.0f;
  set.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = lab.bytes[lab.payload + static_cast<std::size_t>(i)];
    if (label >= classes) {
      throw FormatError(FormatError::Kind::kBadLabel, "label " + std::to_string(label) + " at index " +
                                                          std::to_string(i) + " is outside [0, " +
                                                          std::to_string(classes) + ")");
    }
    set.labels[static_cast<std::size_t>(i)] = label;
  }
  return set;
}

/// Writes a single-channel set as an IDX pair; pixels are stored as round(255 v).
inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      const LabeledImageSet& set) {
  const Shape s = set.images.shape();
  if (s.c != 1) throw ShapeError("IDX images must have one channel, got " + s.str());
  std::vector<unsigned char> img;
  detail::put_be32(img, kIdxImagesMagic);
  for (std::int64_t d : {s.n, s.h, s.w}) detail::put_be32(img, static_cast<std::uint32_t>(d));
  for (float v : set.images.data()) {
    img.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  std::vector<unsigned char> lab;
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(set.labels.size()));
  for (std::int32_t l : set.labels) lab.push_back(static_cast<unsigned char>(l));
  detail::write_file(images_path, img);
  detail::write_file(labels_path, lab);
}

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// Reads and concatenates CIFAR-10 binary batch files in the given order.
inline LabeledImageSet load_cifar10(const std::vector<std::filesystem::path>& batch_files) {
  std::vector<std::vector<unsigned char>> files;
  std::int64_t n = 0;
  for (const auto& path : batch_files) {
    files.push_back(detail::read_file(path));
    const std::size_t bytes = files.back().size();
    if (bytes == 0 || bytes % kCifarRecordBytes != 0) {
      throw FormatError(FormatError::Kind::kBadSize, "'" + path.string() + "' has " + std::to_string(bytes) +
                                                         " bytes, not a positive multiple of 3073");
    }
    n += static_cast<std::int64_t>(bytes / kCifarRecordBytes);
  }
  if (n == 0) throw FormatError(FormatError::Kind::kBadSize, "no CIFAR-10 records given");
  LabeledImageSet set;
  set.classes = 10;
  set.images = Tensor<float>(Shape{n, 3, 32, 32});
  set.labels.reserve(static_cast<std::size_t>(n));
  auto px = set.images.data();
  std::size_t out = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& b = files[f];
    for (std::size_t r = 0; r < b.size(); r += kCifarRecordBytes) {
      if (b[r] > 9) {
        throw FormatError(FormatError::Kind::kBadLabel, "'" + batch_files[f].string() + "': label " +
                                                            std::to_string(b[r]) + " > 9 in record " +
                                                            std::to_string(r / kCifarRecordBytes));
      }
      set.labels.push_back(b[r]);
      for (std::size_t i = 1; i < kCifarRecordBytes; ++i) px[out++] = static_cast<float>(b[r + i]) / 255.0f;
    }
  }
  return set;
}

enum class ShapeKind { kRectangle, kCircle, kTriangle };

/// One object placed by synth_shapes; (y, x, h, w) is its bounding box.
struct PlacedShape {
  std::int32_t label = 0;
  ShapeKind kind = ShapeKind::kRectangle;
  std::int64_t y = 0, x = 0, h = 0, w = 0;

  bool contains(std::int64_t i, std::int64_t j) const {
    if (i < y || i >= y + h || j < x || j >= x + w) return false;
    switch (kind) {
      case ShapeKind::kRectangle: return true;
      case ShapeKind::kCircle: {
        const double r = 0.5 * static_cast<double>(h);
        const double di = static_cast<double>(i - y) + 0.5 - r;
        const double dj = static_cast<double>(j - x) + 0.5 - r;
        return di * di + dj * dj <= r * r;
      }
      case ShapeKind::kTriangle: return (j - x) * h <= (i - y + 1) * w;  // lower-left half
    }
    return false;
  }
};

/// Labels 1..classes-1 cycle through rectangle, circle, triangle; 0 is background.
inline ShapeKind shape_kind_for(std::int32_t label) { return static_cast<ShapeKind>((label - 1) % 3); }

inline std::array<float, 3> class_tint(std::int32_t label) {
  static constexpr std::array<std::array<float, 3>, 6> kTints{{{0.95f, 0.25f, 0.2f},
                                                               {0.2f, 0.9f, 0.3f},
                                                               {0.25f, 0.35f, 0.95f},
                                                               {0.95f, 0.85f, 0.2f},
                                                               {0.85f, 0.25f, 0.9f},
                                                               {0.2f, 0.9f, 0.9f}}};
  return kTints[static_cast<std::size_t>(label - 1) % kTints.size()];
}

/// Synthetic segmentation set: 1-3 non-overlapping shapes on a noise background,
/// with pixel-exact masks. A pure function of its arguments. When `layout` is
/// non-null it receives the placed shapes of every image.
inline SegmentationSet synth_shapes(std::int64_t n, std::int64_t height, std::int64_t width,
                                    std::int64_t classes = 4, std::uint64_t seed = 0,
                                    std::vector<std::vector<PlacedShape>>* layout = nullptr) {
  if (height % 2 != 0 || width % 2 != 0) throw ShapeError("synth_shapes needs even H and W");
  if (classes < 2) throw ValueError("synth_shapes needs at least 2 classes (background + shapes)");
  const std::int64_t min_side = 4;
  const std::int64_t max_side = std::min(height, width) / 2;
  if (max_side < min_side) {
    throw ValueError("image " + std::to_string(height) + "x" + std::to_string(width) + " is too small to place shapes");
  }
  SegmentationSet set;
  set.classes = classes;
  set.images = Tensor<float>(Shape{n, 3, height, width});
  set.masks.assign(static_cast<std::size_t>(n * height * width), 0);
  if (layout) layout->assign(static_cast<std::size_t>(n), {});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_int = [&](std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
  };
  const std::int64_t plane = height * width;
  auto px = set.images.data();
  for (std::int64_t img = 0; img < n; ++img) {
    float* pixels = px.data() + img * 3 * plane;
    std::int32_t* mask = set.masks.data() + img * plane;
    for (std::int64_t i = 0; i < 3 * plane; ++i) pixels[i] = static_cast<float>(0.5 * unit(rng));

    std::vector<PlacedShape> placed;
    const std::int64_t wanted = uniform_int(1, 3);
    for (int attempt = 0; attempt < 200 && static_cast<std::int64_t>(placed.size()) < wanted; ++attempt) {
      PlacedShape s;
      s.label = static_cast<std::int32_t>(uniform_int(1, classes - 1));
      s.kind = shape_kind_for(s.label);
      s.h = uniform_int(min_side, max_side);
      s.w = s.kind == ShapeKind::kCircle ? s.h : uniform_int(min_side, max_side);
      s.y = uniform_int(0, height - s.h);
      s.x = uniform_int(0, width - s.w);
      const bool overlaps = std::any_of(placed.begin(), placed.end(), [&](const PlacedShape& o) {
        return s.y < o.y + o.h + 1 && o.y < s.y + s.h + 1 && s.x < o.x + o.w + 1 && o.x < s.x + s.w + 1;
      });
      if (!overlaps) placed.push_back(s);
    }
    if (placed.empty()) throw ValueError("could not place any shape in image " + std::to_string(img));

    for (const auto& s : placed) {
      const auto tint = class_tint(s.label);
      for (std::int64_t i = s.y; i < s.y + s.h; ++i)
        for (std::int64_t j = s.x; j < s.x + s.w; ++j) {
          if (!s.contains(i, j)) continue;
          mask[i * width + j] = s.label;
          for (int c = 0; c < 3; ++c) {
            const double v = tint[static_cast<std::size_t>(c)] + 0.2 * (unit(rng) - 0.5);
            pixels[c * plane + i * width + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
    }
    if (layout) (*layout)[static_cast<std::size_t>(img)] = std::move(placed);
  }
  return set;
}

/// Permutation of [0, n) that depends only on (seed, epoch).
inline std::vector<std::int64_t> epoch_permutation(std::int64_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Batches of indices over one epoch; the final partial batch is kept.
class BatchIterator {
 public:
  BatchIterator(std::int64_t n, std::int64_t batch_size, std::uint64_t seed, std::int64_t epoch, bool shuffle = true)
      : batch_(batch_size) {
    if (batch_size < 1) throw ValueError("batch size must be >= 1");
    if (shuffle) {
      order_ = epoch_permutation(n, seed, epoch);
    } else {
      order_.resize(static_cast<std::size_t>(n));
      std::iota(order_.begin(), order_.end(), 0);
    }
  }

  std::int64_t batches() const { return (static_cast<std::int64_t>(order_.size()) + batch_ - 1) / batch_; }

  std::span<const std::int64_t> batch(std::int64_t b) const {
    const std::size_t begin = static_cast<std::size_t>(b * batch_);
    const std::size_t end = std::min(order_.size(), begin + static_cast<std::size_t>(batch_));
    return std::span<const std::int64_t>(order_).subspan(begin, end - begin);
  }

  const std::vector<std::int64_t>& order() const { return order_; }

 private:
  std::int64_t batch_;
  std::vector<std::int64_t> order_;
};

/// Copies the selected samples of `images` into a new (B, C, H, W) tensor.
template <class T = float>
Tensor<T> gather_images(const Tensor<float>& images, std::span<const std::int64_t> indices) {
  const Shape s = images.shape();
  const std::int64_t item = s.c * s.h * s.w;
  Tensor<T> out(Shape{static_cast<std::int64_t>(indices.size()), s.c, s.h, s.w});
  auto dst = out.data();
  const auto src = images.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy_n(src.begin() + indices[b] * item, item, dst.begin() + static_cast<std::int64_t>(b) * item);
  }
  return out;
}

/// Copies `per_item` consecutive targets for each selected sample.
inline std::vector<std::int32_t> gather_targets(const std::vector<std::int32_t>& targets,
                                                std::span<const std::int64_t> indices, std::int64_t per_item = 1) {
  std::vector<std::int32_t> out;
  out.reserve(indices.size() * static_cast<std::size_t>(per_item));
  for (std::int64_t i : indices) {
    out.insert(out.end(), targets.begin() + i * per_item, targets.begin() + (i + 1) * per_item);
  }
  return out;
}

/// First `count` samples of a labelled set.
inline LabeledImageSet take_first(const LabeledImageSet& set, std::int64_t count) {
  count = std::min(count, set.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  std::iota(idx.begin(), idx.end(), 0);
  return {gather_images(set.images, idx), gather_targets(set.labels, idx), set.classes};
}

}  // namespace wavemix
