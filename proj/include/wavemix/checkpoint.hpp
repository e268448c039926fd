#pragma once

// Binary checkpoint container.
//
//   "WMLT1\n"
//   key=value\n ...            header, insertion order preserved
//   \n                         blank line ends the header
//   u32 entry count
//   per entry: u32 name length, name bytes, u32 rank, u64 dims[rank], f32 data
//
// All integers and floats are little-endian. Model parameters come first in
// enumeration order, then batch-norm buffers, then any "optim." state.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wavemix/errors.hpp"
#include "wavemix/model.hpp"
#include "wavemix/model_spec.hpp"

namespace wavemix {

inline constexpr std::string_view kCheckpointMagic = "WMLT1\n";

struct CheckpointEntry {
  std::string name;
  std::vector<std::int64_t> dims;
  std::vector<float> data;

  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<CheckpointEntry> entries;

  /// Replaces an existing key in place or appends a new one.
  void set(const std::string& key, const std::string& value) {
    for (auto& kv : header)
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    header.emplace_back(key, value);
  }

  std::optional<std::string> find(const std::string& key) const {
    for (const auto& kv : header)
      if (kv.first == key) return kv.second;
    return std::nullopt;
  }

  std::string get(const std::string& key) const {
    auto v = find(key);
    if (!v) throw FormatError(FormatError::Kind::kBadHeader, "checkpoint header lacks '" + key + "'");
    return *v;
  }

  std::int64_t get_int(const std::string& key) const {
    const std::string v = get(key);
    try {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::kBadHeader, "checkpoint header '" + key + "' is not an integer: " + v);
    }
  }

  const CheckpointEntry* entry(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put_le(std::vector<unsigned char>& out, U v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  out.insert(out.end(), p, p + sizeof(U));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : b_(bytes) {}

  template <class U>
  U take() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string take_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void take_floats(float* dst, std::size_t n) {
    if (n > (b_.size() - pos_) / sizeof(float)) truncated();
    std::memcpy(dst, b_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  std::string take_line() {
    const auto* begin = b_.data() + pos_;
    const auto* nl = static_cast<const unsigned char*>(std::memchr(begin, '\n', b_.size() - pos_));
    if (!nl) truncated();
    std::string s(reinterpret_cast<const char*>(begin), static_cast<std::size_t>(nl - begin));
    pos_ += s.size() + 1;
    return s;
  }

  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) truncated();
  }
  [[noreturn]] static void truncated() {
    throw FormatError(FormatError::Kind::kTruncated, "checkpoint ends unexpectedly");
  }

  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  for (const auto& [k, v] : ck.header) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ValueError("checkpoint header entry '" + k + "' cannot be encoded");
    }
    const std::string line = k + "=" + v + "\n";
    out.insert(out.end(), line.begin(), line.end());
  }
  out.push_back('\n');
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    std::int64_t numel = 1;
    for (auto d : e.dims) numel *= d;
    if (numel != static_cast<std::int64_t>(e.data.size())) {
      throw ValueError("checkpoint entry '" + e.name + "' holds " + std::to_string(e.data.size()) +
                       " values for " + std::to_string(numel) + " elements");
    }
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    const auto* p = reinterpret_cast<const unsigned char*>(e.data.data());
    out.insert(out.end(), p, p + e.data.size() * sizeof(float));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    if (bytes.size() < kCheckpointMagic.size() &&
        std::memcmp(bytes.data(), kCheckpointMagic.data(), bytes.size()) == 0) {
      throw FormatError(FormatError::Kind::kTruncated, "checkpoint ends inside the magic");
    }
    throw FormatError(FormatError::Kind::kBadMagic, "not a WMLT1 checkpoint");
  }
  detail::ByteReader r(bytes.subspan(kCheckpointMagic.size()));
  Checkpoint ck;
  for (std::string line = r.take_line(); !line.empty(); line = r.take_line()) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw FormatError(FormatError::Kind::kBadHeader, "malformed checkpoint header line '" + line + "'");
    }
    ck.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto count = r.take<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.take_string(r.take<std::uint32_t>());
    const auto rank = r.take<std::uint32_t>();
    if (rank > 8) throw FormatError(FormatError::Kind::kBadHeader, "entry '" + e.name + "' has rank " + std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.take<std::uint64_t>();
      if (dim > (std::uint64_t{1} << 40)) {
        throw FormatError(FormatError::Kind::kBadHeader, "entry '" + e.name + "' has an implausible dimension");
      }
      numel *= dim;
      e.dims.push_back(static_cast<std::int64_t>(dim));
    }
    if (numel > r.remaining() / sizeof(float)) {
      throw FormatError(FormatError::Kind::kTruncated, "checkpoint ends inside entry '" + e.name + "'");
    }
    e.data.resize(static_cast<std::size_t>(numel));
    r.take_floats(e.data.data(), e.data.size());
    ck.entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatError::Kind::kBadSize, std::to_string(r.remaining()) + " trailing bytes after checkpoint");
  }
  return ck;
}

/// Writes through a temporary file and renames it into place.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::kIo, "cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw FormatError(FormatError::Kind::kIo, "write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError(FormatError::Kind::kIo, "cannot move checkpoint to '" + path.string() + "': " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// Model bridge ---------------------------------------------------------------

inline void set_model_header(Checkpoint& ck, const ModelSpec& spec) {
  ck.set("model", format_model_spec(spec));
  ck.set("in_channels", std::to_string(spec.in_channels));
  ck.set("classes", std::to_string(spec.classes));
  ck.set("task", to_string(spec.task));
  ck.set("stem_strides", std::to_string(spec.stem_strides[0]) + "," + std::to_string(spec.stem_strides[1]));
}

inline ModelSpec model_spec_from_header(const Checkpoint& ck) {
  ModelSpec defaults;
  defaults.in_channels = ck.get_int("in_channels");
  defaults.classes = ck.get_int("classes");
  try {
    defaults.task = parse_task(ck.get("task"));
    const std::string strides = ck.get("stem_strides");
    const auto comma = strides.find(',');
    if (comma == std::string::npos) throw SpecError("bad stem_strides '" + strides + "'");
    defaults.stem_strides = {std::stoll(strides.substr(0, comma)), std::stoll(strides.substr(comma + 1))};
    return parse_model_spec(ck.get("model"), defaults);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(FormatError::Kind::kBadHeader, std::string("checkpoint model description: ") + e.what());
  }
}

template <class T>
CheckpointEntry to_entry(const Parameter<T>& p, std::string name = {}) {
  CheckpointEntry e{name.empty() ? p.name : std::move(name), p.dims, {}};
  const auto d = p.value.data();
  e.data.assign(d.begin(), d.end());
  return e;
}

/// Model header plus parameters and buffers.
template <class T>
Checkpoint make_checkpoint(const WaveMixModel<T>& model) {
  Checkpoint ck;
  set_model_header(ck, model.spec());
  for (const auto& p : model.parameters()) ck.entries.push_back(to_entry(p));
  for (const auto& b : model.buffers()) ck.entries.push_back(to_entry(b));
  return ck;
}

namespace detail {

template <class T>
void copy_in(const Parameter<T>& p, const CheckpointEntry& e) {
  Tensor<T> value = p.value;
  auto dst = value.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.data[i]);
}

}  // namespace detail

/// Strict load: the checkpoint must start with exactly this model's parameters
/// and buffers (names and shapes, in order); only "optim." entries may follow.
/// Nothing is written unless every check passes.
template <class T>
void load_model_state(WaveMixModel<T>& model, const Checkpoint& ck) {
  std::vector<Parameter<T>> slots = model.parameters();
  slots.insert(slots.end(), model.buffers().begin(), model.buffers().end());
  if (ck.entries.size() < slots.size()) {
    throw FormatError(FormatError::Kind::kMismatch, "checkpoint holds " + std::to_string(ck.entries.size()) +
                                                        " tensors, model needs " + std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& e = ck.entries[i];
    if (e.name != slots[i].name || e.dims != slots[i].dims) {
      throw FormatError(FormatError::Kind::kMismatch, "checkpoint entry " + std::to_string(i) + " is '" + e.name +
                                                          "', model expects '" + slots[i].name +
                                                          "' with matching shape");
    }
  }
  for (std::size_t i = slots.size(); i < ck.entries.size(); ++i) {
    if (ck.entries[i].name.rfind("optim.", 0) != 0) {
      throw FormatError(FormatError::Kind::kMismatch, "unexpected checkpoint entry '" + ck.entries[i].name + "'");
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) detail::copy_in(slots[i], ck.entries[i]);
}

/// Backbone reuse: reinitializes the head from `head_seed`, then copies every
/// non-head parameter or buffer whose name and shape match. Returns the number
/// of tensors copied.
template <class T>
std::int64_t load_backbone(WaveMixModel<T>& model, const Checkpoint& ck, std::uint64_t head_seed) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ck.entries) by_name.emplace(e.name, &e);
  model.reset_head(head_seed);
  std::vector<Parameter<T>> slots = model.parameters();
  slots.insert(slots.end(), model.buffers().begin(), model.buffers().end());
  std::int64_t copied = 0;
  for (const auto& p : slots) {
    if (WaveMixModel<T>::is_head_parameter(p.name)) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end() || it->second->dims != p.dims) continue;
    detail::copy_in(p, *it->second);
    ++copied;
  }
  return copied;
}

}  // namespace wavemix
