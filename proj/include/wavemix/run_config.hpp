#pragma once

// Training run configuration stored as flat "key = value" text.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>

#include "wavemix/errors.hpp"
#include "wavemix/model_spec.hpp"

namespace wavemix {

struct RunConfig {
  std::string model = "WaveMix-Lite-8/10 (up bilinear)";
  std::string dataset = "mnist";  // mnist | fashion | cifar10 | synthseg
  std::string data_dir;           // empty: $WAVEMIX_DATA
  std::int64_t batch_size = 64;
  std::int64_t epochs = 30;
  std::uint64_t seed = 0;
  std::int64_t sgd_tail = 20;
  std::string loss = "ce";  // ce | focal
  double gamma = 2.0;
  std::string checkpoint_out = "wavemix.ckpt";
  std::string metrics_out = "metrics.csv";
  std::int64_t eval_every = 1;
  std::int64_t train_limit = 0;  // 0 keeps every training image
  std::string resume;
  std::string init_backbone;
  std::int64_t synth_train = 2000;
  std::int64_t synth_test = 400;
  std::int64_t synth_size = 64;
  std::int64_t synth_classes = 4;
  std::uint64_t synth_seed = 1;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  void validate() const {
    if (dataset != "mnist" && dataset != "fashion" && dataset != "cifar10" && dataset != "synthseg") {
      throw ValueError("unknown dataset '" + dataset + "' (expected mnist|fashion|cifar10|synthseg)");
    }
    if (loss != "ce" && loss != "focal") throw ValueError("unknown loss '" + loss + "' (expected ce|focal)");
    if (batch_size < 1) throw ValueError("batch_size must be >= 1");
    if (epochs < 1) throw ValueError("epochs must be >= 1");
    if (sgd_tail < 0) throw ValueError("sgd_tail must be >= 0");
    if (!(gamma >= 0.0)) throw ValueError("gamma must be >= 0");
    if (eval_every < 1) throw ValueError("eval_every must be >= 1");
    if (train_limit < 0) throw ValueError("train_limit must be >= 0");
    if (synth_train < 1 || synth_test < 1) throw ValueError("synthetic split sizes must be >= 1");
    if (synth_size < 8 || synth_size % 2 != 0) throw ValueError("synth_size must be even and >= 8");
    if (synth_classes < 2) throw ValueError("synth_classes must be >= 2");
    if (checkpoint_out.empty() || metrics_out.empty()) throw ValueError("output paths must not be empty");
    if (!resume.empty() && !init_backbone.empty()) throw ValueError("resume and init_backbone are exclusive");
    parse_model_spec(model);
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class Fn>
void for_each_config_field(RunConfig& c, Fn&& fn) {
  fn("model", c.model);
  fn("dataset", c.dataset);
  fn("data_dir", c.data_dir);
  fn("batch_size", c.batch_size);
  fn("epochs", c.epochs);
  fn("seed", c.seed);
  fn("sgd_tail", c.sgd_tail);
  fn("loss", c.loss);
  fn("gamma", c.gamma);
  fn("checkpoint_out", c.checkpoint_out);
  fn("metrics_out", c.metrics_out);
  fn("eval_every", c.eval_every);
  fn("train_limit", c.train_limit);
  fn("resume", c.resume);
  fn("init_backbone", c.init_backbone);
  fn("synth_train", c.synth_train);
  fn("synth_test", c.synth_test);
  fn("synth_size", c.synth_size);
  fn("synth_classes", c.synth_classes);
  fn("synth_seed", c.synth_seed);
}

inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(std::int64_t v) { return std::to_string(v); }
inline std::string to_text(std::uint64_t v) { return std::to_string(v); }
inline std::string to_text(double v) { return format_double(v); }

inline void from_text(const std::string&, const std::string& text, std::string& v) { v = text; }

template <class I>
void parse_integer(const std::string& key, const std::string& text, I& v) {
  std::istringstream is(text);
  I x{};
  if (text.empty() || text[0] == '+' || (std::is_unsigned_v<I> && text[0] == '-') || !(is >> x) || !is.eof()) {
    throw FormatError(FormatError::Kind::kBadHeader, "config key '" + key + "' needs an integer, got '" + text + "'");
  }
  v = x;
}

inline void from_text(const std::string& key, const std::string& text, std::int64_t& v) { parse_integer(key, text, v); }
inline void from_text(const std::string& key, const std::string& text, std::uint64_t& v) { parse_integer(key, text, v); }

inline void from_text(const std::string& key, const std::string& text, double& v) {
  try {
    std::size_t used = 0;
    v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
  } catch (const std::exception&) {
    throw FormatError(FormatError::Kind::kBadHeader, "config key '" + key + "' needs a number, got '" + text + "'");
  }
}

}  // namespace detail

/// One "key = value" line per field, in a fixed order.
inline std::string serialize_config(const RunConfig& config) {
  RunConfig c = config;
  std::string out;
  detail::for_each_config_field(c, [&](const char* key, auto& v) {
    out += key;
    out += " = ";
    out += detail::to_text(v);
    out += '\n';
  });
  return out;
}

/// Applies `text` on top of `base`. Blank lines and '#' comments are skipped;
/// unknown or repeated keys are errors.
inline RunConfig parse_config(const std::string& text, const RunConfig& base = {}) {
  RunConfig c = base;
  std::map<std::string, std::function<void(const std::string&)>> setters;
  detail::for_each_config_field(c, [&](const char* key, auto& v) {
    setters[key] = [key, &v](const std::string& value) { detail::from_text(key, value, v); };
  });
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw FormatError(FormatError::Kind::kBadHeader, "config line " + std::to_string(lineno) + " lacks '='");
    }
    const std::string key = detail::trim(t.substr(0, eq));
    const auto it = setters.find(key);
    if (it == setters.end()) throw FormatError(FormatError::Kind::kBadHeader, "unknown config key '" + key + "'");
    if (seen[key]++) throw FormatError(FormatError::Kind::kBadHeader, "config key '" + key + "' given twice");
    it->second(detail::trim(t.substr(eq + 1)));
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path, const RunConfig& base = {}) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

inline void save_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream out(path);
  out << serialize_config(config);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write config '" + path.string() + "'");
}

}  // namespace wavemix
