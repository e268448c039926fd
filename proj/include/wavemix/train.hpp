#pragma once

// Dataset loading, the training loop, evaluation and the metrics CSV.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wavemix/checkpoint.hpp"
#include "wavemix/data.hpp"
#include "wavemix/losses.hpp"
#include "wavemix/metrics.hpp"
#include "wavemix/model.hpp"
#include "wavemix/optim.hpp"
#include "wavemix/run_config.hpp"

namespace wavemix {

/// Training and test splits of one dataset. Classification sets fill the
/// LabeledImageSet members, segmentation sets the SegmentationSet ones.
struct Datasets {
  std::string name;
  Task task = Task::kClassify;
  std::int64_t in_channels = 1;
  std::int64_t classes = 10;
  std::int64_t height = 0, width = 0;
  LabeledImageSet train, test;
  SegmentationSet train_seg, test_seg;

  std::int64_t train_size() const { return task == Task::kClassify ? train.size() : train_seg.size(); }
  std::int64_t test_size() const { return task == Task::kClassify ? test.size() : test_seg.size(); }
};

/// Explicit directory, else $WAVEMIX_DATA, else ./data.
inline std::filesystem::path resolve_data_dir(const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (const char* env = std::getenv("WAVEMIX_DATA"); env && *env) return env;
  return "data";
}

/// Expected layout under the data root:
///   mnist/ and fashion/   {train,t10k}-{images-idx3,labels-idx1}-ubyte
///   cifar-10-batches-bin/ data_batch_{1..5}.bin, test_batch.bin
inline Datasets load_datasets(const RunConfig& cfg) {
  Datasets d;
  d.name = cfg.dataset;
  if (cfg.dataset == "synthseg") {
    d.task = Task::kSegment;
    d.in_channels = 3;
    d.classes = cfg.synth_classes;
    d.height = d.width = cfg.synth_size;
    d.train_seg = synth_shapes(cfg.synth_train, cfg.synth_size, cfg.synth_size, cfg.synth_classes, cfg.synth_seed);
    d.test_seg = synth_shapes(cfg.synth_test, cfg.synth_size, cfg.synth_size, cfg.synth_classes, cfg.synth_seed + 1);
    return d;
  }
  const auto root = resolve_data_dir(cfg.data_dir);
  if (cfg.dataset == "mnist" || cfg.dataset == "fashion") {
    const auto dir = root / cfg.dataset;
    d.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    d.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  } else if (cfg.dataset == "cifar10") {
    const auto dir = root / "cifar-10-batches-bin";
    std::vector<std::filesystem::path> files;
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    d.train = load_cifar10(files);
    d.test = load_cifar10({dir / "test_batch.bin"});
  } else {
    throw ValueError("unknown dataset '" + cfg.dataset + "'");
  }
  if (cfg.train_limit > 0) d.train = take_first(d.train, cfg.train_limit);
  const Shape s = d.train.images.shape();
  d.in_channels = s.c;
  d.classes = d.train.classes;
  d.height = s.h;
  d.width = s.w;
  return d;
}

/// Parses the configured model notation with the dataset's geometry filled in
/// and checks that the images fit the architecture.
inline ModelSpec model_spec_for(const std::string& notation, const Datasets& d) {
  ModelSpec defaults;
  defaults.in_channels = d.in_channels;
  defaults.classes = d.classes;
  defaults.task = d.task;
  defaults.stem_strides = auto_stem_strides(d.height, d.width);
  ModelSpec spec = parse_model_spec(notation, defaults);
  const std::int64_t div = spec.required_divisor();
  if (d.height % div != 0 || d.width % div != 0) {
    throw ShapeError("dataset '" + d.name + "' images are " + std::to_string(d.height) + "x" + std::to_string(d.width) +
                     " but " + format_model_spec(spec) + " needs H and W divisible by " + std::to_string(div));
  }
  return spec;
}

/// Same fixed-point text in the CSV and in cmd_eval output.
inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Top-1 accuracy or mean IoU on the test split, in eval mode.
template <class T>
double evaluate(WaveMixModel<T>& model, const Datasets& d, std::int64_t batch_size = 256) {
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard<T> no_grad;
  const std::int64_t n = d.test_size();
  BatchIterator it(n, batch_size, 0, 0, false);
  std::int64_t correct = 0;
  IouAccumulator iou(d.classes);
  for (std::int64_t b = 0; b < it.batches(); ++b) {
    const auto idx = it.batch(b);
    if (d.task == Task::kClassify) {
      const auto logits = model.forward(gather_images<T>(d.test.images, idx));
      correct += count_correct(logits, gather_targets(d.test.labels, idx));
    } else {
      const auto logits = model.forward(gather_images<T>(d.test_seg.images, idx));
      iou.add(argmax_channels(logits), gather_targets(d.test_seg.masks, idx, d.height * d.width));
    }
  }
  model.set_training(was_training);
  if (d.task == Task::kClassify) return static_cast<double>(correct) / static_cast<double>(n);
  return iou.mean();
}

struct EpochRecord {
  std::int64_t epoch = 0;
  Phase phase = Phase::kAdamW;
  double train_loss = 0.0;
  std::optional<double> eval_metric;
  double wall_seconds = 0.0;
};

inline constexpr const char* kMetricsHeader = "epoch,phase,train_loss,eval_metric,wall_seconds";

inline std::string format_csv_row(const EpochRecord& r) {
  char loss[32], wall[32];
  std::snprintf(loss, sizeof loss, "%.8f", r.train_loss);
  std::snprintf(wall, sizeof wall, "%.3f", r.wall_seconds);
  return std::to_string(r.epoch) + "," + to_string(r.phase) + "," + loss + "," +
         (r.eval_metric ? format_metric(*r.eval_metric) : std::string()) + "," + wall;
}

/// Strict reader for the metrics CSV.
inline std::vector<EpochRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw FormatError(FormatError::Kind::kBadHeader, "'" + path.string() + "' lacks the metrics header");
  }
  std::vector<EpochRecord> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1) {
      f.push_back(line.substr(start, pos - start));
    }
    f.push_back(line.substr(start));
    if (f.size() != 5 || (f[1] != "adamw" && f[1] != "sgd")) {
      throw FormatError(FormatError::Kind::kBadHeader, "malformed metrics row '" + line + "'");
    }
    try {
      EpochRecord r;
      std::size_t used = 0;
      r.epoch = std::stoll(f[0], &used);
      if (used != f[0].size()) throw std::invalid_argument(f[0]);
      r.phase = f[1] == "adamw" ? Phase::kAdamW : Phase::kSgd;
      r.train_loss = std::stod(f[2]);
      if (!f[3].empty()) r.eval_metric = std::stod(f[3]);
      r.wall_seconds = std::stod(f[4]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::kBadHeader, "malformed metrics row '" + line + "'");
    }
  }
  return rows;
}

/// "<stem>.best<ext>" next to the final checkpoint.
inline std::filesystem::path best_checkpoint_path(const std::filesystem::path& final_path) {
  auto p = final_path;
  p.replace_filename(final_path.stem().string() + ".best" + final_path.extension().string());
  return p;
}

struct TrainResult {
  ModelSpec spec;
  std::vector<EpochRecord> rows;  // epochs run by this call
  std::int64_t epochs_completed = 0;
  std::optional<double> last_metric;
  std::optional<double> best_metric;
};

template <class T = float>
class Trainer {
 public:
  Trainer(RunConfig cfg, const Datasets& data) : cfg_(std::move(cfg)), data_(data) {
    cfg_.validate();
    spec_ = model_spec_for(cfg_.model, data_);
    model_.emplace(spec_, cfg_.seed);
    schedule_ = Schedule{cfg_.epochs, cfg_.sgd_tail};
    if (!cfg_.resume.empty()) {
      restore(load_checkpoint(cfg_.resume));
    } else {
      if (!cfg_.init_backbone.empty()) load_backbone(*model_, load_checkpoint(cfg_.init_backbone), cfg_.seed);
      adamw_.emplace(model_->parameters());
    }
  }

  WaveMixModel<T>& model() { return *model_; }
  std::int64_t start_epoch() const { return start_epoch_; }

  /// Runs the remaining epochs. `on_epoch` sees each row as it is written.
  TrainResult run(const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    TrainResult result;
    result.spec = spec_;
    result.best_metric = best_metric_;
    result.last_metric = last_metric_;
    std::ofstream csv = open_csv();
    const auto t0 = std::chrono::steady_clock::now();
    for (std::int64_t e = start_epoch_; e < cfg_.epochs; ++e) {
      EpochRecord rec;
      rec.epoch = e;
      rec.phase = select_optimizer(e, schedule_);
      if (rec.phase == Phase::kSgd && !sgd_) sgd_.emplace(model_->parameters());
      rec.train_loss = train_epoch(e, rec.phase);
      const bool last = e + 1 == cfg_.epochs;
      if ((e + 1) % cfg_.eval_every == 0 || last) {
        rec.eval_metric = evaluate(*model_, data_);
        last_metric_ = rec.eval_metric;
      }
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      csv << format_csv_row(rec) << '\n';
      csv.flush();
      if (!csv) throw FormatError(FormatError::Kind::kIo, "write to '" + cfg_.metrics_out + "' failed");

      phase_ = rec.phase;
      epochs_done_ = e + 1;
      // Stored values are formatted exactly as printed, so ties behave the same after a resume.
      if (rec.eval_metric && (!best_metric_ || std::stod(format_metric(*rec.eval_metric)) > *best_metric_)) {
        best_metric_ = std::stod(format_metric(*rec.eval_metric));
        save_checkpoint(best_checkpoint_path(cfg_.checkpoint_out), snapshot(false));
      }
      save_checkpoint(cfg_.checkpoint_out, snapshot(true));
      result.rows.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
    result.epochs_completed = epochs_done_;
    result.last_metric = last_metric_;
    result.best_metric = best_metric_;
    return result;
  }

 private:
  double train_epoch(std::int64_t epoch, Phase phase) {
    model_->set_training(true);
    const std::int64_t n = data_.train_size();
    BatchIterator it(n, cfg_.batch_size, cfg_.seed, epoch);
    double total = 0.0;
    for (std::int64_t b = 0; b < it.batches(); ++b) {
      const auto idx = it.batch(b);
      Tensor<T> x;
      std::vector<std::int32_t> targets;
      if (data_.task == Task::kClassify) {
        x = gather_images<T>(data_.train.images, idx);
        targets = gather_targets(data_.train.labels, idx);
      } else {
        x = gather_images<T>(data_.train_seg.images, idx);
        targets = gather_targets(data_.train_seg.masks, idx, data_.height * data_.width);
      }
      model_->zero_grad();
      const Tensor<T> logits = model_->forward(x);
      const Tensor<T> loss = cfg_.loss == "focal" ? focal_loss(logits, targets, cfg_.gamma)
                                                  : softmax_cross_entropy(logits, targets);
      backward(loss);
      if (phase == Phase::kAdamW) adamw_->step();
      else sgd_->step();
      total += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(n);
  }

  std::ofstream open_csv() const {
    const bool append = start_epoch_ > 0 && std::filesystem::exists(cfg_.metrics_out);
    std::ofstream csv(cfg_.metrics_out, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw FormatError(FormatError::Kind::kIo, "cannot open '" + cfg_.metrics_out + "' for writing");
    if (!append) csv << kMetricsHeader << '\n';
    return csv;
  }

  Checkpoint snapshot(bool with_optimizer) const {
    Checkpoint ck = make_checkpoint(*model_);
    ck.set("dataset", data_.name);
    ck.set("epoch", std::to_string(epochs_done_));
    ck.set("seed", std::to_string(cfg_.seed));
    ck.set("metric", last_metric_ ? format_metric(*last_metric_) : "");
    ck.set("best_metric", best_metric_ ? format_metric(*best_metric_) : "");
    if (!with_optimizer) return ck;
    ck.set("optim.phase", to_string(phase_));
    ck.set("optim.adamw_steps", std::to_string(adamw_->steps()));
    const auto& params = model_->parameters();
    auto moments = [&](const std::string& prefix, const std::vector<std::vector<T>>& bufs) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        ck.entries.push_back({prefix + params[i].name, params[i].dims, {bufs[i].begin(), bufs[i].end()}});
      }
    };
    moments("optim.adamw.m.", adamw_->first_moments());
    moments("optim.adamw.v.", adamw_->second_moments());
    if (sgd_) moments("optim.sgd.momentum.", sgd_->momentum_buffers());
    return ck;
  }

  void restore(const Checkpoint& ck) {
    const ModelSpec saved = model_spec_from_header(ck);
    if (!(saved == spec_)) {
      throw FormatError(FormatError::Kind::kMismatch, "checkpoint holds " + format_model_spec(saved) +
                                                          ", config asks for " + format_model_spec(spec_));
    }
    if (ck.get("dataset") != data_.name) {
      throw FormatError(FormatError::Kind::kMismatch,
                        "checkpoint was trained on '" + ck.get("dataset") + "', config names '" + data_.name + "'");
    }
    start_epoch_ = ck.get_int("epoch");
    if (start_epoch_ >= cfg_.epochs) {
      throw ValueError("checkpoint already completed " + std::to_string(start_epoch_) + " of " +
                       std::to_string(cfg_.epochs) + " epochs");
    }
    const auto& params = model_->parameters();
    AdamW<T> adamw(params);
    std::optional<Sgd<T>> sgd;
    const std::string phase = ck.get("optim.phase");
    const bool sgd_continues = phase == "sgd" && select_optimizer(start_epoch_, schedule_) == Phase::kSgd;
    if (sgd_continues) sgd.emplace(params);
    auto fetch = [&](const std::string& prefix, std::vector<std::vector<T>>& bufs) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto* e = ck.entry(prefix + params[i].name);
        if (!e || e->dims != params[i].dims) {
          throw FormatError(FormatError::Kind::kMismatch, "checkpoint lacks optimizer state '" + prefix +
                                                              params[i].name + "'");
        }
        bufs[i].assign(e->data.begin(), e->data.end());
      }
    };
    fetch("optim.adamw.m.", adamw.first_moments());
    fetch("optim.adamw.v.", adamw.second_moments());
    if (sgd) fetch("optim.sgd.momentum.", sgd->momentum_buffers());
    adamw.set_steps(ck.get_int("optim.adamw_steps"));
    load_model_state(*model_, ck);
    adamw_.emplace(std::move(adamw));
    sgd_ = std::move(sgd);
    phase_ = phase == "sgd" ? Phase::kSgd : Phase::kAdamW;
    epochs_done_ = start_epoch_;
    const std::string metric = ck.get("metric"), best = ck.get("best_metric");
    if (!metric.empty()) last_metric_ = std::stod(metric);
    if (!best.empty()) best_metric_ = std::stod(best);
  }

  RunConfig cfg_;
  const Datasets& data_;
  ModelSpec spec_;
  std::optional<WaveMixModel<T>> model_;
  Schedule schedule_;
  std::optional<AdamW<T>> adamw_;
  std::optional<Sgd<T>> sgd_;
  Phase phase_ = Phase::kAdamW;
  std::int64_t start_epoch_ = 0;
  std::int64_t epochs_done_ = 0;
  std::optional<double> last_metric_, best_metric_;
};

/// Loads the datasets named by `cfg` and trains.
inline TrainResult train(const RunConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  const Datasets data = load_datasets(cfg);
  Trainer<float> trainer(cfg, data);
  return trainer.run(on_epoch);
}

/// Rebuilds the model stored in a checkpoint and evaluates it on `data`.
inline double evaluate_checkpoint(const Checkpoint& ck, const Datasets& data) {
  const ModelSpec spec = model_spec_from_header(ck);
  if (spec.in_channels != data.in_channels || spec.classes != data.classes || spec.task != data.task) {
    throw ShapeError("checkpoint model (" + std::to_string(spec.in_channels) + " channels, " +
                     std::to_string(spec.classes) + " classes, " + to_string(spec.task) +
                     ") does not fit dataset '" + data.name + "'");
  }
  const std::int64_t div = spec.required_divisor();
  if (data.height % div != 0 || data.width % div != 0) {
    throw ShapeError("dataset images must have H and W divisible by " + std::to_string(div));
  }
  WaveMixModel<float> model(spec, 0);
  load_model_state(model, ck);
  return evaluate(model, data);
}

}  // namespace wavemix
