// wavemix: train, eval, params, cost and bench verbs.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "wavemix/wavemix.hpp"

namespace {

using namespace wavemix;

struct ModelArgs {
  std::string model;
  std::int64_t in_channels = 3;
  std::int64_t classes = 10;
  std::string task = "classify";
  std::string input;
  std::string strides;
};

void add_model_options(CLI::App* cmd, ModelArgs& a, bool with_input) {
  cmd->add_option("--model", a.model, "model notation, e.g. \"WaveMix-Lite-8/10 (up bilinear)\"")->required();
  cmd->add_option("--in-channels", a.in_channels, "input channels")->capture_default_str();
  cmd->add_option("--classes", a.classes, "number of classes")->capture_default_str();
  cmd->add_option("--task", a.task, "classify | segment")->capture_default_str();
  cmd->add_option("--stem-strides", a.strides, "two stem strides, e.g. 2,2 (default: from input size)");
  if (with_input) cmd->add_option("--input", a.input, "input shape N,C,H,W or CxHxW")->required();
}

std::vector<std::int64_t> parse_ints(const std::string& text, const std::string& what) {
  std::vector<std::int64_t> out;
  std::string cur;
  for (char ch : text + ",") {
    if (ch == ',' || ch == 'x' || ch == 'X') {
      if (cur.empty()) throw ValueError("malformed " + what + " '" + text + "'");
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(cur, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cur.size() || v < 0) throw ValueError("malformed " + what + " '" + text + "'");
      out.push_back(v);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  return out;
}

Shape parse_shape(const std::string& text) {
  auto v = parse_ints(text, "input shape");
  if (v.size() == 3) v.insert(v.begin(), 1);
  if (v.size() != 4) throw ValueError("input shape needs 3 or 4 dimensions, got '" + text + "'");
  return {v[0], v[1], v[2], v[3]};
}

ModelSpec resolve_spec(const ModelArgs& a, const Shape* input) {
  ModelSpec d;
  d.in_channels = input ? input->c : a.in_channels;
  d.classes = a.classes;
  d.task = parse_task(a.task);
  if (!a.strides.empty()) {
    d.stem_strides = parse_ints(a.strides, "stem strides");
  } else if (input) {
    d.stem_strides = auto_stem_strides(input->h, input->w);
  }
  return parse_model_spec(a.model, d);
}

void apply_loss(RunConfig& c, const std::string& loss) {
  // "focal(1.5)" sets gamma inline.
  const auto open = loss.find('(');
  if (open == std::string::npos) {
    c.loss = loss;
    return;
  }
  if (loss.back() != ')') throw ValueError("malformed loss '" + loss + "'");
  c.loss = loss.substr(0, open);
  c.gamma = std::stod(loss.substr(open + 1, loss.size() - open - 2));
}

int cmd_params(const ModelArgs& a, bool csv) {
  const ModelSpec spec = resolve_spec(a, nullptr);
  const auto model = build_model<float>(spec, 0);
  std::printf("%s  in=%lld classes=%lld task=%s\n", format_model_spec(spec).c_str(),
              static_cast<long long>(spec.in_channels), static_cast<long long>(spec.classes), to_string(spec.task).c_str());
  if (csv) std::printf("module,group,params\n");
  std::int64_t stem = 0, blocks = 0, head = 0;
  for (const auto& r : model.param_table()) {
    if (csv) std::printf("%s,%s,%lld\n", r.module.c_str(), r.group.c_str(), static_cast<long long>(r.count));
    else std::printf("  %-24s %-7s %12lld\n", r.module.c_str(), r.group.c_str(), static_cast<long long>(r.count));
    (r.group == "stem" ? stem : r.group == "blocks" ? blocks : head) += r.count;
  }
  std::printf("stem %lld  blocks %lld  head %lld\n", static_cast<long long>(stem), static_cast<long long>(blocks),
              static_cast<long long>(head));
  std::printf("total %lld\n", static_cast<long long>(model.param_count()));
  return 0;
}

int cmd_cost(const ModelArgs& a) {
  const Shape input = parse_shape(a.input);
  const ModelSpec spec = resolve_spec(a, &input);
  const CostReport r = estimate_cost(spec, input);
  std::printf("%s  input %s\n# %s\n", format_model_spec(spec).c_str(), input.str().c_str(), kFlopConvention);
  std::printf("%-22s %-10s %-18s %10s %14s %12s\n", "layer", "kind", "output", "params", "flops", "activations");
  for (const auto& row : r.rows) {
    std::printf("%-22s %-10s %-18s %10lld %14lld %12lld\n", row.layer.c_str(), row.kind.c_str(),
                row.output.str().c_str(), static_cast<long long>(row.params), static_cast<long long>(row.flops),
                static_cast<long long>(row.activations));
  }
  std::printf("total params %lld\ntotal flops %lld\ntotal activations %lld\n",
              static_cast<long long>(r.total_params()), static_cast<long long>(r.total_flops()),
              static_cast<long long>(r.total_activations()));
  return 0;
}

int cmd_bench(const ModelArgs& a, std::int64_t iters) {
  const Shape input = parse_shape(a.input);
  const ModelSpec spec = resolve_spec(a, &input);
  const BenchResult r = bench<float>(spec, input, iters);
  std::printf("%s  input %s  %lld timed iterations (median)\n", format_model_spec(spec).c_str(), input.str().c_str(),
              static_cast<long long>(r.timed_iters));
  std::printf("forward          %9.2f ms/batch %10.1f images/s\n", r.forward_ms, r.forward_images_per_sec());
  std::printf("forward+backward %9.2f ms/batch %10.1f images/s\n", r.training_ms, r.training_images_per_sec());
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& save_config_path) {
  cfg.validate();
  if (!save_config_path.empty()) save_config(save_config_path, cfg);
  const Datasets data = load_datasets(cfg);
  Trainer<float> trainer(cfg, data);
  const char* metric = data.task == Task::kClassify ? "top1" : "miou";
  std::printf("%s on %s: %lld train / %lld test images, %lld parameters\n",
              format_model_spec(trainer.model().spec()).c_str(), data.name.c_str(),
              static_cast<long long>(data.train_size()), static_cast<long long>(data.test_size()),
              static_cast<long long>(trainer.model().param_count()));
  std::printf("%s\n", kMetricsHeader);
  std::fflush(stdout);
  const auto result = trainer.run([](const EpochRecord& r) {
    std::printf("%s\n", format_csv_row(r).c_str());
    std::fflush(stdout);
  });
  if (result.last_metric) std::printf("final %s %s\n", metric, format_metric(*result.last_metric).c_str());
  if (result.best_metric) std::printf("best %s %s\n", metric, format_metric(*result.best_metric).c_str());
  return 0;
}

int cmd_eval(RunConfig cfg, const std::string& checkpoint, bool dataset_given) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (!dataset_given) cfg.dataset = ck.get("dataset");
  const Datasets data = load_datasets(cfg);
  const double m = evaluate_checkpoint(ck, data);
  std::printf("%s %s\n", data.task == Task::kClassify ? "top1" : "miou", format_metric(m).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WaveMix-Lite training and analysis tool"};
  app.require_subcommand(1);

  RunConfig cfg;
  std::string config_path, save_config_path, loss, checkpoint;
  auto* train = app.add_subcommand("train", "train a model and write metrics CSV and checkpoints");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a test split");
  for (auto* cmd : {train, eval}) {
    cmd->add_option("--config", config_path, "key = value run configuration file");
    cmd->add_option("--dataset", cfg.dataset, "mnist | fashion | cifar10 | synthseg");
    cmd->add_option("--data-dir", cfg.data_dir, "dataset root (default: $WAVEMIX_DATA, then ./data)");
    cmd->add_option("--train-limit", cfg.train_limit, "use only the first N training images");
    cmd->add_option("--synth-train", cfg.synth_train, "synthetic training images");
    cmd->add_option("--synth-test", cfg.synth_test, "synthetic test images");
    cmd->add_option("--synth-size", cfg.synth_size, "synthetic image side");
    cmd->add_option("--synth-classes", cfg.synth_classes, "synthetic classes including background");
  }
  train->add_option("--model", cfg.model, "model notation");
  train->add_option("--batch", cfg.batch_size, "batch size");
  train->add_option("--epochs", cfg.epochs, "total epochs");
  train->add_option("--seed", cfg.seed, "initialization and shuffling seed");
  train->add_option("--loss", loss, "ce | focal | focal(GAMMA)");
  train->add_option("--gamma", cfg.gamma, "focal loss gamma");
  train->add_option("--sgd-tail", cfg.sgd_tail, "final epochs trained with SGD");
  train->add_option("--out", cfg.checkpoint_out, "final checkpoint path (best goes to <stem>.best<ext>)");
  train->add_option("--metrics", cfg.metrics_out, "metrics CSV path");
  train->add_option("--eval-every", cfg.eval_every, "evaluate every N epochs");
  train->add_option("--resume", cfg.resume, "continue from a checkpoint written by train");
  train->add_option("--init-backbone", cfg.init_backbone, "copy matching backbone weights from a checkpoint");
  train->add_option("--save-config", save_config_path, "write the effective configuration here");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();

  bool csv = false;
  ModelArgs margs;
  std::int64_t iters = 10;
  auto* params = app.add_subcommand("params", "print the parameter table");
  add_model_options(params, margs, false);
  params->add_flag("--csv", csv, "CSV rows");
  auto* cost = app.add_subcommand("cost", "analytic FLOPs and activation estimates");
  add_model_options(cost, margs, true);
  auto* benchcmd = app.add_subcommand("bench", "measure throughput on random input");
  add_model_options(benchcmd, margs, true);
  benchcmd->add_option("--iters", iters, "iterations per mode (first is discarded)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed() || eval->parsed()) {
      // Explicit flags win over the config file.
      RunConfig base = config_path.empty() ? RunConfig{} : load_config(config_path);
      auto* cmd = train->parsed() ? train : eval;
      auto take = [&](const char* flag, auto& dst, const auto& src) {
        if (cmd->get_option_no_throw(flag) && cmd->count(flag) > 0) dst = src;
      };
      take("--dataset", base.dataset, cfg.dataset);
      take("--data-dir", base.data_dir, cfg.data_dir);
      take("--train-limit", base.train_limit, cfg.train_limit);
      take("--synth-train", base.synth_train, cfg.synth_train);
      take("--synth-test", base.synth_test, cfg.synth_test);
      take("--synth-size", base.synth_size, cfg.synth_size);
      take("--synth-classes", base.synth_classes, cfg.synth_classes);
      if (eval->parsed()) return cmd_eval(base, checkpoint, eval->count("--dataset") > 0 || !config_path.empty());
      take("--model", base.model, cfg.model);
      take("--batch", base.batch_size, cfg.batch_size);
      take("--epochs", base.epochs, cfg.epochs);
      take("--seed", base.seed, cfg.seed);
      take("--gamma", base.gamma, cfg.gamma);
      take("--sgd-tail", base.sgd_tail, cfg.sgd_tail);
      take("--out", base.checkpoint_out, cfg.checkpoint_out);
      take("--metrics", base.metrics_out, cfg.metrics_out);
      take("--eval-every", base.eval_every, cfg.eval_every);
      take("--resume", base.resume, cfg.resume);
      take("--init-backbone", base.init_backbone, cfg.init_backbone);
      if (!loss.empty()) apply_loss(base, loss);
      return cmd_train(base, save_config_path);
    }
    if (params->parsed()) return cmd_params(margs, csv);
    if (cost->parsed()) return cmd_cost(margs);
    if (benchcmd->parsed()) return cmd_bench(margs, iters);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
