#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>

#include "wavemix/model.hpp"
#include "wavemix/train.hpp"

namespace wavemix {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string("'") + WAVEMIX_CLI_PATH + "' " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::int64_t total_of(const std::string& out) {
  std::smatch m;
  if (!std::regex_search(out, m, std::regex("total (\\d+)"))) return -1;
  return std::stoll(m[1]);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("wavemix_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& n) const { return (dir_ / n).string(); }
  fs::path dir_;
};

TEST_F(Cli, ParamsReproducesReferenceCounts) {
  struct Case {
    const char* args;
    std::int64_t total;
  };
  for (const Case& c : {Case{"--model 'WaveMix-Lite-8/10 (up bilinear)' --in-channels 1", 3566},
                        Case{"--model WaveMix-Lite-8/5 --in-channels 1", 7156},
                        Case{"--model 'WaveMix-Lite-32/7 (up bilinear)'", 37058},
                        Case{"--model WaveMix-Lite-64/6", 520106},
                        Case{"--model WaveMix-Lite-128/7 --classes 100", 2416580},
                        Case{"--model WaveMix-Lite-256/7 --classes 100", 9625380}}) {
    const CliRun r = run(std::string("params ") + c.args);
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(total_of(r.out), c.total) << c.args;
  }
}

TEST_F(Cli, ParamsMatchesLibraryCountForSegmenters) {
  const CliRun r = run("params --model 'WaveMix-Lite-16/3 (level 2)' --task segment --classes 5 --stem-strides 2,1");
  ModelSpec d;
  d.task = Task::kSegment;
  d.classes = 5;
  d.stem_strides = {2, 1};
  EXPECT_EQ(total_of(r.out), param_count(parse_model_spec("WaveMix-Lite-16/3 (level 2)", d)));
  const CliRun csv = run("params --csv --model WaveMix-Lite-8/2");
  EXPECT_NE(csv.out.find("module,group,params\nstem.0,stem,"), std::string::npos) << csv.out;
}

TEST_F(Cli, InvalidInputsExitNonZero) {
  EXPECT_NE(run("params --model WaveMix-Lite-6/2").code, 0);
  EXPECT_NE(run("params --model 'WaveMix-Lite-8/2 (bogus 1)'").code, 0);
  EXPECT_NE(run("params").code, 0);
  EXPECT_NE(run("cost --model WaveMix-Lite-8/2 --input 3x31x32").code, 0);
  EXPECT_NE(run("frobnicate").code, 0);
  const CliRun r = run("params --model WaveMix-Lite-8/2 --task detect");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("classify|segment"), std::string::npos) << r.out;
}

TEST_F(Cli, CostReportsConventionAndTotals) {
  const CliRun r = run("cost --model WaveMix-Lite-16/2 --input 2,3,32,32");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("2 x multiply-accumulates"), std::string::npos);
  EXPECT_NE(r.out.find("total params " + std::to_string(param_count(parse_model_spec("WaveMix-Lite-16/2")))),
            std::string::npos);
  EXPECT_NE(r.out.find("blocks.1.mix"), std::string::npos);
}

TEST_F(Cli, BenchPrintsBothModes) {
  const CliRun r = run("bench --model WaveMix-Lite-8/2 --input 4x1x16x16 --in-channels 1 --iters 3");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("forward "), std::string::npos);
  EXPECT_NE(r.out.find("forward+backward"), std::string::npos);
  EXPECT_NE(run("bench --model WaveMix-Lite-8/2 --input 4x3x16x16 --iters 2").code, 0);
}

TEST_F(Cli, TrainEvalRoundTrip) {
  const std::string common = "--dataset synthseg --synth-train 16 --synth-test 8 --synth-size 16";
  const CliRun t = run("train " + common + " --model WaveMix-Lite-16/2 --epochs 2 --batch 8 --loss 'focal(2)' --out " +
                    path("m.ckpt") + " --metrics " + path("m.csv") + " --save-config " + path("run.cfg"));
  ASSERT_EQ(t.code, 0) << t.out;
  const auto rows = read_metrics_csv(path("m.csv"));
  ASSERT_EQ(rows.size(), 2u);
  const std::string expected = "miou " + format_metric(*rows.back().eval_metric) + "\n";
  const CliRun e1 = run("eval --checkpoint " + path("m.ckpt") + " " + common);
  const CliRun e2 = run("eval --checkpoint " + path("m.ckpt") + " " + common);
  EXPECT_EQ(e1.code, 0) << e1.out;
  EXPECT_EQ(e1.out, expected);
  EXPECT_EQ(e1.out, e2.out);
  const CliRun e3 = run("eval --config " + path("run.cfg") + " --checkpoint " + path("m.ckpt"));
  EXPECT_EQ(e3.out, expected);

  const RunConfig saved = load_config(path("run.cfg"));
  EXPECT_EQ(saved.loss, "focal");
  EXPECT_EQ(saved.gamma, 2.0);
  EXPECT_EQ(saved.epochs, 2);

  // Resume past the saved epoch count through the config file.
  const CliRun more = run("train --config " + path("run.cfg") + " --epochs 3 --resume " + path("m.ckpt"));
  ASSERT_EQ(more.code, 0) << more.out;
  const auto extended = read_metrics_csv(path("m.csv"));
  ASSERT_EQ(extended.size(), 3u);
  EXPECT_EQ(extended[2].epoch, 2);

  auto bytes = [&] {
    std::ifstream in(path("m.ckpt"), std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  }();
  std::ofstream(path("cut.ckpt"), std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  const CliRun bad = run("eval --checkpoint " + path("cut.ckpt") + " " + common);
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.out.find("checkpoint ends"), std::string::npos) << bad.out;
}

TEST_F(Cli, ConfigErrorsAreReported) {
  std::ofstream(path("bad.cfg")) << "dataset = synthseg\nlearning_rate = 3\n";
  const CliRun r = run("train --config " + path("bad.cfg"));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("unknown config key 'learning_rate'"), std::string::npos) << r.out;
  const CliRun shape = run("train --dataset synthseg --synth-size 20 --model 'WaveMix-Lite-16/2 (level 3)' --out " +
                        path("x.ckpt") + " --metrics " + path("x.csv"));
  EXPECT_NE(shape.code, 0);
  EXPECT_NE(shape.out.find("divisible by 8"), std::string::npos) << shape.out;
}

}  // namespace
}  // namespace wavemix
