#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "test_util.hpp"
#include "wavemix/grad_check.hpp"
#include "wavemix/losses.hpp"
#include "wavemix/model.hpp"

namespace wavemix {
namespace {

using testing::random_tensor;

ModelSpec spec_of(const std::string& text, std::int64_t in_channels, std::int64_t classes,
                  Task task = Task::kClassify) {
  ModelSpec d;
  d.in_channels = in_channels;
  d.classes = classes;
  d.task = task;
  return parse_model_spec(text, d);
}

TEST(ParseModelSpec, Examples) {
  auto a = parse_model_spec("WaveMix-Lite-128/7");
  EXPECT_EQ(a.embed, 128);
  EXPECT_EQ(a.depth, 7);
  EXPECT_EQ(a.ff, 128);
  EXPECT_EQ(a.mul, 2);
  auto b = parse_model_spec("WaveMix-Lite-256/12 (ff 1024, mul 3)");
  EXPECT_EQ(b.embed, 256);
  EXPECT_EQ(b.depth, 12);
  EXPECT_EQ(b.ff, 1024);
  EXPECT_EQ(b.mul, 3);
  auto c = parse_model_spec("WaveMix-Lite-128/16 (ff =256)");
  EXPECT_EQ(c.ff, 256);
  EXPECT_EQ(c.mul, 2);
  auto d = parse_model_spec("WaveMix-Lite-16/2 (level 2, up bilinear)");
  EXPECT_EQ(d.levels(), 2);
  EXPECT_EQ(d.expansion, Expansion::kUpsample);
  auto e = parse_model_spec("  WaveMix-Lite-16/2(mixer none)  ");
  EXPECT_EQ(e.mixer, MixerKind::identity());
}

TEST(ParseModelSpec, Errors) {
  for (const char* bad : {"WaveMix-Lite-30/7", "WaveMix-Lite-32", "WaveMix-32/7", "WaveMix-Lite-32/7 (ff)",
                          "WaveMix-Lite-32/7 (foo 3)", "WaveMix-Lite-32/7 (ff 64", "WaveMix-Lite-32/7 x",
                          "WaveMix-Lite-32/7 (up bilinear, ff 64)", "WaveMix-Lite-32/0", "WaveMix-Lite-32/7 (level 5)",
                          "WaveMix-Lite-32/7 (mixer maxpool, level 2)", "WaveMix-Lite-32/7 (mixer fft)"}) {
    EXPECT_THROW(parse_model_spec(bad), SpecError) << bad;
  }
}

TEST(ParseModelSpec, FormatRoundTrip) {
  for (const char* text : {"WaveMix-Lite-128/7", "WaveMix-Lite-256/12 (ff 1024, mul 3)",
                           "WaveMix-Lite-8/10 (up bilinear)", "WaveMix-Lite-32/4 (level 3)",
                           "WaveMix-Lite-16/3 (mixer maxpool)", "WaveMix-Lite-16/3 (mixer dft)"}) {
    auto s = parse_model_spec(text);
    EXPECT_EQ(format_model_spec(s), text);
    EXPECT_EQ(parse_model_spec(format_model_spec(s), s), s);
  }
}

TEST(ParamCount, ExactSmallModelCounts) {
  EXPECT_EQ(build_model<float>(spec_of("WaveMix-Lite-32/7 (up bilinear)", 3, 10)).param_count(), 37058);
  EXPECT_EQ(build_model<float>(spec_of("WaveMix-Lite-8/10 (up bilinear)", 1, 10)).param_count(), 3566);
  EXPECT_EQ(build_model<float>(spec_of("WaveMix-Lite-8/5", 1, 10)).param_count(), 7156);
  EXPECT_EQ(build_model<float>(spec_of("WaveMix-Lite-64/6", 3, 10)).param_count(), 520106);
}

TEST(ParamCount, LargerModelsClosedForm) {
  EXPECT_EQ(param_count(spec_of("WaveMix-Lite-256/7", 3, 100)), 9625380);
  EXPECT_EQ(param_count(spec_of("WaveMix-Lite-128/7", 3, 100)), 2416580);
  const double c144 = static_cast<double>(param_count(spec_of("WaveMix-Lite-144/7", 3, 100)));
  EXPECT_LT(std::abs(c144 - 3.01e6) / 3.01e6, 0.02);
}

TEST(ParamCount, TableSumsToTotalAndGroupsInOrder) {
  auto m = build_model<float>(spec_of("WaveMix-Lite-16/3", 3, 10));
  std::int64_t total = 0;
  std::vector<std::string> groups;
  for (const auto& row : m.param_table()) {
    total += row.count;
    if (groups.empty() || groups.back() != row.group) groups.push_back(row.group);
  }
  EXPECT_EQ(total, m.param_count());
  EXPECT_EQ(groups, (std::vector<std::string>{"stem", "blocks", "head"}));
}

TEST(ParamCount, BlockFormulaMatchesRegistry) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ModelSpec s;
    s.embed = 4 * std::uniform_int_distribution<std::int64_t>(1, 8)(rng);
    s.depth = 1;
    s.mul = std::uniform_int_distribution<std::int64_t>(1, 4)(rng);
    const int variant = trial % 4;
    if (variant == 0) {
      s.ff = 4 * std::uniform_int_distribution<std::int64_t>(1, 16)(rng);
    } else if (variant == 1) {
      s.expansion = Expansion::kUpsample;
      s.ff = s.embed;
    } else if (variant == 2) {
      s.mixer = MixerKind::dwt(2);
      s.ff = 4 * std::uniform_int_distribution<std::int64_t>(1, 16)(rng);
    } else {
      s.mixer = trial % 8 == 3 ? MixerKind::identity() : MixerKind::maxpool();
      s.ff = s.embed;
    }
    Rng init(1);
    WaveMixBlock<float> block("b", s, init);
    std::int64_t registry = 0;
    for (const auto& p : block.parameters()) registry += p.numel();
    EXPECT_EQ(block_param_count(s), registry) << format_model_spec(s);
    EXPECT_EQ(param_count(s), build_model<float>(s).param_count());
    if (variant == 0) {
      const std::int64_t e = s.embed, ff = s.ff, mul = s.mul;
      EXPECT_EQ(registry, (e * (e / 4) + e / 4) + (e * mul * e + mul * e) + (mul * e * ff + ff) + (16 * ff * e + e) + 2 * e);
    } else if (variant == 1) {
      const std::int64_t e = s.embed, mul = s.mul;
      EXPECT_EQ(registry, (e * (e / 4) + e / 4) + (e * mul * e + mul * e) + (mul * e * e + e) + 2 * e);
    }
  }
}

TEST(ParamCount, NamesUniqueAndOrdered) {
  auto m = build_model<float>(spec_of("WaveMix-Lite-16/2", 3, 10));
  std::set<std::string> names;
  for (const auto& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  const auto& ps = m.parameters();
  EXPECT_EQ(ps.front().name, "stem.0.weight");
  EXPECT_EQ(ps[4].name, "blocks.0.reduce.weight");
  EXPECT_EQ(ps[6].name, "blocks.0.mlp1.weight");
  EXPECT_EQ(ps[8].name, "blocks.0.mlp2.weight");
  EXPECT_EQ(ps[10].name, "blocks.0.expand.0.weight");
  EXPECT_EQ(ps[12].name, "blocks.0.bn.weight");
  EXPECT_EQ(ps.back().name, "head.fc.bias");
}

TEST(Block, ShapePreservedForEveryVariant) {
  for (const char* text : {"WaveMix-Lite-16/1", "WaveMix-Lite-16/1 (up bilinear)", "WaveMix-Lite-16/1 (ff 24, mul 3)",
                           "WaveMix-Lite-16/1 (level 2)", "WaveMix-Lite-16/1 (level 3, up bilinear)",
                           "WaveMix-Lite-16/1 (mixer maxpool)", "WaveMix-Lite-16/1 (mixer dft)",
                           "WaveMix-Lite-16/1 (mixer none)"}) {
    auto s = parse_model_spec(text);
    Rng rng(2);
    WaveMixBlock<double> block("b", s, rng);
    auto x = random_tensor(Shape{2, 16, 16, 8}, 3);
    EXPECT_EQ(block_forward(x, block).shape(), x.shape()) << text;
  }
  auto s = parse_model_spec("WaveMix-Lite-64/1");
  Rng rng(2);
  WaveMixBlock<float> block("b", s, rng);
  EXPECT_EQ(block.forward(random_tensor<float>(Shape{2, 64, 32, 32}, 4)).shape(), (Shape{2, 64, 32, 32}));
  EXPECT_THROW(block.forward(Tensor<float>(Shape{1, 32, 8, 8})), ShapeError);
  EXPECT_THROW(block.forward(Tensor<float>(Shape{1, 64, 7, 8})), ShapeError);
}

TEST(Block, ZeroGammaIsResidualIdentity) {
  auto s = parse_model_spec("WaveMix-Lite-16/1");
  Rng rng(3);
  WaveMixBlock<float> block("b", s, rng);
  for (float& g : block.bn.gamma.value.data()) g = 0.0f;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto x = random_tensor<float>(Shape{2, 16, 8, 8}, seed, -3, 3);
    auto y = block.forward(x);
    EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
  }
}

TEST(Block, MlpAreaIsQuarterOfIdentityMixer) {
  const Shape in{1, 8, 32, 32};
  EXPECT_EQ(MixerKind::dwt(1).output_shape(in).plane() * 4, MixerKind::identity().output_shape(in).plane());
}

TEST(Model, ClassifierAndSegmenterShapes) {
  auto cls = build_model<float>(spec_of("WaveMix-Lite-32/7 (up bilinear)", 3, 10));
  EXPECT_EQ(cls(Tensor<float>(Shape{2, 3, 32, 32}, 0.5f)).shape(), (Shape{2, 10, 1, 1}));
  auto seg = build_model<float>(spec_of("WaveMix-Lite-8/1", 3, 4, Task::kSegment));
  EXPECT_EQ(seg(Tensor<float>(Shape{2, 3, 16, 24}, 0.5f)).shape(), (Shape{2, 4, 16, 24}));
}

TEST(Model, StridedSegmenterRestoresResolution) {
  ModelSpec d;
  d.task = Task::kSegment;
  d.classes = 3;
  d.stem_strides = auto_stem_strides(256, 512);
  EXPECT_EQ(d.stem_strides, (std::vector<std::int64_t>{2, 2}));
  auto m = build_model<float>(parse_model_spec("WaveMix-Lite-8/1", d));
  m.set_training(false);
  NoGradGuard<float> guard;
  Tensor<float> x(Shape{1, 3, 256, 512}, 0.1f);
  EXPECT_EQ(m.features(x).shape(), (Shape{1, 8, 64, 128}));
  EXPECT_EQ(m(x).shape(), (Shape{1, 3, 256, 512}));
}

TEST(Model, AutoStemStrides) {
  EXPECT_EQ(auto_stem_strides(28, 28), (std::vector<std::int64_t>{1, 1}));
  EXPECT_EQ(auto_stem_strides(64, 64), (std::vector<std::int64_t>{1, 1}));
  EXPECT_EQ(auto_stem_strides(128, 256), (std::vector<std::int64_t>{2, 1}));
  EXPECT_EQ(auto_stem_strides(1024, 2048), (std::vector<std::int64_t>{2, 2}));
}

TEST(Model, IncompatibleInputReportsDivisor) {
  auto m = build_model<float>(spec_of("WaveMix-Lite-8/1 (level 2)", 1, 10));
  try {
    m(Tensor<float>(Shape{1, 1, 30, 28}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos);
  }
  EXPECT_THROW(m(Tensor<float>(Shape{1, 3, 28, 28})), ShapeError);
}

TEST(Model, ZeroHeadGivesUniformCrossEntropy) {
  auto m = build_model<double>(spec_of("WaveMix-Lite-8/2", 3, 7));
  for (auto p : m.parameters())
    if (m.is_head_parameter(p.name))
      for (double& v : p.value.data()) v = 0.0;
  auto logits = m(random_tensor(Shape{3, 3, 8, 8}, 1));
  std::vector<std::int32_t> t{0, 3, 6};
  EXPECT_NEAR(softmax_cross_entropy(logits, t).item(), std::log(7.0), 1e-12);
}

TEST(Model, BatchIndependenceInEvalMode) {
  auto m = build_model<float>(spec_of("WaveMix-Lite-16/3", 3, 10), 4);
  // Move the running stats away from their initial values first.
  for (int i = 0; i < 3; ++i) m(random_tensor<float>(Shape{4, 3, 16, 16}, 100 + i, 0, 1));
  clear_graph<float>();
  m.set_training(false);
  auto batch = random_tensor<float>(Shape{8, 3, 16, 16}, 9, 0, 1);
  auto all = m(batch);
  for (std::int64_t n = 0; n < 8; ++n) {
    std::vector<float> one(batch.data().begin() + n * 768, batch.data().begin() + (n + 1) * 768);
    auto single = m(Tensor<float>(Shape{1, 3, 16, 16}, one));
    for (std::int64_t c = 0; c < 10; ++c) EXPECT_NEAR(single.data()[c], all.data()[n * 10 + c], 1e-6);
  }
}

TEST(Model, DeterministicConstruction) {
  auto s = spec_of("WaveMix-Lite-16/2", 3, 10);
  auto a = build_model<float>(s, 11);
  auto b = build_model<float>(s, 11);
  auto x = random_tensor<float>(Shape{2, 3, 8, 8}, 1);
  auto ya = a(x), yb = b(x);
  EXPECT_TRUE(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
  auto c = build_model<float>(s, 12);
  EXPECT_FALSE(std::equal(c.parameters()[0].value.data().begin(), c.parameters()[0].value.data().end(),
                          a.parameters()[0].value.data().begin()));
}

TEST(Model, FloatAndDoubleInitAgree) {
  auto s = spec_of("WaveMix-Lite-8/1", 3, 10);
  auto f = build_model<float>(s, 3);
  auto d = build_model<double>(s, 3);
  for (std::size_t i = 0; i < f.parameters().size(); ++i) {
    const auto fv = f.parameters()[i].value.data();
    const auto dv = d.parameters()[i].value.data();
    for (std::size_t j = 0; j < fv.size(); ++j) EXPECT_EQ(fv[j], static_cast<float>(dv[j]));
  }
}

TEST(Model, InitializationDefaults) {
  auto m = build_model<double>(spec_of("WaveMix-Lite-16/1", 3, 10));
  for (const auto& p : m.parameters()) {
    const auto v = p.value.data();
    if (p.name.ends_with("bn.weight")) {
      for (double x : v) EXPECT_EQ(x, 1.0);
    } else if (p.name.ends_with("bias")) {
      for (double x : v) EXPECT_EQ(x, 0.0);
    } else {
      // Dim 1 is C_in for conv weights and C_out for deconv weights; both give the fan-in used.
      const std::int64_t fan_in = p.value.shape().c * p.value.shape().h * p.value.shape().w;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double x : v) EXPECT_LE(std::abs(x), bound);
    }
  }
}

// Input pixels whose gradient w.r.t. one central feature is nonzero.
std::int64_t footprint(const std::string& text, std::int64_t depth) {
  ModelSpec s = parse_model_spec(text);
  s.depth = depth;
  auto m = build_model<double>(s, 1);
  m.set_training(false);
  Tensor<double> x(Shape{1, 3, 64, 64}, 0.0, true);
  auto f = m.features(x);
  Tensor<double> pick(f.shape());
  pick.at(0, 0, 32, 32) = 1.0;
  backward(sum(mul(f, pick)));
  std::int64_t count = 0;
  for (std::int64_t h = 0; h < 64; ++h)
    for (std::int64_t w = 0; w < 64; ++w) {
      bool any = false;
      for (std::int64_t c = 0; c < 3; ++c) any = any || x.grad()[(c * 64 + h) * 64 + w] != 0.0;
      count += any;
    }
  return count;
}

TEST(Model, ReceptiveFieldGrowsWithDepth) {
  std::int64_t previous = 0;
  for (std::int64_t depth = 1; depth <= 4; ++depth) {
    const std::int64_t dwt = footprint("WaveMix-Lite-8/1", depth);
    const std::int64_t none = footprint("WaveMix-Lite-8/1 (mixer none)", depth);
    EXPECT_GT(dwt, previous) << "depth " << depth;
    EXPECT_GT(dwt, none) << "depth " << depth;
    previous = dwt;
  }
}

TEST(Model, EndToEndGradCheck) {
  for (const Task task : {Task::kClassify, Task::kSegment}) {
    ModelSpec d;
    d.classes = 3;
    d.task = task;
    auto m = build_model<double>(parse_model_spec("WaveMix-Lite-8/2", d), 7);
    auto x = random_tensor(Shape{2, 3, 8, 8}, 8, -1, 1, true);
    const std::int64_t positions = task == Task::kClassify ? 2 : 2 * 64;
    std::vector<std::int32_t> t(static_cast<std::size_t>(positions));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<std::int32_t>(i % 3);
    std::vector<Tensor<double>> wrt{x};
    for (const auto& p : m.parameters()) wrt.push_back(p.value);
    const double err = grad_check_tensors([&] { return softmax_cross_entropy(m(x), t); }, wrt);
    EXPECT_LT(err, 1e-4);
  }
}

}  // namespace
}  // namespace wavemix
