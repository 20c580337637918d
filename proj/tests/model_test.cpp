#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "test_util.hpp"
#include "unrollcs/error.hpp"
#include "unrollcs/gradcheck.hpp"
#include "unrollcs/model.hpp"
#include "unrollcs/ops.hpp"

using namespace unrollcs;
using unrollcs::testing::randn;
using unrollcs::testing::uniform;

namespace {

ModelConfig tiny(Architecture arch, Framework fw = Framework::kPgd) {
  ModelConfig c;
  c.architecture = arch;
  c.framework = fw;
  c.block = 4;
  c.gamma = 0.5;
  c.C = 2;
  c.D = 2;
  c.K = 1;
  return c;
}

// Replaces every parameter with small random values so zero-initialized
// branches are exercised.
void randomize(ParameterStore& ps, std::uint64_t seed) {
  std::uint64_t s = seed;
  for (const auto& [name, t] : ps.tensors()) {
    if (name == "physics.A") continue;
    Tensor h = t;
    Tensor r = randn(t.shape(), s++, 1.0);
    const double fan = t.rank() == 4 ? double(t.dim(1) * t.dim(2) * t.dim(3)) : 1.0;
    const double sd = t.rank() == 4 ? 0.8 / std::sqrt(fan) : 0.1;
    for (std::size_t i = 0; i < t.numel(); ++i) h.mutable_data()[i] = sd * r.at(i);
  }
}

Tensor mse_like(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

ModelConfig pilot(PlainIdVariant v) {
  ModelConfig c;
  c.architecture = Architecture::kPlainId;
  c.variant = v;
  c.C = 64;
  c.K = 10;
  return c;
}

}  // namespace

TEST(ParameterCount, DefaultAnchorsWithinBand) {
  ModelConfig c;
  c.C = c.D = 8;
  c.K = 5;
  // A counted at the largest tabulated ratio.
  c.gamma = 0.5;
  c.learn_sampling = true;
  const double full = double(parameter_count(c));
  EXPECT_NEAR(full / 10.173e6, 1.0, 0.2) << full;
  c.share_weights = true;
  const double shared = double(parameter_count(c));
  EXPECT_NEAR(shared / 2.558e6, 1.0, 0.2) << shared;
}

TEST(ParameterCount, RndMatchesPgd) {
  for (auto arch : {Architecture::kPlainId, Architecture::kPlainFd, Architecture::kPrlStar, Architecture::kPrl})
    for (auto fusion : {Fusion::kAnalytic, Fusion::kConv1, Fusion::kConv3Sigmoid}) {
      ModelConfig c = tiny(arch);
      c.C = 4;
      c.fusion = fusion;
      const auto pgd = parameter_count(c);
      c.framework = Framework::kRnd;
      EXPECT_EQ(parameter_count(c), pgd) << to_string(arch) << " " << to_string(fusion);
    }
}

TEST(ParameterCount, PilotVariantsOrdered) {
  const auto a = parameter_count(pilot(PlainIdVariant::kBaseline));
  const auto b = parameter_count(pilot(PlainIdVariant::kFixed));
  const auto c = parameter_count(pilot(PlainIdVariant::kReduced));
  // Published pilot sizes are 1.479M / 1.478M / 1.477M at K=10.
  EXPECT_EQ(a, 1479050u);
  EXPECT_EQ(b, 1478400u);
  EXPECT_EQ(c, 1477120u);
}

TEST(ParameterCount, SharingKeepsOneStagePerGroup) {
  ModelConfig c = tiny(Architecture::kPrl);
  c.K = 3;
  ModelConfig s = c;
  s.share_weights = true;
  ModelConfig one = c;
  one.K = 1;
  EXPECT_EQ(parameter_count(s), parameter_count(one));
  EXPECT_GT(parameter_count(c), parameter_count(s));
}

TEST(ReceptiveField, ClosedForms) {
  EXPECT_EQ(receptive_field(Architecture::kPrlStar, 1), 9409u);
  EXPECT_EQ(receptive_field(Architecture::kPrl, 1), 21904u);
  EXPECT_EQ(receptive_field(Architecture::kPrl, 5), 501264u);
  for (std::size_t k = 1; k <= 10; ++k) {
    EXPECT_EQ(receptive_field(Architecture::kPrlStar, k), (84 * k + 13) * (84 * k + 13));
    EXPECT_EQ(receptive_field(Architecture::kPrl, k), (140 * k + 8) * (140 * k + 8));
  }
  EXPECT_THROW(receptive_field(Architecture::kPrl, 0), ConfigError);
  EXPECT_THROW(receptive_field(Architecture::kPlainFd, 1), ConfigError);
}

class ShapeContract : public ::testing::TestWithParam<std::tuple<Architecture, Framework>> {};

TEST_P(ShapeContract, OutputMatchesImage) {
  auto [arch, fw] = GetParam();
  ModelConfig c = tiny(arch, fw);
  c.block = 32;
  c.gamma = 0.1;
  auto op = c.make_operator();
  auto ps = init_params(c, 1);
  Tensor x = uniform({1, 1, 64, 64}, 2);
  Tensor out = model_forward(c, ps, op, sample(op, x));
  EXPECT_EQ(out.shape(), x.shape());
  for (double v : out.data()) ASSERT_TRUE(std::isfinite(v));
}

INSTANTIATE_TEST_SUITE_P(All, ShapeContract,
                         ::testing::Combine(::testing::Values(Architecture::kPlainId, Architecture::kPlainFd,
                                                              Architecture::kPrlStar, Architecture::kPrl),
                                            ::testing::Values(Framework::kPgd, Framework::kRnd)));

TEST(ModelForward, CropsPaddedMeasurement) {
  ModelConfig c = tiny(Architecture::kPrl);
  auto op = c.make_operator();
  auto ps = init_params(c, 1);
  Tensor x = uniform({1, 1, 10, 14}, 3);
  Tensor out = model_forward(c, ps, op, sample(op, x, SampleOptions{.pad = true}));
  EXPECT_EQ(out.shape(), x.shape());
}

TEST(ModelForward, ZeroParamsGiveReconstructionBias) {
  for (auto arch : {Architecture::kPlainFd, Architecture::kPrlStar, Architecture::kPrl}) {
    ModelConfig c = tiny(arch);
    auto op = c.make_operator();
    auto ps = init_params(c, 1);
    for (const auto& [name, t] : ps.tensors()) {
      Tensor h = t;
      std::fill(h.mutable_data().begin(), h.mutable_data().end(), 0.0);
    }
    Tensor b = ps.get("rec.bias");
    b.mutable_data()[0] = 0.37;
    Tensor out = model_forward(c, ps, op, sample(op, uniform({1, 1, 8, 8}, 4)));
    for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.37);
  }
}

TEST(Fusion, AnalyticVanishesOnConsistentFeatures) {
  ModelConfig c = tiny(Architecture::kPlainFd);
  c.fusion = Fusion::kAnalytic;
  auto op = c.make_operator();
  auto ps = init_params(c, 1);
  Tensor x = uniform({1, 1, 8, 8}, 5);
  Physics ph = make_physics(op, sample(op, x));
  // Every feature channel equal to the image is consistent with y.
  Tensor feat = tile_channels(x, c.D);
  EXPECT_LT(max_abs(fusion_forward(c, ps, {"s1", 1, 1}, feat, ph)), 1e-12);
  // Analytic fusion is A^T(A X - y) per channel.
  Tensor z = randn({1, c.D, 8, 8}, 6);
  Tensor expect = sub(fd_gram(ph, z, 1), tile_channels(ph.aty, c.D));
  EXPECT_LT(max_abs_diff(fusion_forward(c, ps, {"s1", 1, 1}, z, ph), expect), 1e-12);
}

TEST(Fusion, ZeroWeightSigmoidIsHalfAndMaskedChannelsZero) {
  ModelConfig c = tiny(Architecture::kPlainFd);
  c.D = c.C = 3;
  c.q = 1;
  auto op = c.make_operator();
  auto ps = init_params(c, 1);
  Tensor w = ps.get("s1.fusion.weight");
  std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  Physics ph = make_physics(op, sample(op, uniform({1, 1, 8, 8}, 7)));
  Tensor out = fusion_forward(c, ps, {"s1", 1, 1}, randn({1, 3, 8, 8}, 8), ph);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out.at(i), i < 128 ? 0.0 : 0.5);

  c.q = 0;
  auto ps0 = init_params(c, 1);
  Tensor out0 = fusion_forward(c, ps0, {"s1", 1, 1}, randn({1, 3, 8, 8}, 8), ph);
  EXPECT_EQ(max_abs(out0), 0.0);
  c.q = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Stage, ZeroResidualAtInitIsPlainGradientStep) {
  ModelConfig c = tiny(Architecture::kPlainFd);
  c.fusion = Fusion::kAnalytic;
  auto op = c.make_operator();
  auto ps = init_params(c, 3);
  Physics ph = make_physics(op, sample(op, uniform({1, 1, 8, 8}, 9)));
  Tensor x = randn({1, 2, 8, 8}, 10);
  Tensor out = stage_pgd(c, ps, {"s1", 1, 1}, x, ph);
  Tensor expect = sub(x, sub(fd_gram(ph, x, 1), tile_channels(ph.aty, 2)));
  EXPECT_LT(max_abs_diff(out, expect), 1e-12);

  c.framework = Framework::kRnd;
  auto pr = init_params(c, 3);
  EXPECT_LT(max_abs_diff(stage_rnd(c, pr, {"s1", 1, 1}, x, ph), x), 1e-15);
}

TEST(Stage, RndResidualTransmittedPartLiesInNullspace) {
  // With identity conv2 on the transmitted channels, the residual the RND stage
  // adds is (I - A^T A) applied to the rb2 output.
  ModelConfig c = tiny(Architecture::kPlainFd, Framework::kRnd);
  c.skip_intra_stage = false;
  c.C = c.D = 2;
  auto op = c.make_operator();
  auto ps = init_params(c, 4);
  randomize(ps, 40);
  Tensor w2 = ps.get("s1.conv2.weight");
  std::fill(w2.mutable_data().begin(), w2.mutable_data().end(), 0.0);
  w2.mutable_data()[0] = 1.0;
  w2.mutable_data()[3] = 1.0;
  Tensor b2 = ps.get("s1.conv2.bias");
  std::fill(b2.mutable_data().begin(), b2.mutable_data().end(), 0.0);
  Physics ph = make_physics(op, sample(op, uniform({1, 1, 8, 8}, 11)));
  Tensor out = stage_rnd(c, ps, {"s1", 1, 1}, randn({1, 2, 8, 8}, 12), ph);
  EXPECT_LT(max_abs(fd_forward(op, out, 1)), 1e-10);
}

TEST(InitParams, DeterministicAndZeroedLastConvs) {
  ModelConfig c = tiny(Architecture::kPrl);
  auto a = init_params(c, 5), b = init_params(c, 5), d = init_params(c, 6);
  EXPECT_EQ(a.count(), parameter_count(c));
  bool differs = false;
  for (const auto& [name, t] : a.tensors()) {
    EXPECT_EQ(max_abs_diff(t, b.get(name)), 0.0) << name;
    differs = differs || max_abs_diff(t, d.get(name)) > 0.0;
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(max_abs(a.get("g1.s1.conv2.weight")), 0.0);
  EXPECT_GT(max_abs(a.get("g1.s1.conv1.weight")), 0.0);
}

TEST(InitParams, LearnedSamplingStartsAtGeneratedOperator) {
  ModelConfig c = tiny(Architecture::kPrl);
  c.learn_sampling = true;
  c.sampling_seed = 12;
  auto ps = init_params(c, 1);
  auto fixed = c.make_operator();
  auto op = resolve_sampling(c, ps, fixed);
  EXPECT_TRUE(op.kernel().same_storage(ps.get("physics.A")));
  EXPECT_TRUE(std::equal(op.matrix().begin(), op.matrix().end(), fixed.matrix().begin()));
}

TEST(WeightSharing, EqualsUnsharedWithCopiedStages) {
  ModelConfig c = tiny(Architecture::kPrlStar);
  c.K = 2;
  ModelConfig s = c;
  s.share_weights = true;
  auto shared = init_params(s, 7);
  randomize(shared, 70);
  ParameterStore unshared;
  for (const auto& spec : parameter_layout(c)) {
    std::string src = spec.name;
    const auto pos = src.find(".s");
    if (pos != std::string::npos && src[0] == 'g') {
      const auto dot = src.find('.', pos + 1);
      src = src.substr(0, pos) + ".shared" + src.substr(dot);
    }
    unshared.insert(spec.name, shared.get(src).detach());
  }
  auto op = c.make_operator();
  Measurement m = sample(op, uniform({1, 1, 8, 8}, 13));
  EXPECT_LT(max_abs_diff(model_forward(c, unshared, op, m), model_forward(s, shared, op, m)), 1e-12);
}

TEST(Validation, Errors) {
  ModelConfig c = tiny(Architecture::kPrl, Framework::kRnd);
  c.C = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Architecture::kPlainId, Framework::kRnd);
  c.variant = PlainIdVariant::kFixed;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Architecture::kPrl);
  c.proj_kernel = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(Architecture::kPrl);
  c.gamma = 0.0;
  EXPECT_THROW(parameter_count(c), ConfigError);
  EXPECT_THROW(parse_architecture("unet"), ConfigError);
  ModelConfig t;
  EXPECT_FALSE(t.set("nope", "1"));
  EXPECT_THROW(t.set("K", "many"), ConfigError);
}

TEST(ModelForward, MismatchesAreErrors) {
  ModelConfig c = tiny(Architecture::kPrl);
  auto op = c.make_operator();
  auto ps = init_params(c, 1);
  ParameterStore missing;
  EXPECT_THROW(model_forward(c, missing, op, sample(op, uniform({1, 1, 8, 8}, 1))), ConfigError);
  auto other = SamplingOperator::generate(8, 0.5, 1);
  EXPECT_THROW(model_forward(c, ps, other, sample(other, uniform({1, 1, 8, 8}, 1))), ConfigError);
  // 6x6 fits a block of 2 but not the two downsamplings.
  c.block = 2;
  auto op2 = c.make_operator();
  auto ps2 = init_params(c, 1);
  EXPECT_THROW(model_forward(c, ps2, op2, sample(op2, uniform({1, 1, 6, 6}, 1))), DimensionError);
}

TEST(ModelConfig, TextRoundTrip) {
  ModelConfig c = tiny(Architecture::kPrlStar, Framework::kRnd);
  c.q = 1;
  c.gamma = 0.1;
  c.fusion = Fusion::kConv1;
  ModelConfig d;
  std::istringstream in(c.to_text());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    ASSERT_TRUE(d.set(line.substr(0, eq), line.substr(eq + 3))) << line;
  }
  EXPECT_EQ(d.to_text(), c.to_text());
}

class ArchGradient : public ::testing::TestWithParam<std::tuple<Architecture, Framework>> {};

TEST_P(ArchGradient, CentralDifferences) {
  auto [arch, fw] = GetParam();
  ModelConfig c = tiny(arch, fw);
  auto op = c.make_operator();
  auto ps = init_params(c, 2);
  randomize(ps, 20);
  Tensor x = uniform({1, 1, 8, 8}, 21);
  Measurement m = sample(op, x);
  std::vector<Tensor> leaves;
  for (const auto& [name, t] : ps.tensors()) leaves.push_back(t);
  auto r = grad_check([&] { return mse_like(model_forward(c, ps, op, m), x); }, leaves, {.samples = 24});
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(Tiny, ArchGradient,
                         ::testing::Combine(::testing::Values(Architecture::kPlainId, Architecture::kPlainFd,
                                                              Architecture::kPrlStar, Architecture::kPrl),
                                            ::testing::Values(Framework::kPgd, Framework::kRnd)));

TEST(ArchGradientVariants, PlainIdFixedAndReduced) {
  for (auto v : {PlainIdVariant::kFixed, PlainIdVariant::kReduced}) {
    ModelConfig c = tiny(Architecture::kPlainId);
    c.variant = v;
    auto op = c.make_operator();
    auto ps = init_params(c, 2);
    randomize(ps, 30);
    Tensor x = uniform({1, 1, 8, 8}, 31);
    Measurement m = sample(op, x);
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : ps.tensors()) leaves.push_back(t);
    auto r = grad_check([&] { return mse_like(model_forward(c, ps, op, m), x); }, leaves, {.samples = 24});
    EXPECT_TRUE(r.pass) << to_string(v) << " " << r.max_rel_error;
  }
}
