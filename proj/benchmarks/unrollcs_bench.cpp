#include <benchmark/benchmark.h>

#include <random>

#include "unrollcs/model.hpp"
#include "unrollcs/ops.hpp"
#include "unrollcs/sampling.hpp"
#include "unrollcs/training.hpp"

using namespace unrollcs;

namespace {

Tensor gaussian(Shape shape, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

}  // namespace

// args: channels, spatial size
static void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Tensor x = gaussian({4, c, s, s}, 1);
  Tensor w = gaussian({c, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, Tensor(), {.padding = 1}));
  state.counters["FLOPs"] = benchmark::Counter(2.0 * double(4 * c * c * 9 * s * s),
                                               benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv3x3)->Args({4, 64})->Args({16, 32})->Args({64, 16})->Unit(benchmark::kMillisecond);

static void BM_Conv3x3Backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Tensor x = gaussian({4, c, s, s}, 1, true);
  Tensor w = gaussian({c, c, 3, 3}, 2, true);
  for (auto _ : state) {
    sum(conv2d(x, w, Tensor(), {.padding = 1})).backward();
    x.zero_grad();
    w.zero_grad();
  }
}
BENCHMARK(BM_Conv3x3Backward)->Args({4, 64})->Args({16, 32})->Args({64, 16})->Unit(benchmark::kMillisecond);

static void BM_SampleAdjoint(benchmark::State& state) {
  const auto op = SamplingOperator::generate(32, 0.1 * double(state.range(0)), 0);
  Tensor x = gaussian({4, 1, 64, 64}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(apply_adjoint(op, apply_forward(op, x)));
}
BENCHMARK(BM_SampleAdjoint)->DenseRange(1, 5, 2)->Unit(benchmark::kMicrosecond);

// args: downscaling r
static void BM_FdProjectNull(benchmark::State& state) {
  const auto r = static_cast<std::size_t>(state.range(0));
  const auto op = SamplingOperator::generate(32, 0.3, 0);
  Tensor f = gaussian({4, 4 * r * r, 64 / r, 64 / r}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(fd_project_null(op, f, r));
}
BENCHMARK(BM_FdProjectNull)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

// args: framework (0 pgd, 1 rnd); one training step of the tiny PRL model
static void BM_PrlTrainStep(benchmark::State& state) {
  ModelConfig m;
  m.framework = state.range(0) ? Framework::kRnd : Framework::kPgd;
  m.C = m.D = 4;
  m.K = 2;
  m.gamma = 0.3;
  auto op = m.make_operator();
  ParameterStore ps = init_params(m, 1);
  AdamState adam;
  Tensor x = gaussian({4, 1, 64, 64}, 5);
  Measurement y = sample(op, x);
  for (auto _ : state) {
    mse_loss(x, model_forward(m, ps, op, y)).backward();
    adam_step(ps, adam, 1e-4);
  }
  state.SetLabel(to_string(m.framework));
}
BENCHMARK(BM_PrlTrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_PrlForward(benchmark::State& state) {
  ModelConfig m;
  m.C = m.D = 8;
  m.K = static_cast<std::size_t>(state.range(0));
  auto op = m.make_operator();
  ParameterStore ps = init_params(m, 1);
  Measurement y = sample(op, gaussian({1, 1, 128, 128}, 6));
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(model_forward(m, ps, op, y));
}
BENCHMARK(BM_PrlForward)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
