#include "unrollcs/verify.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include "unrollcs/error.hpp"
#include "unrollcs/gradcheck.hpp"
#include "unrollcs/model.hpp"
#include "unrollcs/ops.hpp"
#include "unrollcs/sampling.hpp"
#include "unrollcs/training.hpp"

namespace unrollcs {

namespace {

std::string fmt(const char* f, double v) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor gaussian(Shape shape, std::mt19937_64& rng, double sd = 1.0, bool grad = false) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

SamplingOperator maybe_faulty(SamplingOperator op, bool fault) {
  if (!fault) return op;
  std::vector<double> a(op.matrix().begin(), op.matrix().end());
  a[0] += 1e-3;
  return SamplingOperator::from_matrix(op.block(), op.rows(), std::move(a), op.seed());
}

SuiteResult orthogonality(const VerifyOptions& o) {
  double worst = 0.0;
  for (const std::size_t b : {2, 8, 32}) {
    for (const double g : {0.1, 0.25, 0.5, 1.0}) {
      const auto op = maybe_faulty(SamplingOperator::generate(b, g, o.seed), o.inject_fault);
      worst = std::max(worst, op.orthogonality_error());
    }
  }
  return {"orthogonality", worst < 1e-10, fmt("max|AA^T - I| = %.3g", worst)};
}

SuiteResult rnd(const VerifyOptions& o) {
  std::mt19937_64 rng(o.seed + 1);
  const auto op = SamplingOperator::generate(8, 0.25, o.seed);
  double split = 0.0, null_meas = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Tensor x = gaussian({1, 1, 16, 16}, rng);
    const Tensor pr = project_range(op, x), pn = project_null(op, x);
    split = std::max(split, max_abs_diff(x, add(pr, pn)));
    null_meas = std::max(null_meas, max_abs(apply_forward(op, pn)));
  }
  return {"rnd", split < 1e-12 && null_meas < 1e-10,
          fmt("|x - (P_R x + P_N x)| = %.3g", split) + fmt(", |A P_N x| = %.3g", null_meas)};
}

SuiteResult adjointness(const VerifyOptions& o) {
  std::mt19937_64 rng(o.seed + 2);
  const auto op = SamplingOperator::generate(4, 0.5, o.seed);
  double worst = 0.0;
  int trials = 0;
  const auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); };
  for (int t = 0; t < 10; ++t, ++trials) {
    const Tensor x = gaussian({2, 1, 16, 16}, rng), y = gaussian({2, op.rows(), 4, 4}, rng);
    worst = std::max(worst, rel(dot(apply_forward(op, x), y), dot(x, apply_adjoint(op, y))));
  }
  for (const std::size_t r : {1, 2, 4}) {
    for (const std::size_t d : {1, 4}) {
      for (int t = 0; t < 10; ++t, ++trials) {
        const Tensor x = gaussian({2, r * r * d, 16 / r, 16 / r}, rng);
        const Tensor y = gaussian({2, d * op.rows(), 4, 4}, rng);
        worst = std::max(worst, rel(dot(fd_forward(op, x, r), y), dot(x, fd_adjoint(op, y, r))));
      }
    }
  }
  return {"adjoint", worst < 1e-10, std::to_string(trials) + fmt(" trials, max rel error %.3g", worst)};
}

// Dense multiply of every B x B block of every channel, written out by hand.
SuiteResult fd_equivalence(const VerifyOptions& o) {
  std::mt19937_64 rng(o.seed + 3);
  const std::size_t b = 4, d = 3, h = 8, w = 12;
  const auto op = SamplingOperator::generate(b, 0.5, o.seed);
  const auto a = op.matrix();
  const std::size_t m = op.rows();
  double worst = 0.0;
  for (const std::size_t r : {1, 2}) {
    const Tensor x = gaussian({2, r * r * d, h / r, w / r}, rng);
    const Tensor full = pixel_shuffle(x, r);
    const Tensor got = fd_forward(op, x, r);
    const auto fv = full.data();
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t by = 0; by < h / b; ++by)
          for (std::size_t bx = 0; bx < w / b; ++bx)
            for (std::size_t row = 0; row < m; ++row) {
              double acc = 0.0;
              for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < b; ++j)
                  acc += a[row * b * b + i * b + j] * fv[((n * d + c) * h + by * b + i) * w + bx * b + j];
              const double g = got.data()[((n * d * m + c * m + row) * (h / b) + by) * (w / b) + bx];
              worst = std::max(worst, std::abs(acc - g));
            }
  }
  return {"fd-equivalence", worst < 1e-12, fmt("max abs diff %.3g", worst)};
}

struct Check {
  std::string name;
  GradCheckReport report;
};

SuiteResult gradcheck(const VerifyOptions& o) {
  std::mt19937_64 rng(o.seed + 4);
  std::vector<Check> checks;
  GradCheckOptions gc;
  gc.tolerance = 1e-4;
  gc.samples = 24;
  gc.seed = o.seed;
  const auto weighted = [&](Shape s) { return gaussian(std::move(s), rng); };

  const auto op = SamplingOperator::generate(4, 0.5, o.seed);
  {
    const Tensor x = gaussian({2, 4, 6, 6}, rng, 1.0, true), w = gaussian({6, 2, 3, 3}, rng, 0.5, true);
    const Tensor bias = gaussian({6}, rng, 0.5, true), wt = weighted({2, 6, 3, 3});
    checks.push_back({"conv2d", grad_check([&] { return sum(mul(conv2d(x, w, bias, {2, 1, 2, false}), wt)); },
                                           {x, w, bias}, gc)});
    const Tensor w2 = gaussian({4, 3, 2, 2}, rng, 0.5, true), wt2 = weighted({2, 3, 12, 12});
    checks.push_back({"conv_transpose2d",
                      grad_check([&] { return sum(mul(conv2d(x, w2, {}, {2, 0, 1, true}), wt2)); }, {x, w2}, gc)});
    const Tensor w3 = gaussian({3, 4, 3, 3}, rng, 0.5, true), wt3 = weighted({2, 3, 6, 6});
    checks.push_back({"conv2d-same", grad_check([&] { return sum(mul(conv2d(x, w3, {}, {1, 1, 1, false}), wt3)); },
                                                {x, w3}, gc)});
    const Tensor ws = weighted({2, 1, 12, 12}), wu = weighted({2, 16, 3, 3});
    checks.push_back({"pixel_shuffle", grad_check([&] { return sum(mul(pixel_shuffle(x, 2), ws)); }, {x}, gc)});
    checks.push_back({"pixel_unshuffle", grad_check([&] { return sum(mul(pixel_unshuffle(x, 2), wu)); }, {x}, gc)});
    const Tensor we = weighted({2, 4, 6, 6});
    checks.push_back({"relu", grad_check([&] { return sum(mul(relu(x), we)); }, {x}, gc)});
    checks.push_back({"sigmoid", grad_check([&] { return sum(mul(sigmoid(x), we)); }, {x}, gc)});
    checks.push_back({"soft_threshold", grad_check([&] { return sum(mul(soft_threshold(x, 0.3), we)); }, {x}, gc)});
    const Tensor wc = weighted({2, 7, 6, 6});
    checks.push_back({"concat/slice", grad_check([&] {
                        return sum(mul(concat_channels({x, slice_channels(x, 1, 4)}), wc));
                      },
                                                 {x}, gc)});
    const Tensor wtile = weighted({2, 8, 6, 6});
    checks.push_back({"tile/mask", grad_check([&] {
                        return sum(mul(mask_channels(tile_channels(x, 2), {1, 0, 1, 1, 0.5, 1, 1, 2}), wtile));
                      },
                                              {x}, gc)});
    const Tensor tgt = weighted({2, 4, 6, 6});
    checks.push_back({"mse_loss", grad_check([&] { return mse_loss(tgt, x); }, {x}, gc)});
  }
  {
    const Tensor x = gaussian({2, 4, 4, 4}, rng, 1.0, true), wy = weighted({2, op.rows(), 2, 2});
    checks.push_back({"fd_forward", grad_check([&] { return sum(mul(fd_forward(op, x, 2), wy)); }, {x}, gc)});
    const Tensor y = gaussian({2, op.rows(), 2, 2}, rng, 1.0, true), wx = weighted({2, 4, 4, 4});
    checks.push_back({"fd_adjoint", grad_check([&] { return sum(mul(fd_adjoint(op, y, 2), wx)); }, {y}, gc)});
    const Tensor img = gaussian({1, 1, 8, 8}, rng, 1.0, true), wm = weighted({1, op.rows(), 2, 2});
    checks.push_back({"sample", grad_check([&] { return sum(mul(sample(op, img, 0.0, 0).y, wm)); }, {img}, gc)});
  }

  struct Arch {
    const char* name;
    Architecture a;
    Framework f;
    PlainIdVariant v;
    bool learn_a = false;
  };
  const Arch archs[] = {
      {"plain-id-pgd", Architecture::kPlainId, Framework::kPgd, PlainIdVariant::kBaseline},
      {"plain-id-pgd-fixed", Architecture::kPlainId, Framework::kPgd, PlainIdVariant::kFixed},
      {"plain-id-pgd-reduced", Architecture::kPlainId, Framework::kPgd, PlainIdVariant::kReduced},
      {"plain-id-rnd", Architecture::kPlainId, Framework::kRnd, PlainIdVariant::kBaseline},
      {"plain-fd-pgd", Architecture::kPlainFd, Framework::kPgd, PlainIdVariant::kBaseline},
      {"plain-fd-rnd", Architecture::kPlainFd, Framework::kRnd, PlainIdVariant::kBaseline},
      {"prl-star-pgd", Architecture::kPrlStar, Framework::kPgd, PlainIdVariant::kBaseline},
      {"prl-star-rnd", Architecture::kPrlStar, Framework::kRnd, PlainIdVariant::kBaseline},
      {"prl-pgd", Architecture::kPrl, Framework::kPgd, PlainIdVariant::kBaseline},
      {"prl-rnd", Architecture::kPrl, Framework::kRnd, PlainIdVariant::kBaseline},
      {"prl-pgd-learned-A", Architecture::kPrl, Framework::kPgd, PlainIdVariant::kBaseline, true},
  };
  for (const auto& arch : archs) {
    ModelConfig c;
    c.architecture = arch.a;
    c.framework = arch.f;
    c.variant = arch.v;
    c.block = 4;
    c.gamma = 0.5;
    c.C = c.D = 2;
    c.K = 1;
    c.sampling_seed = o.seed;
    c.learn_sampling = arch.learn_a;
    ParameterStore ps = init_params(c, o.seed);
    // Zero-initialized branches would make most gradients trivially zero.
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : ps.tensors()) {
      Tensor p = t;
      const double fan_in = p.rank() == 4 ? static_cast<double>(p.dim(1) * p.dim(2) * p.dim(3)) : 1.0;
      std::normal_distribution<double> n(0.0, p.rank() == 4 ? 0.8 / std::sqrt(fan_in) : 0.1);
      for (auto& v : p.mutable_data()) v = n(rng);
      leaves.push_back(p);
    }
    const auto aop = resolve_sampling(c, ps, c.make_operator());
    const Tensor x = gaussian({1, 1, 8, 8}, rng, 0.5);
    // With a learned A the measurement depends on the parameters too.
    const auto measure = [&] { return sample(aop, x, 0.0, 0); };
    const Tensor wo = weighted({1, 1, 8, 8});
    checks.push_back({arch.name, grad_check([&] { return sum(mul(model_forward(c, ps, aop, measure()), wo)); }, leaves, gc)});
  }

  bool pass = true;
  double worst = 0.0;
  std::string failed;
  for (const auto& c : checks) {
    worst = std::max(worst, c.report.max_rel_error);
    if (!c.report.pass) {
      pass = false;
      failed += " " + c.name;
    }
  }
  std::string detail = std::to_string(checks.size()) + fmt(" checks, max rel error %.3g", worst);
  if (!failed.empty()) detail += "; failed:" + failed;
  return {"gradcheck", pass, detail};
}

SuiteResult receptive(const VerifyOptions&) {
  bool pass = true;
  for (std::size_t k = 1; k <= 10; ++k) {
    const std::size_t star = 84 * k + 13, prl = 140 * k + 8;
    pass = pass && receptive_field(Architecture::kPrlStar, k) == star * star &&
           receptive_field(Architecture::kPrl, k) == prl * prl;
  }
  return {"receptive-field", pass, "K = 1..10"};
}

// A smooth deterministic test image with edges.
Tensor synthetic_image(std::size_t n) {
  std::vector<double> v(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double x = static_cast<double>(j) / n, y = static_cast<double>(i) / n;
      double val = 0.5 + 0.2 * std::sin(6.0 * x) * std::cos(4.0 * y) + 0.15 * (x + y > 0.9 ? 1.0 : -1.0);
      if ((x - 0.3) * (x - 0.3) + (y - 0.6) * (y - 0.6) < 0.04) val += 0.2;
      v[i * n + j] = std::clamp(val, 0.0, 1.0);
    }
  return Tensor::from_data({1, 1, n, n}, std::move(v));
}

SuiteResult tiny_training(const VerifyOptions& o) {
  ModelConfig c;
  c.C = c.D = 4;
  c.K = 1;
  c.gamma = 0.3;
  c.sampling_seed = o.seed;
  TrainConfig t;
  t.batch_size = 1;
  t.patch = 64;
  t.steps = 500;
  t.lr = 1e-3;
  t.seed = o.seed;
  t.augment = false;
  TrainState st = initial_state(c, t);
  const auto history = train_on(c, t, {synthetic_image(64)}, st);
  const double first = history.front().loss, last = history.back().loss;
  return {"tiny-training", last < 0.1 * first,
          fmt("500 steps, loss %.3g", first) + fmt(" -> %.3g", last) + fmt(" (%.1f%%)", 100.0 * last / first)};
}

}  // namespace

std::vector<SuiteResult> run_verify(const VerifyOptions& options) {
  using Suite = std::function<SuiteResult(const VerifyOptions&)>;
  std::vector<std::pair<const char*, Suite>> suites = {
      {"orthogonality", orthogonality}, {"rnd", rnd},           {"adjoint", adjointness},
      {"fd-equivalence", fd_equivalence}, {"gradcheck", gradcheck}, {"receptive-field", receptive}};
  if (options.level == VerifyLevel::kFull) suites.emplace_back("tiny-training", tiny_training);
  std::vector<SuiteResult> out;
  for (const auto& [name, suite] : suites) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r;
    try {
      r = suite(options);
    } catch (const std::exception& e) {
      r.name = name;
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace unrollcs
