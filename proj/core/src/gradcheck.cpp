#include "unrollcs/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "unrollcs/error.hpp"

namespace unrollcs {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           const GradCheckOptions& options) {
  if (leaves.empty()) throw ContractError("grad_check: no leaves");
  std::vector<std::vector<double>> saved_grads;
  for (Tensor& leaf : leaves) {
    if (!leaf.is_leaf()) throw ContractError("grad_check: inputs must be leaf tensors");
    saved_grads.emplace_back(leaf.grad().begin(), leaf.grad().end());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }

  Tensor out = f();
  if (out.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
  if (!std::isfinite(out.item())) throw NumericError("grad_check: non-finite function value");
  out.backward();

  std::vector<std::vector<double>> analytic;
  std::size_t total = 0;
  for (Tensor& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
    total += leaf.numel();
  }

  // Flat coordinate list, sampled without replacement.
  std::vector<std::size_t> coords(total);
  std::iota(coords.begin(), coords.end(), 0);
  if (options.samples != 0 && options.samples < total) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.samples);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  for (std::size_t flat : coords) {
    std::size_t leaf_index = 0;
    std::size_t offset = flat;
    while (offset >= leaves[leaf_index].numel()) {
      offset -= leaves[leaf_index].numel();
      ++leaf_index;
    }
    auto values = leaves[leaf_index].mutable_data();
    const double original = values[offset];
    values[offset] = original + options.step;
    const double plus = evaluate(f);
    values[offset] = original - options.step;
    const double minus = evaluate(f);
    values[offset] = original;

    const double numeric = (plus - minus) / (2.0 * options.step);
    const double exact = analytic[leaf_index][offset];
    if (!std::isfinite(exact)) throw NumericError("grad_check: non-finite analytic gradient");
    const double denom = std::max({std::abs(exact), std::abs(numeric), options.abs_floor});
    report.max_rel_error = std::max(report.max_rel_error, std::abs(exact - numeric) / denom);
    ++report.checked;
  }
  report.pass = report.max_rel_error < options.tolerance;

  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto g = leaves[i].mutable_grad();
    if (saved_grads[i].empty()) {
      std::fill(g.begin(), g.end(), 0.0);
    } else {
      std::copy(saved_grads[i].begin(), saved_grads[i].end(), g.begin());
    }
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           const GradCheckOptions& options) {
  Tensor leaf = point.detach();
  leaf.set_requires_grad(true);
  return grad_check([&] { return f(leaf); }, {leaf}, options);
}

}  // namespace unrollcs
