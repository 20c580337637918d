#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "unrollcs/tensor.hpp"

namespace unrollcs {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative errors are taken against max(|analytic|, |numeric|, abs_floor).
  double abs_floor = 1e-8;
  // Coordinates checked across all leaves; 0 checks every coordinate.
  std::size_t samples = 20;
  std::uint64_t seed = 7;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool pass = false;
};

// Compares the reverse-mode gradient of scalar `f` with respect to `leaves`
// against central differences at randomly sampled coordinates. `f` must be
// deterministic and read the leaves' current values.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                           const GradCheckOptions& options = {});

// Single-point form: `f` receives a leaf holding `point`.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           const GradCheckOptions& options = {});

}  // namespace unrollcs
