#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace unrollcs {

enum class VerifyLevel { kFast, kFull };

struct VerifyOptions {
  VerifyLevel level = VerifyLevel::kFast;
  // Perturbs one row of every generated A before the orthogonality suite.
  bool inject_fault = false;
  std::uint64_t seed = 2024;
};

struct SuiteResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Suites: orthogonality, rnd, adjoint, fd-equivalence, gradcheck,
// receptive-field, plus tiny-training at the full level.
std::vector<SuiteResult> run_verify(const VerifyOptions& options);

}  // namespace unrollcs
