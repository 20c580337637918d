#pragma once

#include <cstddef>
#include <string>

#include "unrollcs/sampling.hpp"
#include "unrollcs/tensor.hpp"

namespace unrollcs {

enum class SparsifyingTransform { kIdentity, kDct8x8 };

std::string to_string(SparsifyingTransform t);
SparsifyingTransform parse_transform(const std::string& s);

struct IstaConfig {
  std::size_t iterations = 50;
  double rho = 1.0;
  // On [0, 1] data.
  double lambda = 0.05;
  SparsifyingTransform transform = SparsifyingTransform::kDct8x8;

  void validate() const;
};

// Orthonormal DCT-II applied to every 8x8 tile of [N, C, H, W]; H and W must
// be multiples of 8.
Tensor block_dct8(const Tensor& x);
Tensor block_idct8(const Tensor& x);

// x0 = A^T y; then z = x - rho A^T (A x - y), x = T^-1 S_lambda(T z).
// Returns the estimate cropped to the measured extent. Value-only.
Tensor ista_reconstruct(const SamplingOperator& op, const Measurement& m, const IstaConfig& config);

}  // namespace unrollcs
