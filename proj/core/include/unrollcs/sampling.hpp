#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "unrollcs/tensor.hpp"

namespace unrollcs {

// Block-based sampling matrix A (M x N, N = B*B) with orthonormal rows.
// Blocks are flattened row-major, so row m of A doubles as the m-th B x B
// convolution kernel applied with stride B.
class SamplingOperator {
 public:
  // Orthonormalizes an i.i.d. standard Gaussian M x N draw (Householder QR,
  // R diagonal made positive). Deterministic per (block, gamma, seed).
  static SamplingOperator generate(std::size_t block, double gamma, std::uint64_t seed, bool learnable = false);
  // Wraps an explicit row-major matrix without orthogonalizing it.
  static SamplingOperator from_matrix(std::size_t block, std::size_t rows, std::vector<double> matrix,
                                      std::uint64_t seed = 0, bool learnable = false);

  // Adopts `kernel` ([M,1,B,B]) by handle, so a trainable parameter and the
  // operator stay the same array.
  static SamplingOperator from_kernel(Tensor kernel, std::uint64_t seed = 0);

  static std::size_t measurements_for(std::size_t block, double gamma);

  std::size_t block() const { return block_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return block_ * block_; }
  double gamma() const { return static_cast<double>(rows_) / static_cast<double>(cols()); }
  std::uint64_t seed() const { return seed_; }
  bool learnable() const { return kernel_.requires_grad(); }

  std::span<const double> matrix() const { return kernel_.data(); }
  // [M, 1, B, B]; the same storage as matrix(). When learnable this is the
  // trainable parameter.
  const Tensor& kernel() const { return kernel_; }

  // max |A A^T - I_M|
  double orthogonality_error() const;

  // "CSOP" binary format, see README.
  void save(const std::filesystem::path& path) const;
  static SamplingOperator load(const std::filesystem::path& path);

 private:
  SamplingOperator(std::size_t block, std::size_t rows, std::uint64_t seed, Tensor kernel)
      : block_(block), rows_(rows), seed_(seed), kernel_(std::move(kernel)) {}

  std::size_t block_;
  std::size_t rows_;
  std::uint64_t seed_;
  Tensor kernel_;
};

struct Measurement {
  // [batch, M, H/B, W/B] over the (possibly padded) image.
  Tensor y;
  // Noise standard deviation on the 0-255 scale.
  double sigma = 0.0;
  bool onebit = false;
  // Image extents before reflect padding.
  std::size_t height = 0;
  std::size_t width = 0;
};

struct SampleOptions {
  double sigma = 0.0;
  std::uint64_t seed = 0;
  // Reflect-pad images whose extents are not multiples of B instead of
  // rejecting them.
  bool pad = false;
};

// y = A x_block + noise for every non-overlapping B x B block of x [N,1,H,W].
Measurement sample(const SamplingOperator& op, const Tensor& x, const SampleOptions& options = {});
Measurement sample(const SamplingOperator& op, const Tensor& x, double sigma, std::uint64_t seed);
// y = sign(A x_block + noise) with a straight-through backward.
Measurement onebit_sample(const SamplingOperator& op, const Tensor& x, const SampleOptions& options = {});
Measurement onebit_sample(const SamplingOperator& op, const Tensor& x, double sigma, std::uint64_t seed);

// Noise-free block operator and its adjoint on tensors.
Tensor apply_forward(const SamplingOperator& op, const Tensor& x);
Tensor apply_adjoint(const SamplingOperator& op, const Tensor& y);

// A^T y reassembled to image layout at the padded extent.
Tensor adjoint(const SamplingOperator& op, const Measurement& m);

// A^T A x and x - A^T A x, block-wise.
Tensor project_range(const SamplingOperator& op, const Tensor& x);
Tensor project_null(const SamplingOperator& op, const Tensor& x);

// Feature-domain operators at downscaling r. fd_forward maps
// [N, r^2 D, H/r, W/r] to [N, D*M, H/B, W/B] by pixel-shuffling to D
// full-resolution channels and applying A to each channel independently
// (a B x B strided group convolution whose kernels are the rows of A).
// fd_adjoint is the transposed group convolution followed by unshuffling.
Tensor fd_forward(const SamplingOperator& op, const Tensor& features, std::size_t r);
Tensor fd_adjoint(const SamplingOperator& op, const Tensor& measurements, std::size_t r);
// Channel-wise nullspace projection in the feature domain.
Tensor fd_project_null(const SamplingOperator& op, const Tensor& features, std::size_t r);

// Value-only helpers (no graph).
Tensor reflect_pad(const Tensor& x, std::size_t height, std::size_t width);
Tensor crop(const Tensor& x, std::size_t height, std::size_t width);

// "CSMS" measurement file; layout documented in README.
void save_measurement(const Measurement& m, std::size_t block, const std::filesystem::path& path);
Measurement load_measurement(const std::filesystem::path& path, std::size_t* block = nullptr);

}  // namespace unrollcs
