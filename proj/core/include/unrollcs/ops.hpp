#pragma once

#include <cstddef>
#include <vector>

#include "unrollcs/tensor.hpp"

namespace unrollcs {

// Elementwise arithmetic. Operands must have identical shapes, or one side
// must hold a single element (scalar broadcast). Nothing else broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Forward: x >= 0 -> +1, x < 0 -> -1. Backward passes the upstream gradient
// through unchanged (straight-through estimator).
Tensor sign_ste(const Tensor& a);

// Reductions to a one-element tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Copy into a new shape with the same element count.
Tensor reshape(const Tensor& a, Shape shape);

// Channel (axis 1) manipulation on [N, C, H, W] tensors.
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end);
// [N, C, H, W] -> [N, C * times, H, W], output channel t*C + c copies input c.
Tensor tile_channels(const Tensor& a, std::size_t times);
// Multiplies channel c by mask[c]; the mask is a constant.
Tensor mask_channels(const Tensor& a, const std::vector<double>& mask);

// [N, C*s*s, H, W] -> [N, C, H*s, W*s]; output (c, h*s+i, w*s+j) takes input
// channel c*s*s + i*s + j at (h, w).
Tensor pixel_shuffle(const Tensor& a, std::size_t factor);
Tensor pixel_unshuffle(const Tensor& a, std::size_t factor);

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
  bool transposed = false;
};

// 2-D cross-correlation on NCHW input.
//   forward:    weight [Cout, Cin/groups, kh, kw], out = (H + 2p - kh)/s + 1
//   transposed: weight [Cin, Cout/groups, kh, kw], out = (H - 1)s - 2p + kh
// The transposed form is the exact adjoint of the forward form sharing the
// same weight, stride, padding and groups. `bias` may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvOptions& options = {});

// Elementwise sign(v) * max(|v| - lambda, 0). Derivative 1 outside the dead
// zone, 0 inside.
Tensor soft_threshold(const Tensor& v, double lambda);

// Inner product of two equally shaped tensors (no graph).
double dot(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace unrollcs
