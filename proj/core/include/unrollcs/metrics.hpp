#pragma once

#include <limits>

#include "unrollcs/tensor.hpp"

namespace unrollcs {

// 10 log10(1 / MSE) for data range 1; identical inputs give +infinity.
double psnr(const Tensor& reference, const Tensor& estimate);

// Mean SSIM over valid positions of an 11x11 Gaussian window (sigma 1.5),
// K1 = 0.01, K2 = 0.03, L = 1. Averaged over all [N,C] planes.
double ssim(const Tensor& reference, const Tensor& estimate);

}  // namespace unrollcs
