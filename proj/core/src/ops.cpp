#include "unrollcs/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "unrollcs/error.hpp"

namespace unrollcs {

namespace {

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.numel() == 1) return Broadcast::kRightScalar;
  if (a.numel() == 1) return Broadcast::kLeftScalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()));
}

// Accumulates a gradient that was computed at the broadcast output shape.
void accumulate_reduced(std::span<double> target, std::span<const double> grad, bool reduce) {
  if (target.empty()) return;
  if (reduce) {
    target[0] += std::accumulate(grad.begin(), grad.end(), 0.0);
  } else {
    for (std::size_t i = 0; i < grad.size(); ++i) target[i] += grad[i];
  }
}

void require_nchw(const Tensor& a, const char* op) {
  if (a.rank() != 4) {
    throw DimensionError(std::string(op) + ": expected an [N,C,H,W] tensor, got " + shape_to_string(a.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast bc = check_binary(a, b, "add");
  const Tensor& big = bc == Broadcast::kLeftScalar ? b : a;
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(big.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[bc == Broadcast::kLeftScalar ? 0 : i] + y[bc == Broadcast::kRightScalar ? 0 : i];
  }
  return detail::make_result(big.shape(), std::move(out), "add", {a, b},
                             [bc](std::span<const double>, std::span<const double> g, auto& gin) {
                               accumulate_reduced(gin[0], g, bc == Broadcast::kLeftScalar);
                               accumulate_reduced(gin[1], g, bc == Broadcast::kRightScalar);
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast bc = check_binary(a, b, "sub");
  const Tensor& big = bc == Broadcast::kLeftScalar ? b : a;
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(big.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[bc == Broadcast::kLeftScalar ? 0 : i] - y[bc == Broadcast::kRightScalar ? 0 : i];
  }
  return detail::make_result(big.shape(), std::move(out), "sub", {a, b},
                             [bc](std::span<const double>, std::span<const double> g, auto& gin) {
                               accumulate_reduced(gin[0], g, bc == Broadcast::kLeftScalar);
                               if (gin[1].empty()) return;
                               if (bc == Broadcast::kRightScalar) {
                                 gin[1][0] -= std::accumulate(g.begin(), g.end(), 0.0);
                               } else {
                                 for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast bc = check_binary(a, b, "mul");
  const Tensor& big = bc == Broadcast::kLeftScalar ? b : a;
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(big.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[bc == Broadcast::kLeftScalar ? 0 : i] * y[bc == Broadcast::kRightScalar ? 0 : i];
  }
  return detail::make_result(
      big.shape(), std::move(out), "mul", {a, b},
      [a, b, bc](std::span<const double>, std::span<const double> g, auto& gin) {
        const auto x = a.data();
        const auto y = b.data();
        const std::size_t ia = bc == Broadcast::kLeftScalar ? 0 : 1;
        const std::size_t ib = bc == Broadcast::kRightScalar ? 0 : 1;
        if (!gin[0].empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i * ia] += g[i] * y[i * ib];
        }
        if (!gin[1].empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) gin[1][i * ib] += g[i] * x[i * ia];
        }
      });
}

Tensor scale(const Tensor& a, double factor) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
  return detail::make_result(a.shape(), std::move(out), "scale", {a},
                             [factor](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += factor * g[i];
                             });
}

Tensor add_scalar(const Tensor& a, double value) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + value;
  return detail::make_result(a.shape(), std::move(out), "add_scalar", {a},
                             [](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                             });
}

Tensor square(const Tensor& a) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return detail::make_result(a.shape(), std::move(out), "square", {a},
                             [a](std::span<const double>, std::span<const double> g, auto& gin) {
                               const auto x = a.data();
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += 2.0 * x[i] * g[i];
                             });
}

Tensor relu(const Tensor& a) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return detail::make_result(a.shape(), std::move(out), "relu", {a},
                             [](std::span<const double> y, std::span<const double> g, auto& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += y[i] > 0.0 ? g[i] : 0.0;
                             });
}

Tensor sigmoid(const Tensor& a) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return detail::make_result(a.shape(), std::move(out), "sigmoid", {a},
                             [](std::span<const double> y, std::span<const double> g, auto& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * y[i] * (1.0 - y[i]);
                             });
}

Tensor sign_ste(const Tensor& a) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= 0.0 ? 1.0 : -1.0;
  return detail::make_result(a.shape(), std::move(out), "sign_ste", {a},
                             [](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                             });
}

Tensor sum(const Tensor& a) {
  const auto x = a.data();
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  return detail::make_result({1}, {total}, "sum", {a},
                             [](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (double& v : gin[0]) v += g[0];
                             });
}

Tensor mean(const Tensor& a) {
  const auto x = a.data();
  const double n = static_cast<double>(x.size());
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  return detail::make_result({1}, {total / n}, "mean", {a},
                             [n](std::span<const double>, std::span<const double> g, auto& gin) {
                               const double share = g[0] / n;
                               for (double& v : gin[0]) v += share;
                             });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
  }
  const auto x = a.data();
  return detail::make_result(std::move(shape), std::vector<double>(x.begin(), x.end()), "reshape", {a},
                             [](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                             });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  for (const Tensor& p : parts) require_nchw(p, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t channels = 0;
  for (const Tensor& p : parts) {
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
      throw DimensionError("concat_channels: mismatched " + shape_to_string(p.shape()) + " vs " +
                           shape_to_string(parts[0].shape()));
    }
    channels += p.dim(1);
  }
  const std::size_t plane = h * w;
  std::vector<double> out(n * channels * plane);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t c = p.dim(1);
    const auto x = p.data();
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(x.begin() + b * c * plane, c * plane, out.begin() + (b * channels + offset) * plane);
    }
    offset += c;
  }
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(1));
  return detail::make_result({n, channels, h, w}, std::move(out), "concat_channels", parts,
                             [n, channels, plane, offsets, widths](std::span<const double>, std::span<const double> g,
                                                                   auto& gin) {
                               for (std::size_t k = 0; k < gin.size(); ++k) {
                                 if (gin[k].empty()) continue;
                                 const std::size_t c = widths[k];
                                 for (std::size_t b = 0; b < n; ++b) {
                                   const double* src = g.data() + (b * channels + offsets[k]) * plane;
                                   double* dst = gin[k].data() + b * c * plane;
                                   for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

Tensor slice_channels(const Tensor& a, std::size_t begin, std::size_t end) {
  require_nchw(a, "slice_channels");
  const std::size_t n = a.dim(0), c = a.dim(1), plane = a.dim(2) * a.dim(3);
  if (begin >= end || end > c) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + std::to_string(c) + " channels");
  }
  const std::size_t width = end - begin;
  const auto x = a.data();
  std::vector<double> out(n * width * plane);
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(x.begin() + (b * c + begin) * plane, width * plane, out.begin() + b * width * plane);
  }
  return detail::make_result({n, width, a.dim(2), a.dim(3)}, std::move(out), "slice_channels", {a},
                             [n, c, plane, begin, width](std::span<const double>, std::span<const double> g,
                                                         auto& gin) {
                               for (std::size_t b = 0; b < n; ++b) {
                                 const double* src = g.data() + b * width * plane;
                                 double* dst = gin[0].data() + (b * c + begin) * plane;
                                 for (std::size_t i = 0; i < width * plane; ++i) dst[i] += src[i];
                               }
                             });
}

Tensor tile_channels(const Tensor& a, std::size_t times) {
  require_nchw(a, "tile_channels");
  if (times == 0) throw DimensionError("tile_channels: times must be positive");
  const std::size_t n = a.dim(0), c = a.dim(1), plane = a.dim(2) * a.dim(3);
  const auto x = a.data();
  std::vector<double> out(n * c * times * plane);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t t = 0; t < times; ++t) {
      std::copy_n(x.begin() + b * c * plane, c * plane, out.begin() + (b * times + t) * c * plane);
    }
  }
  return detail::make_result({n, c * times, a.dim(2), a.dim(3)}, std::move(out), "tile_channels", {a},
                             [n, c, plane, times](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t b = 0; b < n; ++b) {
                                 for (std::size_t t = 0; t < times; ++t) {
                                   const double* src = g.data() + (b * times + t) * c * plane;
                                   double* dst = gin[0].data() + b * c * plane;
                                   for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

Tensor mask_channels(const Tensor& a, const std::vector<double>& mask) {
  require_nchw(a, "mask_channels");
  const std::size_t n = a.dim(0), c = a.dim(1), plane = a.dim(2) * a.dim(3);
  if (mask.size() != c) {
    throw DimensionError("mask_channels: mask of " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(c) + " channels");
  }
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[base + i] = mask[ch] * x[base + i];
    }
  }
  return detail::make_result(a.shape(), std::move(out), "mask_channels", {a},
                             [n, c, plane, mask](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t b = 0; b < n; ++b) {
                                 for (std::size_t ch = 0; ch < c; ++ch) {
                                   const std::size_t base = (b * c + ch) * plane;
                                   for (std::size_t i = 0; i < plane; ++i) gin[0][base + i] += mask[ch] * g[base + i];
                                 }
                               }
                             });
}

namespace {

// Index map shared by shuffle and unshuffle: for every element of the
// low-resolution layout [N, C*s*s, H, W], the flat index of the same element
// in the high-resolution layout [N, C, H*s, W*s].
std::vector<std::size_t> shuffle_map(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t s) {
  std::vector<std::size_t> map(n * c * s * s * h * w);
  const std::size_t hs = h * s, ws = w * s;
  std::size_t k = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              map[k++] = ((b * c + ch) * hs + y * s + i) * ws + x * s + j;
            }
          }
        }
      }
    }
  }
  return map;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& a, std::size_t factor) {
  require_nchw(a, "pixel_shuffle");
  const std::size_t s2 = factor * factor;
  if (factor == 0 || a.dim(1) % s2 != 0) {
    throw DimensionError("pixel_shuffle: " + std::to_string(a.dim(1)) + " channels not divisible by " +
                         std::to_string(s2));
  }
  if (factor == 1) return reshape(a, a.shape());
  const std::size_t n = a.dim(0), c = a.dim(1) / s2, h = a.dim(2), w = a.dim(3);
  auto map = std::make_shared<const std::vector<std::size_t>>(shuffle_map(n, c, h, w, factor));
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) out[(*map)[k]] = x[k];
  return detail::make_result({n, c, h * factor, w * factor}, std::move(out), "pixel_shuffle", {a},
                             [map](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t k = 0; k < map->size(); ++k) gin[0][k] += g[(*map)[k]];
                             });
}

Tensor pixel_unshuffle(const Tensor& a, std::size_t factor) {
  require_nchw(a, "pixel_unshuffle");
  if (factor == 0 || a.dim(2) % factor != 0 || a.dim(3) % factor != 0) {
    throw DimensionError("pixel_unshuffle: spatial extents " + shape_to_string(a.shape()) + " not divisible by " +
                         std::to_string(factor));
  }
  if (factor == 1) return reshape(a, a.shape());
  const std::size_t n = a.dim(0), c = a.dim(1), h = a.dim(2) / factor, w = a.dim(3) / factor;
  auto map = std::make_shared<const std::vector<std::size_t>>(shuffle_map(n, c, h, w, factor));
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[(*map)[k]];
  return detail::make_result({n, c * factor * factor, h, w}, std::move(out), "pixel_unshuffle", {a},
                             [map](std::span<const double>, std::span<const double> g, auto& gin) {
                               for (std::size_t k = 0; k < map->size(); ++k) gin[0][(*map)[k]] += g[k];
                             });
}

Tensor soft_threshold(const Tensor& v, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("soft_threshold: lambda must be non-negative");
  const auto x = v.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mag = std::abs(x[i]) - lambda;
    out[i] = mag > 0.0 ? std::copysign(mag, x[i]) : 0.0;
  }
  return detail::make_result(v.shape(), std::move(out), "soft_threshold", {v},
                             [v, lambda](std::span<const double>, std::span<const double> g, auto& gin) {
                               const auto x = v.data();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if (std::abs(x[i]) > lambda) gin[0][i] += g[i];
                               }
                             });
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("dot: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  const auto x = a.data();
  const auto y = b.data();
  return std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("max_abs_diff: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  const auto x = a.data();
  const auto y = b.data();
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

}  // namespace unrollcs
