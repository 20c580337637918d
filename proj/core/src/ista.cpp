#include "unrollcs/ista.hpp"

#include <array>
#include <cmath>
#include <numbers>

#include "unrollcs/error.hpp"
#include "unrollcs/ops.hpp"

namespace unrollcs {

std::string to_string(SparsifyingTransform t) {
  return t == SparsifyingTransform::kIdentity ? "identity" : "dct2d-8x8";
}

SparsifyingTransform parse_transform(const std::string& s) {
  if (s == "identity") return SparsifyingTransform::kIdentity;
  if (s == "dct2d-8x8" || s == "dct") return SparsifyingTransform::kDct8x8;
  throw ConfigError("unknown transform '" + s + "' (identity, dct2d-8x8)");
}

void IstaConfig::validate() const {
  if (iterations < 1) throw ConfigError("ista: iterations must be >= 1");
  if (!(rho > 0.0) || !std::isfinite(rho)) throw ConfigError("ista: rho must be > 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("ista: lambda must be >= 0");
}

namespace {

constexpr std::size_t kTile = 8;

using Basis = std::array<double, kTile * kTile>;

// basis[u*8 + i] = c(u) cos((2i+1) u pi / 16)
const Basis& dct_basis() {
  static const Basis basis = [] {
    Basis b{};
    for (std::size_t u = 0; u < kTile; ++u) {
      const double c = u == 0 ? std::sqrt(1.0 / kTile) : std::sqrt(2.0 / kTile);
      for (std::size_t i = 0; i < kTile; ++i) {
        b[u * kTile + i] = c * std::cos((2.0 * static_cast<double>(i) + 1.0) * static_cast<double>(u) *
                                        std::numbers::pi / (2.0 * kTile));
      }
    }
    return b;
  }();
  return basis;
}

Tensor apply_tiles(const Tensor& x, bool inverse) {
  if (x.rank() != 4 || x.dim(2) % kTile != 0 || x.dim(3) % kTile != 0) {
    throw DimensionError("block DCT needs [N,C,H,W] with H, W multiples of 8, got " + shape_to_string(x.shape()));
  }
  const auto& b = dct_basis();
  const std::size_t h = x.dim(2), w = x.dim(3), planes = x.dim(0) * x.dim(1);
  const auto src = x.data();
  std::vector<double> out(src.size());
  std::array<double, kTile * kTile> tile{}, tmp{};
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t ty = 0; ty < h; ty += kTile) {
      for (std::size_t tx = 0; tx < w; tx += kTile) {
        for (std::size_t i = 0; i < kTile; ++i)
          for (std::size_t j = 0; j < kTile; ++j) tile[i * kTile + j] = src[(p * h + ty + i) * w + tx + j];
        // Forward: D X D^T. Inverse: D^T X D.
        for (std::size_t u = 0; u < kTile; ++u) {
          for (std::size_t j = 0; j < kTile; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < kTile; ++i) {
              acc += (inverse ? b[i * kTile + u] : b[u * kTile + i]) * tile[i * kTile + j];
            }
            tmp[u * kTile + j] = acc;
          }
        }
        for (std::size_t u = 0; u < kTile; ++u) {
          for (std::size_t v = 0; v < kTile; ++v) {
            double acc = 0.0;
            for (std::size_t j = 0; j < kTile; ++j) {
              acc += tmp[u * kTile + j] * (inverse ? b[j * kTile + v] : b[v * kTile + j]);
            }
            out[(p * h + ty + u) * w + tx + v] = acc;
          }
        }
      }
    }
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

}  // namespace

Tensor block_dct8(const Tensor& x) { return apply_tiles(x, false); }
Tensor block_idct8(const Tensor& x) { return apply_tiles(x, true); }

Tensor ista_reconstruct(const SamplingOperator& op, const Measurement& m, const IstaConfig& config) {
  config.validate();
  NoGradGuard guard;
  const Tensor y = m.y.detach();
  Tensor x = apply_adjoint(op, y);
  for (std::size_t k = 0; k < config.iterations; ++k) {
    const Tensor z = sub(x, scale(apply_adjoint(op, sub(apply_forward(op, x), y)), config.rho));
    if (config.transform == SparsifyingTransform::kIdentity) {
      x = soft_threshold(z, config.lambda);
    } else {
      x = block_idct8(soft_threshold(block_dct8(z), config.lambda));
    }
  }
  if (m.height != 0 && (m.height != x.dim(2) || m.width != x.dim(3))) x = crop(x, m.height, m.width);
  return x;
}

}  // namespace unrollcs
