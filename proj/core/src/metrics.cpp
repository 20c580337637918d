#include "unrollcs/metrics.hpp"

#include <cmath>
#include <vector>

#include "unrollcs/error.hpp"

namespace unrollcs {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  if (a.numel() == 0) throw DimensionError(std::string(what) + ": empty input");
}

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;

std::vector<double> gaussian_1d() {
  std::vector<double> g(kWindow);
  double total = 0.0;
  const double c = (kWindow - 1) / 2.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Separable valid filtering of one plane.
std::vector<double> filter_valid(const double* src, std::size_t h, std::size_t w, const std::vector<double>& g) {
  const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  std::vector<double> rows(h * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * src[y * w + x + k];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(const Tensor& reference, const Tensor& estimate) {
  require_same(reference, estimate, "psnr");
  const auto a = reference.data(), b = estimate.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Tensor& reference, const Tensor& estimate) {
  require_same(reference, estimate, "ssim");
  if (reference.rank() < 2) throw DimensionError("ssim: expected an image tensor");
  const std::size_t h = reference.dim(reference.rank() - 2), w = reference.dim(reference.rank() - 1);
  if (h < kWindow || w < kWindow) {
    throw DimensionError("ssim: image " + shape_to_string(reference.shape()) + " smaller than the 11x11 window");
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto g = gaussian_1d();
  const std::size_t plane = h * w, planes = reference.numel() / plane;
  const auto a = reference.data(), b = estimate.data();
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> aa(plane), bb(plane), ab(plane);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* x = a.data() + p * plane;
    const double* y = b.data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      aa[i] = x[i] * x[i];
      bb[i] = y[i] * y[i];
      ab[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
    const auto sxx = filter_valid(aa.data(), h, w, g), syy = filter_valid(bb.data(), h, w, g),
               sxy = filter_valid(ab.data(), h, w, g);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace unrollcs
