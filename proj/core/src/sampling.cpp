#include "unrollcs/sampling.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "binary_io.hpp"
#include "unrollcs/error.hpp"
#include "unrollcs/ops.hpp"

extern "C" {
void dgeqrf_(const int* m, const int* n, double* a, const int* lda, double* tau, double* work, const int* lwork,
             int* info);
void dorgqr_(const int* m, const int* n, const int* k, double* a, const int* lda, const double* tau, double* work,
             const int* lwork, int* info);
}

namespace unrollcs {

namespace {

constexpr char kOperatorMagic[4] = {'C', 'S', 'O', 'P'};
constexpr char kMeasurementMagic[4] = {'C', 'S', 'M', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

// Orthonormalizes the rows of a row-major M x N matrix in place. The buffer,
// read column-major, is the N x M matrix A^T, whose thin QR factor Q has
// orthonormal columns; writing Q back yields A with orthonormal rows.
void orthonormalize_rows(std::vector<double>& a, int m, int n) {
  std::vector<double> tau(static_cast<std::size_t>(m));
  int info = 0;
  int lwork = -1;
  double query = 0.0;
  dgeqrf_(&n, &m, a.data(), &n, tau.data(), &query, &lwork, &info);
  lwork = std::max(1, static_cast<int>(query));
  std::vector<double> work(static_cast<std::size_t>(lwork));
  dgeqrf_(&n, &m, a.data(), &n, tau.data(), work.data(), &lwork, &info);
  if (info != 0) throw NumericError("QR factorization failed (dgeqrf info=" + std::to_string(info) + ")");

  std::vector<double> diag_sign(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    diag_sign[static_cast<std::size_t>(j)] = a[static_cast<std::size_t>(j) * n + j] < 0.0 ? -1.0 : 1.0;
  }

  lwork = -1;
  dorgqr_(&n, &m, &m, a.data(), &n, tau.data(), &query, &lwork, &info);
  lwork = std::max(1, static_cast<int>(query));
  work.assign(static_cast<std::size_t>(lwork), 0.0);
  dorgqr_(&n, &m, &m, a.data(), &n, tau.data(), work.data(), &lwork, &info);
  if (info != 0) throw NumericError("QR factorization failed (dorgqr info=" + std::to_string(info) + ")");

  // Positive R diagonal makes the factorization unique.
  for (int j = 0; j < m; ++j) {
    if (diag_sign[static_cast<std::size_t>(j)] < 0.0) {
      double* row = a.data() + static_cast<std::size_t>(j) * n;
      for (int i = 0; i < n; ++i) row[i] = -row[i];
    }
  }
}

void require_image_batch(const Tensor& x, const char* what) {
  if (x.rank() != 4 || x.dim(1) != 1) {
    throw DimensionError(std::string(what) + ": expected [N,1,H,W] images, got " + shape_to_string(x.shape()));
  }
}

std::size_t round_up(std::size_t v, std::size_t multiple) { return (v + multiple - 1) / multiple * multiple; }

Tensor noise_like(const Shape& shape, double sigma, std::uint64_t seed) {
  std::vector<double> values(shape_numel(shape), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma / 255.0);
  for (double& v : values) v = normal(rng);
  return Tensor::from_data(shape, std::move(values));
}

Measurement sample_impl(const SamplingOperator& op, const Tensor& x, const SampleOptions& options, bool onebit) {
  require_image_batch(x, onebit ? "onebit_sample" : "sample");
  if (!(options.sigma >= 0.0) || !std::isfinite(options.sigma)) throw ConfigError("sample: sigma must be >= 0");
  const std::size_t b = op.block();
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor image = x;
  if (h % b != 0 || w % b != 0) {
    if (!options.pad) {
      throw DimensionError("sample: image " + std::to_string(h) + "x" + std::to_string(w) +
                           " is not a multiple of block size " + std::to_string(b));
    }
    image = reflect_pad(x, round_up(h, b), round_up(w, b));
  }
  Tensor y = apply_forward(op, image);
  if (options.sigma > 0.0) y = add(y, noise_like(y.shape(), options.sigma, options.seed));
  if (onebit) y = sign_ste(y);
  return Measurement{y, options.sigma, onebit, h, w};
}

std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  long k = i % period;
  if (k < 0) k += period;
  return static_cast<std::size_t>(k < static_cast<long>(n) ? k : period - k);
}

}  // namespace

std::size_t SamplingOperator::measurements_for(std::size_t block, double gamma) {
  if (block < 1) throw ConfigError("block size must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw ConfigError("sampling ratio gamma must lie in (0, 1], got " + std::to_string(gamma));
  }
  const std::size_t n = block * block;
  const auto m = static_cast<std::size_t>(std::llround(gamma * static_cast<double>(n)));
  return std::clamp<std::size_t>(m, 1, n);
}

SamplingOperator SamplingOperator::generate(std::size_t block, double gamma, std::uint64_t seed, bool learnable) {
  const std::size_t m = measurements_for(block, gamma);
  const std::size_t n = block * block;
  std::vector<double> a(m * n);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : a) v = normal(rng);
  orthonormalize_rows(a, static_cast<int>(m), static_cast<int>(n));
  return from_matrix(block, m, std::move(a), seed, learnable);
}

SamplingOperator SamplingOperator::from_matrix(std::size_t block, std::size_t rows, std::vector<double> matrix,
                                               std::uint64_t seed, bool learnable) {
  if (block < 1) throw ConfigError("block size must be >= 1");
  const std::size_t n = block * block;
  if (rows < 1 || rows > n) {
    throw ConfigError("measurement count " + std::to_string(rows) + " outside [1, " + std::to_string(n) + "]");
  }
  if (matrix.size() != rows * n) {
    throw DimensionError("sampling matrix has " + std::to_string(matrix.size()) + " entries, expected " +
                         std::to_string(rows * n));
  }
  Tensor kernel = Tensor::from_data({rows, 1, block, block}, std::move(matrix), learnable);
  return SamplingOperator(block, rows, seed, std::move(kernel));
}

SamplingOperator SamplingOperator::from_kernel(Tensor kernel, std::uint64_t seed) {
  if (!kernel.defined() || kernel.rank() != 4 || kernel.dim(1) != 1 || kernel.dim(2) != kernel.dim(3) ||
      kernel.dim(0) > kernel.dim(2) * kernel.dim(3)) {
    throw DimensionError("sampling kernel must be [M,1,B,B] with M <= B*B");
  }
  const std::size_t block = kernel.dim(2), rows = kernel.dim(0);
  return SamplingOperator(block, rows, seed, std::move(kernel));
}

double SamplingOperator::orthogonality_error() const {
  const std::size_t m = rows_, n = cols();
  std::vector<double> gram(m * m, 0.0);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(m),
              static_cast<int>(n), 1.0, matrix().data(), static_cast<int>(n), matrix().data(), static_cast<int>(n),
              0.0, gram.data(), static_cast<int>(m));
  double err = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) err = std::max(err, std::abs(gram[i * m + j] - (i == j ? 1.0 : 0.0)));
  }
  return err;
}

void SamplingOperator::save(const std::filesystem::path& path) const {
  binio::Writer w;
  w.put_bytes(kOperatorMagic, 4);
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(block_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rows_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cols()));
  w.put<std::uint64_t>(seed_);
  w.put_doubles(matrix().data(), matrix().size());
  binio::write_file(path.string(), w.bytes());
}

SamplingOperator SamplingOperator::load(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path.string());
  binio::Reader r(bytes.data(), bytes.size(), path.string());
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kOperatorMagic)) throw IoError(path.string() + ": not a CSOP operator file");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) throw IoError(path.string() + ": unsupported operator version " + std::to_string(version));
  const auto block = r.get<std::uint32_t>();
  const auto m = r.get<std::uint32_t>();
  const auto n = r.get<std::uint32_t>();
  const auto seed = r.get<std::uint64_t>();
  if (block == 0 || static_cast<std::uint64_t>(block) * block != n || m == 0 || m > n) {
    throw IoError(path.string() + ": inconsistent operator header");
  }
  auto matrix = r.get_doubles(static_cast<std::size_t>(m) * n);
  if (r.remaining() != 0) throw IoError(path.string() + ": trailing bytes after operator payload");
  return from_matrix(block, m, std::move(matrix), seed);
}

Measurement sample(const SamplingOperator& op, const Tensor& x, const SampleOptions& options) {
  return sample_impl(op, x, options, false);
}

Measurement sample(const SamplingOperator& op, const Tensor& x, double sigma, std::uint64_t seed) {
  return sample_impl(op, x, SampleOptions{sigma, seed, false}, false);
}

Measurement onebit_sample(const SamplingOperator& op, const Tensor& x, const SampleOptions& options) {
  return sample_impl(op, x, options, true);
}

Measurement onebit_sample(const SamplingOperator& op, const Tensor& x, double sigma, std::uint64_t seed) {
  return sample_impl(op, x, SampleOptions{sigma, seed, false}, true);
}

Tensor apply_forward(const SamplingOperator& op, const Tensor& x) {
  require_image_batch(x, "apply_forward");
  const std::size_t b = op.block();
  if (x.dim(2) % b != 0 || x.dim(3) % b != 0) {
    throw DimensionError("apply_forward: extents " + shape_to_string(x.shape()) + " not divisible by block " +
                         std::to_string(b));
  }
  return conv2d(x, op.kernel(), Tensor(), ConvOptions{static_cast<int>(b), 0, 1, false});
}

Tensor apply_adjoint(const SamplingOperator& op, const Tensor& y) {
  if (y.rank() != 4 || y.dim(1) != op.rows()) {
    throw DimensionError("apply_adjoint: expected [N," + std::to_string(op.rows()) + ",h,w] measurements, got " +
                         shape_to_string(y.shape()));
  }
  return conv2d(y, op.kernel(), Tensor(), ConvOptions{static_cast<int>(op.block()), 0, 1, true});
}

Tensor adjoint(const SamplingOperator& op, const Measurement& m) { return apply_adjoint(op, m.y); }

Tensor project_range(const SamplingOperator& op, const Tensor& x) {
  return apply_adjoint(op, apply_forward(op, x));
}

Tensor project_null(const SamplingOperator& op, const Tensor& x) { return sub(x, project_range(op, x)); }

Tensor fd_forward(const SamplingOperator& op, const Tensor& features, std::size_t r) {
  if (features.rank() != 4 || r == 0 || features.dim(1) % (r * r) != 0) {
    throw DimensionError("fd_forward: " + shape_to_string(features.shape()) + " channels not divisible by r^2=" +
                         std::to_string(r * r));
  }
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1) / (r * r);
  const std::size_t h = features.dim(2) * r, w = features.dim(3) * r;
  const std::size_t b = op.block();
  if (h % b != 0 || w % b != 0) {
    throw DimensionError("fd_forward: full-resolution extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by block " + std::to_string(b));
  }
  // Grouped convolution with groups = D and every group using A: identical to
  // folding the D channels into the batch axis.
  Tensor full = pixel_shuffle(features, r);
  Tensor folded = reshape(full, {n * d, 1, h, w});
  Tensor y = apply_forward(op, folded);
  return reshape(y, {n, d * op.rows(), h / b, w / b});
}

Tensor fd_adjoint(const SamplingOperator& op, const Tensor& measurements, std::size_t r) {
  const std::size_t m = op.rows();
  if (measurements.rank() != 4 || measurements.dim(1) % m != 0 || r == 0) {
    throw DimensionError("fd_adjoint: " + shape_to_string(measurements.shape()) + " channels not a multiple of M=" +
                         std::to_string(m));
  }
  const std::size_t n = measurements.dim(0);
  const std::size_t d = measurements.dim(1) / m;
  const std::size_t b = op.block();
  const std::size_t h = measurements.dim(2) * b, w = measurements.dim(3) * b;
  if (h % r != 0 || w % r != 0) {
    throw DimensionError("fd_adjoint: extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by r=" + std::to_string(r));
  }
  Tensor folded = reshape(measurements, {n * d, m, measurements.dim(2), measurements.dim(3)});
  Tensor images = apply_adjoint(op, folded);
  return pixel_unshuffle(reshape(images, {n, d, h, w}), r);
}

Tensor fd_project_null(const SamplingOperator& op, const Tensor& features, std::size_t r) {
  return sub(features, fd_adjoint(op, fd_forward(op, features, r), r));
}

Tensor reflect_pad(const Tensor& x, std::size_t height, std::size_t width) {
  if (x.rank() != 4) throw DimensionError("reflect_pad: expected [N,C,H,W], got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (height < h || width < w) throw DimensionError("reflect_pad: target smaller than input");
  const auto src = x.data();
  std::vector<double> out(n * c * height * width);
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t i = 0; i < height; ++i) {
      const std::size_t si = reflect_index(static_cast<long>(i), h);
      for (std::size_t j = 0; j < width; ++j) {
        out[(p * height + i) * width + j] = src[(p * h + si) * w + reflect_index(static_cast<long>(j), w)];
      }
    }
  }
  return Tensor::from_data({n, c, height, width}, std::move(out));
}

Tensor crop(const Tensor& x, std::size_t height, std::size_t width) {
  if (x.rank() != 4) throw DimensionError("crop: expected [N,C,H,W], got " + shape_to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (height > h || width > w || height == 0 || width == 0) throw DimensionError("crop: target outside input");
  if (height == h && width == w) return x.detach();
  const auto src = x.data();
  std::vector<double> out(n * c * height * width);
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t i = 0; i < height; ++i) {
      std::copy_n(src.begin() + static_cast<long>((p * h + i) * w), width, out.begin() + static_cast<long>((p * height + i) * width));
    }
  }
  return Tensor::from_data({n, c, height, width}, std::move(out));
}

void save_measurement(const Measurement& m, std::size_t block, const std::filesystem::path& path) {
  const Tensor& y = m.y;
  if (y.rank() != 4) throw DimensionError("save_measurement: malformed measurement tensor");
  binio::Writer w;
  w.put_bytes(kMeasurementMagic, 4);
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(block));
  for (std::size_t axis = 0; axis < 4; ++axis) w.put<std::uint32_t>(static_cast<std::uint32_t>(y.dim(axis)));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.width));
  w.put<double>(m.sigma);
  w.put<std::uint8_t>(m.onebit ? 1 : 0);
  w.put_doubles(y.data().data(), y.numel());
  binio::write_file(path.string(), w.bytes());
}

Measurement load_measurement(const std::filesystem::path& path, std::size_t* block) {
  const auto bytes = binio::read_file(path.string());
  binio::Reader r(bytes.data(), bytes.size(), path.string());
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMeasurementMagic)) {
    throw IoError(path.string() + ": not a CSMS measurement file");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw IoError(path.string() + ": unsupported measurement version " + std::to_string(version));
  }
  const auto b = r.get<std::uint32_t>();
  Shape shape(4);
  for (auto& d : shape) d = r.get<std::uint32_t>();
  Measurement m;
  m.height = r.get<std::uint32_t>();
  m.width = r.get<std::uint32_t>();
  m.sigma = r.get<double>();
  m.onebit = r.get<std::uint8_t>() != 0;
  if (b == 0 || shape_numel(shape) == 0 || shape[2] * b < m.height || shape[3] * b < m.width) {
    throw IoError(path.string() + ": inconsistent measurement header");
  }
  auto values = r.get_doubles(shape_numel(shape));
  if (r.remaining() != 0) throw IoError(path.string() + ": trailing bytes after measurement payload");
  m.y = Tensor::from_data(shape, std::move(values));
  if (block) *block = b;
  return m;
}

}  // namespace unrollcs
