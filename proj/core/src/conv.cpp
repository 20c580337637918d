#include <cblas.h>

#include <algorithm>
#include <mutex>

#include "unrollcs/error.hpp"
#include "unrollcs/ops.hpp"

namespace unrollcs {

namespace {

void pin_blas_threads() {
#ifdef OPENBLAS_VERSION
  static std::once_flag once;
  // Fixed thread count keeps reduction order, and therefore results, stable.
  std::call_once(once, [] { openblas_set_num_threads(1); });
#endif
}

// C[m x n] (+)= op(A) * op(B), row-major.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double beta, double* c) {
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a, lda, b, ldb, beta, c,
              static_cast<int>(n));
}

// The forward (strided) convolution maps the "big" side [N, Cb, Hb, Wb] onto
// the "small" side [N, Cs, Hs, Ws] with weight [Cs, Cb/g, kh, kw]. The
// transposed convolution runs the same geometry backwards.
struct Geometry {
  std::size_t n, cb, hb, wb, cs, hs, ws, kh, kw;
  std::size_t stride, pad, groups;
  std::size_t cbg() const { return cb / groups; }
  std::size_t csg() const { return cs / groups; }
  std::size_t patch() const { return cbg() * kh * kw; }
  std::size_t small_plane() const { return hs * ws; }
  std::size_t big_plane() const { return hb * wb; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns x in [lo, hi) read inside the big image for kernel column j.
void valid_columns(const Geometry& g, std::size_t j, std::size_t& lo, std::size_t& hi) {
  const long s = static_cast<long>(g.stride);
  const long off = static_cast<long>(j) - static_cast<long>(g.pad);
  const long first = off >= 0 ? 0 : (-off + s - 1) / s;
  const long last = (static_cast<long>(g.wb) - 1 - off) < 0 ? -1 : (static_cast<long>(g.wb) - 1 - off) / s;
  lo = static_cast<std::size_t>(std::min<long>(first, static_cast<long>(g.ws)));
  hi = static_cast<std::size_t>(std::clamp<long>(last + 1, static_cast<long>(lo), static_cast<long>(g.ws)));
}

// col[(c*kh + i)*kw + j][y*ws + x] = big[c][y*s - p + i][x*s - p + j], rows
// `ld` apart.
void im2col(const Geometry& g, const double* big, double* col, std::size_t ld) {
  for (std::size_t c = 0; c < g.cbg(); ++c) {
    const double* src = big + c * g.big_plane();
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* dst = col + ((c * g.kh + i) * g.kw + j) * ld;
        std::size_t lo = 0, hi = 0;
        valid_columns(g, j, lo, hi);
        for (std::size_t y = 0; y < g.hs; ++y) {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          double* row = dst + y * g.ws;
          if (iy < 0 || iy >= static_cast<long>(g.hb)) {
            std::fill_n(row, g.ws, 0.0);
            continue;
          }
          std::fill_n(row, lo, 0.0);
          if (lo >= hi) {
            std::fill(row + lo, row + g.ws, 0.0);
            continue;
          }
          // First read position: column lo*s + j - p, non-negative by construction.
          const double* line = src + static_cast<std::size_t>(iy) * g.wb + (lo * g.stride + j - g.pad);
          if (g.stride == 1) {
            std::copy(line, line + (hi - lo), row + lo);
          } else {
            for (std::size_t x = lo; x < hi; ++x) row[x] = line[(x - lo) * g.stride];
          }
          std::fill(row + hi, row + g.ws, 0.0);
        }
      }
    }
  }
}

void col2im_add(const Geometry& g, const double* col, std::size_t ld, double* big) {
  for (std::size_t c = 0; c < g.cbg(); ++c) {
    double* dst = big + c * g.big_plane();
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* src = col + ((c * g.kh + i) * g.kw + j) * ld;
        std::size_t lo = 0, hi = 0;
        valid_columns(g, j, lo, hi);
        for (std::size_t y = 0; y < g.hs; ++y) {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.hb)) continue;
          if (lo >= hi) continue;
          double* line = dst + static_cast<std::size_t>(iy) * g.wb + (lo * g.stride + j - g.pad);
          const double* row = src + y * g.ws;
          if (g.stride == 1) {
            for (std::size_t x = lo; x < hi; ++x) line[x - lo] += row[x];
          } else {
            for (std::size_t x = lo; x < hi; ++x) line[(x - lo) * g.stride] += row[x];
          }
        }
      }
    }
  }
}

// [n, c, plane] <-> [c, n * plane]; the batch is folded into the GEMM
// column dimension so each convolution is a single large multiply.
void fold_batch(const double* src, std::size_t n, std::size_t c_total, std::size_t c0, std::size_t c,
                std::size_t plane, double* dst) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(src + (b * c_total + c0 + ch) * plane, plane, dst + (ch * n + b) * plane);
    }
  }
}

void unfold_batch(const double* src, std::size_t n, std::size_t c_total, std::size_t c0, std::size_t c,
                  std::size_t plane, double* dst) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(src + (ch * n + b) * plane, plane, dst + (b * c_total + c0 + ch) * plane);
    }
  }
}

// Column matrix [patch, n * small_plane] for one group of the big side.
void im2col_batch(const Geometry& g, const double* big, std::size_t grp, double* col) {
  const std::size_t cols = g.small_plane();
  for (std::size_t b = 0; b < g.n; ++b) {
    im2col(g, big + (b * g.cb + grp * g.cbg()) * g.big_plane(), col + b * cols, g.n * cols);
  }
}

void col2im_batch_add(const Geometry& g, const double* col, std::size_t grp, double* big) {
  const std::size_t cols = g.small_plane();
  for (std::size_t b = 0; b < g.n; ++b) {
    col2im_add(g, col + b * cols, g.n * cols, big + (b * g.cb + grp * g.cbg()) * g.big_plane());
  }
}

// Big-side operand of one group as [patch, n * small_plane].
const double* big_operand(const Geometry& g, const double* big, std::size_t grp, std::vector<double>& buf) {
  if (g.pointwise()) {
    if (g.n == 1) return big + grp * g.cbg() * g.big_plane();
    buf.resize(g.cbg() * g.n * g.big_plane());
    fold_batch(big, g.n, g.cb, grp * g.cbg(), g.cbg(), g.big_plane(), buf.data());
    return buf.data();
  }
  buf.resize(g.patch() * g.n * g.small_plane());
  im2col_batch(g, big, grp, buf.data());
  return buf.data();
}

// Small-side operand of one group as [csg, n * small_plane].
const double* small_operand(const Geometry& g, const double* small, std::size_t grp, std::vector<double>& buf) {
  if (g.n == 1) return small + grp * g.csg() * g.small_plane();
  buf.resize(g.csg() * g.n * g.small_plane());
  fold_batch(small, g.n, g.cs, grp * g.csg(), g.csg(), g.small_plane(), buf.data());
  return buf.data();
}

// Same-size stride-1 convolutions with few channels skip im2col; GEMM with
// such thin operands runs well below peak.
bool use_direct(const Geometry& g) {
  return g.groups == 1 && g.stride == 1 && g.kh == g.kw && g.kh % 2 == 1 && g.kh > 1 && g.pad == g.kh / 2 &&
         g.hs == g.hb && g.ws == g.wb && g.cb * g.cs <= 1024;
}

// out[b,co] (+)= sum_ci w[co,ci] (*) in[b,ci], "same" padding. Each input
// plane is zero-padded once; all k*k taps are summed before touching out.
void direct_conv(std::size_t n, std::size_t cin, std::size_t cout, std::size_t h, std::size_t w, std::size_t k,
                 const double* in, const double* wt, double* out, bool accumulate) {
  const std::size_t p = k / 2, plane = h * w, pw = w + 2 * p, pplane = (h + 2 * p) * pw;
  std::vector<double> padded(cin * pplane, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(in + (b * cin + ci) * plane + y * w, w, padded.data() + ci * pplane + (y + p) * pw + p);
      }
    }
    for (std::size_t co = 0; co < cout; ++co) {
      double* oplane = out + (b * cout + co) * plane;
      if (!accumulate) std::fill_n(oplane, plane, 0.0);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = padded.data() + ci * pplane;
        const double* wk = wt + (co * cin + ci) * k * k;
        for (std::size_t y = 0; y < h; ++y) {
          double* __restrict o = oplane + y * w;
          const double* r0 = src + y * pw;
          if (k == 3) {
            const double* r1 = r0 + pw;
            const double* r2 = r1 + pw;
            for (std::size_t x = 0; x < w; ++x) {
              o[x] += wk[0] * r0[x] + wk[1] * r0[x + 1] + wk[2] * r0[x + 2] + wk[3] * r1[x] + wk[4] * r1[x + 1] +
                      wk[5] * r1[x + 2] + wk[6] * r2[x] + wk[7] * r2[x + 1] + wk[8] * r2[x + 2];
            }
          } else {
            for (std::size_t x = 0; x < w; ++x) {
              double acc = 0.0;
              for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j) acc += wk[i * k + j] * r0[i * pw + x + j];
              o[x] += acc;
            }
          }
        }
      }
    }
  }
}

// dW[co,ci,i,j] += sum small[b,co,y,x] * big[b,ci,y+i-p,x+j-p]
void direct_weight_grad(const Geometry& g, const double* big, const double* small, double* dweight) {
  const std::size_t k = g.kh, p = k / 2, h = g.hb, w = g.wb, plane = h * w;
  constexpr std::size_t kLanes = 8;
  const std::size_t wr = (w + kLanes - 1) / kLanes * kLanes;
  std::vector<double> row(wr + 2 * p, 0.0), srow(wr, 0.0);
  std::vector<double> acc(g.cs * g.cb * k * k * kLanes, 0.0);
  for (std::size_t b = 0; b < g.n; ++b) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t ci = 0; ci < g.cb; ++ci) {
        for (std::size_t i = 0; i < k; ++i) {
          const long iy = static_cast<long>(y + i) - static_cast<long>(p);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          std::copy_n(big + (b * g.cb + ci) * plane + static_cast<std::size_t>(iy) * w, w, row.data() + p);
          for (std::size_t co = 0; co < g.cs; ++co) {
            std::copy_n(small + (b * g.cs + co) * plane + y * w, w, srow.data());
            for (std::size_t j = 0; j < k; ++j) {
              double* a = acc.data() + (((co * g.cb + ci) * k + i) * k + j) * kLanes;
              const double* s = row.data() + j;
              for (std::size_t x = 0; x < wr; x += kLanes) {
                for (std::size_t l = 0; l < kLanes; ++l) a[l] += srow[x + l] * s[x + l];
              }
            }
          }
        }
      }
    }
  }
  for (std::size_t e = 0; e < g.cs * g.cb * k * k; ++e) {
    double t = 0.0;
    for (std::size_t l = 0; l < kLanes; ++l) t += acc[e * kLanes + l];
    dweight[e] += t;
  }
}

// w[co,ci,i,j] -> w[ci,co,k-1-i,k-1-j]
std::vector<double> flip_weight(const Geometry& g, const double* w) {
  const std::size_t k = g.kh;
  std::vector<double> f(g.cs * g.cb * k * k);
  for (std::size_t co = 0; co < g.cs; ++co)
    for (std::size_t ci = 0; ci < g.cb; ++ci)
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j)
          f[((ci * g.cs + co) * k + (k - 1 - i)) * k + (k - 1 - j)] = w[((co * g.cb + ci) * k + i) * k + j];
  return f;
}

// small = W * im2col(big)   (overwrites small)
void big_to_small(const Geometry& g, const double* big, const double* weight, double* small) {
  if (use_direct(g)) {
    direct_conv(g.n, g.cb, g.cs, g.hb, g.wb, g.kh, big, weight, small, false);
    return;
  }
  std::vector<double> col, out;
  const std::size_t cols = g.n * g.small_plane();
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    const double* c = big_operand(g, big, grp, col);
    const double* w = weight + grp * g.csg() * g.patch();
    if (g.n == 1) {
      gemm(false, false, g.csg(), cols, g.patch(), w, c, 0.0, small + grp * g.csg() * g.small_plane());
    } else {
      out.resize(g.csg() * cols);
      gemm(false, false, g.csg(), cols, g.patch(), w, c, 0.0, out.data());
      unfold_batch(out.data(), g.n, g.cs, grp * g.csg(), g.csg(), g.small_plane(), small);
    }
  }
}

// big += col2im(W^T * small)
void small_to_big(const Geometry& g, const double* small, const double* weight, double* big) {
  if (use_direct(g)) {
    const auto f = flip_weight(g, weight);
    direct_conv(g.n, g.cs, g.cb, g.hb, g.wb, g.kh, small, f.data(), big, true);
    return;
  }
  std::vector<double> sbuf, col;
  const std::size_t cols = g.n * g.small_plane();
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    const double* s = small_operand(g, small, grp, sbuf);
    const double* w = weight + grp * g.csg() * g.patch();
    if (g.pointwise() && g.n == 1) {
      gemm(true, false, g.patch(), cols, g.csg(), w, s, 1.0, big + grp * g.cbg() * g.big_plane());
      continue;
    }
    col.resize(g.patch() * cols);
    gemm(true, false, g.patch(), cols, g.csg(), w, s, 0.0, col.data());
    if (g.pointwise()) {
      for (std::size_t ch = 0; ch < g.cbg(); ++ch) {
        for (std::size_t b = 0; b < g.n; ++b) {
          const double* src = col.data() + (ch * g.n + b) * g.big_plane();
          double* dst = big + (b * g.cb + grp * g.cbg() + ch) * g.big_plane();
          for (std::size_t i = 0; i < g.big_plane(); ++i) dst[i] += src[i];
        }
      }
    } else {
      col2im_batch_add(g, col.data(), grp, big);
    }
  }
}

// dW += small * im2col(big)^T
void weight_grad(const Geometry& g, const double* big, const double* small, double* dweight) {
  // the lane-accumulator kernel only wins for very few channel pairs
  if (use_direct(g) && g.cb * g.cs <= 64) {
    direct_weight_grad(g, big, small, dweight);
    return;
  }
  std::vector<double> col, sbuf;
  const std::size_t cols = g.n * g.small_plane();
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    const double* c = big_operand(g, big, grp, col);
    const double* s = small_operand(g, small, grp, sbuf);
    gemm(false, true, g.csg(), g.patch(), cols, s, c, 1.0, dweight + grp * g.csg() * g.patch());
  }
}

void add_bias(double* out, const double* bias, std::size_t n, std::size_t c, std::size_t plane) {
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out + (b * c + ch) * plane;
      const double v = bias[ch];
      for (std::size_t i = 0; i < plane; ++i) p[i] += v;
    }
  }
}

void bias_grad(std::span<const double> grad, double* dbias, std::size_t n, std::size_t c, std::size_t plane) {
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = grad.data() + (b * c + ch) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      dbias[ch] += acc;
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvOptions& options) {
  pin_blas_threads();
  if (input.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected 4-d input and weight, got " + shape_to_string(input.shape()) + " and " +
                         shape_to_string(weight.shape()));
  }
  if (options.stride < 1 || options.padding < 0 || options.groups < 1) {
    throw ConfigError("conv2d: stride must be >= 1, padding >= 0, groups >= 1");
  }
  const std::size_t groups = static_cast<std::size_t>(options.groups);
  const std::size_t stride = static_cast<std::size_t>(options.stride);
  const std::size_t pad = static_cast<std::size_t>(options.padding);
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);

  Geometry g{};
  g.n = n;
  g.kh = kh;
  g.kw = kw;
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  std::size_t cout = 0;
  if (!options.transposed) {
    cout = weight.dim(0);
    if (cin % groups != 0 || cout % groups != 0) {
      throw ConfigError("conv2d: groups=" + std::to_string(groups) + " does not divide channels " +
                        std::to_string(cin) + "->" + std::to_string(cout));
    }
    if (weight.dim(1) * groups != cin) {
      throw DimensionError("conv2d: weight " + shape_to_string(weight.shape()) + " expects " +
                           std::to_string(weight.dim(1) * groups) + " input channels, got " + std::to_string(cin));
    }
    if (h + 2 * pad < kh || w + 2 * pad < kw) {
      throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                           " larger than padded input " + shape_to_string(input.shape()));
    }
    g.cb = cin;
    g.hb = h;
    g.wb = w;
    g.cs = cout;
    g.hs = (h + 2 * pad - kh) / stride + 1;
    g.ws = (w + 2 * pad - kw) / stride + 1;
  } else {
    if (weight.dim(0) != cin) {
      throw DimensionError("conv2d(transposed): weight " + shape_to_string(weight.shape()) + " expects " +
                           std::to_string(weight.dim(0)) + " input channels, got " + std::to_string(cin));
    }
    if (cin % groups != 0) {
      throw ConfigError("conv2d(transposed): groups=" + std::to_string(groups) + " does not divide " +
                        std::to_string(cin) + " input channels");
    }
    cout = weight.dim(1) * groups;
    const std::size_t full_h = (h - 1) * stride + kh, full_w = (w - 1) * stride + kw;
    if (full_h <= 2 * pad || full_w <= 2 * pad) {
      throw DimensionError("conv2d(transposed): padding consumes the whole output");
    }
    g.cs = cin;
    g.hs = h;
    g.ws = w;
    g.cb = cout;
    g.hb = full_h - 2 * pad;
    g.wb = full_w - 2 * pad;
    if ((g.hb + 2 * pad - kh) / stride + 1 != h || (g.wb + 2 * pad - kw) / stride + 1 != w) {
      throw DimensionError("conv2d(transposed): inconsistent geometry");
    }
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias.shape()) + " for " + std::to_string(cout) +
                         " output channels");
  }

  const Shape out_shape = options.transposed ? Shape{n, g.cb, g.hb, g.wb} : Shape{n, g.cs, g.hs, g.ws};
  std::vector<double> out(shape_numel(out_shape), 0.0);
  if (!options.transposed) {
    big_to_small(g, input.data().data(), weight.data().data(), out.data());
  } else {
    small_to_big(g, input.data().data(), weight.data().data(), out.data());
  }
  const std::size_t out_plane = out_shape[2] * out_shape[3];
  if (bias.defined()) add_bias(out.data(), bias.data().data(), n, cout, out_plane);

  std::vector<Tensor> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool transposed = options.transposed;
  return detail::make_result(
      out_shape, std::move(out), transposed ? "conv_transpose2d" : "conv2d", std::move(inputs),
      [input, weight, g, transposed, n, cout, out_plane](std::span<const double>, std::span<const double> grad,
                                                         auto& gin) {
        if (!transposed) {
          if (!gin[0].empty()) small_to_big(g, grad.data(), weight.data().data(), gin[0].data());
          if (!gin[1].empty()) weight_grad(g, input.data().data(), grad.data(), gin[1].data());
        } else {
          if (!gin[0].empty()) {
            std::vector<double> tmp(gin[0].size());
            big_to_small(g, grad.data(), weight.data().data(), tmp.data());
            for (std::size_t i = 0; i < tmp.size(); ++i) gin[0][i] += tmp[i];
          }
          if (!gin[1].empty()) weight_grad(g, grad.data(), input.data().data(), gin[1].data());
        }
        if (gin.size() > 2 && !gin[2].empty()) bias_grad(grad, gin[2].data(), n, cout, out_plane);
      });
}

}  // namespace unrollcs
