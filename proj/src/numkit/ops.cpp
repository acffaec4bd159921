#include "evosam/numkit/ops.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <memory>
#include <numbers>

namespace evosam::nk {

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected 2-D operand, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

#ifdef EVOSAM_REAL_F64
inline real vexp(real x) { return std::exp(x); }
inline real verf(real x) { return std::erf(x); }
#else
// Branch-free expf (Cephes polynomial, ~1 ulp) so that loops vectorize.
inline float vexp(float x) {
  x = x < -87.0f ? -87.0f : x;
  x = x > 88.0f ? 88.0f : x;
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float e = p * r * r + r + 1.0f;
  return e * std::bit_cast<float>((static_cast<std::int32_t>(n) + 127) << 23);
}

// Abramowitz-Stegun 7.1.26, |error| <= 1.5e-7.
inline float verf(float x) {
  const float ax = std::abs(x);
  const float t = 1.0f / (1.0f + 0.3275911f * ax);
  const float poly = ((((1.061405429f * t - 1.453152027f) * t + 1.421413741f) * t - 0.284496736f) * t + 0.254829592f) * t;
  const float y = 1.0f - poly * vexp(-ax * ax);
  return std::copysign(y, x);
}
#endif

void axpy(Tensor& dst, const Tensor& src, real s = real(1)) {
  real* d = dst.ptr();
  const real* x = src.ptr();
  const std::size_t n = dst.size();
  for (std::size_t i = 0; i < n; ++i) d[i] += s * x[i];
}

}  // namespace

namespace {

// C(m,n) (+)= A B with A addressed as a[i*row_stride + p*col_stride]. Four
// output rows share each pass over a row of B.
void gemm_core(const real* a, std::size_t row_stride, std::size_t col_stride, const real* b, real* c, int m, int k,
               int n, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, real(0));
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    real* __restrict c0 = c + static_cast<std::size_t>(i) * n;
    real* __restrict c1 = c0 + n;
    real* __restrict c2 = c1 + n;
    real* __restrict c3 = c2 + n;
    const real* a0 = a + static_cast<std::size_t>(i) * row_stride;
    for (int p = 0; p < k; ++p) {
      const real* __restrict br = b + static_cast<std::size_t>(p) * n;
      const std::size_t off = static_cast<std::size_t>(p) * col_stride;
      const real x0 = a0[off], x1 = a0[off + row_stride], x2 = a0[off + 2 * row_stride], x3 = a0[off + 3 * row_stride];
      for (int j = 0; j < n; ++j) {
        const real bv = br[j];
        c0[j] += x0 * bv;
        c1[j] += x1 * bv;
        c2[j] += x2 * bv;
        c3[j] += x3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    real* __restrict cr = c + static_cast<std::size_t>(i) * n;
    const real* ar = a + static_cast<std::size_t>(i) * row_stride;
    for (int p = 0; p < k; ++p) {
      const real av = ar[static_cast<std::size_t>(p) * col_stride];
      const real* __restrict br = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace

void gemm_nn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
  gemm_core(a, static_cast<std::size_t>(k), 1, b, c, m, k, n, accumulate);
}

void gemm_tn(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
  gemm_core(a, 1, static_cast<std::size_t>(m), b, c, m, k, n, accumulate);
}

void gemm_nt(const real* a, const real* b, real* c, int m, int k, int n, bool accumulate) {
  // Transposing B keeps the inner loop contiguous and vectorizable.
  std::vector<real> bt(static_cast<std::size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int p = 0; p < k; ++p) bt[static_cast<std::size_t>(p) * n + j] = b[static_cast<std::size_t>(j) * k + p];
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c({a.rows(), b.cols()});
  gemm_nn(a.ptr(), b.ptr(), c.ptr(), a.rows(), a.cols(), b.cols());
  return c;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int r = a.rows(), c = a.cols();
  Tensor t({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor softmax_rows(const Tensor& a) {
  require_2d(a, "softmax_rows");
  const int r = a.rows(), c = a.cols();
  if (c == 0) throw ShapeError("softmax_rows: empty rows");
  Tensor y(a.shape());
  for (int i = 0; i < r; ++i) {
    const real* x = a.ptr() + static_cast<std::size_t>(i) * c;
    real* o = y.ptr() + static_cast<std::size_t>(i) * c;
    const real mx = *std::max_element(x, x + c);
    real s = 0;
    for (int j = 0; j < c; ++j) {
      o[j] = vexp(x[j] - mx);
    }
    for (int j = 0; j < c; ++j) s += o[j];
    const real inv = real(1) / s;
    for (int j = 0; j < c; ++j) o[j] *= inv;
  }
  return y;
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = matmul(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const Tensor& dC = t.grad_of(self);
    const int m = A.rows(), k = A.cols(), n = B.cols();
    if (t.requires_grad(ia)) gemm_nt(dC.ptr(), B.ptr(), t.grad_acc(ia).ptr(), m, n, k, true);
    if (t.requires_grad(ib)) gemm_tn(A.ptr(), dC.ptr(), t.grad_acc(ib).ptr(), k, m, n, true);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_2d(A, "matmul_nt");
  require_2d(B, "matmul_nt");
  if (A.cols() != B.cols()) {
    throw ShapeError("matmul_nt: inner dims disagree " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  }
  Tensor out({A.rows(), B.rows()});
  gemm_nt(A.ptr(), B.ptr(), out.ptr(), A.rows(), A.cols(), B.rows());
  return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const Tensor& dC = t.grad_of(self);
    const int m = A.rows(), k = A.cols(), n = B.rows();
    if (t.requires_grad(ia)) gemm_nn(dC.ptr(), B.ptr(), t.grad_acc(ia).ptr(), m, n, k, true);
    if (t.requires_grad(ib)) gemm_tn(dC.ptr(), A.ptr(), t.grad_acc(ib).ptr(), n, m, k, true);
  });
}

Var transpose(Var a) {
  return a.tape->record(transpose(a.value()), {a}, [ia = a.id](Tape& t, int self) {
    axpy(t.grad_acc(ia), transpose(t.grad_of(self)));
  });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  axpy(out, b.value());
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, int self) {
    if (t.requires_grad(ia)) axpy(t.grad_acc(ia), t.grad_of(self));
    if (t.requires_grad(ib)) axpy(t.grad_acc(ib), t.grad_of(self));
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  axpy(out, b.value(), real(-1));
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, int self) {
    if (t.requires_grad(ia)) axpy(t.grad_acc(ia), t.grad_of(self));
    if (t.requires_grad(ib)) axpy(t.grad_acc(ib), t.grad_of(self), real(-1));
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_acc(ia);
      const Tensor& B = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_acc(ib);
      const Tensor& A = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

Var scale(Var a, real s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record(std::move(out), {a}, [ia = a.id, s](Tape& t, int self) {
    axpy(t.grad_acc(ia), t.grad_of(self), s);
  });
}

Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  require_2d(A, "add_row");
  const int r = A.rows(), c = A.cols();
  if (static_cast<int>(row.value().size()) != c) {
    throw ShapeError("add_row: row length " + std::to_string(row.value().size()) + " vs cols " + std::to_string(c));
  }
  Tensor out = A;
  const real* rv = row.value().ptr();
  for (int i = 0; i < r; ++i) {
    real* o = out.ptr() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) o[j] += rv[j];
  }
  return a.tape->record(std::move(out), {a, row}, [ia = a.id, ir = row.id, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    if (t.requires_grad(ia)) axpy(t.grad_acc(ia), g);
    if (t.requires_grad(ir)) {
      real* gr = t.grad_acc(ir).ptr();
      for (int i = 0; i < r; ++i) {
        const real* gi = g.ptr() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) gr[j] += gi[j];
      }
    }
  });
}

Var softmax_rows(Var a) {
  Tensor y = softmax_rows(a.value());
  return a.tape->record(std::move(y), {a}, [ia = a.id](Tape& t, int self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    const int r = y.rows(), c = y.cols();
    for (int i = 0; i < r; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * c;
      real dot = 0;
      for (int j = 0; j < c; ++j) dot += g[o + j] * y[o + j];
      for (int j = 0; j < c; ++j) ga[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

Var layernorm(Var a, Var gain, Var bias, real eps) {
  const Tensor& X = a.value();
  require_2d(X, "layernorm");
  const int r = X.rows(), c = X.cols();
  if (static_cast<int>(gain.value().size()) != c || static_cast<int>(bias.value().size()) != c) {
    throw ShapeError("layernorm: gain/bias length must equal cols");
  }
  auto xhat = std::make_shared<std::vector<real>>(X.size());
  auto rstd = std::make_shared<std::vector<real>>(static_cast<std::size_t>(r));
  Tensor out(X.shape());
  const real* G = gain.value().ptr();
  const real* B = bias.value().ptr();
  for (int i = 0; i < r; ++i) {
    const std::size_t o = static_cast<std::size_t>(i) * c;
    real mu = 0;
    for (int j = 0; j < c; ++j) mu += X[o + j];
    mu /= static_cast<real>(c);
    real var = 0;
    for (int j = 0; j < c; ++j) var += (X[o + j] - mu) * (X[o + j] - mu);
    var /= static_cast<real>(c);
    const real rs = real(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(i)] = rs;
    for (int j = 0; j < c; ++j) {
      const real xh = (X[o + j] - mu) * rs;
      (*xhat)[o + j] = xh;
      out[o + j] = xh * G[j] + B[j];
    }
  }
  return a.tape->record(std::move(out), {a, gain, bias},
                        [ia = a.id, ig = gain.id, ib = bias.id, xhat, rstd, r, c](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const real* G = t.value(ig).ptr();
    if (t.requires_grad(ig) || t.requires_grad(ib)) {
      const bool wg = t.requires_grad(ig), wb = t.requires_grad(ib);
      real* dg = wg ? t.grad_acc(ig).ptr() : nullptr;
      real* db = wb ? t.grad_acc(ib).ptr() : nullptr;
      for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          if (wg) dg[j] += g[o + j] * (*xhat)[o + j];
          if (wb) db[j] += g[o + j];
        }
      }
    }
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_acc(ia);
      std::vector<real> dxh(static_cast<std::size_t>(c));
      for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        real m1 = 0, m2 = 0;
        for (int j = 0; j < c; ++j) {
          dxh[static_cast<std::size_t>(j)] = g[o + j] * G[j];
          m1 += dxh[static_cast<std::size_t>(j)];
          m2 += dxh[static_cast<std::size_t>(j)] * (*xhat)[o + j];
        }
        m1 /= static_cast<real>(c);
        m2 /= static_cast<real>(c);
        const real rs = (*rstd)[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) ga[o + j] += rs * (dxh[static_cast<std::size_t>(j)] - m1 - (*xhat)[o + j] * m2);
      }
    }
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  constexpr real inv_sqrt2 = real(1) / std::numbers::sqrt2_v<real>;
  real* o = out.ptr();
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) o[i] = real(0.5) * o[i] * (real(1) + verf(o[i] * inv_sqrt2));
  return a.tape->record(std::move(out), {a}, [ia = a.id](Tape& t, int self) {
    const Tensor& x = t.value(ia);
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    constexpr real inv_sqrt2 = real(1) / std::numbers::sqrt2_v<real>;
    constexpr real inv_sqrt2pi = std::numbers::inv_sqrtpi_v<real> / std::numbers::sqrt2_v<real>;
    const real* xv = x.ptr();
    const real* gv = g.ptr();
    real* out = ga.ptr();
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
      const real v = xv[i];
      const real cdf = real(0.5) * (real(1) + verf(v * inv_sqrt2));
      const real pdf = inv_sqrt2pi * vexp(real(-0.5) * v * v);
      out[i] += gv[i] * (cdf + v * pdf);
    }
  });
}

Var sigmoid(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = real(1) / (real(1) + vexp(-v));
  return a.tape->record(std::move(out), {a}, [ia = a.id](Tape& t, int self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    for (std::size_t i = 0; i < y.size(); ++i) ga[i] += g[i] * y[i] * (real(1) - y[i]);
  });
}

Var reshape(Var a, Shape shape) {
  return a.tape->record(a.value().reshaped(std::move(shape)), {a}, [ia = a.id](Tape& t, int self) {
    Tensor& ga = t.grad_acc(ia);
    const Tensor& g = t.grad_of(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var upsample2x(Var a, int h, int w) {
  const Tensor& X = a.value();
  require_2d(X, "upsample2x");
  if (X.rows() != h * w) throw ShapeError("upsample2x: rows " + std::to_string(X.rows()) + " != h*w");
  const int c = X.cols();
  const int W2 = 2 * w;
  Tensor out({4 * h * w, c});
  for (int y = 0; y < 2 * h; ++y) {
    for (int x = 0; x < W2; ++x) {
      const real* src = X.ptr() + static_cast<std::size_t>((y / 2) * w + x / 2) * c;
      std::copy(src, src + c, out.ptr() + static_cast<std::size_t>(y * W2 + x) * c);
    }
  }
  return a.tape->record(std::move(out), {a}, [ia = a.id, h, w, c](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    Tensor& ga = t.grad_acc(ia);
    const int W2 = 2 * w;
    for (int y = 0; y < 2 * h; ++y) {
      for (int x = 0; x < W2; ++x) {
        const real* src = g.ptr() + static_cast<std::size_t>(y * W2 + x) * c;
        real* dst = ga.ptr() + static_cast<std::size_t>((y / 2) * w + x / 2) * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
      }
    }
  });
}

Var pixel_dot(Var features, Var vec) {
  const Tensor& F = features.value();
  require_2d(F, "pixel_dot");
  const int n = F.rows(), c = F.cols();
  if (static_cast<int>(vec.value().size()) != c) throw ShapeError("pixel_dot: vector length != feature cols");
  Tensor out({n, 1});
  const real* v = vec.value().ptr();
  for (int i = 0; i < n; ++i) {
    const real* f = F.ptr() + static_cast<std::size_t>(i) * c;
    real s = 0;
    for (int j = 0; j < c; ++j) s += f[j] * v[j];
    out[static_cast<std::size_t>(i)] = s;
  }
  return features.tape->record(std::move(out), {features, vec}, [iF = features.id, iv = vec.id, n, c](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& F = t.value(iF);
    const Tensor& v = t.value(iv);
    if (t.requires_grad(iF)) {
      real* gf = t.grad_acc(iF).ptr();
      for (int i = 0; i < n; ++i) {
        real* row = gf + static_cast<std::size_t>(i) * c;
        const real gi = g[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) row[j] += gi * v[static_cast<std::size_t>(j)];
      }
    }
    if (t.requires_grad(iv)) {
      real* gv = t.grad_acc(iv).ptr();
      for (int i = 0; i < n; ++i) {
        const real* row = F.ptr() + static_cast<std::size_t>(i) * c;
        const real gi = g[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) gv[j] += gi * row[j];
      }
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int c = parts.front().value().cols();
  int total = 0;
  for (const Var& p : parts) {
    if (p.value().cols() != c) throw ShapeError("concat_rows: column mismatch");
    total += p.value().rows();
  }
  Tensor out({total, c});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().ptr(), p.value().ptr() + p.value().size(), out.ptr() + off);
    off += p.value().size();
  }
  std::vector<int> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts.front().tape->record(std::move(out), parts, [ids](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        real* dst = t.grad_acc(id).ptr();
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[off + i];
      }
      off += n;
    }
  });
}

Var slice_rows(Var a, int begin, int count) {
  const Tensor& X = a.value();
  require_2d(X, "slice_rows");
  if (begin < 0 || count < 0 || begin + count > X.rows()) throw ShapeError("slice_rows: range out of bounds");
  const int c = X.cols();
  Tensor out({count, c});
  const std::size_t off = static_cast<std::size_t>(begin) * c;
  std::copy(X.ptr() + off, X.ptr() + off + out.size(), out.ptr());
  return a.tape->record(std::move(out), {a}, [ia = a.id, off](Tape& t, int self) {
    const Tensor& g = t.grad_of(self);
    real* dst = t.grad_acc(ia).ptr() + off;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var sum(Var a) {
  double s = 0;
  for (real v : a.value().data()) s += v;
  return a.tape->record(Tensor({1}, static_cast<real>(s)), {a}, [ia = a.id](Tape& t, int self) {
    const real g = t.grad_of(self)[0];
    for (auto& v : t.grad_acc(ia).data()) v += g;
  });
}

Var mean_sq_diff(Var a, Var b) {
  require_same(a.value(), b.value(), "mean_sq_diff");
  const std::size_t n = a.value().size();
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    s += d * d;
  }
  const real mean = n ? static_cast<real>(s / static_cast<double>(n)) : real(0);
  return a.tape->record(Tensor({1}, mean), {a, b}, [ia = a.id, ib = b.id, n](Tape& t, int self) {
    const real g = t.grad_of(self)[0] * real(2) / static_cast<real>(n);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_acc(ia);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g * (A[i] - B[i]);
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_acc(ib);
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (A[i] - B[i]);
    }
  });
}

namespace {

void copy_cols(const Tensor& src, int col0, int ncols, std::vector<real>& dst) {
  const int r = src.rows(), c = src.cols();
  dst.resize(static_cast<std::size_t>(r) * ncols);
  for (int i = 0; i < r; ++i)
    std::copy_n(src.ptr() + static_cast<std::size_t>(i) * c + col0, ncols, dst.data() + static_cast<std::size_t>(i) * ncols);
}

void add_cols(Tensor& dst, int col0, int ncols, const std::vector<real>& src) {
  const int r = dst.rows(), c = dst.cols();
  for (int i = 0; i < r; ++i) {
    real* d = dst.ptr() + static_cast<std::size_t>(i) * c + col0;
    const real* s = src.data() + static_cast<std::size_t>(i) * ncols;
    for (int j = 0; j < ncols; ++j) d[j] += s[j];
  }
}

}  // namespace

Var multihead_attention(Var q, Var k, Var v, int heads) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  require_2d(Q, "attention");
  require_2d(K, "attention");
  require_2d(V, "attention");
  const int n = Q.rows(), m = K.rows(), d = Q.cols();
  if (K.cols() != d || V.cols() != d || V.rows() != m) throw ShapeError("attention: Q/K/V dims disagree");
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: d not divisible by heads");
  const int dh = d / heads;
  const real sc = real(1) / std::sqrt(static_cast<real>(dh));

  auto probs = std::make_shared<std::vector<Tensor>>();
  Tensor out({n, d});
  std::vector<real> qh, kh, vh, oh(static_cast<std::size_t>(n) * dh);
  for (int h = 0; h < heads; ++h) {
    copy_cols(Q, h * dh, dh, qh);
    copy_cols(K, h * dh, dh, kh);
    copy_cols(V, h * dh, dh, vh);
    Tensor s({n, m});
    gemm_nt(qh.data(), kh.data(), s.ptr(), n, dh, m);
    for (auto& x : s.data()) x *= sc;
    Tensor p = softmax_rows(s);
    gemm_nn(p.ptr(), vh.data(), oh.data(), n, m, dh);
    add_cols(out, h * dh, dh, oh);
    probs->push_back(std::move(p));
  }
  return q.tape->record(std::move(out), {q, k, v},
                        [iq = q.id, ik = k.id, iv = v.id, heads, n, m, d, dh, sc, probs](Tape& t, int self) {
    const Tensor& G = t.grad_of(self);
    std::vector<real> qh, kh, vh, gh, dp(static_cast<std::size_t>(n) * m), tmp_q(static_cast<std::size_t>(n) * dh),
        tmp_kv(static_cast<std::size_t>(m) * dh);
    for (int h = 0; h < heads; ++h) {
      const Tensor& P = (*probs)[static_cast<std::size_t>(h)];
      copy_cols(G, h * dh, dh, gh);
      copy_cols(t.value(iv), h * dh, dh, vh);
      if (t.requires_grad(iv)) {
        gemm_tn(P.ptr(), gh.data(), tmp_kv.data(), m, n, dh);
        add_cols(t.grad_acc(iv), h * dh, dh, tmp_kv);
      }
      if (!t.requires_grad(iq) && !t.requires_grad(ik)) continue;
      gemm_nt(gh.data(), vh.data(), dp.data(), n, dh, m);
      for (int i = 0; i < n; ++i) {
        real* row = dp.data() + static_cast<std::size_t>(i) * m;
        const real* prow = P.ptr() + static_cast<std::size_t>(i) * m;
        real dot = 0;
        for (int j = 0; j < m; ++j) dot += row[j] * prow[j];
        for (int j = 0; j < m; ++j) row[j] = prow[j] * (row[j] - dot) * sc;
      }
      if (t.requires_grad(iq)) {
        copy_cols(t.value(ik), h * dh, dh, kh);
        gemm_nn(dp.data(), kh.data(), tmp_q.data(), n, m, dh);
        add_cols(t.grad_acc(iq), h * dh, dh, tmp_q);
      }
      if (t.requires_grad(ik)) {
        copy_cols(t.value(iq), h * dh, dh, qh);
        gemm_tn(dp.data(), qh.data(), tmp_kv.data(), m, n, dh);
        add_cols(t.grad_acc(ik), h * dh, dh, tmp_kv);
      }
    }
    (void)d;
  });
}

}  // namespace evosam::nk
