// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>

#include "m2hx/tensor.hpp"

namespace m2hx {

namespace detail {

// C[m x n] (+)= A[m x k] * B[k x n], row-major. Blocked over n and k so the
// active B panel stays cache resident; each output cell is accumulated by a
// single fixed-order chain, which keeps results independent of any
// outer-loop parallelism.
template <class T>
inline void gemm_nn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C,
                    bool accumulate) {
  if (!accumulate) std::fill(C, C + m * n, T(0));
  constexpr int64_t kb = 64, nb = 256;
  for (int64_t n0 = 0; n0 < n; n0 += nb) {
    const int64_t n1 = std::min(n, n0 + nb);
    for (int64_t k0 = 0; k0 < k; k0 += kb) {
      const int64_t k1 = std::min(k, k0 + kb);
      for (int64_t i = 0; i < m; ++i) {
        T* c = C + i * n;
        const T* a = A + i * k;
        int64_t p = k0;
        for (; p + 4 <= k1; p += 4) {
          const T a0 = a[p], a1 = a[p + 1], a2 = a[p + 2], a3 = a[p + 3];
          const T* b0 = B + p * n;
          const T* b1 = b0 + n;
          const T* b2 = b1 + n;
          const T* b3 = b2 + n;
          for (int64_t j = n0; j < n1; ++j)
            c[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
        }
        for (; p < k1; ++p) {
          const T av = a[p];
          const T* b = B + p * n;
          for (int64_t j = n0; j < n1; ++j) c[j] += av * b[j];
        }
      }
    }
  }
}

template <class T>
inline void transpose_copy(int64_t rows, int64_t cols, const T* src, T* dst) {
  constexpr int64_t blk = 32;
  for (int64_t i0 = 0; i0 < rows; i0 += blk)
    for (int64_t j0 = 0; j0 < cols; j0 += blk) {
      const int64_t i1 = std::min(rows, i0 + blk), j1 = std::min(cols, j0 + blk);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

template <class T>
inline void check_same_shape(Tensor<T> a, Tensor<T> b, const char* op) {
  if (!a.same_shape(b))
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                      shape_str(b.shape));
}

template <class T>
inline void axpy(int64_t n, T alpha, const T* x, T* y) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  detail::check_finite(out, "add");
  detail::record_op(out, a.requires_grad || b.requires_grad, [a, b, out]() mutable {
    if (a.requires_grad) detail::axpy(a.numel(), T(1), out.gptr(), a.gptr());
    if (b.requires_grad) detail::axpy(b.numel(), T(1), out.gptr(), b.gptr());
  });
  return out;
}

template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  detail::check_finite(out, "sub");
  detail::record_op(out, a.requires_grad || b.requires_grad, [a, b, out]() mutable {
    if (a.requires_grad) detail::axpy(a.numel(), T(1), out.gptr(), a.gptr());
    if (b.requires_grad) detail::axpy(b.numel(), T(-1), out.gptr(), b.gptr());
  });
  return out;
}

template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  detail::check_finite(out, "mul");
  detail::record_op(out, a.requires_grad || b.requires_grad, [a, b, out]() mutable {
    const int64_t m = out.numel();
    if (a.requires_grad)
      for (int64_t i = 0; i < m; ++i) a.gptr()[i] += out.gptr()[i] * b.ptr()[i];
    if (b.requires_grad)
      for (int64_t i = 0; i < m; ++i) b.gptr()[i] += out.gptr()[i] * a.ptr()[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

namespace detail {

// fwd(x) -> y, dfd(x, y) -> dy/dx
template <class T, class Fwd, class Dfd>
Tensor<T> unary_op(Tensor<T> a, const char* name, Fwd fwd, Dfd dfd) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = fwd(a.ptr()[i]);
  check_finite(out, name);
  record_op(out, a.requires_grad, [a, out, dfd]() mutable {
    const int64_t m = out.numel();
    for (int64_t i = 0; i < m; ++i) a.gptr()[i] += out.gptr()[i] * dfd(a.ptr()[i], out.ptr()[i]);
  });
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> neg(Tensor<T> a) {
  return detail::unary_op(
      a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(Tensor<T> a, T c) {
  return detail::unary_op(
      a, "scale", [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(Tensor<T> a, T c) {
  return detail::unary_op(
      a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> exp(Tensor<T> a) {
  return detail::unary_op(
      a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(Tensor<T> a) {
  return detail::unary_op(
      a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> sqrt(Tensor<T> a) {
  return detail::unary_op(
      a, "sqrt", [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> rsqrt(Tensor<T> a) {
  return detail::unary_op(
      a, "rsqrt", [](T x) { return T(1) / std::sqrt(x); },
      [](T, T y) { return T(-0.5) * y * y * y; });
}

template <class T>
Tensor<T> square(Tensor<T> a) {
  return detail::unary_op(
      a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> abs(Tensor<T> a) {
  return detail::unary_op(
      a, "abs", [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sigmoid(Tensor<T> a) {
  return detail::unary_op(
      a, "sigmoid",
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> softplus(Tensor<T> a) {
  return detail::unary_op(
      a, "softplus",
      [](T x) { return x > T(30) ? x : std::log1p(std::exp(x)); },
      [](T x, T) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); });
}

// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(Tensor<T> a) {
  constexpr T inv_sqrt2 = T(0.7071067811865475244);
  constexpr T inv_sqrt2pi = T(0.3989422804014326779);
  return detail::unary_op(
      a, "gelu",
      [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

// Gradient passes only where lo < x < hi.
template <class T>
Tensor<T> clamp(Tensor<T> a, T lo, T hi) {
  return detail::unary_op(
      a, "clamp", [=](T x) { return std::min(hi, std::max(lo, x)); },
      [=](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(Tensor<T> a) {
  T s = 0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += a.ptr()[i];
  Tensor<T> out = Tensor<T>::scalar_of(s);
  detail::check_finite(out, "sum");
  detail::record_op(out, a.requires_grad, [a, out, n]() mutable {
    const T g = (*out.grad)[0];
    for (int64_t i = 0; i < n; ++i) a.gptr()[i] += g;
  });
  return out;
}

template <class T>
Tensor<T> mean_all(Tensor<T> a) {
  const int64_t n = a.numel();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += a.ptr()[i];
  Tensor<T> out = Tensor<T>::scalar_of(s / T(n));
  detail::check_finite(out, "mean");
  detail::record_op(out, a.requires_grad, [a, out, n]() mutable {
    const T g = (*out.grad)[0] / T(n);
    for (int64_t i = 0; i < n; ++i) a.gptr()[i] += g;
  });
  return out;
}

template <class T>
Tensor<T> dot(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "dot");
  T s = 0;
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += a.ptr()[i] * b.ptr()[i];
  Tensor<T> out = Tensor<T>::scalar_of(s);
  detail::check_finite(out, "dot");
  detail::record_op(out, a.requires_grad || b.requires_grad, [a, b, out]() mutable {
    const T g = (*out.grad)[0];
    const int64_t m = a.numel();
    if (a.requires_grad)
      for (int64_t i = 0; i < m; ++i) a.gptr()[i] += g * b.ptr()[i];
    if (b.requires_grad)
      for (int64_t i = 0; i < m; ++i) b.gptr()[i] += g * a.ptr()[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw TensorError("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                      shape_str(b.shape));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({(int)m, (int)n});
  detail::gemm_nn(m, n, k, a.ptr(), b.ptr(), out.ptr(), false);
  detail::check_finite(out, "matmul");
  detail::record_op(out, a.requires_grad || b.requires_grad, [a, b, out, m, n, k]() mutable {
    if (a.requires_grad) {
      std::vector<T> bt(b.numel());
      detail::transpose_copy(k, n, b.ptr(), bt.data());
      detail::gemm_nn(m, k, n, out.gptr(), bt.data(), a.gptr(), true);
    }
    if (b.requires_grad) {
      std::vector<T> at(a.numel());
      detail::transpose_copy(m, k, a.ptr(), at.data());
      detail::gemm_nn(k, n, m, at.data(), out.gptr(), b.gptr(), true);
    }
  });
  return out;
}

// y[t,:] = W x[t,:] + b  for x: T x d_in, W: d_out x d_in, b: d_out (optional).
template <class T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
    throw TensorError("linear: incompatible shapes " + shape_str(x.shape) + " with weight " +
                      shape_str(w.shape));
  const int64_t rows = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (b.defined() && b.numel() != dout) throw TensorError("linear: bias size mismatch");
  Tensor<T> out = Tensor<T>::zeros({(int)rows, (int)dout});
  std::vector<T> wt(w.numel());
  detail::transpose_copy(dout, din, w.ptr(), wt.data());
  detail::gemm_nn(rows, dout, din, x.ptr(), wt.data(), out.ptr(), false);
  if (b.defined())
    for (int64_t t = 0; t < rows; ++t)
      for (int64_t j = 0; j < dout; ++j) out.ptr()[t * dout + j] += b.ptr()[j];
  detail::check_finite(out, "linear");
  const bool rg = x.requires_grad || w.requires_grad || (b.defined() && b.requires_grad);
  detail::record_op(out, rg, [x, w, b, out, rows, din, dout]() mutable {
    if (x.requires_grad) detail::gemm_nn(rows, din, dout, out.gptr(), w.ptr(), x.gptr(), true);
    if (w.requires_grad) {
      std::vector<T> gt(out.numel());
      detail::transpose_copy(rows, dout, out.gptr(), gt.data());
      detail::gemm_nn(dout, din, rows, gt.data(), x.ptr(), w.gptr(), true);
    }
    if (b.defined() && b.requires_grad)
      for (int64_t t = 0; t < rows; ++t)
        for (int64_t j = 0; j < dout; ++j) b.gptr()[j] += out.gptr()[t * dout + j];
  });
  return out;
}

template <class T>
Tensor<T> transpose2d(Tensor<T> a) {
  if (a.ndim() != 2) throw TensorError("transpose2d needs a 2-d tensor");
  const int64_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({(int)c, (int)r});
  detail::transpose_copy(r, c, a.ptr(), out.ptr());
  detail::record_op(out, a.requires_grad, [a, out, r, c]() mutable {
    // grad of transpose is transpose of grad
    std::vector<T> tmp(a.numel());
    detail::transpose_copy(c, r, out.gptr(), tmp.data());
    detail::axpy(a.numel(), T(1), tmp.data(), a.gptr());
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape / slicing
// ---------------------------------------------------------------------------

// Rows [r0, r1) of a 2-d tensor.
template <class T>
Tensor<T> slice_rows(Tensor<T> a, int r0, int r1) {
  if (a.ndim() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
    throw TensorError("slice_rows: bad range");
  const int64_t c = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({r1 - r0, (int)c});
  std::copy(a.ptr() + r0 * c, a.ptr() + r1 * c, out.ptr());
  detail::record_op(out, a.requires_grad, [a, out, r0, c]() mutable {
    detail::axpy(out.numel(), T(1), out.gptr(), a.gptr() + r0 * c);
  });
  return out;
}

template <class T>
Tensor<T> slice_cols(Tensor<T> a, int c0, int c1) {
  if (a.ndim() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw TensorError("slice_cols: bad range");
  const int64_t rows = a.dim(0), cols = a.dim(1), w = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({(int)rows, (int)w});
  for (int64_t i = 0; i < rows; ++i)
    std::copy(a.ptr() + i * cols + c0, a.ptr() + i * cols + c1, out.ptr() + i * w);
  detail::record_op(out, a.requires_grad, [a, out, c0, rows, cols, w]() mutable {
    for (int64_t i = 0; i < rows; ++i)
      detail::axpy(w, T(1), out.gptr() + i * w, a.gptr() + i * cols + c0);
  });
  return out;
}

template <class T>
Tensor<T> concat_cols(std::vector<Tensor<T>> parts) {
  if (parts.empty()) throw TensorError("concat_cols: empty input");
  const int64_t rows = parts[0].dim(0);
  int64_t cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != rows) throw TensorError("concat_cols: row mismatch");
    cols += p.dim(1);
    rg = rg || p.requires_grad;
  }
  Tensor<T> out = Tensor<T>::zeros({(int)rows, (int)cols});
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t i = 0; i < rows; ++i)
      std::copy(p.ptr() + i * w, p.ptr() + (i + 1) * w, out.ptr() + i * cols + off);
    off += w;
  }
  detail::record_op(out, rg, [parts, out, rows, cols]() mutable {
    int64_t off = 0;
    for (auto& p : parts) {
      const int64_t w = p.dim(1);
      if (p.requires_grad)
        for (int64_t i = 0; i < rows; ++i)
          detail::axpy(w, T(1), out.gptr() + i * cols + off, p.gptr() + i * w);
      off += w;
    }
  });
  return out;
}

// Concatenation along the leading axis; trailing dims must agree.
template <class T>
Tensor<T> concat_axis0(std::vector<Tensor<T>> parts) {
  if (parts.empty()) throw TensorError("concat_axis0: empty input");
  Shape tail(parts[0].shape.begin() + 1, parts[0].shape.end());
  int lead = 0;
  bool rg = false;
  for (const auto& p : parts) {
    Shape t(p.shape.begin() + 1, p.shape.end());
    if (t != tail) throw TensorError("concat_axis0: trailing shape mismatch");
    lead += p.dim(0);
    rg = rg || p.requires_grad;
  }
  Shape os = parts[0].shape;
  os[0] = lead;
  Tensor<T> out = Tensor<T>::zeros(os);
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.ptr(), p.ptr() + p.numel(), out.ptr() + off);
    off += p.numel();
  }
  detail::record_op(out, rg, [parts, out]() mutable {
    int64_t off = 0;
    for (auto& p : parts) {
      if (p.requires_grad) detail::axpy(p.numel(), T(1), out.gptr() + off, p.gptr());
      off += p.numel();
    }
  });
  return out;
}

template <class T>
Tensor<T> slice_axis0(Tensor<T> a, int i0, int i1) {
  if (a.ndim() < 1 || i0 < 0 || i1 > a.dim(0) || i0 >= i1)
    throw TensorError("slice_axis0: bad range");
  int64_t inner = 1;
  for (int i = 1; i < a.ndim(); ++i) inner *= a.dim(i);
  Shape os = a.shape;
  os[0] = i1 - i0;
  Tensor<T> out = Tensor<T>::zeros(os);
  std::copy(a.ptr() + i0 * inner, a.ptr() + i1 * inner, out.ptr());
  detail::record_op(out, a.requires_grad, [a, out, i0, inner]() mutable {
    detail::axpy(out.numel(), T(1), out.gptr(), a.gptr() + i0 * inner);
  });
  return out;
}

template <class T>
Tensor<T> reverse_rows(Tensor<T> a) {
  if (a.ndim() != 2) throw TensorError("reverse_rows needs a 2-d tensor");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  for (int64_t i = 0; i < rows; ++i)
    std::copy(a.ptr() + i * cols, a.ptr() + (i + 1) * cols, out.ptr() + (rows - 1 - i) * cols);
  detail::record_op(out, a.requires_grad, [a, out, rows, cols]() mutable {
    for (int64_t i = 0; i < rows; ++i)
      detail::axpy(cols, T(1), out.gptr() + (rows - 1 - i) * cols, a.gptr() + i * cols);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast helpers
// ---------------------------------------------------------------------------

// q: rows x C, v: C  ->  q * v per row.
template <class T>
Tensor<T> mul_row_broadcast(Tensor<T> q, Tensor<T> v) {
  if (q.ndim() != 2 || v.numel() != q.dim(1))
    throw TensorError("mul_row_broadcast: width mismatch " + shape_str(q.shape) + " vs " +
                      shape_str(v.shape));
  const int64_t rows = q.dim(0), c = q.dim(1);
  Tensor<T> out = Tensor<T>::zeros(q.shape);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < c; ++j) out.ptr()[i * c + j] = q.ptr()[i * c + j] * v.ptr()[j];
  detail::check_finite(out, "mul_row_broadcast");
  detail::record_op(out, q.requires_grad || v.requires_grad, [q, v, out, rows, c]() mutable {
    if (q.requires_grad)
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < c; ++j) q.gptr()[i * c + j] += out.gptr()[i * c + j] * v.ptr()[j];
    if (v.requires_grad)
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < c; ++j) v.gptr()[j] += out.gptr()[i * c + j] * q.ptr()[i * c + j];
  });
  return out;
}

// x: C x H x W  ->  1 x H x W (sum over channels).
template <class T>
Tensor<T> channel_sum(Tensor<T> x) {
  if (x.ndim() != 3) throw TensorError("channel_sum needs C x H x W");
  const int64_t c = x.dim(0), hw = (int64_t)x.dim(1) * x.dim(2);
  Tensor<T> out = Tensor<T>::zeros({1, x.dim(1), x.dim(2)});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < hw; ++i) out.ptr()[i] += x.ptr()[ch * hw + i];
  detail::check_finite(out, "channel_sum");
  detail::record_op(out, x.requires_grad, [x, out, c, hw]() mutable {
    for (int64_t ch = 0; ch < c; ++ch) detail::axpy(hw, T(1), out.gptr(), x.gptr() + ch * hw);
  });
  return out;
}

// x: C x H x W, m: 1 x H x W  ->  x * m broadcast over channels.
template <class T>
Tensor<T> mul_channel_map(Tensor<T> x, Tensor<T> m) {
  if (x.ndim() != 3 || m.ndim() != 3 || m.dim(0) != 1 || m.dim(1) != x.dim(1) ||
      m.dim(2) != x.dim(2))
    throw TensorError("mul_channel_map: shape mismatch");
  const int64_t c = x.dim(0), hw = (int64_t)x.dim(1) * x.dim(2);
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < hw; ++i) out.ptr()[ch * hw + i] = x.ptr()[ch * hw + i] * m.ptr()[i];
  detail::check_finite(out, "mul_channel_map");
  detail::record_op(out, x.requires_grad || m.requires_grad, [x, m, out, c, hw]() mutable {
    if (x.requires_grad)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hw; ++i)
          x.gptr()[ch * hw + i] += out.gptr()[ch * hw + i] * m.ptr()[i];
    if (m.requires_grad)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hw; ++i)
          m.gptr()[i] += out.gptr()[ch * hw + i] * x.ptr()[ch * hw + i];
  });
  return out;
}

// Global average pool: C x H x W -> C.
template <class T>
Tensor<T> spatial_mean(Tensor<T> x) {
  if (x.ndim() != 3) throw TensorError("spatial_mean needs C x H x W");
  const int64_t c = x.dim(0), hw = (int64_t)x.dim(1) * x.dim(2);
  Tensor<T> out = Tensor<T>::zeros({x.dim(0)});
  for (int64_t ch = 0; ch < c; ++ch) {
    T s = 0;
    for (int64_t i = 0; i < hw; ++i) s += x.ptr()[ch * hw + i];
    out.ptr()[ch] = s / T(hw);
  }
  detail::check_finite(out, "spatial_mean");
  detail::record_op(out, x.requires_grad, [x, out, c, hw]() mutable {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T g = out.gptr()[ch] / T(hw);
      for (int64_t i = 0; i < hw; ++i) x.gptr()[ch * hw + i] += g;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Numerically stabilized softmax along `axis`.
template <class T>
Tensor<T> softmax(Tensor<T> x, int axis) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim()) throw TensorError("softmax: invalid axis");
  detail::check_finite(x, "softmax(input)");
  const int64_t n = x.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      T mx = x.ptr()[base];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x.ptr()[base + i * inner]);
      T z = 0;
      for (int64_t i = 0; i < n; ++i) {
        const T e = std::exp(x.ptr()[base + i * inner] - mx);
        out.ptr()[base + i * inner] = e;
        z += e;
      }
      for (int64_t i = 0; i < n; ++i) out.ptr()[base + i * inner] /= z;
    }
  detail::check_finite(out, "softmax");
  detail::record_op(out, x.requires_grad, [x, out, n, outer, inner]() mutable {
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * n * inner + in;
        T dotv = 0;
        for (int64_t i = 0; i < n; ++i)
          dotv += out.gptr()[base + i * inner] * out.ptr()[base + i * inner];
        for (int64_t i = 0; i < n; ++i)
          x.gptr()[base + i * inner] +=
              out.ptr()[base + i * inner] * (out.gptr()[base + i * inner] - dotv);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

// Shared forward/backward for normalizing contiguous groups of size `gn`
// laid out as `groups` consecutive slices. Affine is applied per element
// through an index map into gamma/beta.
template <class T, class AffineIdx>
Tensor<T> norm_groups(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                      int64_t groups, int64_t gn, T eps, AffineIdx aidx, const char* name) {
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  auto mu = std::make_shared<std::vector<T>>(groups);
  auto rstd = std::make_shared<std::vector<T>>(groups);
  for (int64_t g = 0; g < groups; ++g) {
    const T* xp = x.ptr() + g * gn;
    T m = 0;
    for (int64_t i = 0; i < gn; ++i) m += xp[i];
    m /= T(gn);
    T v = 0;
    for (int64_t i = 0; i < gn; ++i) v += (xp[i] - m) * (xp[i] - m);
    v /= T(gn);
    const T rs = T(1) / std::sqrt(v + eps);
    (*mu)[g] = m;
    (*rstd)[g] = rs;
    T* op = out.ptr() + g * gn;
    for (int64_t i = 0; i < gn; ++i) {
      const int64_t ai = aidx(g, i);
      op[i] = gamma.ptr()[ai] * ((xp[i] - m) * rs) + beta.ptr()[ai];
    }
  }
  check_finite(out, name);
  const bool rg = x.requires_grad || gamma.requires_grad || beta.requires_grad;
  record_op(out, rg, [x, gamma, beta, out, mu, rstd, groups, gn, aidx]() mutable {
    for (int64_t g = 0; g < groups; ++g) {
      const T* xp = x.ptr() + g * gn;
      const T* gp = out.gptr() + g * gn;
      const T m = (*mu)[g], rs = (*rstd)[g];
      T sum_gh = 0, sum_ghx = 0;  // sums of gamma*grad and gamma*grad*xhat
      for (int64_t i = 0; i < gn; ++i) {
        const int64_t ai = aidx(g, i);
        const T gh = gp[i] * gamma.ptr()[ai];
        const T xh = (xp[i] - m) * rs;
        sum_gh += gh;
        sum_ghx += gh * xh;
        if (gamma.requires_grad) gamma.gptr()[ai] += gp[i] * xh;
        if (beta.requires_grad) beta.gptr()[ai] += gp[i];
      }
      if (x.requires_grad) {
        for (int64_t i = 0; i < gn; ++i) {
          const int64_t ai = aidx(g, i);
          const T gh = gp[i] * gamma.ptr()[ai];
          const T xh = (xp[i] - m) * rs;
          x.gptr()[g * gn + i] += rs * (gh - (sum_gh + xh * sum_ghx) / T(gn));
        }
      }
    }
  });
  return out;
}

}  // namespace detail

// Layer norm over the last axis; gamma/beta sized like that axis.
template <class T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                     T eps = T(1e-5)) {
  const int64_t d = x.dim(x.ndim() - 1);
  if (gamma.numel() != d || beta.numel() != d)
    throw TensorError("layer_norm: affine size mismatch");
  const int64_t groups = x.numel() / d;
  return detail::norm_groups(
      x, gamma, beta, groups, d, eps, [d](int64_t, int64_t i) { return i % d; }, "layer_norm");
}

// Group norm over C x H x W with `g` channel groups; affine per channel.
template <class T>
Tensor<T> group_norm(Tensor<T> x, int g, Tensor<T> gamma, Tensor<T> beta,
                     T eps = T(1e-5)) {
  if (x.ndim() != 3) throw TensorError("group_norm needs C x H x W");
  const int64_t c = x.dim(0), hw = (int64_t)x.dim(1) * x.dim(2);
  if (g <= 0 || c % g != 0)
    throw TensorError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                      std::to_string(g));
  if (gamma.numel() != c || beta.numel() != c)
    throw TensorError("group_norm: affine size mismatch");
  const int64_t cg = c / g;
  const int64_t gn = cg * hw;
  return detail::norm_groups(
      x, gamma, beta, (int64_t)g, gn, eps,
      [cg, hw](int64_t grp, int64_t i) { return grp * cg + i / hw; }, "group_norm");
}

}  // namespace m2hx
