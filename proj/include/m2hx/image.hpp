// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/ops.hpp"

namespace m2hx {

namespace detail {

struct ConvDims {
  int cin, h, w, cout, kh, kw, stride, groups;
  int ph, pw, ho, wo, cing, coutg;
  int64_t patch;  // cing * kh * kw
};

template <class T>
inline ConvDims conv_dims(Tensor<T> x, Tensor<T> kernel, int stride, int groups) {
  if (x.ndim() != 3) throw TensorError("conv2d: input must be C x H x W");
  if (kernel.ndim() != 4) throw TensorError("conv2d: kernel must be Cout x Cin/g x kh x kw");
  ConvDims d{};
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.stride = stride;
  d.groups = groups;
  if (stride < 1) throw TensorError("conv2d: stride must be >= 1");
  if (d.kh % 2 == 0 || d.kw % 2 == 0)
    throw TensorError("conv2d: kernel sides must be odd for same-padding");
  if (groups < 1 || d.cin % groups != 0 || d.cout % groups != 0)
    throw TensorError("conv2d: channels not divisible by groups");
  if (kernel.dim(1) != d.cin / groups)
    throw TensorError("conv2d: kernel Cin/g mismatch: kernel " + shape_str(kernel.shape) +
                      " input " + shape_str(x.shape) + " groups " + std::to_string(groups));
  d.ph = (d.kh - 1) / 2;
  d.pw = (d.kw - 1) / 2;
  d.ho = (d.h + 2 * d.ph - d.kh) / stride + 1;
  d.wo = (d.w + 2 * d.pw - d.kw) / stride + 1;
  d.cing = d.cin / groups;
  d.coutg = d.cout / groups;
  d.patch = (int64_t)d.cing * d.kh * d.kw;
  return d;
}

// Element-major patch matrix for one group: rows = (c_local, ki, kj),
// cols = output pixels.
template <class T>
inline void im2col_group(const T* x, const ConvDims& d, int g, T* col) {
  const int64_t ohw = (int64_t)d.ho * d.wo;
  for (int c = 0; c < d.cing; ++c) {
    const T* xc = x + (int64_t)(g * d.cing + c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki)
      for (int kj = 0; kj < d.kw; ++kj) {
        T* row = col + ((int64_t)(c * d.kh + ki) * d.kw + kj) * ohw;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.stride + ki - d.ph;
          T* dst = row + (int64_t)oh * d.wo;
          if (ih < 0 || ih >= d.h) {
            std::fill(dst, dst + d.wo, T(0));
            continue;
          }
          const T* src = xc + (int64_t)ih * d.w;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * d.stride + kj - d.pw;
            dst[ow] = (iw >= 0 && iw < d.w) ? src[iw] : T(0);
          }
        }
      }
  }
}

template <class T>
inline void col2im_group(const T* col, const ConvDims& d, int g, T* gx) {
  const int64_t ohw = (int64_t)d.ho * d.wo;
  for (int c = 0; c < d.cing; ++c) {
    T* xc = gx + (int64_t)(g * d.cing + c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki)
      for (int kj = 0; kj < d.kw; ++kj) {
        const T* row = col + ((int64_t)(c * d.kh + ki) * d.kw + kj) * ohw;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.stride + ki - d.ph;
          if (ih < 0 || ih >= d.h) continue;
          T* dst = xc + (int64_t)ih * d.w;
          const T* src = row + (int64_t)oh * d.wo;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * d.stride + kj - d.pw;
            if (iw >= 0 && iw < d.w) dst[iw] += src[ow];
          }
        }
      }
  }
}

}  // namespace detail

// Cross-correlation with zero same-padding. kernel: Cout x Cin/g x kh x kw.
// groups == Cin gives depthwise behavior. Pass a default-constructed tensor
// as bias for none.
template <class T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> kernel, Tensor<T> bias,
                 int stride = 1, int groups = 1) {
  const detail::ConvDims d = detail::conv_dims(x, kernel, stride, groups);
  if (bias.defined() && bias.numel() != d.cout) throw TensorError("conv2d: bias size mismatch");
  const int64_t ohw = (int64_t)d.ho * d.wo;
  Tensor<T> out = Tensor<T>::zeros({d.cout, d.ho, d.wo});
  std::vector<T> col(d.patch * ohw);
  for (int g = 0; g < d.groups; ++g) {
    detail::im2col_group(x.ptr(), d, g, col.data());
    const T* wg = kernel.ptr() + (int64_t)g * d.coutg * d.patch;
    detail::gemm_nn((int64_t)d.coutg, ohw, d.patch, wg, col.data(),
                    out.ptr() + (int64_t)g * d.coutg * ohw, true);
  }
  if (bias.defined())
    for (int c = 0; c < d.cout; ++c) {
      T* oc = out.ptr() + (int64_t)c * ohw;
      for (int64_t i = 0; i < ohw; ++i) oc[i] += bias.ptr()[c];
    }
  detail::check_finite(out, "conv2d");
  const bool rg =
      x.requires_grad || kernel.requires_grad || (bias.defined() && bias.requires_grad);
  detail::record_op(out, rg, [x, kernel, bias, out, d]() mutable {
    const int64_t ohw = (int64_t)d.ho * d.wo;
    std::vector<T> col(d.patch * ohw);
    for (int g = 0; g < d.groups; ++g) {
      const T* gout = out.gptr() + (int64_t)g * d.coutg * ohw;
      const bool need_col = x.requires_grad || kernel.requires_grad;
      if (need_col) detail::im2col_group(x.ptr(), d, g, col.data());
      if (kernel.requires_grad) {
        // gw^T = col * gout^T, then accumulate transposed
        std::vector<T> goutT(ohw * d.coutg);
        detail::transpose_copy(d.coutg, ohw, gout, goutT.data());
        std::vector<T> gwT(d.patch * d.coutg, T(0));
        detail::gemm_nn(d.patch, (int64_t)d.coutg, ohw, col.data(), goutT.data(), gwT.data(),
                        false);
        T* gw = kernel.gptr() + (int64_t)g * d.coutg * d.patch;
        for (int i = 0; i < d.coutg; ++i)
          for (int64_t p = 0; p < d.patch; ++p) gw[i * d.patch + p] += gwT[p * d.coutg + i];
      }
      if (x.requires_grad) {
        std::vector<T> wT(d.patch * d.coutg);
        detail::transpose_copy(d.coutg, d.patch,
                               kernel.ptr() + (int64_t)g * d.coutg * d.patch, wT.data());
        std::vector<T> gcol(d.patch * ohw, T(0));
        detail::gemm_nn(d.patch, ohw, (int64_t)d.coutg, wT.data(), gout, gcol.data(), false);
        detail::col2im_group(gcol.data(), d, g, x.gptr());
      }
    }
    if (bias.defined() && bias.requires_grad)
      for (int c = 0; c < d.cout; ++c) {
        const T* oc = out.gptr() + (int64_t)c * ohw;
        T s = 0;
        for (int64_t i = 0; i < ohw; ++i) s += oc[i];
        bias.gptr()[c] += s;
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

namespace detail {

struct LerpTap {
  int i0, i1;
  double w;  // weight of i1
};

// Source taps for 2x bilinear upsampling without corner alignment:
// src = (dst + 0.5) / 2 - 0.5, borders replicated.
inline std::vector<LerpTap> up2_taps(int in_size) {
  std::vector<LerpTap> taps(2 * (size_t)in_size);
  for (int o = 0; o < 2 * in_size; ++o) {
    const double src = (o + 0.5) / 2.0 - 0.5;
    int i0 = (int)std::floor(src);
    double w = src - i0;
    int i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 > in_size - 1) i1 = in_size - 1;
    taps[(size_t)o] = {i0, i1, w};
  }
  return taps;
}

}  // namespace detail

// Doubles H and W with bilinear interpolation (align-corners disabled).
// Computed in lerp form so constant inputs are preserved exactly.
template <class T>
Tensor<T> up2_bilinear(Tensor<T> x) {
  if (x.ndim() != 3) throw TensorError("up2_bilinear needs C x H x W");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = detail::up2_taps(h), tx = detail::up2_taps(w);
  Tensor<T> out = Tensor<T>::zeros({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x.ptr() + (int64_t)ch * h * w;
    T* oc = out.ptr() + (int64_t)ch * 4 * h * w;
    for (int oy = 0; oy < 2 * h; ++oy) {
      const auto& y = ty[(size_t)oy];
      const T* r0 = xc + (int64_t)y.i0 * w;
      const T* r1 = xc + (int64_t)y.i1 * w;
      T* orow = oc + (int64_t)oy * 2 * w;
      for (int ox = 0; ox < 2 * w; ++ox) {
        const auto& t = tx[(size_t)ox];
        const T top = r0[t.i0] + T(t.w) * (r0[t.i1] - r0[t.i0]);
        const T bot = r1[t.i0] + T(t.w) * (r1[t.i1] - r1[t.i0]);
        orow[ox] = top + T(y.w) * (bot - top);
      }
    }
  }
  detail::check_finite(out, "up2_bilinear");
  detail::record_op(out, x.requires_grad, [x, out, c, h, w, ty, tx]() mutable {
    for (int ch = 0; ch < c; ++ch) {
      T* gx = x.gptr() + (int64_t)ch * h * w;
      const T* go = out.gptr() + (int64_t)ch * 4 * h * w;
      for (int oy = 0; oy < 2 * h; ++oy) {
        const auto& y = ty[(size_t)oy];
        for (int ox = 0; ox < 2 * w; ++ox) {
          const auto& t = tx[(size_t)ox];
          const T g = go[(int64_t)oy * 2 * w + ox];
          const T wy1 = T(y.w), wy0 = T(1) - wy1;
          const T wx1 = T(t.w), wx0 = T(1) - wx1;
          gx[(int64_t)y.i0 * w + t.i0] += g * wy0 * wx0;
          gx[(int64_t)y.i0 * w + t.i1] += g * wy0 * wx1;
          gx[(int64_t)y.i1 * w + t.i0] += g * wy1 * wx0;
          gx[(int64_t)y.i1 * w + t.i1] += g * wy1 * wx1;
        }
      }
    }
  });
  return out;
}

// Halves H and W by 2x2 mean; requires even spatial dims.
template <class T>
Tensor<T> pool2_avg(Tensor<T> x) {
  if (x.ndim() != 3) throw TensorError("pool2_avg needs C x H x W");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw TensorError("pool2_avg requires even spatial dims, got " + shape_str(x.shape));
  Tensor<T> out = Tensor<T>::zeros({c, h / 2, w / 2});
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x.ptr() + (int64_t)ch * h * w;
    T* oc = out.ptr() + (int64_t)ch * (h / 2) * (w / 2);
    for (int i = 0; i < h / 2; ++i)
      for (int j = 0; j < w / 2; ++j) {
        const T* p = xc + (int64_t)(2 * i) * w + 2 * j;
        oc[(int64_t)i * (w / 2) + j] = (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
      }
  }
  detail::check_finite(out, "pool2_avg");
  detail::record_op(out, x.requires_grad, [x, out, c, h, w]() mutable {
    for (int ch = 0; ch < c; ++ch) {
      T* gx = x.gptr() + (int64_t)ch * h * w;
      const T* go = out.gptr() + (int64_t)ch * (h / 2) * (w / 2);
      for (int i = 0; i < h / 2; ++i)
        for (int j = 0; j < w / 2; ++j) {
          const T g = go[(int64_t)i * (w / 2) + j] * T(0.25);
          T* p = gx + (int64_t)(2 * i) * w + 2 * j;
          p[0] += g;
          p[1] += g;
          p[w] += g;
          p[w + 1] += g;
        }
    }
  });
  return out;
}

// Repeated 2x upsampling until the target size is reached (power-of-two ratio).
template <class T>
Tensor<T> upsample_to(Tensor<T> x, int target_h, int target_w) {
  while (x.dim(1) < target_h || x.dim(2) < target_w) x = up2_bilinear(x);
  if (x.dim(1) != target_h || x.dim(2) != target_w)
    throw TensorError("upsample_to: size " + shape_str(x.shape) + " cannot reach " +
                      std::to_string(target_h) + "x" + std::to_string(target_w));
  return x;
}

// ---------------------------------------------------------------------------
// Central differences (clamped borders)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> central_diff(Tensor<T> x, bool horizontal) {
  if (x.ndim() != 3) throw TensorError("central_diff needs C x H x W");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x.ptr() + (int64_t)ch * h * w;
    T* oc = out.ptr() + (int64_t)ch * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        int ia = i, ib = i, ja = j, jb = j;
        if (horizontal) {
          ja = std::max(0, j - 1);
          jb = std::min(w - 1, j + 1);
        } else {
          ia = std::max(0, i - 1);
          ib = std::min(h - 1, i + 1);
        }
        oc[(int64_t)i * w + j] =
            (xc[(int64_t)ib * w + jb] - xc[(int64_t)ia * w + ja]) * T(0.5);
      }
  }
  check_finite(out, "central_diff");
  record_op(out, x.requires_grad, [x, out, c, h, w, horizontal]() mutable {
    for (int ch = 0; ch < c; ++ch) {
      T* gx = x.gptr() + (int64_t)ch * h * w;
      const T* go = out.gptr() + (int64_t)ch * h * w;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const T g = go[(int64_t)i * w + j] * T(0.5);
          int ia = i, ib = i, ja = j, jb = j;
          if (horizontal) {
            ja = std::max(0, j - 1);
            jb = std::min(w - 1, j + 1);
          } else {
            ia = std::max(0, i - 1);
            ib = std::min(h - 1, i + 1);
          }
          gx[(int64_t)ib * w + jb] += g;
          gx[(int64_t)ia * w + ja] -= g;
        }
    }
  });
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> central_diff_x(Tensor<T> x) {
  return detail::central_diff(x, true);
}

template <class T>
Tensor<T> central_diff_y(Tensor<T> x) {
  return detail::central_diff(x, false);
}

// Spec-facing resampling entry point.
enum class ResampleMode { up2_bilinear, pool2_avg };

template <class T>
Tensor<T> resample(Tensor<T> x, ResampleMode mode) {
  return mode == ResampleMode::up2_bilinear ? up2_bilinear(x) : pool2_avg(x);
}

}  // namespace m2hx
