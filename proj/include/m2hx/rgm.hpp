// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/pyramid.hpp"

namespace m2hx {

struct RgmConfig {
  bool enabled = true;
  bool register_feed = true;
  bool bidirectional = false;
  int state_size = 8;
  int ffn_ratio = 2;
};

namespace detail {

// Fused selective-scan step. Inputs per token t:
//   delta_t,c = softplus(dlin_t,c)          (input-dependent step size)
//   abar      = exp(delta_t,c * A_c)        (A_c = -exp(a_log_c), so abar in (0,1))
//   h_t,c     = abar (.) h_{t-1,c} + (delta_t,c * B_t) * x_t,c
//   y_t,c     = <C_t, h_t,c> + d_skip_c * x_t,c
// Forward states h are kept for the hand-written reverse sweep.
template <class T>
Tensor<T> scan_core(Tensor<T> x, Tensor<T> dlin, Tensor<T> bmat, Tensor<T> cmat,
                    Tensor<T> a_log, Tensor<T> d_skip) {
  const int tl = x.dim(0), c = x.dim(1), n = a_log.dim(1);
  if (tl < 1) throw TensorError("selective_scan: empty sequence");
  if (dlin.shape != x.shape || bmat.dim(0) != tl || cmat.dim(0) != tl || bmat.dim(1) != n ||
      cmat.dim(1) != n || a_log.dim(0) != c || d_skip.numel() != c)
    throw TensorError("selective_scan: parameter shape mismatch");
  Tensor<T> y = Tensor<T>::zeros(x.shape);
  auto hstore = std::make_shared<std::vector<T>>((size_t)tl * c * n);
  auto sp = [](T v) { return v > T(30) ? v : std::log1p(std::exp(v)); };
  auto sig = [](T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  };
  {
    std::vector<T> h((size_t)c * n, T(0));
    for (int t = 0; t < tl; ++t) {
      const T* bt = bmat.ptr() + (int64_t)t * n;
      const T* ct = cmat.ptr() + (int64_t)t * n;
      for (int ch = 0; ch < c; ++ch) {
        const T xv = x.ptr()[(int64_t)t * c + ch];
        const T delta = sp(dlin.ptr()[(int64_t)t * c + ch]);
        const T* arow = a_log.ptr() + (int64_t)ch * n;
        T* hrow = h.data() + (int64_t)ch * n;
        T acc = 0;
        for (int j = 0; j < n; ++j) {
          const T abar = std::exp(delta * (-std::exp(arow[j])));
          hrow[j] = abar * hrow[j] + delta * bt[j] * xv;
          acc += ct[j] * hrow[j];
        }
        y.ptr()[(int64_t)t * c + ch] = acc + d_skip.ptr()[ch] * xv;
        std::copy(hrow, hrow + n, hstore->data() + ((int64_t)t * c + ch) * n);
      }
    }
  }
  check_finite(y, "selective_scan");
  const bool rg = x.requires_grad || dlin.requires_grad || bmat.requires_grad ||
                  cmat.requires_grad || a_log.requires_grad || d_skip.requires_grad;
  record_op(y, rg, [x, dlin, bmat, cmat, a_log, d_skip, y, hstore, tl, c, n, sp, sig]() mutable {
    std::vector<T> carry((size_t)c * n, T(0));  // d(loss)/d(h_t) from steps > t
    for (int t = tl - 1; t >= 0; --t) {
      const T* bt = bmat.ptr() + (int64_t)t * n;
      const T* ct = cmat.ptr() + (int64_t)t * n;
      const T* gy = y.gptr() + (int64_t)t * c;
      for (int ch = 0; ch < c; ++ch) {
        const T xv = x.ptr()[(int64_t)t * c + ch];
        const T dl = dlin.ptr()[(int64_t)t * c + ch];
        const T delta = sp(dl);
        const T* arow = a_log.ptr() + (int64_t)ch * n;
        const T* hrow = hstore->data() + ((int64_t)t * c + ch) * n;
        const T* hprev = t > 0 ? hstore->data() + ((int64_t)(t - 1) * c + ch) * n : nullptr;
        T* cr = carry.data() + (int64_t)ch * n;
        const T g = gy[ch];
        if (d_skip.requires_grad) d_skip.gptr()[ch] += g * xv;
        T gx = d_skip.ptr()[ch] * g;
        T gdelta = 0;
        for (int j = 0; j < n; ++j) {
          const T a = -std::exp(arow[j]);
          const T abar = std::exp(delta * a);
          const T gh = g * ct[j] + cr[j];
          if (cmat.requires_grad) cmat.gptr()[(int64_t)t * n + j] += g * hrow[j];
          const T hp = hprev ? hprev[j] : T(0);
          const T gabar = gh * hp;
          gdelta += gh * bt[j] * xv + gabar * a * abar;
          if (bmat.requires_grad) bmat.gptr()[(int64_t)t * n + j] += gh * delta * xv;
          gx += gh * delta * bt[j];
          if (a_log.requires_grad)
            a_log.gptr()[(int64_t)ch * n + j] += gabar * delta * abar * a;
          cr[j] = gh * abar;  // flows into h_{t-1}
        }
        if (x.requires_grad) x.gptr()[(int64_t)t * c + ch] += gx;
        if (dlin.requires_grad) dlin.gptr()[(int64_t)t * c + ch] += gdelta * sig(dl);
      }
    }
  });
  return y;
}

}  // namespace detail

// Simplified selective state-space mixer: diagonal decay, input-dependent
// step/input/readout maps, learned skip.
template <class T>
struct SSMParams {
  Tensor<T> a_log;        // C x N, A = -exp(a_log) stays strictly negative
  Tensor<T> d_skip;       // C
  Tensor<T> wd_w, wd_b;   // C -> C step-size map
  Tensor<T> wb_w, wb_b;   // C -> N
  Tensor<T> wc_w, wc_b;   // C -> N
  int state_size = 8;

  SSMParams() = default;

  SSMParams(ParamRegistry<T>& reg, const std::string& prefix, int c, int n) {
    state_size = n;
    a_log = reg.param(prefix + ".a_log", {c, n},
                      Init<T>::index_fn([n](int64_t i) { return std::log(T(i % n + 1)); }),
                      true, true);
    d_skip = reg.param(prefix + ".d_skip", {c}, Init<T>::constant(1), true, true);
    wd_w = reg.param(prefix + ".w_delta.w", {c, c}, Init<T>::gaussian(T(1) / std::sqrt(T(c))));
    // softplus(-0.433) ~= 0.5: moderate initial step size
    wd_b = reg.param(prefix + ".w_delta.b", {c}, Init<T>::constant(T(-0.433)), true, true);
    wb_w = reg.param(prefix + ".w_b.w", {n, c}, Init<T>::gaussian(T(1) / std::sqrt(T(c))));
    wb_b = reg.param(prefix + ".w_b.b", {n}, Init<T>::zeros(), true, true);
    wc_w = reg.param(prefix + ".w_c.w", {n, c}, Init<T>::gaussian(T(1) / std::sqrt(T(c))));
    wc_b = reg.param(prefix + ".w_c.b", {n}, Init<T>::zeros(), true, true);
  }
};

// Causal scan over a token sequence (T x C). With `bidirectional`, a second
// pass runs over the reversed sequence and the outputs are summed.
template <class T>
Tensor<T> selective_scan(Tensor<T> x, const SSMParams<T>& p, bool bidirectional = false) {
  if (x.ndim() != 2 || x.dim(1) != p.wd_w.dim(1))
    throw TensorError("selective_scan: expected T x C tokens");
  Tensor<T> dlin = linear(x, p.wd_w, p.wd_b);
  Tensor<T> bmat = linear(x, p.wb_w, p.wb_b);
  Tensor<T> cmat = linear(x, p.wc_w, p.wc_b);
  Tensor<T> y = detail::scan_core(x, dlin, bmat, cmat, p.a_log, p.d_skip);
  if (bidirectional) {
    Tensor<T> yr = detail::scan_core(reverse_rows(x), reverse_rows(dlin), reverse_rows(bmat),
                                     reverse_rows(cmat), p.a_log, p.d_skip);
    y = add(y, reverse_rows(yr));
  }
  return y;
}

// g = sigma(A_k(r)) broadcast over all token positions.
template <class T>
Tensor<T> register_gate(Tensor<T> q, Tensor<T> r, Tensor<T> gate_w, Tensor<T> gate_b) {
  if (q.ndim() != 2 || r.numel() != q.dim(1))
    throw TensorError("register_gate: width mismatch");
  Tensor<T> logits = linear(r.reshaped({1, (int)r.numel()}), gate_w, gate_b);
  Tensor<T> g = sigmoid(logits).reshaped({gate_w.dim(0)});
  return mul_row_broadcast(q, g);
}

// One decoder scale: gate from the register vector, then Mamba and FFN
// branches with zero-initialized output projections (identity at init).
template <class T>
struct RgmLevel {
  bool register_feed = true;
  bool bidirectional = false;
  Tensor<T> gate_w, gate_b;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  SSMParams<T> ssm;
  Tensor<T> proj1_w, proj1_b;
  Tensor<T> ffn1_w, ffn1_b, ffn2_w, ffn2_b;
  Tensor<T> proj2_w, proj2_b;

  RgmLevel() = default;

  RgmLevel(ParamRegistry<T>& reg, const std::string& prefix, int c, const RgmConfig& cfg) {
    register_feed = cfg.register_feed;
    bidirectional = cfg.bidirectional;
    if (register_feed) {
      gate_w = reg.param(prefix + ".gate.w", {c, c}, Init<T>::gaussian(T(1) / std::sqrt(T(c))),
                         true, true);
      gate_b = reg.param(prefix + ".gate.b", {c}, Init<T>::zeros(), true, true);
    }
    ln1_g = reg.param(prefix + ".ln1.g", {c}, Init<T>::constant(1), true, true);
    ln1_b = reg.param(prefix + ".ln1.b", {c}, Init<T>::zeros(), true, true);
    ssm = SSMParams<T>(reg, prefix + ".ssm", c, cfg.state_size);
    proj1_w = reg.param(prefix + ".proj1.w", {c, c}, Init<T>::zeros());
    proj1_b = reg.param(prefix + ".proj1.b", {c}, Init<T>::zeros(), true, true);
    ln2_g = reg.param(prefix + ".ln2.g", {c}, Init<T>::constant(1), true, true);
    ln2_b = reg.param(prefix + ".ln2.b", {c}, Init<T>::zeros(), true, true);
    const int hidden = c * cfg.ffn_ratio;
    ffn1_w = reg.param(prefix + ".ffn.fc1.w", {hidden, c}, Init<T>::gaussian(T(1) / std::sqrt(T(c))));
    ffn1_b = reg.param(prefix + ".ffn.fc1.b", {hidden}, Init<T>::zeros(), true, true);
    ffn2_w = reg.param(prefix + ".ffn.fc2.w", {c, hidden},
                       Init<T>::gaussian(T(1) / std::sqrt(T(hidden))));
    ffn2_b = reg.param(prefix + ".ffn.fc2.b", {c}, Init<T>::zeros(), true, true);
    proj2_w = reg.param(prefix + ".proj2.w", {c, c}, Init<T>::zeros());
    proj2_b = reg.param(prefix + ".proj2.b", {c}, Init<T>::zeros(), true, true);
  }

  // x: C x H x W, r: register vector (ignored when register feed is off).
  Tensor<T> forward(Tensor<T> x, Tensor<T> r) const {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> q = flatten_tokens(x);  // row-major raster, HW x C
    Tensor<T> qbar = (register_feed && r.defined()) ? register_gate(q, r, gate_w, gate_b) : q;
    Tensor<T> m = selective_scan(layer_norm(qbar, ln1_g, ln1_b), ssm, bidirectional);
    Tensor<T> q1 = add(q, linear(m, proj1_w, proj1_b));
    Tensor<T> f = linear(gelu(linear(layer_norm(q1, ln2_g, ln2_b), ffn1_w, ffn1_b)), ffn2_w,
                         ffn2_b);
    Tensor<T> q2 = add(q1, linear(f, proj2_w, proj2_b));
    return transpose2d(q2).reshaped({c, h, w});
  }
};

// Shared decoder state s_k plus the blended inputs x_k (kept for the
// identity-at-init check).
template <class T>
struct DecoderState {
  std::map<int, Tensor<T>> s;
  std::map<int, Tensor<T>> x;
};

// Top-down register-gated decoder across scales 5 -> 2.
template <class T>
struct RgmDecoder {
  RgmConfig cfg;
  std::map<int, RgmLevel<T>> levels;

  RgmDecoder() = default;

  RgmDecoder(ParamRegistry<T>& reg, const RgmConfig& cfg_, int width) : cfg(cfg_) {
    if (cfg.enabled)
      for (int k : {5, 4, 3, 2})
        levels.emplace(k, RgmLevel<T>(reg, "rgm.level" + std::to_string(k), width, cfg));
  }

  DecoderState<T> decode(const FeaturePyramid<T>& p, Tensor<T> r) const {
    DecoderState<T> st;
    Tensor<T> above;
    for (int k : {5, 4, 3, 2}) {
      Tensor<T> xk = above.defined() ? add(p.levels.at(k), up2_bilinear(above)) : p.levels.at(k);
      Tensor<T> sk = cfg.enabled ? levels.at(k).forward(xk, r) : xk;
      st.x[k] = xk;
      st.s[k] = sk;
      above = sk;
    }
    return st;
  }
};

}  // namespace m2hx
