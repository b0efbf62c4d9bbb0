// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/rgm.hpp"

namespace m2hx {

// Straight-line reference recurrence for the selective scan, written against
// plain arrays with no shared code path (no gemm, no tape). Used by the
// scan-oracle command and the acceptance suite.
inline std::vector<double> naive_selective_scan(
    int tl, int c, int n, const std::vector<double>& x, const std::vector<double>& wd_w,
    const std::vector<double>& wd_b, const std::vector<double>& wb_w,
    const std::vector<double>& wb_b, const std::vector<double>& wc_w,
    const std::vector<double>& wc_b, const std::vector<double>& a_log,
    const std::vector<double>& d_skip) {
  auto softplus = [](double v) { return v > 30 ? v : std::log1p(std::exp(v)); };
  std::vector<double> y((size_t)tl * c, 0.0);
  std::vector<double> h((size_t)c * n, 0.0);
  for (int t = 0; t < tl; ++t) {
    // per-token parameter maps
    std::vector<double> bt(n), ct(n), delta(c);
    for (int j = 0; j < n; ++j) {
      double sb = wb_b[(size_t)j], sc = wc_b[(size_t)j];
      for (int ch = 0; ch < c; ++ch) {
        sb += wb_w[(size_t)j * c + ch] * x[(size_t)t * c + ch];
        sc += wc_w[(size_t)j * c + ch] * x[(size_t)t * c + ch];
      }
      bt[(size_t)j] = sb;
      ct[(size_t)j] = sc;
    }
    for (int ch = 0; ch < c; ++ch) {
      double s = wd_b[(size_t)ch];
      for (int i = 0; i < c; ++i) s += wd_w[(size_t)ch * c + i] * x[(size_t)t * c + i];
      delta[(size_t)ch] = softplus(s);
    }
    for (int ch = 0; ch < c; ++ch) {
      const double xv = x[(size_t)t * c + ch];
      double acc = 0;
      for (int j = 0; j < n; ++j) {
        const double a = -std::exp(a_log[(size_t)ch * n + j]);
        const double abar = std::exp(delta[(size_t)ch] * a);
        h[(size_t)ch * n + j] = abar * h[(size_t)ch * n + j] + delta[(size_t)ch] * bt[(size_t)j] * xv;
        acc += ct[(size_t)j] * h[(size_t)ch * n + j];
      }
      y[(size_t)t * c + ch] = acc + d_skip[(size_t)ch] * xv;
    }
  }
  return y;
}

struct ScanOracleResult {
  int instances = 0;
  double max_abs_err = 0.0;
  bool causality_ok = true;
  int causality_checks = 0;
};

// Random-instance comparison of the taped scan against the naive recurrence,
// plus a causality perturbation check: tampering with inputs at positions
// >= t' must leave y_t for t < t' bitwise unchanged.
inline ScanOracleResult run_scan_oracle(int instances, uint64_t seed) {
  ScanOracleResult res;
  Rng rng(seed);
  using Td = Tensor<double>;
  for (int inst = 0; inst < instances; ++inst) {
    std::uniform_int_distribution<int> tdist(1, 64), cdist(1, 16), ndist(1, 8);
    const int tl = tdist(rng), c = cdist(rng), n = ndist(rng);
    ParamRegistry<double> reg(mix_seed(seed, (uint64_t)inst));
    SSMParams<double> p(reg, "ssm", c, n);
    Td x = randn<double>({tl, c}, rng);
    Td y = selective_scan(x, p);
    std::vector<double> want = naive_selective_scan(
        tl, c, n, *x.data, *p.wd_w.data, *p.wd_b.data, *p.wb_w.data, *p.wb_b.data, *p.wc_w.data,
        *p.wc_b.data, *p.a_log.data, *p.d_skip.data);
    for (int64_t i = 0; i < y.numel(); ++i)
      res.max_abs_err = std::max(res.max_abs_err, std::abs(y.ptr()[i] - want[(size_t)i]));
    if (tl > 1) {
      std::uniform_int_distribution<int> pdist(1, tl - 1);
      const int cut = pdist(rng);
      Td xp = x.clone();
      for (int t = cut; t < tl; ++t)
        for (int ch = 0; ch < c; ++ch)
          xp.ptr()[(int64_t)t * c + ch] += 1.0 + 0.5 * ch;
      Td yp = selective_scan(xp, p);
      for (int t = 0; t < cut; ++t)
        for (int ch = 0; ch < c; ++ch)
          if (yp.ptr()[(int64_t)t * c + ch] != y.ptr()[(int64_t)t * c + ch])
            res.causality_ok = false;
      ++res.causality_checks;
    }
    ++res.instances;
  }
  return res;
}

}  // namespace m2hx
