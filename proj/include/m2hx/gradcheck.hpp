// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/tensor.hpp"

namespace m2hx {

// Compares the taped gradient of a deterministic scalar function against
// central finite differences. Returns
//   max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
// `f` must map the checked tensor to a scalar tensor; every other input it
// captures is held fixed.
template <class T, class F>
T grad_check(F&& f, Tensor<T> x, T eps = T(1e-5)) {
  if (!(eps >= T(1e-7) && eps <= T(1e-3)))
    throw TensorError("grad_check: eps must lie in [1e-7, 1e-3]");
  std::vector<T> analytic(x.numel());
  {
    Tensor<T> probe = x.clone();
    probe.enable_grad();
    Tape<T> tape;
    Tensor<T> y = f(probe);
    if (y.numel() != 1) throw TensorError("grad_check: f must return a scalar");
    if (!y.requires_grad) {
      // f ignores x entirely; the true gradient is zero everywhere
      std::fill(analytic.begin(), analytic.end(), T(0));
    } else {
      tape.backward(y);
      analytic.assign(probe.grad->begin(), probe.grad->end());
    }
  }
  T max_err = 0;
  {
    NoGrad ng;
    Tensor<T> probe = x.clone();
    for (int64_t i = 0; i < probe.numel(); ++i) {
      const T saved = probe.ptr()[i];
      probe.ptr()[i] = saved + eps;
      const T fp = f(probe).scalar();
      probe.ptr()[i] = saved - eps;
      const T fm = f(probe).scalar();
      probe.ptr()[i] = saved;
      const T numeric = (fp - fm) / (2 * eps);
      const T err = std::abs(analytic[(size_t)i] - numeric) /
                    std::max(T(1), std::abs(analytic[(size_t)i]));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace m2hx
