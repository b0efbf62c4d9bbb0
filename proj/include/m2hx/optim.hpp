// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/params.hpp"

namespace m2hx {

// Adaptive moment estimation with decoupled weight decay. Entries flagged
// no_decay (norm affines, gates, biases, uncertainty parameters) skip the
// decay term.
template <class T>
class AdamW {
 public:
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  explicit AdamW(ParamRegistry<T>& reg, double lr_ = 1e-3, double wd = 0.01)
      : lr(lr_), weight_decay(wd) {
    for (const auto& e : reg.entries()) {
      m_.emplace_back(e.trainable ? e.tensor.numel() : 0, T(0));
      v_.emplace_back(e.trainable ? e.tensor.numel() : 0, T(0));
    }
  }

  int64_t step_count() const { return t_; }

  void step(ParamRegistry<T>& reg, double lr_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, (double)t_);
    const double bc2 = 1.0 - std::pow(beta2, (double)t_);
    const double alpha = lr * lr_scale;
    auto& entries = reg.entries();
    for (size_t i = 0; i < entries.size(); ++i) {
      auto& e = entries[i];
      if (!e.trainable) continue;
      T* w = e.tensor.data->data();
      const T* g = e.tensor.grad->data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const double wd = e.no_decay ? 0.0 : weight_decay;
      const int64_t n = e.tensor.numel();
      for (int64_t j = 0; j < n; ++j) {
        m[j] = T(beta1) * m[j] + T(1 - beta1) * g[j];
        v[j] = T(beta2) * v[j] + T(1 - beta2) * g[j] * g[j];
        const double mhat = (double)m[j] / bc1;
        const double vhat = (double)v[j] / bc2;
        w[j] -= T(alpha * (mhat / (std::sqrt(vhat) + eps) + wd * (double)w[j]));
      }
    }
  }

  // Optimizer state as named tensors for exact-resume checkpoints.
  std::vector<std::pair<std::string, Tensor<T>>> state_tensors(
      const ParamRegistry<T>& reg) const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    const auto& entries = reg.entries();
    for (size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].trainable) continue;
      out.emplace_back("opt.m." + entries[i].name,
                       Tensor<T>::from({(int)m_[i].size()}, m_[i]));
      out.emplace_back("opt.v." + entries[i].name,
                       Tensor<T>::from({(int)v_[i].size()}, v_[i]));
    }
    out.emplace_back("opt.t", Tensor<T>::from({1}, {T(t_)}));
    return out;
  }

  void load_state(const ParamRegistry<T>& reg,
                  const std::map<std::string, Tensor<T>>& tensors) {
    const auto& entries = reg.entries();
    for (size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].trainable) continue;
      auto im = tensors.find("opt.m." + entries[i].name);
      auto iv = tensors.find("opt.v." + entries[i].name);
      if (im == tensors.end() || iv == tensors.end())
        throw TensorError("checkpoint missing optimizer state for " + entries[i].name);
      if (im->second.numel() != (int64_t)m_[i].size())
        throw TensorError("optimizer state size mismatch for " + entries[i].name);
      m_[i].assign(im->second.data->begin(), im->second.data->end());
      v_[i].assign(iv->second.data->begin(), iv->second.data->end());
    }
    auto it = tensors.find("opt.t");
    if (it == tensors.end()) throw TensorError("checkpoint missing optimizer step count");
    t_ = (int64_t)std::llround((double)it->second.scalar());
  }

 private:
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace m2hx
