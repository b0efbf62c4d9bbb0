// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>

#include "m2hx/tensor.hpp"

namespace m2hx {

using Rng = std::mt19937_64;

// Stable derived seed for (stream, index) pairs, e.g. per-frame or per-step.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <class T>
Tensor<T> randn(const Shape& s, Rng& rng, T stddev = T(1), T mean = T(0)) {
  Tensor<T> t = Tensor<T>::zeros(s);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : *t.data) v = mean + stddev * T(dist(rng));
  return t;
}

template <class T>
Tensor<T> rand_uniform(const Shape& s, Rng& rng, T lo = T(0), T hi = T(1)) {
  Tensor<T> t = Tensor<T>::zeros(s);
  std::uniform_real_distribution<double> dist((double)lo, (double)hi);
  for (auto& v : *t.data) v = T(dist(rng));
  return t;
}

}  // namespace m2hx
