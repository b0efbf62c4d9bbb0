// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>

#include "m2hx/random.hpp"
#include "m2hx/tensor.hpp"

namespace m2hx {

// Parameter initializers, applied in registration order from the registry's
// own RNG so a given seed fixes every weight.
template <class T>
struct Init {
  enum class Kind { zeros, constant, gaussian, uniform, index_fn };
  Kind kind = Kind::zeros;
  T a = 0, b = 0;
  std::function<T(int64_t)> fn;

  static Init zeros() { return {}; }
  static Init constant(T v) { return {Kind::constant, v, 0, nullptr}; }
  static Init gaussian(T stddev) { return {Kind::gaussian, stddev, 0, nullptr}; }
  static Init uniform(T lo, T hi) { return {Kind::uniform, lo, hi, nullptr}; }
  static Init index_fn(std::function<T(int64_t)> f) {
    return {Kind::index_fn, 0, 0, std::move(f)};
  }
};

// Owns the named parameters of a model. Modules request tensors through
// param(); the registry initializes them (normal mode) or aliases the data
// buffers of another registry with fresh grad slots (replica mode), which is
// how worker threads share weights without racing on gradients.
template <class T>
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
    bool no_decay = false;
  };

  explicit ParamRegistry(uint64_t seed) : rng_(seed) {}

  static ParamRegistry replica_of(const ParamRegistry& source) {
    ParamRegistry r(0);
    r.source_ = &source;
    return r;
  }

  Tensor<T> param(const std::string& name, const Shape& shape, const Init<T>& init,
                  bool trainable = true, bool no_decay = false) {
    if (index_.count(name)) throw TensorError("duplicate parameter name: " + name);
    Tensor<T> t;
    if (source_) {
      const Entry& src = source_->find(name);
      if (src.tensor.shape != shape)
        throw TensorError("replica shape mismatch for " + name);
      t.shape = shape;
      t.data = src.tensor.data;                          // shared weights
      t.grad = std::make_shared<std::vector<T>>();       // private grads
      trainable = src.trainable;
      no_decay = src.no_decay;
    } else {
      t = Tensor<T>::zeros(shape);
      apply_init(t, init);
    }
    if (trainable) t.enable_grad();
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable, no_decay});
    return t;
  }

  const Entry& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw TensorError("unknown parameter: " + name);
    return entries_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  int64_t trainable_params() const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  void zero_grads() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

  Rng& rng() { return rng_; }

 private:
  void apply_init(Tensor<T>& t, const Init<T>& init) {
    using K = typename Init<T>::Kind;
    switch (init.kind) {
      case K::zeros:
        break;
      case K::constant:
        std::fill(t.data->begin(), t.data->end(), init.a);
        break;
      case K::gaussian: {
        std::normal_distribution<double> d(0.0, 1.0);
        for (auto& v : *t.data) v = init.a * T(d(rng_));
        break;
      }
      case K::uniform: {
        std::uniform_real_distribution<double> d((double)init.a, (double)init.b);
        for (auto& v : *t.data) v = T(d(rng_));
        break;
      }
      case K::index_fn:
        for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = init.fn(i);
        break;
    }
  }

  Rng rng_;
  const ParamRegistry* source_ = nullptr;
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

}  // namespace m2hx
