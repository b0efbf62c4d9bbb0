// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2hx {

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a forward operation produces NaN/Inf.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw TensorError("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

template <class T>
class Tape;

// Dense row-major tensor. Copies share the underlying buffers (cheap handle
// semantics); deep copies go through clone().
template <class T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  // Grad slot. The vector object is shared by every handle copy and stays
  // empty until enable_grad() sizes it, so a later enable is visible to
  // closures that captured the tensor earlier.
  std::shared_ptr<std::vector<T>> grad;
  bool requires_grad = false;
  int tape_id = -1;  // node index on the recording tape, -1 if none

  Tensor() = default;

  static Tensor zeros(const Shape& s) {
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<T>>(shape_numel(s), T(0));
    t.grad = std::make_shared<std::vector<T>>();
    return t;
  }

  static Tensor full(const Shape& s, T v) {
    Tensor t = zeros(s);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from(const Shape& s, std::vector<T> values) {
    if ((int64_t)values.size() != shape_numel(s))
      throw TensorError("value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.grad = std::make_shared<std::vector<T>>();
    return t;
  }

  static Tensor scalar_of(T v) { return full({1}, v); }

  int64_t numel() const { return data ? (int64_t)data->size() : 0; }
  int dim(int i) const { return shape[(size_t)i]; }
  int ndim() const { return (int)shape.size(); }
  bool defined() const { return (bool)data; }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T* gptr() { return grad->data(); }
  const T* gptr() const { return grad->data(); }

  T scalar() const {
    if (numel() != 1) throw TensorError("scalar() on tensor of shape " + shape_str(shape));
    return (*data)[0];
  }

  // Marks the tensor as a gradient sink and sizes its (zeroed) grad buffer.
  Tensor& enable_grad() {
    requires_grad = true;
    if (grad->size() != data->size()) grad->assign(data->size(), T(0));
    return *this;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  // Deep copy of values; grad state is not carried over.
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    t.grad = std::make_shared<std::vector<T>>();
    return t;
  }

  // Same data/grad buffers under a different shape.
  Tensor reshaped(const Shape& s) const {
    if (shape_numel(s) != numel())
      throw TensorError("reshape " + shape_str(shape) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape = s;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

namespace detail {

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  const T* p = t.ptr();
  const int64_t n = t.numel();
  bool ok = true;
  for (int64_t i = 0; i < n; ++i) ok &= (bool)std::isfinite(p[i]);
  if (!ok) throw NumericError(std::string("non-finite value produced by ") + op);
}

inline thread_local bool grad_suppressed = false;

}  // namespace detail

// Reverse-mode tape. Construction makes it the active tape of the current
// thread; destruction restores the previous one. Recording order is a
// topological order of the graph, so backward() is a reverse sweep.
template <class T>
class Tape {
 public:
  Tape() : prev_(active_ref()) { active_ref() = this; }
  ~Tape() { active_ref() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* recording() {
    return detail::grad_suppressed ? nullptr : active_ref();
  }

  int record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
    return (int)nodes_.size() - 1;
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = seed and propagates through the recorded graph.
  void backward(Tensor<T>& loss, T seed = T(1)) {
    if (loss.numel() != 1) throw TensorError("backward requires a scalar loss");
    if (!loss.requires_grad || loss.tape_id < 0 || loss.tape_id >= (int)nodes_.size())
      throw TensorError("loss is not a recorded node of this tape");
    if (consumed_) throw TensorError("tape already consumed; reset() before reuse");
    consumed_ = true;
    (*loss.grad)[0] += seed;
    for (int i = loss.tape_id; i >= 0; --i) nodes_[(size_t)i]();
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  static Tape*& active_ref() {
    static thread_local Tape* active = nullptr;
    return active;
  }
  Tape* prev_ = nullptr;
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// Disables recording within a scope (finite differences, evaluation).
struct NoGrad {
  NoGrad() : prev_(detail::grad_suppressed) { detail::grad_suppressed = true; }
  ~NoGrad() { detail::grad_suppressed = prev_; }

 private:
  bool prev_;
};

namespace detail {

// Registers `out` on the active tape when any input requires grad.
template <class T, class F>
inline void record_op(Tensor<T>& out, bool any_input_grad, F&& backward_fn) {
  Tape<T>* tape = Tape<T>::recording();
  if (!tape || !any_input_grad) return;
  out.enable_grad();
  out.tape_id = tape->record(std::forward<F>(backward_fn));
}

}  // namespace detail

}  // namespace m2hx
