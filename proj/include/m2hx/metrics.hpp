// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>

#include "m2hx/tensor.hpp"

namespace m2hx {

struct EvalReport {
  double miou = 0;
  std::vector<double> per_class_iou;
  double depth_rmse = 0;
  double normal_mean_deg = 0;
  double normal_median_deg = 0;
  double edge_f1 = 0;
  int frames = 0;

  std::string to_kv_block() const {
    std::ostringstream os;
    os << "frames=" << frames << "\n";
    os << "miou=" << miou << "\n";
    for (size_t c = 0; c < per_class_iou.size(); ++c)
      os << "iou.class" << c << "=" << per_class_iou[c] << "\n";
    os << "depth_rmse=" << depth_rmse << "\n";
    os << "normal_mean_deg=" << normal_mean_deg << "\n";
    os << "normal_median_deg=" << normal_median_deg << "\n";
    os << "edge_f1=" << edge_f1 << "\n";
    return os.str();
  }
};

// Dataset-level confusion accumulation; classes absent from both prediction
// and ground truth are excluded from the mean.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int k = 0) : k_(k), counts_((size_t)k * k, 0) {}

  template <class T>
  void add(const Tensor<T>& pred_labels, const Tensor<T>& gt_labels, int ignore = 255) {
    if (pred_labels.shape != gt_labels.shape)
      throw TensorError("miou: prediction/target shape mismatch");
    const int64_t n = pred_labels.numel();
    for (int64_t i = 0; i < n; ++i) {
      const int g = (int)std::lround((double)gt_labels.ptr()[i]);
      if (g == ignore) continue;
      const int p = (int)std::lround((double)pred_labels.ptr()[i]);
      if (g < 0 || g >= k_ || p < 0 || p >= k_)
        throw TensorError("miou: label out of range");
      ++counts_[(size_t)(g * k_ + p)];
      ++valid_;
    }
  }

  int64_t valid_pixels() const { return valid_; }

  std::pair<double, std::vector<double>> miou() const {
    if (valid_ == 0) throw TensorError("miou: empty valid pixel set");
    std::vector<double> per(k_, 0.0);
    double sum = 0;
    int present = 0;
    for (int c = 0; c < k_; ++c) {
      int64_t inter = counts_[(size_t)(c * k_ + c)];
      int64_t row = 0, col = 0;
      for (int j = 0; j < k_; ++j) {
        row += counts_[(size_t)(c * k_ + j)];
        col += counts_[(size_t)(j * k_ + c)];
      }
      const int64_t uni = row + col - inter;
      if (uni == 0) {
        per[(size_t)c] = std::numeric_limits<double>::quiet_NaN();  // absent class
        continue;
      }
      per[(size_t)c] = (double)inter / (double)uni;
      sum += per[(size_t)c];
      ++present;
    }
    return {present ? sum / present : 0.0, per};
  }

  void merge(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw TensorError("miou: merge arity mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    valid_ += o.valid_;
  }

 private:
  int k_;
  std::vector<int64_t> counts_;
  int64_t valid_ = 0;
};

template <class T>
std::pair<double, std::vector<double>> miou(const Tensor<T>& pred, const Tensor<T>& gt, int k,
                                            int ignore = 255) {
  ConfusionMatrix cm(k);
  cm.add(pred, gt, ignore);
  return cm.miou();
}

// RMSE in meters over the valid mask (pass an empty tensor for all-valid).
template <class T>
double depth_rmse(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask = {}) {
  if (pred.shape != gt.shape) throw TensorError("depth_rmse: shape mismatch");
  double s = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if (mask.defined() && mask.ptr()[i] == T(0)) continue;
    const double d = (double)pred.ptr()[i] - (double)gt.ptr()[i];
    s += d * d;
    ++n;
  }
  if (n == 0) throw TensorError("depth_rmse: empty mask");
  return std::sqrt(s / (double)n);
}

struct AngleStats {
  double mean_deg = 0;
  double median_deg = 0;
};

// Per-pixel angular error between unit normal fields, in degrees.
template <class T>
void normal_angles(const Tensor<T>& pred, const Tensor<T>& gt, std::vector<double>& out) {
  if (pred.shape != gt.shape || pred.ndim() != 3 || pred.dim(0) != 3)
    throw TensorError("normal_angle: expected matching 3 x H x W fields");
  const int64_t hw = (int64_t)pred.dim(1) * pred.dim(2);
  for (int64_t i = 0; i < hw; ++i) {
    double d = 0;
    for (int c = 0; c < 3; ++c) d += (double)pred.ptr()[c * hw + i] * (double)gt.ptr()[c * hw + i];
    d = std::clamp(d, -1.0, 1.0);
    out.push_back(std::acos(d) * 180.0 / 3.14159265358979323846);
  }
}

inline AngleStats angle_stats(std::vector<double> angles) {
  AngleStats st;
  if (angles.empty()) return st;
  double s = 0;
  for (double a : angles) s += a;
  st.mean_deg = s / (double)angles.size();
  const size_t mid = angles.size() / 2;
  std::nth_element(angles.begin(), angles.begin() + (long)mid, angles.end());
  st.median_deg = angles[mid];
  return st;
}

template <class T>
AngleStats normal_angle(const Tensor<T>& pred, const Tensor<T>& gt) {
  std::vector<double> angles;
  normal_angles(pred, gt, angles);
  return angle_stats(std::move(angles));
}

struct F1Accum {
  int64_t tp = 0, fp = 0, fn = 0;

  double f1() const {
    const double denom = 2.0 * (double)tp + (double)fp + (double)fn;
    return denom == 0 ? 1.0 : 2.0 * (double)tp / denom;
  }
};

template <class T>
void edge_f1_accumulate(const Tensor<T>& pred_prob, const Tensor<T>& gt, T threshold,
                        F1Accum& acc) {
  if (pred_prob.shape != gt.shape) throw TensorError("edge_f1: shape mismatch");
  if (!(threshold > T(0) && threshold < T(1)))
    throw TensorError("edge_f1: threshold must lie in (0,1)");
  for (int64_t i = 0; i < pred_prob.numel(); ++i) {
    const bool p = pred_prob.ptr()[i] >= threshold;
    const bool g = gt.ptr()[i] >= T(0.5);
    if (p && g)
      ++acc.tp;
    else if (p && !g)
      ++acc.fp;
    else if (!p && g)
      ++acc.fn;
  }
}

template <class T>
double edge_f1(const Tensor<T>& pred_prob, const Tensor<T>& gt, T threshold = T(0.5)) {
  F1Accum acc;
  edge_f1_accumulate(pred_prob, gt, threshold, acc);
  return acc.f1();
}

// ---------------------------------------------------------------------------
// Parameter / MAC accounting
// ---------------------------------------------------------------------------

struct ProfileReport {
  int64_t total_params = 0;
  int64_t trainable_params = 0;
  int64_t lora_params = 0;
  int64_t macs = 0;  // multiply-accumulate estimate per forward

  std::string to_kv_block() const {
    std::ostringstream os;
    os << "params.total=" << total_params << "\n";
    os << "params.trainable=" << trainable_params << "\n";
    os << "params.lora=" << lora_params << "\n";
    os << "macs.forward=" << macs << "\n";
    return os.str();
  }
};

inline int64_t conv_macs(int kh, int kw, int cin, int cout, int groups, int ho, int wo) {
  return (int64_t)kh * kw * (cin / groups) * cout * ho * wo;
}

inline int64_t linear_macs(int64_t d_in, int64_t d_out, int64_t tokens) {
  return d_in * d_out * tokens;
}

// Estimate: ~6 ops per (token, channel, state) element covers the step-size
// application, state update, and readout.
inline int64_t scan_macs(int64_t tokens, int64_t channels, int64_t state) {
  return tokens * channels * state * 6;
}

}  // namespace m2hx
