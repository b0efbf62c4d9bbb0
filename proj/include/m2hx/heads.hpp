// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/fusion.hpp"

namespace m2hx {

template <class T>
struct DepthBinConfig {
  int num_bins = 16;
  T d_min = T(0.1);
  T d_max = T(8.1);

  void validate() const {
    if (!(T(0) < d_min && d_min < d_max))
      throw TensorError("depth bins: require 0 < d_min < d_max (d_min=" +
                        std::to_string((double)d_min) + ", d_max=" +
                        std::to_string((double)d_max) + ")");
    if (num_bins < 2) throw TensorError("depth bins: num_bins must be >= 2");
  }
};

struct HeadsConfig {
  int num_bins = 16;
  double d_min = 0.1;
  double d_max = 8.1;
  int num_classes = 4;
};

// Per-pixel L2 normalization along the channel axis (3 x H x W fields).
template <class T>
Tensor<T> l2_normalize_channels(Tensor<T> v, T eps = T(1e-6)) {
  Tensor<T> norm2 = add_scalar(channel_sum(square(v)), eps * eps);
  return mul_channel_map(v, rsqrt(norm2));
}

template <class T>
struct DepthHeadOut {
  Tensor<T> depth;       // full-resolution H x W metric depth (clamped)
  Tensor<T> d_center;    // D_c at head resolution, 1 x h x w
  Tensor<T> d_hat;       // D_c + residual, pre-clamp, 1 x h x w
  Tensor<T> widths;      // w, num_bins
  Tensor<T> edges;       // e_1..e_Nb
  Tensor<T> centers;     // c_1..c_Nb
  Tensor<T> probs;       // p_b, num_bins x h x w
};

// Adaptive-bin depth head with residual refinement: image-level bin widths
// from pooled features, per-pixel bin probabilities, expectation over bin
// centers, plus a zero-initialized residual. The estimate is clamped to
// [d_min/2, 2*d_max] for loss stability; d_hat carries the pre-clamp value.
template <class T>
struct DepthHead {
  DepthBinConfig<T> cfg;
  Tensor<T> ww_w, ww_b;  // width logits from GAP features
  Tensor<T> wb_w, wb_b;  // per-pixel bin logits (1x1)
  Tensor<T> wo_w, wo_b;  // residual (1x1), zero-initialized
  Tensor<T> cum_lower, cum_center;  // constant cumulative-sum matrices

  DepthHead() = default;

  DepthHead(ParamRegistry<T>& reg, const std::string& prefix, int c, const DepthBinConfig<T>& bc)
      : cfg(bc) {
    cfg.validate();
    const int nb = cfg.num_bins;
    ww_w = reg.param(prefix + ".widths.w", {nb, c}, Init<T>::gaussian(T(1) / std::sqrt(T(c))));
    ww_b = reg.param(prefix + ".widths.b", {nb}, Init<T>::zeros(), true, true);
    wb_w = reg.param(prefix + ".bins.w", {nb, c, 1, 1}, Init<T>::gaussian(T(1) / std::sqrt(T(c))));
    wb_b = reg.param(prefix + ".bins.b", {nb}, Init<T>::zeros(), true, true);
    wo_w = reg.param(prefix + ".residual.w", {1, c, 1, 1}, Init<T>::zeros());
    wo_b = reg.param(prefix + ".residual.b", {1}, Init<T>::zeros(), true, true);
    // e_i = d_min + span * sum_{j<=i} w_j ; c_i = d_min + span * (sum_{j<i} w_j + w_i/2)
    cum_lower = Tensor<T>::zeros({nb, nb});
    cum_center = Tensor<T>::zeros({nb, nb});
    for (int i = 0; i < nb; ++i)
      for (int j = 0; j <= i; ++j) {
        cum_lower.ptr()[i * nb + j] = T(1);
        cum_center.ptr()[i * nb + j] = (j == i) ? T(0.5) : T(1);
      }
  }

  DepthHeadOut<T> forward(Tensor<T> h, int out_h, int out_w) const {
    const int nb = cfg.num_bins;
    const T span = cfg.d_max - cfg.d_min;
    DepthHeadOut<T> out;
    Tensor<T> gap = spatial_mean(h).reshaped({1, h.dim(0)});
    out.widths = softmax(linear(gap, ww_w, ww_b), 1).reshaped({nb});
    Tensor<T> wcol = out.widths.reshaped({nb, 1});
    out.edges = add_scalar(scale(matmul(cum_lower, wcol), span), cfg.d_min).reshaped({nb});
    out.centers = add_scalar(scale(matmul(cum_center, wcol), span), cfg.d_min).reshaped({nb});
    out.probs = softmax(conv2d(h, wb_w, wb_b, 1, 1), 0);
    const int hh = h.dim(1), wwd = h.dim(2);
    Tensor<T> dc = matmul(out.centers.reshaped({1, nb}), out.probs.reshaped({nb, hh * wwd}));
    out.d_center = dc.reshaped({1, hh, wwd});
    out.d_hat = add(out.d_center, conv2d(h, wo_w, wo_b, 1, 1));
    Tensor<T> clamped = clamp(out.d_hat, cfg.d_min / T(2), T(2) * cfg.d_max);
    out.depth = upsample_to(clamped, out_h, out_w).reshaped({out_h, out_w});
    return out;
  }
};

// Conv3x3 -> GELU -> Conv1x1 head recipe shared by the dense heads.
template <class T>
struct ConvHead {
  Tensor<T> w1, b1, w2, b2;

  ConvHead() = default;

  ConvHead(ParamRegistry<T>& reg, const std::string& prefix, int c, int out_ch) {
    w1 = reg.param(prefix + ".conv1.w", {c, c, 3, 3}, Init<T>::gaussian(T(1) / std::sqrt(T(9 * c))));
    b1 = reg.param(prefix + ".conv1.b", {c}, Init<T>::zeros(), true, true);
    w2 = reg.param(prefix + ".conv2.w", {out_ch, c, 1, 1},
                   Init<T>::gaussian(T(1) / std::sqrt(T(c))));
    b2 = reg.param(prefix + ".conv2.b", {out_ch}, Init<T>::zeros(), true, true);
  }

  Tensor<T> forward(Tensor<T> h) const {
    return conv2d(gelu(conv2d(h, w1, b1, 1, 1)), w2, b2, 1, 1);
  }
};

// Dense predictions plus per-scale auxiliary predictions and the fusion
// diagnostics needed by the contract checks.
template <class T>
struct TaskBundle {
  std::map<Task, bool> present;
  Tensor<T> depth;       // H x W meters
  Tensor<T> sem_logits;  // K x H x W
  Tensor<T> normals;     // 3 x H x W, unit per pixel
  Tensor<T> edges;       // H x W in (0,1)
  Tensor<T> edge_logits; // H x W (pre-sigmoid, for the stable BCE path)
  DepthHeadOut<T> depth_diag;
  // aux[t][k]: channels-per-task map at scale k resolution (normals
  // normalized; sem/edge as logits; depth as raw regression)
  std::map<Task, std::map<int, Tensor<T>>> aux;
  std::map<Task, Tensor<T>> msca_attention;
  std::map<Task, std::map<Task, Tensor<T>>> ctm_modulation;

  void validate(T d_min, T d_max) const {
    if (present.count(Task::norm) && present.at(Task::norm)) {
      const int hw = normals.dim(1) * normals.dim(2);
      for (int i = 0; i < hw; ++i) {
        T n2 = 0;
        for (int c = 0; c < 3; ++c) {
          const T v = normals.ptr()[c * hw + i];
          n2 += v * v;
        }
        if (std::abs(std::sqrt(n2) - T(1)) > T(1e-5))
          throw TensorError("task bundle: normals not unit length");
      }
    }
    if (present.count(Task::edge) && present.at(Task::edge))
      for (int64_t i = 0; i < edges.numel(); ++i)
        if (!(edges.ptr()[i] > T(0) && edges.ptr()[i] < T(1)))
          throw TensorError("task bundle: edge probability outside (0,1)");
    if (present.count(Task::depth) && present.at(Task::depth)) {
      detail::check_finite(depth, "task bundle depth");
      for (int64_t i = 0; i < depth_diag.d_center.numel(); ++i)
        if (depth_diag.d_center.ptr()[i] < d_min - T(1e-9) ||
            depth_diag.d_center.ptr()[i] > d_max + T(1e-9))
          throw TensorError("task bundle: D_c outside [d_min, d_max]");
    }
  }
};

template <class T>
struct Heads {
  HeadsConfig cfg;
  TaskSet tasks;
  DepthHead<T> depth;
  ConvHead<T> sem, norm, edge;
  // independent lightweight 1x1 aux heads per task and scale
  std::map<Task, std::map<int, std::pair<Tensor<T>, Tensor<T>>>> aux;

  Heads() = default;

  Heads(ParamRegistry<T>& reg, const HeadsConfig& cfg_, const TaskSet& ts, int c)
      : cfg(cfg_), tasks(ts) {
    if (ts.is_active(Task::depth))
      depth = DepthHead<T>(reg, "heads.depth", c,
                           DepthBinConfig<T>{cfg.num_bins, T(cfg.d_min), T(cfg.d_max)});
    if (ts.is_active(Task::sem)) sem = ConvHead<T>(reg, "heads.sem", c, cfg.num_classes);
    if (ts.is_active(Task::norm)) norm = ConvHead<T>(reg, "heads.norm", c, 3);
    if (ts.is_active(Task::edge)) edge = ConvHead<T>(reg, "heads.edge", c, 1);
    for (Task t : ts.active) {
      const int out_ch = t == Task::sem ? cfg.num_classes : (t == Task::norm ? 3 : 1);
      for (int k : {5, 4, 3, 2}) {
        const std::string p = "heads.aux." + std::string(task_name(t)) + ".level" +
                              std::to_string(k);
        Tensor<T> w = reg.param(p + ".w", {out_ch, c, 1, 1},
                                Init<T>::gaussian(T(1) / std::sqrt(T(c))));
        Tensor<T> b = reg.param(p + ".b", {out_ch}, Init<T>::zeros(), true, true);
        aux[t][k] = {w, b};
      }
    }
  }

  TaskBundle<T> forward(const typename TaskFusion<T>::Output& fused, int out_h, int out_w) const {
    TaskBundle<T> bundle;
    for (Task t : tasks.active) bundle.present[t] = true;
    bundle.msca_attention = fused.msca_attention;
    bundle.ctm_modulation = fused.ctm_modulation;
    if (tasks.is_active(Task::depth)) {
      bundle.depth_diag = depth.forward(fused.refined.at(Task::depth), out_h, out_w);
      bundle.depth = bundle.depth_diag.depth;
    }
    if (tasks.is_active(Task::sem))
      bundle.sem_logits = upsample_to(sem.forward(fused.refined.at(Task::sem)), out_h, out_w);
    if (tasks.is_active(Task::norm)) {
      Tensor<T> raw = l2_normalize_channels(norm.forward(fused.refined.at(Task::norm)));
      bundle.normals = l2_normalize_channels(upsample_to(raw, out_h, out_w));
    }
    if (tasks.is_active(Task::edge)) {
      Tensor<T> logits = upsample_to(edge.forward(fused.refined.at(Task::edge)), out_h, out_w);
      bundle.edge_logits = logits.reshaped({out_h, out_w});
      bundle.edges = sigmoid(bundle.edge_logits);
    }
    for (Task t : tasks.active)
      for (int k : {5, 4, 3, 2}) {
        const auto& [w, b] = aux.at(t).at(k);
        Tensor<T> pred = conv2d(fused.fhat.at(t).at(k), w, b, 1, 1);
        if (t == Task::norm) pred = l2_normalize_channels(pred);
        bundle.aux[t][k] = pred;
      }
    return bundle;
  }
};

}  // namespace m2hx
