// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/heads.hpp"
#include "m2hx/image.hpp"

namespace m2hx {

inline constexpr int kIgnoreLabel = 255;

// Mean pixel cross-entropy over valid pixels. Labels are carried as float
// values (the tensor container has no integer dtype); values are rounded.
template <class T>
Tensor<T> cross_entropy_loss(Tensor<T> logits, Tensor<T> labels, int ignore = kIgnoreLabel) {
  if (logits.ndim() != 3) throw TensorError("cross_entropy: logits must be K x H x W");
  const int k = logits.dim(0);
  const int64_t hw = (int64_t)logits.dim(1) * logits.dim(2);
  if (labels.numel() != hw) throw TensorError("cross_entropy: label count mismatch");
  auto lab = std::make_shared<std::vector<int>>(hw);
  int64_t valid = 0;
  for (int64_t i = 0; i < hw; ++i) {
    const int v = (int)std::lround((double)labels.ptr()[i]);
    (*lab)[(size_t)i] = v;
    if (v != ignore) {
      if (v < 0 || v >= k) throw TensorError("cross_entropy: label out of range");
      ++valid;
    }
  }
  if (valid == 0) throw TensorError("cross_entropy: all pixels ignored");
  // cache softmax for the backward pass
  auto probs = std::make_shared<std::vector<T>>((size_t)(k * hw));
  T loss = 0;
  for (int64_t i = 0; i < hw; ++i) {
    T mx = logits.ptr()[i];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.ptr()[c * hw + i]);
    T z = 0;
    for (int c = 0; c < k; ++c) {
      const T e = std::exp(logits.ptr()[c * hw + i] - mx);
      (*probs)[(size_t)(c * hw + i)] = e;
      z += e;
    }
    for (int c = 0; c < k; ++c) (*probs)[(size_t)(c * hw + i)] /= z;
    const int y = (*lab)[(size_t)i];
    if (y != ignore) loss -= std::log((*probs)[(size_t)(y * hw + i)]);
  }
  Tensor<T> out = Tensor<T>::scalar_of(loss / T(valid));
  detail::check_finite(out, "cross_entropy");
  detail::record_op(out, logits.requires_grad, [logits, out, probs, lab, k, hw, valid,
                                                ignore]() mutable {
    const T g = (*out.grad)[0] / T(valid);
    for (int64_t i = 0; i < hw; ++i) {
      const int y = (*lab)[(size_t)i];
      if (y == ignore) continue;
      for (int c = 0; c < k; ++c)
        logits.gptr()[c * hw + i] +=
            g * ((*probs)[(size_t)(c * hw + i)] - (c == y ? T(1) : T(0)));
    }
  });
  return out;
}

// Binary cross-entropy from logits with a positive-class weight:
// mean( w+ * y * softplus(-z) + (1-y) * softplus(z) ).
template <class T>
Tensor<T> bce_logits_loss(Tensor<T> logits, Tensor<T> target, T pos_weight = T(1)) {
  detail::check_same_shape(logits, target, "bce");
  const int64_t n = logits.numel();
  auto sp = [](T v) { return v > T(30) ? v : std::log1p(std::exp(v)); };
  T loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T z = logits.ptr()[i], y = target.ptr()[i];
    loss += pos_weight * y * sp(-z) + (T(1) - y) * sp(z);
  }
  Tensor<T> out = Tensor<T>::scalar_of(loss / T(n));
  detail::check_finite(out, "bce");
  detail::record_op(out, logits.requires_grad, [logits, target, out, n, pos_weight]() mutable {
    const T g = (*out.grad)[0] / T(n);
    for (int64_t i = 0; i < n; ++i) {
      const T z = logits.ptr()[i], y = target.ptr()[i];
      const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
      logits.gptr()[i] += g * (pos_weight * y * (s - T(1)) + (T(1) - y) * s);
    }
  });
  return out;
}

template <class T>
Tensor<T> l1_loss(Tensor<T> pred, Tensor<T> gt) {
  return mean_all(abs(sub(pred, gt)));
}

// mean(1 - <pred, gt>) over pixels for unit fields (3 x H x W).
template <class T>
Tensor<T> cosine_loss(Tensor<T> pred, Tensor<T> gt) {
  detail::check_same_shape(pred, gt, "cosine_loss");
  const int64_t hw = (int64_t)pred.dim(1) * pred.dim(2);
  return add_scalar(scale(sum_all(mul(pred, gt)), T(-1) / T(hw)), T(1));
}

enum class LossKind { depth_l1, sem_ce, norm_cosine, edge_bce };

struct LossConfig {
  double aux_weight = 0.2;  // alpha for every aux scale and task
  double lambda_dn = 0.1;
  double lambda_se = 0.1;
  double edge_pos_weight = 5.0;

  void validate() const {
    if (aux_weight < 0 || lambda_dn < 0 || lambda_se < 0 || edge_pos_weight <= 0)
      throw TensorError("loss config: weights must be non-negative");
  }
};

// Dense targets for one frame; labels/edges/normals are constants.
template <class T>
struct Targets {
  Tensor<T> depth;    // H x W
  Tensor<T> labels;   // H x W float-coded class ids
  Tensor<T> normals;  // 3 x H x W unit
  Tensor<T> edges;    // H x W in {0,1}
};

namespace detail {

// Ground-truth downsampling for intermediate supervision: depth and edges
// by averaging, normals averaged then renormalized, labels by nearest.
template <class T>
Tensor<T> downsample_gt(Tensor<T> gt, int halvings, LossKind kind) {
  Tensor<T> cur = gt.ndim() == 2 ? gt.reshaped({1, gt.dim(0), gt.dim(1)}) : gt;
  for (int i = 0; i < halvings; ++i) {
    if (kind == LossKind::sem_ce) {
      const int c = cur.dim(0), h = cur.dim(1), w = cur.dim(2);
      Tensor<T> next = Tensor<T>::zeros({c, h / 2, w / 2});
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h / 2; ++y)
          for (int x = 0; x < w / 2; ++x)
            next.ptr()[(ch * (h / 2) + y) * (w / 2) + x] =
                cur.ptr()[((int64_t)ch * h + 2 * y) * w + 2 * x];
      cur = next;
    } else {
      cur = pool2_avg(cur);
    }
  }
  if (kind == LossKind::norm_cosine) cur = l2_normalize_channels(cur);
  return cur;
}

}  // namespace detail

template <class T>
Tensor<T> task_loss(Tensor<T> pred, Tensor<T> gt, LossKind kind, const LossConfig& cfg) {
  switch (kind) {
    case LossKind::depth_l1:
      return l1_loss(pred, gt);
    case LossKind::sem_ce:
      return cross_entropy_loss(pred, gt);
    case LossKind::norm_cosine:
      return cosine_loss(pred, gt);
    case LossKind::edge_bce:
      return bce_logits_loss(pred, gt, T(cfg.edge_pos_weight));
  }
  throw TensorError("task_loss: bad kind");
}

inline LossKind loss_kind_for(Task t) {
  switch (t) {
    case Task::depth: return LossKind::depth_l1;
    case Task::sem: return LossKind::sem_ce;
    case Task::norm: return LossKind::norm_cosine;
    case Task::edge: return LossKind::edge_bce;
  }
  throw TensorError("loss_kind_for: bad task");
}

// Weighted sum of per-scale losses against downsampled ground truth.
// aux preds live at scale k resolution (k halvings below... scale k=2 is one
// halving below full resolution at desk geometry, k=5 is four).
template <class T>
Tensor<T> aux_loss(const std::map<int, Tensor<T>>& aux_preds, Tensor<T> gt, LossKind kind,
                   const LossConfig& cfg, int full_h) {
  Tensor<T> total = Tensor<T>::scalar_of(T(0));
  if (cfg.aux_weight == 0) return total;
  for (const auto& [k, pred] : aux_preds) {
    const int h = pred.dim(pred.ndim() - 2);
    int halvings = 0;
    for (int s = h; s < full_h; s *= 2) ++halvings;
    Tensor<T> gt_k = detail::downsample_gt(gt, halvings, kind);
    Tensor<T> pred_shaped = pred;
    if (kind == LossKind::depth_l1 || kind == LossKind::edge_bce) {
      pred_shaped = pred.reshaped({pred.dim(pred.ndim() - 2), pred.dim(pred.ndim() - 1)});
      gt_k = gt_k.reshaped({gt_k.dim(1), gt_k.dim(2)});
    } else if (kind == LossKind::sem_ce) {
      gt_k = gt_k.reshaped({gt_k.dim(1), gt_k.dim(2)});
    }
    total = add(total, scale(task_loss(pred_shaped, gt_k, kind, cfg), T(cfg.aux_weight)));
  }
  return total;
}

template <class T>
struct ConsistencyOut {
  Tensor<T> weighted;  // lambda_dn * L_dn + lambda_se * L_se
  double dn = 0, se = 0;
};

// Depth-normal agreement (orthographic derivation via central differences)
// and edge/semantic-boundary agreement.
template <class T>
ConsistencyOut<T> consistency_losses(Tensor<T> depth, Tensor<T> normals, Tensor<T> edge_prob,
                                     Tensor<T> sem_logits, const LossConfig& cfg,
                                     bool dn_active, bool se_active) {
  ConsistencyOut<T> out;
  out.weighted = Tensor<T>::scalar_of(T(0));
  if (dn_active && cfg.lambda_dn > 0) {
    Tensor<T> d3 = depth.reshaped({1, depth.dim(0), depth.dim(1)});
    Tensor<T> gx = central_diff_x(d3), gy = central_diff_y(d3);
    Tensor<T> ones = Tensor<T>::full({1, depth.dim(0), depth.dim(1)}, T(1));
    Tensor<T> derived = l2_normalize_channels(concat_axis0<T>({neg(gx), neg(gy), ones}));
    Tensor<T> dn = cosine_loss(normals, derived);
    out.dn = (double)dn.scalar();
    out.weighted = add(out.weighted, scale(dn, T(cfg.lambda_dn)));
  }
  if (se_active && cfg.lambda_se > 0) {
    Tensor<T> p = softmax(sem_logits, 0);
    Tensor<T> gx = central_diff_x(p), gy = central_diff_y(p);
    Tensor<T> mag = sqrt(add_scalar(add(square(gx), square(gy)), T(1e-12)));
    Tensor<T> phi = clamp(channel_sum(mag), T(0), T(1));
    Tensor<T> se = mean_all(abs(sub(edge_prob.reshaped(phi.shape), phi)));
    out.se = (double)se.scalar();
    out.weighted = add(out.weighted, scale(se, T(cfg.lambda_se)));
  }
  return out;
}

// Homoscedastic balancing, parameterized by s_t = log sigma_t^2:
// sum_t( exp(-s_t) L_t / 2 + s_t / 2 ) + L_cons.
template <class T>
Tensor<T> total_loss(const std::map<Task, Tensor<T>>& task_losses,
                     const std::map<Task, Tensor<T>>& log_sigma2, Tensor<T> l_cons) {
  Tensor<T> total = l_cons;
  for (const auto& [t, lt] : task_losses) {
    auto it = log_sigma2.find(t);
    if (it == log_sigma2.end())
      throw TensorError("total_loss: missing uncertainty parameter for task " +
                        std::string(task_name(t)));
    const Tensor<T>& s = it->second;
    detail::check_finite(s, "uncertainty parameter");
    Tensor<T> term = add(scale(mul(exp(neg(s)), lt), T(0.5)), scale(s, T(0.5)));
    total = add(total, term);
  }
  return total;
}

// Scalar report of one step's loss parts; total must equal its own
// recomputation from the parts.
struct LossReport {
  std::map<Task, double> main, aux, sigma2;
  double cons_dn_weighted = 0, cons_se_weighted = 0;
  double total = 0;

  double recompute_total() const {
    double t = cons_dn_weighted + cons_se_weighted;
    for (const auto& [task, m] : main) {
      const double lt = m + (aux.count(task) ? aux.at(task) : 0.0);
      const double s2 = sigma2.at(task);
      t += lt / (2.0 * s2) + 0.5 * std::log(s2);
    }
    return t;
  }

  std::string to_kv_line(int step) const {
    std::ostringstream os;
    os << "step=" << step << " loss.total=" << total;
    for (const auto& [task, m] : main) {
      os << " loss." << task_name(task) << ".main=" << m;
      if (aux.count(task)) os << " loss." << task_name(task) << ".aux=" << aux.at(task);
      os << " sigma2." << task_name(task) << "=" << sigma2.at(task);
    }
    os << " cons.dn=" << cons_dn_weighted << " cons.se=" << cons_se_weighted;
    return os.str();
  }
};

}  // namespace m2hx
