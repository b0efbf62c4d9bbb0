// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/rgm.hpp"

namespace m2hx {

enum class Task { depth, sem, norm, edge };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::depth: return "depth";
    case Task::sem: return "sem";
    case Task::norm: return "norm";
    case Task::edge: return "edge";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  if (s == "depth") return Task::depth;
  if (s == "sem") return Task::sem;
  if (s == "norm") return Task::norm;
  if (s == "edge") return Task::edge;
  throw TensorError("unknown task: " + s);
}

// Active tasks and the partner sets feeding cross-task mixing. Depth serves
// as a source for partners but its own head bypasses CTM/MSCA.
struct TaskSet {
  std::vector<Task> active;
  std::map<Task, std::vector<Task>> partners;

  static TaskSet make(std::vector<Task> active_tasks) {
    TaskSet ts;
    ts.active = std::move(active_tasks);
    const std::map<Task, std::vector<Task>> defaults = {
        {Task::sem, {Task::depth, Task::edge}},
        {Task::norm, {Task::depth}},
        {Task::edge, {Task::sem}},
        {Task::depth, {}},
    };
    for (Task t : ts.active) {
      std::vector<Task> ps;
      for (Task cand : defaults.at(t))
        if (cand != t && ts.is_active(cand)) ps.push_back(cand);
      ts.partners[t] = ps;
    }
    return ts;
  }

  bool is_active(Task t) const {
    for (Task a : active)
      if (a == t) return true;
    return false;
  }
};

struct FusionConfig {
  bool ctm_enabled = true;
  bool msca_enabled = true;
  int kappa = 7;
  int gn_groups = 8;
};

template <class T>
struct CtmResult {
  Tensor<T> u;
  std::map<Task, Tensor<T>> modulation;  // 1 + sigma(G_j(h^j)) per source
};

template <class T>
struct MscaResult {
  Tensor<T> refined;
  Tensor<T> attention;  // a, in (0,1) everywhere
};

// Per-task feature production: adaptor branches at every scale, cross-scale
// fusion, gated cross-task mixing, convolutional-attention refinement.
template <class T>
struct TaskFusion {
  FusionConfig cfg;
  TaskSet tasks;
  int width = 0;

  std::map<Task, std::map<int, ConvBlock<T>>> adaptors;       // B_{k,t}
  std::map<Task, std::pair<Tensor<T>, Tensor<T>>> proj_t;     // P_t (1x1)
  std::map<Task, std::pair<Tensor<T>, Tensor<T>>> ctm_pi;     // Pi_j per source
  std::map<Task, std::pair<Tensor<T>, Tensor<T>>> ctm_gate;   // G_j per source
  std::map<Task, std::pair<Tensor<T>, Tensor<T>>> ctm_fuse;   // per target
  struct MscaParams {
    Tensor<T> dw5_w, dw5_b, dwh_w, dwh_b, dwv_w, dwv_b, att_w, att_b;
  };
  std::map<Task, MscaParams> msca;

  TaskFusion() = default;

  TaskFusion(ParamRegistry<T>& reg, const FusionConfig& cfg_, const TaskSet& ts, int c)
      : cfg(cfg_), tasks(ts), width(c) {
    if (cfg.kappa % 2 == 0) throw TensorError("msca: kappa must be odd");
    auto conv1x1 = [&](const std::string& name, int cin, int cout) {
      Tensor<T> w = reg.param(name + ".w", {cout, cin, 1, 1},
                              Init<T>::gaussian(T(1) / std::sqrt(T(cin))));
      Tensor<T> b = reg.param(name + ".b", {cout}, Init<T>::zeros(), true, true);
      return std::make_pair(w, b);
    };
    for (Task t : tasks.active) {
      const std::string tn = task_name(t);
      for (int k : {5, 4, 3, 2})
        adaptors[t].emplace(k, ConvBlock<T>(reg, "fusion.adaptor." + tn + ".level" +
                                                     std::to_string(k),
                                            c, c, cfg.gn_groups));
      proj_t[t] = conv1x1("fusion.proj." + tn, c, c);
    }
    if (cfg.ctm_enabled) {
      // source projections are shared across targets; create one per task
      // that appears in some partner set
      for (Task t : tasks.active)
        for (Task j : tasks.partners.at(t))
          if (!ctm_pi.count(j)) {
            ctm_pi[j] = conv1x1("fusion.ctm.src." + std::string(task_name(j)) + ".pi", c, c);
            ctm_gate[j] = conv1x1("fusion.ctm.src." + std::string(task_name(j)) + ".gate", c, c);
          }
      for (Task t : tasks.active) {
        if (t == Task::depth) continue;  // depth bypasses CTM
        const int fan_in = c * (1 + (int)tasks.partners.at(t).size());
        ctm_fuse[t] = conv1x1("fusion.ctm.fuse." + std::string(task_name(t)), fan_in, c);
      }
    }
    if (cfg.msca_enabled) {
      for (Task t : tasks.active) {
        if (t == Task::depth) continue;  // depth bypasses MSCA
        const std::string p = "fusion.msca." + std::string(task_name(t));
        MscaParams m;
        m.dw5_w = reg.param(p + ".dw5.w", {c, 1, 5, 5}, Init<T>::gaussian(T(1) / T(5)));
        m.dw5_b = reg.param(p + ".dw5.b", {c}, Init<T>::zeros(), true, true);
        m.dwh_w = reg.param(p + ".dw1xk.w", {c, 1, 1, cfg.kappa},
                            Init<T>::gaussian(T(1) / std::sqrt(T(cfg.kappa))));
        m.dwh_b = reg.param(p + ".dw1xk.b", {c}, Init<T>::zeros(), true, true);
        m.dwv_w = reg.param(p + ".dwkx1.w", {c, 1, cfg.kappa, 1},
                            Init<T>::gaussian(T(1) / std::sqrt(T(cfg.kappa))));
        m.dwv_b = reg.param(p + ".dwkx1.b", {c}, Init<T>::zeros(), true, true);
        m.att_w = reg.param(p + ".att.w", {c, c, 1, 1}, Init<T>::gaussian(T(1) / std::sqrt(T(c))));
        m.att_b = reg.param(p + ".att.b", {c}, Init<T>::zeros(), true, true);
        msca[t] = m;
      }
    }
  }

  // f_{k,t} = B_{k,t}(s_k) + Up(f_{k+1,t}), accumulated top-down.
  std::map<int, Tensor<T>> task_adaptor(const DecoderState<T>& st, Task t) const {
    std::map<int, Tensor<T>> f;
    Tensor<T> above;
    for (int k : {5, 4, 3, 2}) {
      Tensor<T> bk = adaptors.at(t).at(k).forward(st.s.at(k));
      f[k] = above.defined() ? add(bk, up2_bilinear(above)) : bk;
      above = f[k];
    }
    return f;
  }

  struct FuseResult {
    std::map<int, Tensor<T>> fhat;
    Tensor<T> h;
  };

  // fhat_{k} = f_k + Up(fhat_{k+1}); h = P_t(fhat_2).
  FuseResult cross_scale_fuse(const std::map<int, Tensor<T>>& f, Task t) const {
    FuseResult res;
    Tensor<T> above;
    for (int k : {5, 4, 3, 2}) {
      res.fhat[k] = above.defined() ? add(f.at(k), up2_bilinear(above)) : f.at(k);
      above = res.fhat[k];
    }
    const auto& [w, b] = proj_t.at(t);
    res.h = conv2d(res.fhat[2], w, b, 1, 1);
    return res;
  }

  // u^t = Conv([h^t, {Pi_j(h^j) (.) (1 + sigma(G_j(h^j)))}]).
  CtmResult<T> ctm_mix(const std::map<Task, Tensor<T>>& h, Task t) const {
    CtmResult<T> res;
    const Tensor<T>& ht = h.at(t);
    std::vector<Tensor<T>> parts{ht};
    for (Task j : tasks.partners.at(t)) {
      const Tensor<T>& hj = h.at(j);
      if (hj.dim(1) != ht.dim(1) || hj.dim(2) != ht.dim(2))
        throw TensorError("ctm_mix: partner spatial size mismatch");
      const auto& [pw, pb] = ctm_pi.at(j);
      const auto& [gw, gb] = ctm_gate.at(j);
      Tensor<T> mod = add_scalar(sigmoid(conv2d(hj, gw, gb, 1, 1)), T(1));
      res.modulation[j] = mod;
      parts.push_back(mul(conv2d(hj, pw, pb, 1, 1), mod));
    }
    const auto& [fw, fb] = ctm_fuse.at(t);
    res.u = conv2d(concat_axis0(parts), fw, fb, 1, 1);
    return res;
  }

  // m0 = DW5x5(u); m1 = m0 + DW1xk(m0); m2 = m1 + DWkx1(m1);
  // a = sigma(W1x1 m2); out = u + a (.) u.
  MscaResult<T> msca_refine(Tensor<T> u, Task t) const {
    const auto& m = msca.at(t);
    const int c = u.dim(0);
    Tensor<T> m0 = conv2d(u, m.dw5_w, m.dw5_b, 1, c);
    Tensor<T> m1 = add(m0, conv2d(m0, m.dwh_w, m.dwh_b, 1, c));
    Tensor<T> m2 = add(m1, conv2d(m1, m.dwv_w, m.dwv_b, 1, c));
    MscaResult<T> res;
    res.attention = sigmoid(conv2d(m2, m.att_w, m.att_b, 1, 1));
    res.refined = add(u, mul(res.attention, u));
    return res;
  }

  struct Output {
    std::map<Task, Tensor<T>> refined;                    // h~^t at finest scale
    std::map<Task, std::map<int, Tensor<T>>> fhat;        // for aux heads
    std::map<Task, Tensor<T>> msca_attention;             // diagnostics
    std::map<Task, std::map<Task, Tensor<T>>> ctm_modulation;
  };

  Output forward(const DecoderState<T>& st) const {
    Output out;
    std::map<Task, Tensor<T>> h;
    for (Task t : tasks.active) {
      FuseResult fr = cross_scale_fuse(task_adaptor(st, t), t);
      h[t] = fr.h;
      out.fhat[t] = std::move(fr.fhat);
    }
    for (Task t : tasks.active) {
      if (t == Task::depth) {
        out.refined[t] = h[t];  // dedicated bin head, no CTM/MSCA
        continue;
      }
      Tensor<T> u = h[t];
      if (cfg.ctm_enabled) {
        CtmResult<T> cr = ctm_mix(h, t);
        u = cr.u;
        out.ctm_modulation[t] = std::move(cr.modulation);
      }
      if (cfg.msca_enabled) {
        MscaResult<T> mr = msca_refine(u, t);
        u = mr.refined;
        out.msca_attention[t] = mr.attention;
      }
      out.refined[t] = u;
    }
    return out;
  }
};

}  // namespace m2hx
