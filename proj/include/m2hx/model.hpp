// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/config.hpp"
#include "m2hx/heads.hpp"
#include "m2hx/losses.hpp"
#include "m2hx/metrics.hpp"

namespace m2hx {

struct ModelConfig {
  BackboneConfig backbone;
  PyramidConfig pyramid;
  RgmConfig rgm;
  FusionConfig fusion;
  HeadsConfig heads;
  std::vector<Task> tasks{Task::depth, Task::sem, Task::norm, Task::edge};
  LossConfig loss;

  static ModelConfig from(const Config& c) {
    c.validate();
    ModelConfig m;
    m.backbone.image_size = c.geti("backbone.image_size");
    m.backbone.patch_size = c.geti("backbone.patch_size");
    m.backbone.embed_dim = c.geti("backbone.embed_dim");
    m.backbone.num_blocks = c.geti("backbone.num_blocks");
    m.backbone.num_heads = c.geti("backbone.num_heads");
    m.backbone.num_registers = c.geti("backbone.num_registers");
    m.backbone.tap_layers = c.get_int_list("backbone.tap_layers");
    m.backbone.lora_rank = c.geti("backbone.lora.rank");
    m.backbone.lora_alpha = c.getf("backbone.lora.alpha");
    m.backbone.lora_dropout = c.getf("backbone.lora.dropout");
    m.backbone.lora_blocks = c.geti("backbone.lora.blocks");
    m.pyramid.width = c.geti("pyramid.width");
    m.pyramid.gn_groups = c.geti("pyramid.gn_groups");
    m.rgm.enabled = c.getb("rgm.enabled");
    m.rgm.register_feed = c.getb("rgm.register_feed.enabled");
    m.rgm.bidirectional = c.getb("rgm.bidirectional");
    m.rgm.state_size = c.geti("rgm.state_size");
    m.rgm.ffn_ratio = c.geti("rgm.ffn_ratio");
    m.fusion.ctm_enabled = c.getb("ctm.enabled");
    m.fusion.msca_enabled = c.getb("msca.enabled");
    m.fusion.kappa = c.geti("msca.kappa");
    m.fusion.gn_groups = c.geti("pyramid.gn_groups");
    m.heads.num_bins = c.geti("heads.depth.num_bins");
    m.heads.d_min = c.getf("heads.depth.d_min");
    m.heads.d_max = c.getf("heads.depth.d_max");
    m.heads.num_classes = c.geti("heads.num_classes");
    m.tasks.clear();
    for (const std::string& t : c.get_str_list("train.tasks"))
      m.tasks.push_back(task_from_name(t));
    m.loss.aux_weight = c.getf("loss.aux_weight");
    m.loss.lambda_dn = c.getf("loss.lambda_dn");
    m.loss.lambda_se = c.getf("loss.lambda_se");
    m.loss.edge_pos_weight = c.getf("loss.edge_pos_weight");
    return m;
  }
};

// Full architecture: backbone taps -> pyramid -> register-gated decoder ->
// task fusion -> heads, plus the per-task uncertainty parameters.
template <class T>
struct Model {
  ModelConfig cfg;
  TaskSet tasks;
  Backbone<T> backbone;
  Pyramid<T> pyramid;
  RgmDecoder<T> decoder;
  TaskFusion<T> fusion;
  Heads<T> heads;
  std::map<Task, Tensor<T>> log_sigma2;

  Model(ParamRegistry<T>& reg, const ModelConfig& cfg_)
      : cfg(cfg_),
        tasks(TaskSet::make(cfg_.tasks)),
        backbone(reg, cfg_.backbone),
        pyramid(reg, cfg_.pyramid, cfg_.backbone.embed_dim),
        decoder(reg, cfg_.rgm, cfg_.pyramid.width),
        fusion(reg, cfg_.fusion, tasks, cfg_.pyramid.width),
        heads(reg, cfg_.heads, tasks, cfg_.pyramid.width) {
    for (Task t : tasks.active)
      log_sigma2[t] = reg.param("loss.uncertainty." + std::string(task_name(t)), {1},
                                Init<T>::zeros(), true, true);
  }

  TaskBundle<T> forward(Tensor<T> image, const RunCtx& ctx = {}) const {
    BackboneOutput<T> bb = backbone.forward(image, ctx);
    FeaturePyramid<T> pyr = pyramid.build(bb.taps);
    Tensor<T> reg_vec = pyramid.pool_registers(bb.registers);
    DecoderState<T> st = decoder.decode(pyr, reg_vec);
    typename TaskFusion<T>::Output fused = fusion.forward(st);
    return heads.forward(fused, cfg.backbone.image_size, cfg.backbone.image_size);
  }

  // Loss of one frame; also fills a scalar report.
  Tensor<T> compute_loss(const TaskBundle<T>& bundle, const Targets<T>& gt,
                         LossReport& report) const {
    std::map<Task, Tensor<T>> lt;
    const int full = cfg.backbone.image_size;
    for (Task t : tasks.active) {
      Tensor<T> main;
      switch (t) {
        case Task::depth: main = l1_loss(bundle.depth, gt.depth); break;
        case Task::sem: main = cross_entropy_loss(bundle.sem_logits, gt.labels); break;
        case Task::norm: main = cosine_loss(bundle.normals, gt.normals); break;
        case Task::edge:
          main = bce_logits_loss(bundle.edge_logits, gt.edges, T(cfg.loss.edge_pos_weight));
          break;
      }
      Tensor<T> gt_for_aux = t == Task::depth ? gt.depth
                             : t == Task::sem ? gt.labels
                             : t == Task::norm ? gt.normals
                                               : gt.edges;
      Tensor<T> aux = aux_loss(bundle.aux.at(t), gt_for_aux, loss_kind_for(t), cfg.loss, full);
      report.main[t] = (double)main.scalar();
      report.aux[t] = (double)aux.scalar();
      report.sigma2[t] = std::exp((double)log_sigma2.at(t).scalar());
      lt[t] = add(main, aux);
    }
    const bool dn = tasks.is_active(Task::depth) && tasks.is_active(Task::norm);
    const bool se = tasks.is_active(Task::edge) && tasks.is_active(Task::sem);
    ConsistencyOut<T> cons = (dn || se)
        ? consistency_losses(bundle.depth, bundle.normals, bundle.edges, bundle.sem_logits,
                             cfg.loss, dn, se)
        : ConsistencyOut<T>{Tensor<T>::scalar_of(T(0)), 0, 0};
    report.cons_dn_weighted = cfg.loss.lambda_dn * cons.dn;
    report.cons_se_weighted = cfg.loss.lambda_se * cons.se;
    Tensor<T> total = total_loss(lt, log_sigma2, cons.weighted);
    report.total = (double)total.scalar();
    return total;
  }
};

// ---------------------------------------------------------------------------
// Profiling
// ---------------------------------------------------------------------------

// Analytic MAC walk over the architecture (convolutions, linear maps, scans;
// attention products are scored as linear-map equivalents; resampling and
// normalization are excluded from the estimate).
inline int64_t estimate_macs(const ModelConfig& m) {
  int64_t macs = 0;
  const int d = m.backbone.embed_dim;
  const int n = m.backbone.num_patches();
  const int tok = n + m.backbone.num_registers;
  const int heads = m.backbone.num_heads;
  const int dh = d / heads;
  // patch embedding
  macs += linear_macs(3LL * m.backbone.patch_size * m.backbone.patch_size, d, n);
  // transformer blocks
  for (int b = 0; b < m.backbone.num_blocks; ++b) {
    macs += linear_macs(d, 3 * d, tok);                 // qkv
    macs += 2 * (int64_t)heads * tok * tok * dh;        // QK^T and AV
    macs += linear_macs(d, d, tok);                     // attention projection
    macs += linear_macs(d, 4 * d, tok) + linear_macs(4 * d, d, tok);  // mlp
    const bool lora = b >= m.backbone.num_blocks - m.backbone.lora_blocks;
    if (lora && m.backbone.lora_rank > 0) {
      const int64_t r = m.backbone.lora_rank;
      macs += r * (d + 3 * d) * (int64_t)tok;  // qkv adapter
      macs += r * (d + 4 * d) * (int64_t)tok;  // fc1 adapter
      macs += r * (4 * d + d) * (int64_t)tok;  // fc2 adapter
    }
  }
  const int c = m.pyramid.width;
  const int side = m.backbone.image_size / m.backbone.patch_size;  // tap resolution
  const std::map<int, int> level_side = {
      {5, side / 2}, {4, side}, {3, side * 2}, {2, side * 4}};
  // pyramid: tap projections, phi chain at tap resolution, psi at level res
  macs += 4 * conv_macs(1, 1, d, c, 1, side, side);
  macs += 4 * conv_macs(3, 3, c, c, 1, side, side);  // phi_1..phi_4
  for (int k : {5, 3, 2})
    macs += conv_macs(3, 3, c, c, 1, level_side.at(k), level_side.at(k));  // psi
  macs += linear_macs(d, c, 1);  // register pooling
  // decoder
  if (m.rgm.enabled)
    for (int k : {5, 4, 3, 2}) {
      const int64_t t = (int64_t)level_side.at(k) * level_side.at(k);
      if (m.rgm.register_feed) macs += linear_macs(c, c, 1);  // gate
      macs += linear_macs(c, c, t);                           // W_delta
      macs += 2 * linear_macs(c, m.rgm.state_size, t);        // W_B, W_C
      macs += scan_macs(t, c, m.rgm.state_size) * (m.rgm.bidirectional ? 2 : 1);
      macs += 2 * linear_macs(c, c, t);                                   // output projections
      macs += linear_macs(c, (int64_t)m.rgm.ffn_ratio * c, t) * 2;        // ffn both layers
    }
  // fusion
  const TaskSet ts = TaskSet::make(m.tasks);
  const int fine = level_side.at(2);
  for (Task t : ts.active) {
    for (int k : {5, 4, 3, 2})
      macs += conv_macs(3, 3, c, c, 1, level_side.at(k), level_side.at(k));  // adaptors
    macs += conv_macs(1, 1, c, c, 1, fine, fine);                            // P_t
  }
  if (m.fusion.ctm_enabled) {
    std::set<int> sources;
    for (Task t : ts.active)
      for (Task j : ts.partners.at(t)) sources.insert((int)j);
    macs += (int64_t)sources.size() * 2 * conv_macs(1, 1, c, c, 1, fine, fine);  // Pi, G
    for (Task t : ts.active) {
      if (t == Task::depth) continue;
      const int fan_in = c * (1 + (int)ts.partners.at(t).size());
      macs += conv_macs(1, 1, fan_in, c, 1, fine, fine);
    }
  }
  if (m.fusion.msca_enabled)
    for (Task t : ts.active) {
      if (t == Task::depth) continue;
      macs += conv_macs(5, 5, c, c, c, fine, fine);               // depthwise 5x5
      macs += 2 * conv_macs(1, m.fusion.kappa, c, c, c, fine, fine);  // strips
      macs += conv_macs(1, 1, c, c, 1, fine, fine);               // attention map
    }
  // heads
  if (ts.is_active(Task::depth)) {
    macs += linear_macs(c, m.heads.num_bins, 1);                        // widths
    macs += conv_macs(1, 1, c, m.heads.num_bins, 1, fine, fine);        // bin logits
    macs += linear_macs(m.heads.num_bins, 1, (int64_t)fine * fine);     // expectation
    macs += conv_macs(1, 1, c, 1, 1, fine, fine);                       // residual
  }
  for (Task t : {Task::sem, Task::norm, Task::edge}) {
    if (!ts.is_active(t)) continue;
    const int out_ch = t == Task::sem ? m.heads.num_classes : (t == Task::norm ? 3 : 1);
    macs += conv_macs(3, 3, c, c, 1, fine, fine);
    macs += conv_macs(1, 1, c, out_ch, 1, fine, fine);
  }
  for (Task t : ts.active) {
    const int out_ch = t == Task::sem ? m.heads.num_classes : (t == Task::norm ? 3 : 1);
    for (int k : {5, 4, 3, 2})
      macs += conv_macs(1, 1, c, out_ch, 1, level_side.at(k), level_side.at(k));  // aux heads
  }
  return macs;
}

template <class T>
ProfileReport profile_model(const ParamRegistry<T>& reg, const ModelConfig& cfg) {
  ProfileReport rep;
  for (const auto& e : reg.entries()) {
    rep.total_params += e.tensor.numel();
    if (e.trainable) rep.trainable_params += e.tensor.numel();
    if (e.name.find(".lora.") != std::string::npos) rep.lora_params += e.tensor.numel();
  }
  rep.macs = estimate_macs(cfg);
  return rep;
}

inline ProfileReport profile_config(const ModelConfig& cfg) {
  ParamRegistry<double> reg(0);
  Model<double> model(reg, cfg);
  return profile_model(reg, cfg);
}

}  // namespace m2hx
