// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <thread>

#include "m2hx/model.hpp"
#include "m2hx/optim.hpp"
#include "m2hx/synthdata.hpp"

namespace m2hx {

struct TrainConfig {
  int steps = 2000;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int warmup_steps = 100;
  uint64_t seed = 42;
  bool deterministic = true;
  int eval_every = 500;
  int checkpoint_every = 1000;
  int log_every = 10;
  int threads = 2;

  static TrainConfig from(const Config& c) {
    TrainConfig t;
    t.steps = c.geti("train.steps");
    t.batch_size = c.geti("train.batch_size");
    t.lr = c.getf("train.lr");
    t.weight_decay = c.getf("train.weight_decay");
    t.warmup_steps = c.geti("train.warmup_steps");
    t.seed = (uint64_t)c.geti("train.seed");
    t.deterministic = c.getb("train.deterministic");
    t.eval_every = c.geti("train.eval_every");
    t.checkpoint_every = c.geti("train.checkpoint_every");
    t.log_every = c.geti("train.log_every");
    t.threads = c.geti("train.threads");
    return t;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: one file holding a manifest (frozen vs trainable vs optimizer
// entries) followed by the raw tensor containers in manifest order.
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "M2HX-CKPT1";

template <class T>
struct Checkpoint {
  int64_t step = 0;
  std::map<std::string, Tensor<T>> tensors;
  std::map<std::string, std::string> kinds;  // name -> frozen|trainable|optimizer
  std::string config_echo;
};

template <class T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg, const AdamW<T>* opt,
                     int64_t step, const std::string& config_echo) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw SerializeError("cannot open checkpoint for write: " + path);
  std::vector<std::pair<std::string, Tensor<T>>> opt_state;
  if (opt) opt_state = opt->state_tensors(reg);
  os << kCheckpointMagic << "\n";
  os << "step=" << step << " tensors=" << (reg.entries().size() + opt_state.size()) << "\n";
  for (const auto& e : reg.entries())
    os << "name=" << e.name << " kind=" << (e.trainable ? "trainable" : "frozen") << "\n";
  for (const auto& [name, t] : opt_state) os << "name=" << name << " kind=optimizer\n";
  std::istringstream cfg(config_echo);
  std::string line;
  while (std::getline(cfg, line))
    if (!line.empty()) os << "cfg=" << line << "\n";
  os << "---\n";
  for (const auto& e : reg.entries()) write_tensor(os, e.tensor);
  for (const auto& [name, t] : opt_state) write_tensor(os, t);
  if (!os) throw SerializeError("checkpoint write failed: " + path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SerializeError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic)
    throw SerializeError("bad checkpoint magic in " + path);
  Checkpoint<T> ck;
  int64_t count = -1;
  if (!std::getline(is, line) || line.rfind("step=", 0) != 0)
    throw SerializeError("bad checkpoint header");
  {
    ck.step = std::stoll(line.substr(5));
    const auto pos = line.find("tensors=");
    if (pos == std::string::npos) throw SerializeError("bad checkpoint header");
    count = std::stoll(line.substr(pos + 8));
  }
  std::vector<std::string> order;
  while (std::getline(is, line)) {
    if (line == "---") break;
    if (line.rfind("cfg=", 0) == 0) {
      ck.config_echo += line.substr(4) + "\n";
      continue;
    }
    if (line.rfind("name=", 0) != 0) throw SerializeError("bad checkpoint manifest line");
    const auto sp = line.find(" kind=");
    if (sp == std::string::npos) throw SerializeError("bad checkpoint manifest line");
    const std::string name = line.substr(5, sp - 5);
    order.push_back(name);
    ck.kinds[name] = line.substr(sp + 6);
  }
  if ((int64_t)order.size() != count)
    throw SerializeError("checkpoint manifest count mismatch");
  for (const std::string& name : order) ck.tensors[name] = read_tensor<T>(is);
  return ck;
}

template <class T>
void restore_params(ParamRegistry<T>& reg, const Checkpoint<T>& ck) {
  for (auto& e : reg.entries()) {
    auto it = ck.tensors.find(e.name);
    if (it == ck.tensors.end()) throw SerializeError("checkpoint missing tensor: " + e.name);
    if (it->second.shape != e.tensor.shape)
      throw SerializeError("checkpoint shape mismatch for " + e.name + ": file " +
                           shape_str(it->second.shape) + " vs model " +
                           shape_str(e.tensor.shape));
    // write through the shared buffer so replicas observe the restore
    *e.tensor.data = *it->second.data;
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <class T>
Targets<T> targets_of(const Frame<T>& f) {
  return Targets<T>{f.depth, f.labels, f.normals, f.edges};
}

template <class T>
EvalReport evaluate(const Model<T>& model, const std::vector<Frame<T>>& frames) {
  NoGrad ng;
  const int k = model.cfg.heads.num_classes;
  ConfusionMatrix cm(k);
  double sq_sum = 0;
  int64_t depth_px = 0;
  std::vector<double> angles;
  F1Accum f1;
  for (const Frame<T>& f : frames) {
    TaskBundle<T> b = model.forward(f.rgb);
    if (model.tasks.is_active(Task::sem)) {
      const int hw = b.sem_logits.dim(1) * b.sem_logits.dim(2);
      Tensor<T> pred = Tensor<T>::zeros({b.sem_logits.dim(1), b.sem_logits.dim(2)});
      for (int i = 0; i < hw; ++i) {
        int best = 0;
        for (int c = 1; c < k; ++c)
          if (b.sem_logits.ptr()[c * hw + i] > b.sem_logits.ptr()[best * hw + i]) best = c;
        pred.ptr()[i] = T(best);
      }
      cm.add(pred, f.labels);
    }
    if (model.tasks.is_active(Task::depth)) {
      for (int64_t i = 0; i < f.depth.numel(); ++i) {
        const double d = (double)b.depth.ptr()[i] - (double)f.depth.ptr()[i];
        sq_sum += d * d;
        ++depth_px;
      }
    }
    if (model.tasks.is_active(Task::norm)) normal_angles(b.normals, f.normals, angles);
    if (model.tasks.is_active(Task::edge)) edge_f1_accumulate(b.edges, f.edges, T(0.5), f1);
  }
  EvalReport rep;
  rep.frames = (int)frames.size();
  if (model.tasks.is_active(Task::sem)) {
    auto [m, per] = cm.miou();
    rep.miou = m;
    rep.per_class_iou = per;
  }
  if (depth_px > 0) rep.depth_rmse = std::sqrt(sq_sum / (double)depth_px);
  if (!angles.empty()) {
    AngleStats st = angle_stats(std::move(angles));
    rep.normal_mean_deg = st.mean_deg;
    rep.normal_median_deg = st.median_deg;
  }
  if (model.tasks.is_active(Task::edge)) rep.edge_f1 = f1.f1();
  return rep;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <class T>
class Trainer {
 public:
  Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg, std::vector<Frame<T>> train_frames,
          std::vector<Frame<T>> eval_frames)
      : mcfg_(mcfg),
        tcfg_(tcfg),
        registry_(tcfg.seed),
        model_(registry_, mcfg),
        opt_(registry_, tcfg.lr, tcfg.weight_decay),
        train_frames_(std::move(train_frames)),
        eval_frames_(std::move(eval_frames)) {
    if (train_frames_.empty()) throw TensorError("trainer: empty training set");
    const int replicas = std::max(1, std::min(tcfg_.threads, tcfg_.batch_size));
    for (int r = 0; r < replicas; ++r) {
      replica_regs_.push_back(
          std::make_unique<ParamRegistry<T>>(ParamRegistry<T>::replica_of(registry_)));
      replica_models_.push_back(std::make_unique<Model<T>>(*replica_regs_[(size_t)r], mcfg_));
    }
  }

  Model<T>& model() { return model_; }
  ParamRegistry<T>& registry() { return registry_; }
  AdamW<T>& optimizer() { return opt_; }
  const std::vector<Frame<T>>& eval_frames() const { return eval_frames_; }
  int64_t current_step() const { return step_; }

  // One optimization step over a deterministic batch; returns the averaged
  // report. Batch work is sharded over replica models; per-replica gradient
  // buffers are reduced in replica order so the result does not depend on
  // scheduling.
  LossReport train_step() {
    const int64_t step = ++step_;
    const int b = tcfg_.batch_size;
    std::vector<size_t> batch(b);
    {
      Rng rng(mix_seed(tcfg_.seed, (uint64_t)step));
      std::uniform_int_distribution<size_t> pick(0, train_frames_.size() - 1);
      for (int i = 0; i < b; ++i) batch[(size_t)i] = pick(rng);
    }
    const int replicas = (int)replica_models_.size();
    std::vector<LossReport> reports((size_t)b);
    std::vector<std::exception_ptr> errors((size_t)replicas);
    auto worker = [&](int r) {
      try {
        for (int i = r; i < b; i += replicas) {
          const Frame<T>& frame = train_frames_[batch[(size_t)i]];
          Model<T>& net = *replica_models_[(size_t)r];
          RunCtx ctx;
          ctx.training = true;
          Rng drop_rng(mix_seed(tcfg_.seed ^ 0x5eedULL, (uint64_t)(step * b + i)));
          if (!tcfg_.deterministic) ctx.rng = &drop_rng;
          Tape<T> tape;
          TaskBundle<T> bundle = net.forward(frame.rgb, ctx);
          Targets<T> gt = targets_of(frame);
          Tensor<T> total = net.compute_loss(bundle, gt, reports[(size_t)i]);
          tape.backward(total, T(1) / T(b));
        }
      } catch (...) {
        errors[(size_t)r] = std::current_exception();
      }
    };
    if (replicas == 1) {
      worker(0);
    } else {
      std::vector<std::thread> pool;
      for (int r = 0; r < replicas; ++r) pool.emplace_back(worker, r);
      for (auto& th : pool) th.join();
    }
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
    // reduce replica gradients into the canonical buffers, fixed order
    auto& canonical = registry_.entries();
    for (size_t i = 0; i < canonical.size(); ++i) {
      if (!canonical[i].trainable) continue;
      T* dst = canonical[i].tensor.grad->data();
      const int64_t n = canonical[i].tensor.numel();
      for (int r = 0; r < replicas; ++r) {
        auto& src = replica_regs_[(size_t)r]->entries()[i].tensor;
        if ((int64_t)src.grad->size() != n) continue;
        const T* g = src.grad->data();
        for (int64_t j = 0; j < n; ++j) dst[j] += g[j];
      }
    }
    const double warm =
        tcfg_.warmup_steps > 0 ? std::min(1.0, (double)step / tcfg_.warmup_steps) : 1.0;
    opt_.step(registry_, warm);
    registry_.zero_grads();
    for (auto& rr : replica_regs_) rr->zero_grads();
    // average the per-sample reports
    LossReport avg;
    for (const LossReport& r : reports) {
      for (const auto& [t, v] : r.main) avg.main[t] += v / b;
      for (const auto& [t, v] : r.aux) avg.aux[t] += v / b;
      for (const auto& [t, v] : r.sigma2) avg.sigma2[t] = v;  // shared parameter
      avg.cons_dn_weighted += r.cons_dn_weighted / b;
      avg.cons_se_weighted += r.cons_se_weighted / b;
      avg.total += r.total / b;
    }
    if (!std::isfinite(avg.total))
      throw NumericError("non-finite total loss at step " + std::to_string(step) + ": " +
                         avg.to_kv_line((int)step));
    return avg;
  }

  void save(const std::string& path, const std::string& config_echo) const {
    save_checkpoint(path, registry_, &opt_, step_, config_echo);
  }

  void restore(const Checkpoint<T>& ck) {
    restore_params(registry_, ck);
    opt_.load_state(registry_, ck.tensors);
    step_ = ck.step;
  }

 private:
  ModelConfig mcfg_;
  TrainConfig tcfg_;
  ParamRegistry<T> registry_;
  Model<T> model_;
  AdamW<T> opt_;
  std::vector<Frame<T>> train_frames_, eval_frames_;
  std::vector<std::unique_ptr<ParamRegistry<T>>> replica_regs_;
  std::vector<std::unique_ptr<Model<T>>> replica_models_;
  int64_t step_ = 0;
};

// Full training entry point used by the CLI and the acceptance suite.
// Returns the final evaluation report.
template <class T>
EvalReport run_training(const Config& cfg, const std::string& out_dir,
                        std::ostream& log = std::cout,
                        const std::vector<Frame<T>>* train_override = nullptr,
                        const std::vector<Frame<T>>* eval_override = nullptr) {
  namespace fs = std::filesystem;
  const ModelConfig mcfg = ModelConfig::from(cfg);
  const TrainConfig tcfg = TrainConfig::from(cfg);
  SceneSpec spec;
  spec.seed = (uint64_t)cfg.geti("data.seed");
  spec.image_size = cfg.geti("backbone.image_size");
  spec.min_boxes = cfg.geti("data.min_boxes");
  spec.max_boxes = cfg.geti("data.max_boxes");
  spec.d_min = cfg.getf("heads.depth.d_min");
  spec.d_max = cfg.getf("heads.depth.d_max");
  std::vector<Frame<T>> train_frames =
      train_override ? *train_override : generate_frames<T>(spec, cfg.geti("data.frames"));
  SceneSpec eval_spec = spec;
  eval_spec.seed = mix_seed(spec.seed, 0xe7a1ULL);  // held-out split
  std::vector<Frame<T>> eval_frames =
      eval_override ? *eval_override : generate_frames<T>(eval_spec, cfg.geti("data.eval_frames"));

  Trainer<T> trainer(mcfg, tcfg, std::move(train_frames), std::move(eval_frames));
  if (!out_dir.empty()) fs::create_directories(out_dir);
  std::ofstream loss_log(out_dir.empty() ? "/dev/null" : out_dir + "/loss_log.txt");
  for (int s = 1; s <= tcfg.steps; ++s) {
    LossReport rep = trainer.train_step();
    if (tcfg.log_every > 0 && (s % tcfg.log_every == 0 || s == 1 || s == tcfg.steps)) {
      const std::string line = rep.to_kv_line(s);
      log << line << "\n";
      loss_log << line << "\n";
    }
    if (tcfg.eval_every > 0 && s % tcfg.eval_every == 0 && s != tcfg.steps) {
      EvalReport er = evaluate(trainer.model(), trainer.eval_frames());
      log << "eval step=" << s << " miou=" << er.miou << " rmse=" << er.depth_rmse
          << " normal_mean_deg=" << er.normal_mean_deg << " edge_f1=" << er.edge_f1 << "\n";
    }
    if (!out_dir.empty() && tcfg.checkpoint_every > 0 && s % tcfg.checkpoint_every == 0)
      trainer.save(out_dir + "/checkpoint_step" + std::to_string(s) + ".ckpt", cfg.echo());
  }
  EvalReport final_report = evaluate(trainer.model(), trainer.eval_frames());
  if (!out_dir.empty()) {
    trainer.save(out_dir + "/checkpoint_final.ckpt", cfg.echo());
    std::ofstream er(out_dir + "/eval_report.txt");
    er << final_report.to_kv_block();
  }
  log << "final " << "miou=" << final_report.miou << " rmse=" << final_report.depth_rmse
      << " normal_mean_deg=" << final_report.normal_mean_deg
      << " edge_f1=" << final_report.edge_f1 << "\n";
  return final_report;
}

}  // namespace m2hx
