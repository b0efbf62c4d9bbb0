// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>

#include "m2hx/ops.hpp"
#include "m2hx/params.hpp"

namespace m2hx {

struct BackboneConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int num_blocks = 8;
  int num_heads = 4;
  int num_registers = 4;
  std::vector<int> tap_layers = {2, 4, 6, 8};
  int lora_rank = 4;
  double lora_alpha = 32.0;
  double lora_dropout = 0.05;
  int lora_blocks = 4;  // LoRA on this many trailing blocks

  int num_patches() const {
    const int g = image_size / patch_size;
    return g * g;
  }

  void validate() const {
    if (image_size % patch_size != 0)
      throw TensorError("backbone: image_size must be divisible by patch_size");
    if (embed_dim % num_heads != 0)
      throw TensorError("backbone: embed_dim must be divisible by num_heads");
    if (tap_layers.size() != 4) throw TensorError("backbone: exactly 4 tap layers required");
    for (int t : tap_layers)
      if (t < 1 || t > num_blocks) throw TensorError("backbone: tap layer out of range");
    for (size_t i = 0; i < tap_layers.size(); ++i)
      for (size_t j = i + 1; j < tap_layers.size(); ++j)
        if (tap_layers[i] == tap_layers[j])
          throw TensorError("backbone: tap layers must be distinct");
    if (lora_blocks > num_blocks) throw TensorError("backbone: lora_blocks > num_blocks");
    if (lora_rank < 0) throw TensorError("backbone: negative lora_rank");
    if (num_registers < 1) throw TensorError("backbone: at least one register token required");
  }
};

// Per-forward context: dropout is active only when training with an RNG
// attached (deterministic runs pass no RNG).
struct RunCtx {
  bool training = false;
  Rng* rng = nullptr;
};

// Inverted dropout as multiplication by a constant mask.
template <class T>
Tensor<T> dropout(Tensor<T> x, double p, const RunCtx& ctx) {
  if (!ctx.training || ctx.rng == nullptr || p <= 0.0) return x;
  Tensor<T> mask = Tensor<T>::zeros(x.shape);
  std::bernoulli_distribution keep(1.0 - p);
  const T s = T(1.0 / (1.0 - p));
  for (int64_t i = 0; i < mask.numel(); ++i) mask.ptr()[i] = keep(*ctx.rng) ? s : T(0);
  return mul(x, mask);
}

// Frozen base projection with an optional trainable low-rank update:
// y = W x + b + alpha * B (A x). B starts at zero, so adaptation begins at
// the frozen baseline.
template <class T>
struct LoraLinear {
  Tensor<T> w, b;  // frozen
  Tensor<T> a_mat, b_mat;
  int rank = 0;
  T alpha = 0;
  double drop_p = 0;

  LoraLinear() = default;

  LoraLinear(ParamRegistry<T>& reg, const std::string& prefix, int d_in, int d_out, int r,
             T alpha_, double drop, bool bias = true) {
    rank = r;
    alpha = alpha_;
    drop_p = drop;
    w = reg.param(prefix + ".w", {d_out, d_in},
                  Init<T>::gaussian(T(1) / std::sqrt(T(d_in))), /*trainable=*/false);
    if (bias) b = reg.param(prefix + ".b", {d_out}, Init<T>::zeros(), false);
    if (rank > 0) {
      a_mat = reg.param(prefix + ".lora.a", {rank, d_in},
                        Init<T>::gaussian(T(1) / std::sqrt(T(d_in))), true, true);
      b_mat = reg.param(prefix + ".lora.b", {d_out, rank}, Init<T>::zeros(), true, true);
    }
  }

  Tensor<T> forward(Tensor<T> x, const RunCtx& ctx = {}) const {
    if (x.dim(x.ndim() - 1) != w.dim(1))
      throw TensorError("lora_forward: input width mismatch");
    Tensor<T> y = linear(x, w, b);
    if (rank > 0) {
      Tensor<T> xd = dropout(x, drop_p, ctx);
      Tensor<T> lo = linear(linear(xd, a_mat, Tensor<T>()), b_mat, Tensor<T>());
      y = add(y, scale(lo, alpha));
    }
    return y;
  }
};

template <class T>
struct BackboneOutput {
  std::map<int, Tensor<T>> taps;  // layer index -> patch tokens (N x D)
  Tensor<T> registers;            // R x D from the final layer
};

namespace detail {

// Non-overlapping patch extraction: 3 x H x W -> N x (3 * p * p),
// patches in row-major grid order.
template <class T>
Tensor<T> extract_patches(Tensor<T> img, int p) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const int gh = h / p, gw = w / p;
  const int64_t pd = (int64_t)c * p * p;
  Tensor<T> out = Tensor<T>::zeros({gh * gw, (int)pd});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      T* row = out.ptr() + ((int64_t)gy * gw + gx) * pd;
      for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            row[(ch * p + py) * p + px] =
                img.ptr()[((int64_t)ch * h + gy * p + py) * w + gx * p + px];
    }
  record_op(out, img.requires_grad, [img, out, c, h, w, p, gh, gw, pd]() mutable {
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const T* row = out.gptr() + ((int64_t)gy * gw + gx) * pd;
        for (int ch = 0; ch < c; ++ch)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
              img.gptr()[((int64_t)ch * h + gy * p + py) * w + gx * p + px] +=
                  row[(ch * p + py) * p + px];
      }
  });
  return out;
}

}  // namespace detail

template <class T>
struct ViTBlock {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  LoraLinear<T> qkv;
  Tensor<T> proj_w, proj_b;  // attention output projection, frozen
  LoraLinear<T> fc1, fc2;
  int heads = 1;

  ViTBlock() = default;

  ViTBlock(ParamRegistry<T>& reg, const std::string& prefix, const BackboneConfig& cfg,
           bool lora) {
    const int d = cfg.embed_dim;
    const int r = lora ? cfg.lora_rank : 0;
    heads = cfg.num_heads;
    ln1_g = reg.param(prefix + ".ln1.g", {d}, Init<T>::constant(1), false);
    ln1_b = reg.param(prefix + ".ln1.b", {d}, Init<T>::zeros(), false);
    qkv = LoraLinear<T>(reg, prefix + ".attn.qkv", d, 3 * d, r, T(cfg.lora_alpha),
                        cfg.lora_dropout);
    proj_w = reg.param(prefix + ".attn.proj.w", {d, d},
                       Init<T>::gaussian(T(1) / std::sqrt(T(d))), false);
    proj_b = reg.param(prefix + ".attn.proj.b", {d}, Init<T>::zeros(), false);
    ln2_g = reg.param(prefix + ".ln2.g", {d}, Init<T>::constant(1), false);
    ln2_b = reg.param(prefix + ".ln2.b", {d}, Init<T>::zeros(), false);
    fc1 = LoraLinear<T>(reg, prefix + ".mlp.fc1", d, 4 * d, r, T(cfg.lora_alpha),
                        cfg.lora_dropout);
    fc2 = LoraLinear<T>(reg, prefix + ".mlp.fc2", 4 * d, d, r, T(cfg.lora_alpha),
                        cfg.lora_dropout);
  }

  Tensor<T> forward(Tensor<T> x, const RunCtx& ctx) const {
    const int d = x.dim(1), dh = d / heads;
    Tensor<T> h = layer_norm(x, ln1_g, ln1_b);
    Tensor<T> qkv_out = qkv.forward(h, ctx);
    Tensor<T> q = slice_cols(qkv_out, 0, d);
    Tensor<T> k = slice_cols(qkv_out, d, 2 * d);
    Tensor<T> v = slice_cols(qkv_out, 2 * d, 3 * d);
    std::vector<Tensor<T>> head_outs;
    head_outs.reserve((size_t)heads);
    const T att_scale = T(1) / std::sqrt(T(dh));
    for (int hd = 0; hd < heads; ++hd) {
      Tensor<T> qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor<T> kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor<T> vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor<T> att = softmax(scale(matmul(qh, transpose2d(kh)), att_scale), 1);
      head_outs.push_back(matmul(att, vh));
    }
    Tensor<T> attn = linear(concat_cols(head_outs), proj_w, proj_b);
    x = add(x, attn);
    Tensor<T> h2 = layer_norm(x, ln2_g, ln2_b);
    Tensor<T> mlp = fc2.forward(gelu(fc1.forward(h2, ctx)), ctx);
    return add(x, mlp);
  }
};

// Toy stand-in for a frozen foundation backbone: patch embedding, learned
// (frozen) positional embeddings on patch tokens only, register tokens
// appended after the patch tokens, pre-norm transformer blocks with LoRA on
// the trailing `lora_blocks` blocks.
template <class T>
struct Backbone {
  BackboneConfig cfg;
  Tensor<T> patch_w, patch_b;  // frozen
  Tensor<T> pos_embed;         // frozen, patch tokens only
  Tensor<T> registers;         // frozen
  std::vector<ViTBlock<T>> blocks;

  Backbone() = default;

  Backbone(ParamRegistry<T>& reg, const BackboneConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    const int d = cfg.embed_dim;
    const int pd = 3 * cfg.patch_size * cfg.patch_size;
    patch_w = reg.param("backbone.patch_embed.w", {d, pd},
                        Init<T>::gaussian(T(1) / std::sqrt(T(pd))), false);
    patch_b = reg.param("backbone.patch_embed.b", {d}, Init<T>::zeros(), false);
    pos_embed =
        reg.param("backbone.pos_embed", {cfg.num_patches(), d}, Init<T>::gaussian(T(0.02)), false);
    registers = reg.param("backbone.registers", {cfg.num_registers, d},
                          Init<T>::gaussian(T(0.02)), false);
    for (int i = 0; i < cfg.num_blocks; ++i) {
      const bool lora = i >= cfg.num_blocks - cfg.lora_blocks;
      blocks.emplace_back(reg, "backbone.block" + std::to_string(i), cfg, lora);
    }
  }

  // Token sequence after embedding: patch tokens (+pos) then registers.
  Tensor<T> embed(Tensor<T> image) const {
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size ||
        image.dim(2) != cfg.image_size)
      throw TensorError("backbone: expected 3 x " + std::to_string(cfg.image_size) + " x " +
                        std::to_string(cfg.image_size) + " image, got " +
                        shape_str(image.shape));
    Tensor<T> patches = detail::extract_patches(image, cfg.patch_size);
    Tensor<T> tokens = add(linear(patches, patch_w, patch_b), pos_embed);
    return concat_axis0<T>({tokens, registers});
  }

  BackboneOutput<T> forward(Tensor<T> image, const RunCtx& ctx = {}) const {
    const int n = cfg.num_patches();
    Tensor<T> x = embed(image);
    BackboneOutput<T> out;
    for (int i = 0; i < cfg.num_blocks; ++i) {
      x = blocks[(size_t)i].forward(x, ctx);
      const int layer = i + 1;
      for (int t : cfg.tap_layers)
        if (t == layer) out.taps[layer] = slice_rows(x, 0, n);
    }
    out.registers = slice_rows(x, n, n + cfg.num_registers);
    return out;
  }
};

// Trainable-parameter count added by adaptation: sum over adapted
// projections of r * (d_in + d_out).
inline int64_t lora_param_count(const BackboneConfig& cfg) {
  if (cfg.lora_rank == 0) return 0;
  const int64_t d = cfg.embed_dim, r = cfg.lora_rank;
  const int64_t per_block = r * (d + 3 * d) + r * (d + 4 * d) + r * (4 * d + d);
  return per_block * cfg.lora_blocks;
}

}  // namespace m2hx
