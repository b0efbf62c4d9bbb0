// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "m2hx/backbone.hpp"
#include "m2hx/image.hpp"

namespace m2hx {

// Five-scale pyramid, k in {5,4,3,2}; adjacent levels differ by 2x spatially
// and share the decoder width.
template <class T>
struct FeaturePyramid {
  std::map<int, Tensor<T>> levels;

  void validate() const {
    static const int ks[4] = {5, 4, 3, 2};
    int c = -1, h = -1, w = -1;
    for (int k : ks) {
      auto it = levels.find(k);
      if (it == levels.end()) throw TensorError("pyramid: missing level " + std::to_string(k));
      const Tensor<T>& t = it->second;
      if (t.ndim() != 3) throw TensorError("pyramid: level must be C x H x W");
      if (c < 0) {
        c = t.dim(0);
        h = t.dim(1);
        w = t.dim(2);
      } else {
        if (t.dim(0) != c) throw TensorError("pyramid: level width mismatch");
        if (t.dim(1) != 2 * h || t.dim(2) != 2 * w)
          throw TensorError("pyramid: levels must double in size from k+1 to k");
        h = t.dim(1);
        w = t.dim(2);
      }
    }
  }
};

// Row-major grid reshaping of a token matrix: N x D -> D x h x w with
// token i landing at (i div w, i mod w). Inverse of flatten_tokens.
template <class T>
Tensor<T> token_reassemble(Tensor<T> tokens) {
  if (tokens.ndim() != 2) throw TensorError("token_reassemble: expected N x D tokens");
  const int n = tokens.dim(0), d = tokens.dim(1);
  const int side = (int)std::lround(std::sqrt((double)n));
  if (side * side != n)
    throw TensorError("token_reassemble: token count " + std::to_string(n) +
                      " is not a perfect square");
  return transpose2d(tokens).reshaped({d, side, side});
}

template <class T>
Tensor<T> flatten_tokens(Tensor<T> map) {
  if (map.ndim() != 3) throw TensorError("flatten_tokens: expected C x H x W");
  const int c = map.dim(0), hw = map.dim(1) * map.dim(2);
  return transpose2d(map.reshaped({c, hw}));
}

// Conv3x3 + GroupNorm + GELU, the shared block recipe for the adapter and
// the task branches.
template <class T>
struct ConvBlock {
  Tensor<T> w, b, gn_g, gn_b;
  int groups = 8;

  ConvBlock() = default;

  ConvBlock(ParamRegistry<T>& reg, const std::string& prefix, int c_in, int c_out, int gn_groups) {
    groups = gn_groups;
    w = reg.param(prefix + ".conv.w", {c_out, c_in, 3, 3},
                  Init<T>::gaussian(T(1) / std::sqrt(T(9 * c_in))));
    b = reg.param(prefix + ".conv.b", {c_out}, Init<T>::zeros(), true, true);
    gn_g = reg.param(prefix + ".gn.g", {c_out}, Init<T>::constant(1), true, true);
    gn_b = reg.param(prefix + ".gn.b", {c_out}, Init<T>::zeros(), true, true);
  }

  Tensor<T> forward(Tensor<T> x) const {
    return gelu(group_norm(conv2d(x, w, b, 1, 1), groups, gn_g, gn_b));
  }
};

struct PyramidConfig {
  int width = 64;      // decoder channel width C
  int gn_groups = 8;
};

// Top-down accumulation over same-stride taps: bar_4 = block(3, F4),
// bar_s = block(s-1, F_s + bar_{s+1}). Up between same-stride maps is the
// identity, so the sum is direct. Indices are 0-based (s-1).
template <class T, class BlockFn>
std::vector<Tensor<T>> hfa_topdown(const std::vector<Tensor<T>>& taps_projected, BlockFn block) {
  if (taps_projected.size() != 4) throw TensorError("hfa: expected 4 projected taps");
  std::vector<Tensor<T>> bar(4);
  bar[3] = block(3, taps_projected[3]);
  for (int s = 2; s >= 0; --s) bar[(size_t)s] = block(s, add(taps_projected[(size_t)s], bar[(size_t)s + 1]));
  return bar;
}

// Hierarchical feature adapter plus explicit resampling and register pooling.
template <class T>
struct Pyramid {
  PyramidConfig cfg;
  std::vector<Tensor<T>> tap_w, tap_b;  // 1x1 projections W^l, s = 1..4
  std::vector<ConvBlock<T>> phi;        // phi_1..phi_4
  ConvBlock<T> psi5, psi3, psi2;
  Tensor<T> reg_w, reg_b;  // W_r: embed_dim -> width

  Pyramid() = default;

  Pyramid(ParamRegistry<T>& reg, const PyramidConfig& cfg_, int embed_dim) : cfg(cfg_) {
    const int c = cfg.width;
    for (int s = 1; s <= 4; ++s) {
      tap_w.push_back(reg.param("pyramid.tap" + std::to_string(s) + ".w",
                                {c, embed_dim, 1, 1},
                                Init<T>::gaussian(T(1) / std::sqrt(T(embed_dim)))));
      tap_b.push_back(reg.param("pyramid.tap" + std::to_string(s) + ".b", {c},
                                Init<T>::zeros(), true, true));
      phi.emplace_back(reg, "pyramid.phi" + std::to_string(s), c, c, cfg.gn_groups);
    }
    psi5 = ConvBlock<T>(reg, "pyramid.psi5", c, c, cfg.gn_groups);
    psi3 = ConvBlock<T>(reg, "pyramid.psi3", c, c, cfg.gn_groups);
    psi2 = ConvBlock<T>(reg, "pyramid.psi2", c, c, cfg.gn_groups);
    reg_w = reg.param("pyramid.register_proj.w", {c, embed_dim},
                      Init<T>::gaussian(T(1) / std::sqrt(T(embed_dim))));
    reg_b = reg.param("pyramid.register_proj.b", {c}, Init<T>::zeros(), true, true);
  }

  // taps: backbone layer index -> patch tokens, exactly four entries, all at
  // the common backbone stride. Tap order follows ascending layer index.
  FeaturePyramid<T> build(const std::map<int, Tensor<T>>& taps) const {
    if (taps.size() != 4)
      throw TensorError("hfa_build: expected 4 taps, got " + std::to_string(taps.size()));
    std::vector<Tensor<T>> projected;
    Shape expect;
    int s = 0;
    for (const auto& [layer, tokens] : taps) {
      Tensor<T> f = token_reassemble(tokens);
      if (s == 0)
        expect = f.shape;
      else if (f.shape != expect)
        throw TensorError("hfa_build: tap stride/shape mismatch");
      projected.push_back(conv2d(f, tap_w[(size_t)s], tap_b[(size_t)s], 1, 1));
      ++s;
    }
    std::vector<Tensor<T>> bar = hfa_topdown<T>(
        projected, [this](int idx, Tensor<T> x) { return phi[(size_t)idx].forward(x); });
    FeaturePyramid<T> p;
    p.levels[4] = bar[3];
    p.levels[5] = psi5.forward(pool2_avg(p.levels[4]));
    p.levels[3] = psi3.forward(up2_bilinear(p.levels[4]));
    p.levels[2] = psi2.forward(up2_bilinear(p.levels[3]));
    p.validate();
    return p;
  }

  // r = W_r(mean of register tokens); output has decoder width.
  Tensor<T> pool_registers(Tensor<T> registers) const {
    if (registers.ndim() != 2 || registers.dim(0) < 1)
      throw TensorError("register_pool: empty register set");
    const int r = registers.dim(0);
    Tensor<T> ones = Tensor<T>::full({1, r}, T(1) / T(r));
    Tensor<T> mean = matmul(ones, registers);  // 1 x D
    return linear(mean, reg_w, reg_b).reshaped({reg_w.dim(0)});
  }
};

}  // namespace m2hx
