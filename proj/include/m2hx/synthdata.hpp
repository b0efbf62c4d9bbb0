// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>

#include "m2hx/heads.hpp"
#include "m2hx/serialize.hpp"

namespace m2hx {

// Procedural orthographic top-down scenes: a far background plane, a sloped
// floor band, and axis-aligned boxes (optionally with sloped tops) resolved
// by z-buffer. Classes: 0 background, 1 floor, 2 small box, 3 large box.
struct SceneSpec {
  uint64_t seed = 7;
  int image_size = 64;
  int min_boxes = 1;
  int max_boxes = 5;
  double d_min = 0.1;
  double d_max = 8.1;

  static constexpr int kNumClasses = 4;

  void validate() const {
    if (image_size < 8 || image_size % 2 != 0)
      throw TensorError("scene: image_size must be even and >= 8");
    if (min_boxes < 0 || max_boxes < min_boxes) throw TensorError("scene: bad box count range");
    if (!(0 < d_min && d_min < d_max)) throw TensorError("scene: bad depth range");
  }
};

template <class T>
struct Frame {
  Tensor<T> rgb;      // 3 x H x W in [0,1]
  Tensor<T> depth;    // H x W meters
  Tensor<T> labels;   // H x W class ids (float-coded)
  Tensor<T> normals;  // 3 x H x W unit, analytic per surface
  Tensor<T> edges;    // H x W in {0,1}, semantic boundaries
};

// Central-difference normals under the orthographic camera:
// n ~ (-dD/dx, -dD/dy, 1), normalized. Matches the consistency operator.
template <class T>
Tensor<T> derive_normals(Tensor<T> depth) {
  NoGrad ng;
  Tensor<T> d3 = depth.reshaped({1, depth.dim(0), depth.dim(1)});
  Tensor<T> gx = central_diff_x(d3), gy = central_diff_y(d3);
  Tensor<T> ones = Tensor<T>::full(d3.shape, T(1));
  return l2_normalize_channels(concat_axis0<T>({neg(gx), neg(gy), ones}));
}

// 4-neighbor label-transition mask; both sides of a boundary are edges.
template <class T>
Tensor<T> derive_edges(Tensor<T> labels) {
  const int h = labels.dim(0), w = labels.dim(1);
  Tensor<T> edges = Tensor<T>::zeros(labels.shape);
  auto lab = [&](int y, int x) { return (int)std::lround((double)labels.ptr()[y * w + x]); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int c = lab(y, x);
      const bool boundary = (y > 0 && lab(y - 1, x) != c) || (y + 1 < h && lab(y + 1, x) != c) ||
                            (x > 0 && lab(y, x - 1) != c) || (x + 1 < w && lab(y, x + 1) != c);
      if (boundary) edges.ptr()[y * w + x] = T(1);
    }
  return edges;
}

template <class T>
Frame<T> generate_frame(const SceneSpec& spec, int frame_index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, (uint64_t)frame_index));
  const int n = spec.image_size;
  const double span = spec.d_max - spec.d_min;
  Frame<T> f;
  f.depth = Tensor<T>::zeros({n, n});
  f.labels = Tensor<T>::zeros({n, n});
  f.normals = Tensor<T>::zeros({3, n, n});
  f.rgb = Tensor<T>::zeros({3, n, n});

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto set_normal = [&](int y, int x, double gx, double gy) {
    const double inv = 1.0 / std::sqrt(gx * gx + gy * gy + 1.0);
    f.normals.ptr()[0 * n * n + y * n + x] = T(-gx * inv);
    f.normals.ptr()[1 * n * n + y * n + x] = T(-gy * inv);
    f.normals.ptr()[2 * n * n + y * n + x] = T(inv);
  };

  // background plane near the far end of the range
  const double d_bg = spec.d_max - 0.04 * span;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      f.depth.ptr()[y * n + x] = T(d_bg);
      set_normal(y, x, 0.0, 0.0);
    }

  // floor band: depth ramps nearer toward the bottom of the image
  const int y0 = (int)(n * (0.55 + 0.15 * unit(rng)));
  const double slope = (0.3 + 0.5 * unit(rng)) * span / n;  // meters per pixel
  for (int y = y0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      f.depth.ptr()[y * n + x] = T(d_bg - slope * (y - y0));
      f.labels.ptr()[y * n + x] = T(1);
      set_normal(y, x, 0.0, -slope);
    }

  // boxes, nearest first irrelevant: z-buffer resolves overlaps
  std::uniform_int_distribution<int> count_dist(spec.min_boxes, spec.max_boxes);
  const int boxes = count_dist(rng);
  for (int b = 0; b < boxes; ++b) {
    const int bw = 6 + (int)(unit(rng) * (n / 3 - 6));
    const int bh = 6 + (int)(unit(rng) * (n / 3 - 6));
    const int bx = (int)(unit(rng) * (n - bw));
    const int by = (int)(unit(rng) * (n - bh));
    const double base = spec.d_min + span * (0.15 + 0.55 * unit(rng));
    const bool sloped = unit(rng) < 0.5;
    const double max_g = 0.02 * span / 8.0;
    const double gx = sloped ? (unit(rng) * 2 - 1) * max_g : 0.0;
    const double gy = sloped ? (unit(rng) * 2 - 1) * max_g : 0.0;
    const bool small = bw * bh < (n / 4) * (n / 4);
    const T label = T(small ? 2 : 3);
    const double cx = bx + bw / 2.0, cy = by + bh / 2.0;
    for (int y = by; y < by + bh; ++y)
      for (int x = bx; x < bx + bw; ++x) {
        const double d = base + gx * (x - cx) + gy * (y - cy);
        if (d < (double)f.depth.ptr()[y * n + x]) {  // strictly nearer wins
          f.depth.ptr()[y * n + x] = T(d);
          f.labels.ptr()[y * n + x] = label;
          set_normal(y, x, gx, gy);
        }
      }
  }

  f.edges = derive_edges(f.labels);

  // rgb: class palette shaded by depth plus seeded noise
  static const double palette[4][3] = {
      {0.25, 0.35, 0.85}, {0.35, 0.8, 0.35}, {0.9, 0.45, 0.2}, {0.85, 0.2, 0.6}};
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const int cls = (int)std::lround((double)f.labels.ptr()[y * n + x]);
      const double shade =
          1.0 - 0.5 * ((double)f.depth.ptr()[y * n + x] - spec.d_min) / span;
      for (int c = 0; c < 3; ++c) {
        double v = palette[cls][c] * shade + noise(rng);
        f.rgb.ptr()[c * n * n + y * n + x] = T(std::clamp(v, 0.0, 1.0));
      }
    }
  return f;
}

// ---------------------------------------------------------------------------
// Dataset IO: directory of per-frame tensor containers plus a manifest.
// ---------------------------------------------------------------------------

inline constexpr const char* kDatasetMagic = "m2hx-dataset v1";

template <class T>
void write_dataset(const std::vector<Frame<T>>& frames, const std::string& path,
                   const SceneSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(path);
  std::ofstream manifest(path + "/manifest.txt");
  if (!manifest) throw SerializeError("cannot write manifest in " + path);
  manifest << kDatasetMagic << "\n";
  manifest << "spec image_size=" << spec.image_size << " min_boxes=" << spec.min_boxes
           << " max_boxes=" << spec.max_boxes << " d_min=" << spec.d_min
           << " d_max=" << spec.d_max << " seed=" << spec.seed << "\n";
  char name[32];
  for (size_t i = 0; i < frames.size(); ++i) {
    std::snprintf(name, sizeof name, "frame_%05zu", i);
    manifest << "frame=" << name << " seed=" << mix_seed(spec.seed, (uint64_t)i) << "\n";
    const Frame<T>& f = frames[i];
    save_tensor(path + "/" + name + "_rgb.tns", f.rgb);
    save_tensor(path + "/" + name + "_depth.tns", f.depth);
    save_tensor(path + "/" + name + "_labels.tns", f.labels);
    save_tensor(path + "/" + name + "_normals.tns", f.normals);
    save_tensor(path + "/" + name + "_edges.tns", f.edges);
  }
}

template <class T>
std::vector<Frame<T>> read_dataset(const std::string& path) {
  std::ifstream manifest(path + "/manifest.txt");
  if (!manifest) throw SerializeError("missing manifest in " + path);
  std::string line;
  if (!std::getline(manifest, line) || line != kDatasetMagic)
    throw SerializeError("dataset manifest: bad or unsupported version line");
  std::vector<Frame<T>> frames;
  while (std::getline(manifest, line)) {
    if (line.rfind("frame=", 0) != 0) continue;
    const std::string name = line.substr(6, line.find(' ') - 6);
    Frame<T> f;
    f.rgb = load_tensor<T>(path + "/" + name + "_rgb.tns");
    f.depth = load_tensor<T>(path + "/" + name + "_depth.tns");
    f.labels = load_tensor<T>(path + "/" + name + "_labels.tns");
    f.normals = load_tensor<T>(path + "/" + name + "_normals.tns");
    f.edges = load_tensor<T>(path + "/" + name + "_edges.tns");
    frames.push_back(std::move(f));
  }
  if (frames.empty()) throw SerializeError("dataset manifest lists no frames");
  return frames;
}

template <class T>
std::vector<Frame<T>> generate_frames(const SceneSpec& spec, int count) {
  std::vector<Frame<T>> frames;
  frames.reserve((size_t)count);
  for (int i = 0; i < count; ++i) frames.push_back(generate_frame<T>(spec, i));
  return frames;
}

}  // namespace m2hx
