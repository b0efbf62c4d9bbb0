// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <set>

#include "m2hx/tensor.hpp"

namespace m2hx {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace cfgdetail {

enum class Type { integer, floating, boolean, text, int_list };

struct KeySpec {
  const char* key;
  Type type;
  const char* def;
  const char* help;
};

// Every key has a documented default; unknown keys are rejected.
inline const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s = {
      {"backbone.image_size", Type::integer, "64", "square input size in pixels"},
      {"backbone.patch_size", Type::integer, "8", "patch side in pixels"},
      {"backbone.embed_dim", Type::integer, "64", "token width"},
      {"backbone.num_blocks", Type::integer, "8", "transformer depth"},
      {"backbone.num_heads", Type::integer, "4", "attention heads"},
      {"backbone.num_registers", Type::integer, "4", "register tokens"},
      {"backbone.tap_layers", Type::int_list, "2,4,6,8", "four tapped block indices"},
      {"backbone.lora.rank", Type::integer, "4", "low-rank adapter rank"},
      {"backbone.lora.alpha", Type::floating, "32", "adapter scale"},
      {"backbone.lora.dropout", Type::floating, "0.05", "adapter dropout (training mode only)"},
      {"backbone.lora.blocks", Type::integer, "4", "adapted trailing blocks"},
      {"pyramid.width", Type::integer, "64", "decoder channel width"},
      {"pyramid.gn_groups", Type::integer, "8", "group-norm groups in conv blocks"},
      {"rgm.enabled", Type::boolean, "true", "register-gated decoder blocks"},
      {"rgm.register_feed.enabled", Type::boolean, "true", "register channel gate"},
      {"rgm.bidirectional", Type::boolean, "false", "add a reversed scan pass"},
      {"rgm.state_size", Type::integer, "8", "state dimension of the scan"},
      {"rgm.ffn_ratio", Type::integer, "2", "decoder FFN hidden ratio"},
      {"ctm.enabled", Type::boolean, "true", "cross-task mixing"},
      {"msca.enabled", Type::boolean, "true", "convolutional attention refinement"},
      {"msca.kappa", Type::integer, "7", "strip kernel length (odd)"},
      {"heads.depth.num_bins", Type::integer, "16", "adaptive depth bins"},
      {"heads.depth.d_min", Type::floating, "0.1", "nearest representable depth (m)"},
      {"heads.depth.d_max", Type::floating, "8.1", "farthest representable depth (m)"},
      {"heads.num_classes", Type::integer, "4", "semantic classes"},
      {"loss.aux_weight", Type::floating, "0.2", "alpha for every aux scale"},
      {"loss.lambda_dn", Type::floating, "0.1", "depth-normal consistency weight"},
      {"loss.lambda_se", Type::floating, "0.1", "edge-semantic consistency weight"},
      {"loss.edge_pos_weight", Type::floating, "5", "positive-class weight for edge BCE"},
      {"train.steps", Type::integer, "2000", "optimization steps"},
      {"train.batch_size", Type::integer, "4", "frames per step"},
      {"train.lr", Type::floating, "0.001", "learning rate"},
      {"train.weight_decay", Type::floating, "0.01", "decoupled weight decay"},
      {"train.warmup_steps", Type::integer, "100", "linear warmup steps"},
      {"train.seed", Type::integer, "42", "master seed (weights, batches)"},
      {"train.precision", Type::text, "f64", "f64 or f32"},
      {"train.deterministic", Type::boolean, "true", "disable dropout and other RNG at train time"},
      {"train.eval_every", Type::integer, "500", "eval cadence in steps (0 = off)"},
      {"train.checkpoint_every", Type::integer, "1000", "checkpoint cadence (0 = final only)"},
      {"train.log_every", Type::integer, "10", "loss log cadence"},
      {"train.threads", Type::integer, "2", "worker threads across the batch"},
      {"train.tasks", Type::text, "depth,sem,norm,edge", "active task subset"},
      {"data.frames", Type::integer, "64", "training frames"},
      {"data.eval_frames", Type::integer, "16", "held-out frames"},
      {"data.seed", Type::integer, "7", "scene generator seed"},
      {"data.min_boxes", Type::integer, "1", "scene content lower bound"},
      {"data.max_boxes", Type::integer, "5", "scene content upper bound"},
  };
  return s;
}

inline const KeySpec* find_key(const std::string& key) {
  for (const auto& ks : schema())
    if (key == ks.key) return &ks;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace cfgdetail

// Flat `section.key = value` configuration over a fixed schema.
class Config {
 public:
  static Config defaults() {
    Config c;
    for (const auto& ks : cfgdetail::schema()) c.values_[ks.key] = ks.def;
    return c;
  }

  void set(const std::string& key, const std::string& raw_value) {
    const auto* ks = cfgdetail::find_key(key);
    if (!ks) throw ConfigError("unknown config key: " + key);
    const std::string value = cfgdetail::trim(raw_value);
    check_type(*ks, value);
    values_[key] = value;
    explicit_.insert(key);
  }

  bool was_set(const std::string& key) const { return explicit_.count(key) != 0; }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = cfgdetail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
      set(cfgdetail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
  }

  int geti(const std::string& key) const { return (int)std::stol(get(key)); }
  double getf(const std::string& key) const { return std::stod(get(key)); }
  bool getb(const std::string& key) const {
    const std::string v = get(key);
    return v == "true" || v == "1";
  }
  std::string gets(const std::string& key) const { return get(key); }

  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    const std::string v = get(key);
    size_t pos = 0;
    while (pos < v.size()) {
      size_t comma = v.find(',', pos);
      if (comma == std::string::npos) comma = v.size();
      out.push_back((int)std::stol(v.substr(pos, comma - pos)));
      pos = comma + 1;
    }
    return out;
  }

  std::vector<std::string> get_str_list(const std::string& key) const {
    std::vector<std::string> out;
    const std::string v = get(key);
    size_t pos = 0;
    while (pos < v.size()) {
      size_t comma = v.find(',', pos);
      if (comma == std::string::npos) comma = v.size();
      out.push_back(cfgdetail::trim(v.substr(pos, comma - pos)));
      pos = comma + 1;
    }
    return out;
  }

  // Cross-field constraints; violations name every key involved.
  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config constraint: " + msg); };
    if (geti("backbone.image_size") % geti("backbone.patch_size") != 0)
      fail("backbone.image_size must be divisible by backbone.patch_size");
    if (geti("backbone.embed_dim") % geti("backbone.num_heads") != 0)
      fail("backbone.embed_dim must be divisible by backbone.num_heads");
    const auto taps = get_int_list("backbone.tap_layers");
    if (taps.size() != 4) fail("backbone.tap_layers must list exactly 4 block indices");
    for (int t : taps)
      if (t < 1 || t > geti("backbone.num_blocks"))
        fail("backbone.tap_layers entries must lie in [1, backbone.num_blocks]");
    for (size_t i = 0; i < taps.size(); ++i)
      for (size_t j = i + 1; j < taps.size(); ++j)
        if (taps[i] == taps[j]) fail("backbone.tap_layers entries must be distinct");
    if (geti("backbone.lora.blocks") > geti("backbone.num_blocks"))
      fail("backbone.lora.blocks must not exceed backbone.num_blocks");
    if (geti("pyramid.width") % geti("pyramid.gn_groups") != 0)
      fail("pyramid.width must be divisible by pyramid.gn_groups");
    if (geti("msca.kappa") % 2 == 0) fail("msca.kappa must be odd");
    if (!(getf("heads.depth.d_min") > 0) ||
        getf("heads.depth.d_min") >= getf("heads.depth.d_max"))
      fail("heads.depth.d_min must be positive and less than heads.depth.d_max");
    if (geti("heads.depth.num_bins") < 2) fail("heads.depth.num_bins must be at least 2");
    if (geti("heads.num_classes") < 2) fail("heads.num_classes must be at least 2");
    if (geti("train.steps") < 1) fail("train.steps must be at least 1");
    if (!(getf("train.lr") > 0)) fail("train.lr must be positive");
    if (geti("train.batch_size") < 1) fail("train.batch_size must be at least 1");
    if (geti("train.threads") < 1) fail("train.threads must be at least 1");
    const std::string prec = gets("train.precision");
    if (prec != "f32" && prec != "f64") fail("train.precision must be f32 or f64");
    if (get_str_list("train.tasks").empty()) fail("train.tasks must name at least one task");
    if (geti("data.frames") < 1 || geti("data.eval_frames") < 1)
      fail("data.frames and data.eval_frames must be at least 1");
    if (geti("data.min_boxes") < 0 || geti("data.max_boxes") < geti("data.min_boxes"))
      fail("data.min_boxes/data.max_boxes must form a valid range");
    if (getf("loss.aux_weight") < 0 || getf("loss.lambda_dn") < 0 || getf("loss.lambda_se") < 0)
      fail("loss weights must be non-negative");
  }

  // Full effective configuration, one `key = value` line per schema entry.
  // Re-parsing the echo reproduces this configuration.
  std::string echo() const {
    std::ostringstream os;
    for (const auto& ks : cfgdetail::schema()) os << ks.key << " = " << get(ks.key) << "\n";
    return os.str();
  }

  bool operator==(const Config& o) const { return values_ == o.values_; }

 private:
  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  static void check_type(const cfgdetail::KeySpec& ks, const std::string& v) {
    using cfgdetail::Type;
    auto bad = [&](const char* want) {
      throw ConfigError(std::string("config key ") + ks.key + ": expected " + want + ", got '" +
                        v + "'");
    };
    switch (ks.type) {
      case Type::integer: {
        char* end = nullptr;
        std::strtol(v.c_str(), &end, 10);
        if (v.empty() || *end != '\0') bad("an integer");
        break;
      }
      case Type::floating: {
        char* end = nullptr;
        std::strtod(v.c_str(), &end);
        if (v.empty() || *end != '\0') bad("a number");
        break;
      }
      case Type::boolean:
        if (v != "true" && v != "false" && v != "0" && v != "1") bad("true/false");
        break;
      case Type::int_list: {
        if (v.empty()) bad("a comma-separated integer list");
        size_t pos = 0;
        while (pos < v.size()) {
          size_t comma = v.find(',', pos);
          if (comma == std::string::npos) comma = v.size();
          const std::string tok = v.substr(pos, comma - pos);
          char* end = nullptr;
          std::strtol(tok.c_str(), &end, 10);
          if (tok.empty() || *end != '\0') bad("a comma-separated integer list");
          pos = comma + 1;
        }
        break;
      }
      case Type::text:
        break;
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

}  // namespace m2hx
