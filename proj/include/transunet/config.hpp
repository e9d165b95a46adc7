// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat "key: value" text file. '#' starts a comment.
// Unknown keys are rejected; every key has a default. Lists are
// space-separated, booleans are on/off (true/false, 1/0 also accepted).
//
//   variant: dec                 enc | dec | both
//   num_classes: 2
//   in_channels: 1
//   dims: 32 32 32
//   widths: 8 16 32 64
//   kernel: 3
//   norm: instance               instance | none
//   activation: gelu             gelu | relu
//   upsample: resize_conv        resize_conv | transposed
//   vit_patch / vit_dim / vit_heads / vit_layers / vit_mlp
//   num_queries / decoder_dim / key_dim / refine_iters / feature_level
//   attention_scale / tie_projections / bias_from_probabilities: off
//   bias_gain / mask_threshold
//   lambda_mask / lambda_cls / dice_smooth / no_object_weight
//   batch_size / base_lr / poly_power / momentum / weight_decay / grad_clip
//   max_iters / checkpoint_every / log_every / seed / augment / finite_checks
//   data_dir / out_dir           overridable via TRANSUNET_DATA_DIR / TRANSUNET_OUT_DIR
#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "transunet/augment.hpp"
#include "transunet/losses.hpp"
#include "transunet/model.hpp"

namespace transunet {

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  bool augment = true;
  std::size_t batch_size = 2;
  double base_lr = 2e-3;
  double poly_power = 0.9;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  double grad_clip = 12.0;
  std::size_t max_iters = 2000;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::size_t log_every = 50;
  std::uint64_t seed = 0;
  bool finite_checks = false;  // check every tensor produced for NaN/Inf (slow)
  std::string data_dir = "data";
  std::string out_dir = "run";

  RunConfig() {
    model.unet.widths = {8, 16, 32, 64};
    model.vit.dim = 64;
    model.vit.heads = 4;
    model.vit.layers = 2;
    model.vit.mlp_hidden = 128;
    model.qdec.dim = 16;
    model.qdec.key_dim = 16;
    model.finalize();
  }

  void validate() const {
    model.validate();
    loss.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (!(poly_power >= 0.0)) throw ConfigError("poly_power must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (max_iters == 0) throw ConfigError("max_iters must be positive");
  }
};

namespace config_detail {

// Shortest text that reads back to the same double.
inline std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string fmt(bool v) { return v ? "on" : "off"; }

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected on/off, got '" + v + "'");
}

struct Field {
  const char* key;
  bool fingerprinted;  // part of the training identity checked on resume
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<Field>& fields() {
  using R = RunConfig;
  auto size_field = [](const char* key, bool fp, std::size_t& (*ref)(R&)) {
    return Field{key, fp, [ref](const R& c) { return std::to_string(ref(const_cast<R&>(c))); },
                 [ref, key](R& c, const std::string& v) { ref(c) = static_cast<std::size_t>(to_u64(key, v)); }};
  };
  auto real_field = [](const char* key, bool fp, double& (*ref)(R&)) {
    return Field{key, fp, [ref](const R& c) { return fmt(ref(const_cast<R&>(c))); },
                 [ref, key](R& c, const std::string& v) { ref(c) = to_double(key, v); }};
  };
  auto bool_field = [](const char* key, bool fp, bool& (*ref)(R&)) {
    return Field{key, fp, [ref](const R& c) { return fmt(ref(const_cast<R&>(c))); },
                 [ref, key](R& c, const std::string& v) { ref(c) = to_bool(key, v); }};
  };
  static const std::vector<Field> table = {
      {"variant", true, [](const R& c) { return variant_name(c.model.variant); },
       [](R& c, const std::string& v) { c.model.variant = parse_variant(v); }},
      size_field("num_classes", true, [](R& c) -> std::size_t& { return c.model.num_classes; }),
      size_field("in_channels", true, [](R& c) -> std::size_t& { return c.model.unet.in_channels; }),
      {"dims", true,
       [](const R& c) {
         const auto& d = c.model.input;
         return std::to_string(d.d) + " " + std::to_string(d.h) + " " + std::to_string(d.w);
       },
       [](R& c, const std::string& v) {
         auto w = words(v);
         if (w.size() != 3) throw ConfigError("config key 'dims': expected three extents, got '" + v + "'");
         c.model.input = {to_u64("dims", w[0]), to_u64("dims", w[1]), to_u64("dims", w[2])};
       }},
      {"widths", true,
       [](const R& c) {
         std::string s;
         for (auto w : c.model.unet.widths) s += (s.empty() ? "" : " ") + std::to_string(w);
         return s;
       },
       [](R& c, const std::string& v) {
         c.model.unet.widths.clear();
         for (const auto& w : words(v)) c.model.unet.widths.push_back(to_u64("widths", w));
       }},
      size_field("kernel", true, [](R& c) -> std::size_t& { return c.model.unet.kernel; }),
      {"norm", true, [](const R& c) { return std::string(c.model.unet.norm == Norm::kInstance ? "instance" : "none"); },
       [](R& c, const std::string& v) {
         if (v == "instance") c.model.unet.norm = Norm::kInstance;
         else if (v == "none") c.model.unet.norm = Norm::kNone;
         else throw ConfigError("config key 'norm': expected instance or none, got '" + v + "'");
       }},
      {"activation", true,
       [](const R& c) { return std::string(c.model.unet.activation == Activation::kGelu ? "gelu" : "relu"); },
       [](R& c, const std::string& v) {
         if (v != "gelu" && v != "relu")
           throw ConfigError("config key 'activation': expected gelu or relu, got '" + v + "'");
         c.model.unet.activation = c.model.vit.activation = v == "gelu" ? Activation::kGelu : Activation::kRelu;
       }},
      {"upsample", true,
       [](const R& c) {
         return std::string(c.model.unet.upsample == Upsample::kResizeConv ? "resize_conv" : "transposed");
       },
       [](R& c, const std::string& v) {
         if (v == "resize_conv") c.model.unet.upsample = Upsample::kResizeConv;
         else if (v == "transposed") c.model.unet.upsample = Upsample::kTransposed;
         else throw ConfigError("config key 'upsample': expected resize_conv or transposed, got '" + v + "'");
       }},
      size_field("vit_patch", true, [](R& c) -> std::size_t& { return c.model.vit.patch; }),
      size_field("vit_dim", true, [](R& c) -> std::size_t& { return c.model.vit.dim; }),
      size_field("vit_heads", true, [](R& c) -> std::size_t& { return c.model.vit.heads; }),
      size_field("vit_layers", true, [](R& c) -> std::size_t& { return c.model.vit.layers; }),
      size_field("vit_mlp", true, [](R& c) -> std::size_t& { return c.model.vit.mlp_hidden; }),
      size_field("num_queries", true, [](R& c) -> std::size_t& { return c.model.qdec.num_queries; }),
      size_field("decoder_dim", true, [](R& c) -> std::size_t& { return c.model.qdec.dim; }),
      size_field("key_dim", true, [](R& c) -> std::size_t& { return c.model.qdec.key_dim; }),
      size_field("refine_iters", true, [](R& c) -> std::size_t& { return c.model.qdec.iterations; }),
      size_field("feature_level", true, [](R& c) -> std::size_t& { return c.model.feature_level; }),
      bool_field("attention_scale", true, [](R& c) -> bool& { return c.model.qdec.scale_attention; }),
      bool_field("tie_projections", true, [](R& c) -> bool& { return c.model.qdec.tie_projections; }),
      bool_field("bias_from_probabilities", true, [](R& c) -> bool& { return c.model.qdec.bias_from_probabilities; }),
      real_field("bias_gain", true, [](R& c) -> double& { return c.model.qdec.bias_gain; }),
      real_field("mask_threshold", true, [](R& c) -> double& { return c.model.qdec.threshold; }),
      real_field("lambda_mask", true, [](R& c) -> double& { return c.loss.lambda_mask; }),
      real_field("lambda_cls", true, [](R& c) -> double& { return c.loss.lambda_cls; }),
      real_field("dice_smooth", true, [](R& c) -> double& { return c.loss.dice_smooth; }),
      real_field("no_object_weight", true, [](R& c) -> double& { return c.loss.no_object_weight; }),
      size_field("batch_size", true, [](R& c) -> std::size_t& { return c.batch_size; }),
      real_field("base_lr", true, [](R& c) -> double& { return c.base_lr; }),
      real_field("poly_power", true, [](R& c) -> double& { return c.poly_power; }),
      real_field("momentum", true, [](R& c) -> double& { return c.momentum; }),
      real_field("weight_decay", true, [](R& c) -> double& { return c.weight_decay; }),
      real_field("grad_clip", true, [](R& c) -> double& { return c.grad_clip; }),
      size_field("max_iters", true, [](R& c) -> std::size_t& { return c.max_iters; }),
      bool_field("augment", true, [](R& c) -> bool& { return c.augment; }),
      {"seed", true, [](const R& c) { return std::to_string(c.seed); },
       [](R& c, const std::string& v) { c.seed = to_u64("seed", v); }},
      size_field("checkpoint_every", false, [](R& c) -> std::size_t& { return c.checkpoint_every; }),
      size_field("log_every", false, [](R& c) -> std::size_t& { return c.log_every; }),
      bool_field("finite_checks", false, [](R& c) -> bool& { return c.finite_checks; }),
      {"data_dir", false, [](const R& c) { return c.data_dir; }, [](R& c, const std::string& v) { c.data_dir = v; }},
      {"out_dir", false, [](const R& c) { return c.out_dir; }, [](R& c, const std::string& v) { c.out_dir = v; }},
  };
  return table;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace config_detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (key == f.key) {
      f.set(cfg, value);
      cfg.model.finalize();
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

// Ordered key -> canonical value.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : config_detail::fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

inline std::string to_text(const RunConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : config_entries(cfg)) s += k + ": " + v + "\n";
  return s;
}

// Parses "key: value" lines on top of the defaults. Does not validate.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    auto colon = line.find(':');
    if (colon == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key: value', got '" + line + "'");
    const auto key = config_detail::trim(line.substr(0, colon));
    const auto value = config_detail::trim(line.substr(colon + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

// Path-only environment overrides.
inline void apply_env_overrides(RunConfig& cfg) {
  if (const char* d = std::getenv("TRANSUNET_DATA_DIR"); d && *d) cfg.data_dir = d;
  if (const char* o = std::getenv("TRANSUNET_OUT_DIR"); o && *o) cfg.out_dir = o;
}

// FNV-1a over the fingerprinted entries.
inline std::string fingerprint(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  for (const auto& f : config_detail::fields())
    if (f.fingerprinted) {
      mix(f.key);
      mix(f.get(cfg));
    }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// Human-readable differences over fingerprinted keys ("key: a -> b").
inline std::vector<std::string> fingerprint_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  for (const auto& f : config_detail::fields())
    if (f.fingerprinted && f.get(a) != f.get(b)) out.push_back(std::string(f.key) + ": " + f.get(a) + " -> " + f.get(b));
  return out;
}

}  // namespace transunet
