#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clca/errors.hpp"

namespace clca {

enum class ReducerKind { evit, static_topk, none };

inline std::string to_string(ReducerKind k) {
  switch (k) {
    case ReducerKind::evit: return "evit";
    case ReducerKind::static_topk: return "static_topk";
    case ReducerKind::none: return "none";
  }
  return "?";
}

inline ReducerKind parse_reducer(const std::string& s) {
  if (s == "evit") return ReducerKind::evit;
  if (s == "static_topk") return ReducerKind::static_topk;
  if (s == "none") return ReducerKind::none;
  throw ConfigError("unknown reducer '" + s + "' (expected evit, static_topk or none)");
}

// Architecture hyperparameters. Block indices are 1-based. Defaults are a
// ViT-B/16 at 224 px with reductions after blocks 4, 7 and 10.
struct ModelConfig {
  std::size_t image_side = 224;
  std::size_t patch_size = 16;
  std::size_t in_channels = 3;
  std::size_t width = 768;
  std::size_t depth = 12;
  std::size_t heads = 12;
  std::size_t ffn_ratio = 4;
  std::vector<std::size_t> reduction_layers{4, 7, 10};
  std::vector<std::size_t> recovery_layers{4, 7, 10, 11};
  double keep_rate = 1.0;
  std::size_t dwg = 2;
  std::size_t num_classes = 100;
  bool clca_enabled = true;
  ReducerKind reducer = ReducerKind::evit;

  std::size_t groups() const { return reduction_layers.size() + 1; }
  std::size_t grid() const { return image_side / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t head_dim() const { return width / heads; }
  std::size_t ffn_width() const { return width * ffn_ratio; }
  // CLS + patches (+ CLR)
  std::size_t initial_tokens() const { return 1 + num_patches() + (clca_enabled ? 1 : 0); }

  bool is_reduction_layer(std::size_t block) const {
    return std::find(reduction_layers.begin(), reduction_layers.end(), block) != reduction_layers.end();
  }
  bool is_recovery_layer(std::size_t block) const {
    return clca_enabled && std::find(recovery_layers.begin(), recovery_layers.end(), block) != recovery_layers.end();
  }
  // Blocks whose GAP/CLR get cached: anything before the last recovery layer.
  bool stores_to_cache(std::size_t block) const {
    return clca_enabled && !recovery_layers.empty() && block < recovery_layers.back();
  }
  bool reduces_tokens() const { return reducer != ReducerKind::none && keep_rate < 1.0; }
  // Blocks whose CLS output feeds the aggregation head.
  std::vector<std::size_t> snapshot_layers() const {
    std::vector<std::size_t> s = reduction_layers;
    s.push_back(depth);
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
    if (patch_size == 0 || image_side == 0 || image_side % patch_size != 0)
      fail("image_side " + std::to_string(image_side) + " is not divisible by patch_size " + std::to_string(patch_size));
    if (width == 0 || heads == 0 || width % heads != 0) fail("width must be a positive multiple of heads");
    if (depth == 0) fail("depth must be positive");
    if (ffn_ratio == 0 || dwg == 0 || num_classes == 0 || in_channels == 0) fail("zero-sized dimension");
    if (!(keep_rate > 0.0 && keep_rate <= 1.0)) fail("keep_rate must lie in (0, 1]");
    auto check_layers = [&](const std::vector<std::size_t>& v, const char* name) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] < 1 || v[i] >= depth) fail(std::string(name) + " entries must lie in [1, depth-1]");
        if (i && v[i] <= v[i - 1]) fail(std::string(name) + " must be strictly ascending");
      }
    };
    check_layers(reduction_layers, "reduction_layers");
    check_layers(recovery_layers, "recovery_layers");
    if (clca_enabled) {
      for (std::size_t r : reduction_layers)
        if (!std::binary_search(recovery_layers.begin(), recovery_layers.end(), r))
          fail("recovery_layers must contain every reduction layer");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_side", c.image_side},
                     {"patch_size", c.patch_size},
                     {"in_channels", c.in_channels},
                     {"width", c.width},
                     {"depth", c.depth},
                     {"heads", c.heads},
                     {"ffn_ratio", c.ffn_ratio},
                     {"reduction_layers", c.reduction_layers},
                     {"recovery_layers", c.recovery_layers},
                     {"keep_rate", c.keep_rate},
                     {"groups", c.groups()},
                     {"dwg", c.dwg},
                     {"num_classes", c.num_classes},
                     {"clca_enabled", c.clca_enabled},
                     {"reducer", to_string(c.reducer)}};
}

namespace detail {

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError(std::string("unknown ") + what + " key '" + key + "'");
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::reject_unknown(j,
                         {"image_side", "patch_size", "in_channels", "width", "depth", "heads", "ffn_ratio",
                          "reduction_layers", "recovery_layers", "keep_rate", "groups", "dwg", "num_classes",
                          "clca_enabled", "reducer"},
                         "model config");
  c = ModelConfig{};
  detail::read_field(j, "image_side", c.image_side);
  detail::read_field(j, "patch_size", c.patch_size);
  detail::read_field(j, "in_channels", c.in_channels);
  detail::read_field(j, "width", c.width);
  detail::read_field(j, "depth", c.depth);
  detail::read_field(j, "heads", c.heads);
  detail::read_field(j, "ffn_ratio", c.ffn_ratio);
  detail::read_field(j, "reduction_layers", c.reduction_layers);
  detail::read_field(j, "recovery_layers", c.recovery_layers);
  detail::read_field(j, "keep_rate", c.keep_rate);
  detail::read_field(j, "dwg", c.dwg);
  detail::read_field(j, "num_classes", c.num_classes);
  detail::read_field(j, "clca_enabled", c.clca_enabled);
  std::string reducer = to_string(c.reducer);
  detail::read_field(j, "reducer", reducer);
  c.reducer = parse_reducer(reducer);
  if (auto it = j.find("groups"); it != j.end() && it->get<std::size_t>() != c.groups()) {
    throw ConfigError("groups must equal |reduction_layers| + 1");
  }
}

// Applies "key=value" to a JSON object. The value is parsed as JSON when
// possible ("0.5", "[4,7]", "true") and taken as a string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  j[key] = value;
}

}  // namespace clca
