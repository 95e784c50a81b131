#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clca/config.hpp"
#include "clca/schedule.hpp"

namespace clca {

// Multiply-accumulate counts of one encoder block. Norms, softmax and
// activations are not counted.
struct BlockCost {
  std::size_t block = 0;
  std::size_t t_attn = 0;
  std::size_t t_ffn = 0;
  std::uint64_t qkv = 0;
  std::uint64_t attention = 0;  // QK^T and AV
  std::uint64_t out_proj = 0;
  std::uint64_t ffn = 0;

  std::uint64_t total() const { return qkv + attention + out_proj + ffn; }
};

struct FlopsReport {
  std::vector<BlockCost> blocks;
  std::uint64_t patch_embed = 0;
  std::uint64_t head = 0;

  std::uint64_t total() const {
    std::uint64_t t = patch_embed + head;
    for (const auto& b : blocks) t += b.total();
    return t;
  }
};

inline BlockCost block_cost(std::size_t t_attn, std::size_t t_ffn, std::size_t width, std::size_t /*heads*/,
                            std::size_t ffn_ratio) {
  const std::uint64_t t = t_attn, tf = t_ffn, d = width;
  BlockCost c;
  c.t_attn = t_attn;
  c.t_ffn = t_ffn;
  c.qkv = 3 * t * d * d;
  c.out_proj = t * d * d;
  c.attention = 2 * t * t * d;
  c.ffn = 2 * static_cast<std::uint64_t>(ffn_ratio) * tf * d * d;
  return c;
}

// Cost for an explicit token trajectory, e.g. one observed in a ForwardTrace.
inline FlopsReport model_cost(const ModelConfig& cfg, const TokenSchedule& schedule) {
  FlopsReport r;
  const std::uint64_t d = cfg.width, p = cfg.patch_size;
  r.patch_embed = static_cast<std::uint64_t>(cfg.num_patches()) * cfg.in_channels * p * p * d;
  if (cfg.clca_enabled) {
    r.head = d * cfg.groups() * cfg.dwg + d * cfg.dwg * cfg.num_classes;
  } else {
    r.head = d * cfg.num_classes;
  }
  for (const auto& bt : schedule) {
    BlockCost c = block_cost(bt.t_attn, bt.t_ffn, cfg.width, cfg.heads, cfg.ffn_ratio);
    c.block = bt.block;
    r.blocks.push_back(c);
  }
  return r;
}

inline FlopsReport model_cost(const ModelConfig& cfg) { return model_cost(cfg, token_schedule(cfg)); }

inline nlohmann::json to_json(const FlopsReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : r.blocks) {
    blocks.push_back({{"block", b.block},
                      {"t_attn", b.t_attn},
                      {"t_ffn", b.t_ffn},
                      {"qkv", b.qkv},
                      {"attention", b.attention},
                      {"out_proj", b.out_proj},
                      {"ffn", b.ffn},
                      {"total", b.total()}});
  }
  return {{"unit", "MAC"}, {"blocks", blocks}, {"patch_embed", r.patch_embed}, {"head", r.head}, {"total", r.total()}};
}

// FNV-1a over the canonical JSON text of the config.
inline std::string config_hash(const ModelConfig& cfg) {
  const std::string text = nlohmann::json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string flops_csv_header() { return "config_hash,image_side,keep_rate,total_macs"; }

inline std::string flops_csv_row(const ModelConfig& cfg, const FlopsReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", cfg.keep_rate);
  return config_hash(cfg) + "," + std::to_string(cfg.image_side) + "," + buf + "," + std::to_string(r.total());
}

}  // namespace clca
