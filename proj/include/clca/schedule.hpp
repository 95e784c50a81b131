#pragma once

#include <cstddef>
#include <vector>

#include "clca/config.hpp"
#include "clca/topk.hpp"

namespace clca {

// Sequence lengths around one encoder block.
struct BlockTokens {
  std::size_t block = 0;     // 1-based
  std::size_t t_attn = 0;    // tokens entering MHSA
  std::size_t t_ffn = 0;     // tokens entering the PWFFN (after reduction)
  std::size_t t_out = 0;     // tokens leaving the block (after recovery)
  std::size_t kept = 0;      // k at a reduction layer, 0 elsewhere
  bool fused = false;        // a FUSED token was emitted
  std::size_t recovered = 0; // cached tokens re-injected after this block
  std::size_t cache_after = 0;

  bool operator==(const BlockTokens&) const = default;
};

using TokenSchedule = std::vector<BlockTokens>;

// Closed-form simulation of the sequence length through the network:
//   run block (reducing between MHSA and PWFFN at reduction layers)
//   -> recover the whole cache at recovery layers
//   -> store this block's GAP and CLR if a later recovery can still use them.
inline TokenSchedule token_schedule(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t fixed = 1 + (cfg.clca_enabled ? 1 : 0);  // CLS (+ CLR)
  std::size_t reducible = cfg.num_patches();
  std::size_t cache = 0;
  TokenSchedule out;
  out.reserve(cfg.depth);
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    BlockTokens bt;
    bt.block = l;
    bt.t_attn = fixed + reducible;
    if (cfg.is_reduction_layer(l) && cfg.reduces_tokens()) {
      const std::size_t k = keep_count(cfg.keep_rate, reducible);
      bt.kept = k;
      bt.fused = cfg.reducer == ReducerKind::evit && k < reducible;
      reducible = k + (bt.fused ? 1 : 0);
    }
    bt.t_ffn = fixed + reducible;
    if (cfg.is_recovery_layer(l)) {
      bt.recovered = cache;
      reducible += cache;
      cache = 0;
    }
    if (cfg.stores_to_cache(l)) cache += 2;
    bt.cache_after = cache;
    bt.t_out = fixed + reducible;
    out.push_back(bt);
  }
  return out;
}

}  // namespace clca
