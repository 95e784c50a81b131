#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "clca/ops.hpp"
#include "clca/tape.hpp"

namespace clca {

enum class Role : std::uint8_t { cls, local, fused, recovered, clr };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::cls: return "CLS";
    case Role::local: return "LOCAL";
    case Role::fused: return "FUSED";
    case Role::recovered: return "RECOVERED";
    case Role::clr: return "CLR";
  }
  return "?";
}

inline bool is_reducible(Role r) { return r == Role::local || r == Role::fused || r == Role::recovered; }

// Batch of token sequences [B, T, D]. Roles and origins are tracked per
// sample because reduction keeps a different subset in every sample; the
// CLS/CLR layout is shared.
template <typename T>
struct TokenSequence {
  Var<T> data;
  std::vector<std::vector<Role>> roles;
  std::vector<std::vector<std::size_t>> origin;  // source block, 0 for input tokens

  std::size_t batch() const { return data.dim(0); }
  std::size_t length() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  bool has_clr() const { return !roles.empty() && roles[0].back() == Role::clr; }
  // Reducible tokens occupy [1, reducible_end()).
  std::size_t reducible_end() const { return length() - (has_clr() ? 1 : 0); }
  std::size_t reducible_count() const { return reducible_end() - 1; }

  void check_invariants(bool expect_clr) const {
    const Shape& s = data.shape();
    if (s.size() != 3) throw DimensionError("token sequence must be [B, T, D], got " + shape_str(s));
    if (roles.size() != s[0] || origin.size() != s[0]) throw std::logic_error("role table batch mismatch");
    for (std::size_t b = 0; b < s[0]; ++b) {
      const auto& r = roles[b];
      if (r.size() != s[1] || origin[b].size() != s[1]) throw std::logic_error("role table length mismatch");
      if (r.front() != Role::cls) throw std::logic_error("CLS must sit at position 0");
      const std::size_t end = r.size() - (expect_clr ? 1 : 0);
      if (expect_clr && r.back() != Role::clr) throw std::logic_error("CLR must sit at the last position");
      for (std::size_t t = 1; t < end; ++t)
        if (!is_reducible(r[t])) throw std::logic_error(std::string("unexpected ") + to_string(r[t]) + " token inside body");
    }
  }
};

enum class CacheKind : std::uint8_t { gap, clr_snapshot };

// Pooled features waiting to be re-injected at the next recovery layer.
template <typename T>
struct CrossLayerCache {
  struct Entry {
    Var<T> token;  // [B, D]
    CacheKind kind;
    std::size_t source_block;
  };
  std::vector<Entry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

// Appends the GAP over all reducible tokens and the current CLR token.
template <typename T>
void clc_store(CrossLayerCache<T>& cache, const TokenSequence<T>& seq, std::size_t block) {
  if (!seq.has_clr()) throw std::logic_error("clc_store requires a CLR token");
  const std::size_t b = seq.batch(), d = seq.width();
  Var<T> body = ops::slice(seq.data, 1, 1, seq.reducible_count());
  Var<T> gap = ops::mean_axis(body, 1);
  Var<T> clr = ops::reshape(ops::slice(seq.data, 1, seq.length() - 1, 1), {b, d});
  cache.entries.push_back({gap, CacheKind::gap, block});
  cache.entries.push_back({clr, CacheKind::clr_snapshot, block});
}

// Inserts every cached token (role RECOVERED) just before the CLR and empties
// the cache. Returns false when there was nothing to recover.
template <typename T>
bool clc_recover(CrossLayerCache<T>& cache, TokenSequence<T>& seq, bool detach = false) {
  if (cache.empty()) return false;
  if (!seq.has_clr()) throw std::logic_error("clc_recover requires a CLR token");
  const std::size_t b = seq.batch(), d = seq.width(), len = seq.length();
  Tape<T>& tape = *seq.data.tape;
  std::vector<Var<T>> parts;
  parts.push_back(ops::slice(seq.data, 1, 0, len - 1));
  for (const auto& e : cache.entries) {
    Var<T> tok = detach ? tape.leaf(e.token.value()) : e.token;
    parts.push_back(ops::reshape(tok, {b, 1, d}));
  }
  parts.push_back(ops::slice(seq.data, 1, len - 1, 1));
  seq.data = ops::concat(parts, 1);
  for (std::size_t s = 0; s < b; ++s) {
    seq.roles[s].pop_back();
    const std::size_t clr_origin = seq.origin[s].back();
    seq.origin[s].pop_back();
    for (const auto& e : cache.entries) {
      seq.roles[s].push_back(Role::recovered);
      seq.origin[s].push_back(e.source_block);
    }
    seq.roles[s].push_back(Role::clr);
    seq.origin[s].push_back(clr_origin);
  }
  cache.entries.clear();
  return true;
}

}  // namespace clca
