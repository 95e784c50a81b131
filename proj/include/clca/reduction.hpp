#pragma once

#include <cstddef>
#include <vector>

#include "clca/config.hpp"
#include "clca/ops.hpp"
#include "clca/token_sequence.hpp"
#include "clca/topk.hpp"

namespace clca {

// Per-sample indices (into the reducible range) of the kept tokens.
using KeptIndices = std::vector<std::vector<std::size_t>>;

template <typename T>
struct ReduceResult {
  TokenSequence<T> seq;
  KeptIndices kept;
  bool fused = false;
  bool fused_fallback = false;  // some sample had zero attention on its pruned set
};

// Attention-guided token reduction. `cls_attention` is A0 [B, T] of the
// block doing the reduction. Keeps k = max(1, ceil(r*n)) reducible tokens
// per sample in original order; with `fuse` the pruned ones are merged into
// a single FUSED token weighted by their A0 share. When `fixed` is given it
// replaces the top-k ranking (selection is not differentiated through).
template <typename T>
ReduceResult<T> reduce_tokens(const TokenSequence<T>& seq, Var<T> cls_attention, double keep_rate, bool fuse,
                              std::size_t block, const KeptIndices* fixed = nullptr) {
  const std::size_t batch = seq.batch(), len = seq.length(), n = seq.reducible_count();
  if (cls_attention.shape() != Shape{batch, len}) {
    throw DimensionError("reduce_tokens: attention " + shape_str(cls_attention.shape()) + " vs sequence of length " +
                         std::to_string(len));
  }
  ReduceResult<T> res;
  const std::size_t k = keep_count(keep_rate, n);
  if (k == n) {
    res.seq = seq;
    res.kept.assign(batch, {});
    for (auto& kv : res.kept)
      for (std::size_t i = 0; i < n; ++i) kv.push_back(i);
    return res;
  }

  const auto& a0 = cls_attention.value();
  if (fixed) {
    if (fixed->size() != batch) throw DimensionError("reduce_tokens: fixed selection batch mismatch");
    for (const auto& kv : *fixed)
      if (kv.size() != k) throw DimensionError("reduce_tokens: fixed selection has wrong keep count");
    res.kept = *fixed;
  } else {
    res.kept.resize(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<T> scores(a0.ptr() + b * len + 1, a0.ptr() + b * len + 1 + n);
      res.kept[b] = topk_stable(scores, k);
    }
  }

  KeptIndices kept_abs(batch), pruned_abs(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<bool> keep(n, false);
    for (std::size_t i : res.kept[b]) keep.at(i) = true;
    for (std::size_t i = 0; i < n; ++i) (keep[i] ? kept_abs[b] : pruned_abs[b]).push_back(i + 1);
  }

  std::vector<Var<T>> parts;
  parts.push_back(ops::slice(seq.data, 1, 0, 1));
  parts.push_back(ops::gather_rows(seq.data, kept_abs));
  if (fuse) {
    const std::size_t m = n - k;
    Tape<T>& tape = *seq.data.tape;
    Var<T> a_col = ops::reshape(cls_attention, {batch, len, 1});
    Var<T> a_pruned = ops::reshape(ops::gather_rows(a_col, pruned_abs), {batch, m});
    // rows whose pruned attention is all zero fall back to uniform weights
    Tensor<T> bump({batch, m}, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      T sum = T(0);
      for (std::size_t j = 0; j < m; ++j) sum += a_pruned.value()[b * m + j];
      if (!(sum > T(0))) {
        res.fused_fallback = true;
        for (std::size_t j = 0; j < m; ++j) bump[b * m + j] = T(1);
      }
    }
    if (res.fused_fallback) a_pruned = ops::add(a_pruned, tape.leaf(std::move(bump)));
    Var<T> weights = ops::reshape(ops::normalize_rows(a_pruned), {batch, 1, m});
    parts.push_back(ops::matmul(weights, ops::gather_rows(seq.data, pruned_abs)));
    res.fused = true;
  }
  if (seq.has_clr()) parts.push_back(ops::slice(seq.data, 1, len - 1, 1));
  res.seq.data = ops::concat(parts, 1);

  res.seq.roles.resize(batch);
  res.seq.origin.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto& roles = res.seq.roles[b];
    auto& origin = res.seq.origin[b];
    roles.push_back(Role::cls);
    origin.push_back(seq.origin[b][0]);
    for (std::size_t p : kept_abs[b]) {
      roles.push_back(seq.roles[b][p]);
      origin.push_back(seq.origin[b][p]);
    }
    if (fuse) {
      roles.push_back(Role::fused);
      origin.push_back(block);
    }
    if (seq.has_clr()) {
      roles.push_back(Role::clr);
      origin.push_back(seq.origin[b].back());
    }
  }
  return res;
}

template <typename T>
ReduceResult<T> evit_reduce(const TokenSequence<T>& seq, Var<T> cls_attention, double keep_rate, std::size_t block = 0,
                            const KeptIndices* fixed = nullptr) {
  return reduce_tokens(seq, cls_attention, keep_rate, true, block, fixed);
}

template <typename T>
ReduceResult<T> static_topk_reduce(const TokenSequence<T>& seq, Var<T> cls_attention, double keep_rate,
                                   std::size_t block = 0, const KeptIndices* fixed = nullptr) {
  return reduce_tokens(seq, cls_attention, keep_rate, false, block, fixed);
}

}  // namespace clca
