#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "clca/config.hpp"
#include "clca/ops.hpp"
#include "clca/parameters.hpp"
#include "clca/reduction.hpp"
#include "clca/schedule.hpp"
#include "clca/tape.hpp"
#include "clca/tensor.hpp"
#include "clca/token_sequence.hpp"

namespace clca {

// Per-block record of one forward pass.
struct BlockTrace {
  BlockTokens tokens;
  std::vector<std::vector<double>> cls_attention;  // A0 per sample, length t_attn
  KeptIndices kept;                                // empty unless the block reduced
  double max_abs_activation = 0.0;
  bool fused_fallback = false;
  bool empty_recovery = false;  // recovery ran on an empty cache
  std::size_t cache_after_recovery = 0;
  std::vector<std::size_t> recovered_from;  // source blocks of re-injected tokens
};

template <typename T>
struct ForwardTrace {
  std::vector<BlockTrace> blocks;
  std::vector<Tensor<T>> group_snapshots;  // CLS outputs fed to the head, [B, D] each
  std::size_t cache_at_end = 0;

  TokenSchedule token_counts() const {
    TokenSchedule s;
    for (const auto& b : blocks) s.push_back(b.tokens);
    return s;
  }

  // Selections made by this pass, reusable as ForwardOptions::fixed_selection.
  std::map<std::size_t, KeptIndices> selection() const {
    std::map<std::size_t, KeptIndices> plan;
    for (const auto& b : blocks)
      if (!b.kept.empty()) plan[b.tokens.block] = b.kept;
    return plan;
  }
};

struct ForwardOptions {
  const std::map<std::size_t, KeptIndices>* fixed_selection = nullptr;
  bool detach_recovered = false;  // recovered tokens enter as constants
};

template <typename T>
struct ForwardOutput {
  Var<T> logits;
  ForwardTrace<T> trace;
};

// Tape handles for the parameters of one encoder block.
template <typename T>
struct BlockVars {
  Var<T> norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b, norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
struct BlockOutput {
  TokenSequence<T> seq;
  Var<T> cls_attention;  // [B, T_attn]
  std::size_t t_ffn = 0;
};

// images [B, C, S, S] -> LOCAL tokens [B, N, D] via a stride-P, kernel-P
// convolution expressed as patch extraction plus a linear map. The weight is
// [C*P*P, D] with row index (c*P + y)*P + x.
template <typename T>
Var<T> patchify_embed(Var<T> images, const ModelConfig& cfg, Var<T> weight, Var<T> bias) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != s[3]) {
    throw DimensionError("patchify_embed: expected [B, " + std::to_string(cfg.in_channels) + ", S, S], got " +
                         shape_str(s));
  }
  const std::size_t side = s[2], p = cfg.patch_size;
  if (side % p != 0) {
    throw DimensionError("patchify_embed: image side " + std::to_string(side) + " not divisible by patch " +
                         std::to_string(p));
  }
  const std::size_t b = s[0], c = s[1], g = side / p;
  Var<T> x = ops::reshape(images, {b, c, g, p, g, p});
  x = ops::permute(x, {0, 2, 4, 1, 3, 5});
  x = ops::reshape(x, {b, g * g, c * p * p});
  return ops::linear(x, weight, bias);
}

// [CLS, LOCAL x N, CLR?] plus positional embeddings on every position.
template <typename T>
TokenSequence<T> assemble_sequence(Var<T> patches, Var<T> cls, std::optional<Var<T>> clr, Var<T> pos_embed) {
  const std::size_t b = patches.dim(0), n = patches.dim(1), d = patches.dim(2);
  const std::size_t total = n + 1 + (clr ? 1 : 0);
  if (pos_embed.shape() != Shape{1, total, d}) {
    throw DimensionError("assemble_sequence: pos_embed " + shape_str(pos_embed.shape()) + " for " +
                         std::to_string(total) + " tokens of width " + std::to_string(d));
  }
  std::vector<Var<T>> parts{ops::broadcast_batch(cls, b), patches};
  if (clr) parts.push_back(ops::broadcast_batch(*clr, b));
  TokenSequence<T> seq;
  seq.data = ops::add(ops::concat(parts, 1), ops::broadcast_batch(pos_embed, b));
  std::vector<Role> roles(total, Role::local);
  roles.front() = Role::cls;
  if (clr) roles.back() = Role::clr;
  seq.roles.assign(b, roles);
  seq.origin.assign(b, std::vector<std::size_t>(total, 0));
  return seq;
}

// Pre-norm transformer block. `reduce`, when set, runs between the MHSA
// residual and the PWFFN and receives A0, the CLS attention row averaged
// over heads.
template <typename T>
BlockOutput<T> encoder_block_forward(
    const TokenSequence<T>& seq, const BlockVars<T>& w, const ModelConfig& cfg,
    const std::function<TokenSequence<T>(const TokenSequence<T>&, Var<T>)>& reduce = {}) {
  const std::size_t b = seq.batch(), t = seq.length(), d = seq.width();
  if (t < 2) throw DimensionError("encoder block needs at least 2 tokens, got " + std::to_string(t));
  if (d != cfg.width) throw DimensionError("encoder block width mismatch");
  const std::size_t h = cfg.heads, dh = d / h;

  Var<T> x = seq.data;
  Var<T> y = ops::layer_norm(x, w.norm1_w, w.norm1_b);
  Var<T> qkv = ops::linear(y, w.qkv_w, w.qkv_b);
  qkv = ops::permute(ops::reshape(qkv, {b, t, 3, h, dh}), {2, 0, 3, 1, 4});
  Var<T> q = ops::reshape(ops::slice(qkv, 0, 0, 1), {b, h, t, dh});
  Var<T> k = ops::reshape(ops::slice(qkv, 0, 1, 1), {b, h, t, dh});
  Var<T> v = ops::reshape(ops::slice(qkv, 0, 2, 1), {b, h, t, dh});
  Var<T> scores = ops::scale(ops::matmul(q, ops::permute(k, {0, 1, 3, 2})), T(1) / std::sqrt(static_cast<T>(dh)));
  Var<T> attn = ops::softmax_lastdim(scores);
  Var<T> a0 = ops::reshape(ops::mean_axis(ops::slice(attn, 2, 0, 1), 1), {b, t});
  Var<T> ctx = ops::reshape(ops::permute(ops::matmul(attn, v), {0, 2, 1, 3}), {b, t, d});
  x = ops::add(x, ops::linear(ctx, w.proj_w, w.proj_b));

  BlockOutput<T> out;
  out.cls_attention = a0;
  TokenSequence<T> mid{x, seq.roles, seq.origin};
  if (reduce) mid = reduce(mid, a0);
  out.t_ffn = mid.length();

  Var<T> z = ops::layer_norm(mid.data, w.norm2_w, w.norm2_b);
  z = ops::linear(ops::gelu(ops::linear(z, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b);
  mid.data = ops::add(mid.data, z);
  out.seq = std::move(mid);
  return out;
}

// Tape handles for the aggregation head.
template <typename T>
struct ClaHeadVars {
  Var<T> bn1_w, bn1_b, dw_w, bn2_w, bn2_b, pw_w, pw_b;
};

// Cross-layer aggregation head: stack the g CLS snapshots to [B, D, g],
// BN -> depthwise conv spanning g (multiplier DWG) -> Agg [B, D*DWG] -> BN
// -> GELU -> pointwise projection to class logits.
template <typename T>
Var<T> cla_head_forward(const std::vector<Var<T>>& snapshots, const ClaHeadVars<T>& w,
                        ops::BatchNormStats<T>& bn1, ops::BatchNormStats<T>& bn2, ops::NormMode mode,
                        std::size_t groups) {
  if (snapshots.size() != groups) {
    throw DimensionError("cla_head_forward: expected " + std::to_string(groups) + " snapshots, got " +
                         std::to_string(snapshots.size()));
  }
  const std::size_t b = snapshots[0].dim(0), d = snapshots[0].dim(1);
  std::vector<Var<T>> cols;
  for (const auto& s : snapshots) {
    if (s.shape() != Shape{b, d}) throw DimensionError("cla_head_forward: snapshot shape " + shape_str(s.shape()));
    cols.push_back(ops::reshape(s, {b, d, 1}));
  }
  Var<T> x = ops::concat(cols, 2);
  x = ops::batch_norm(x, w.bn1_w, w.bn1_b, bn1, mode);
  Var<T> agg = ops::depthwise_full(x, w.dw_w);
  const std::size_t ad = agg.dim(1);
  agg = ops::reshape(ops::batch_norm(ops::reshape(agg, {b, ad, 1}), w.bn2_w, w.bn2_b, bn2, mode), {b, ad});
  return ops::linear(ops::gelu(agg), w.pw_w, w.pw_b);
}

// Vision Transformer with token reduction, cross-layer cache and
// cross-layer aggregation head (the latter two switch with clca_enabled).
template <typename T>
class VitClca {
 public:
  struct BlockIds {
    std::size_t norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b, norm2_w, norm2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  VitClca(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  // Non-trainable state (batch-norm running statistics) by name.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    if (!cfg_.clca_enabled) return {};
    return {{"cla.bn1.running_mean", &bn1_.running_mean},
            {"cla.bn1.running_var", &bn1_.running_var},
            {"cla.bn2.running_mean", &bn2_.running_mean},
            {"cla.bn2.running_var", &bn2_.running_var}};
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> buffers() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [n, p] : const_cast<VitClca*>(this)->buffers()) out.emplace_back(n, p);
    return out;
  }

  template <typename U>
  VitClca<U> cast() const {
    VitClca<U> other(cfg_, 0);
    for (const auto& p : params_) other.params().get(p.name).value = p.value.template cast<U>();
    auto dst = other.buffers();
    auto src = buffers();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return other;
  }

  // Intermediate state between blocks; lets callers resume a pass from any
  // block while the tape still holds everything recorded so far.
  struct Pass {
    TokenSequence<T> seq;
    CrossLayerCache<T> cache;
    std::vector<Var<T>> snapshots;
    ForwardTrace<T> trace;
    std::size_t next_block = 1;
  };

  Pass begin(Tape<T>& tape, const Tensor<T>& images) {
    Var<T> patches = patchify_embed(tape.leaf(images), cfg_, bind(tape, patch_w_), bind(tape, patch_b_));
    std::optional<Var<T>> clr;
    if (cfg_.clca_enabled) clr = bind(tape, clr_);
    return Pass{assemble_sequence(patches, bind(tape, cls_), clr, bind(tape, pos_)), {}, {}, {}, 1};
  }

  // Runs block pass.next_block together with its reduction, recovery and cache store.
  void step(Tape<T>& tape, Pass& pass, const ForwardOptions& opts = {}) {
    const std::size_t l = pass.next_block;
    if (l < 1 || l > cfg_.depth) throw std::logic_error("step: no block " + std::to_string(l));
    TokenSequence<T>& seq = pass.seq;
    CrossLayerCache<T>& cache = pass.cache;
    const BlockIds& ids = blocks_[l - 1];
    BlockVars<T> w{bind(tape, ids.norm1_w), bind(tape, ids.norm1_b), bind(tape, ids.qkv_w),
                   bind(tape, ids.qkv_b),   bind(tape, ids.proj_w),  bind(tape, ids.proj_b),
                   bind(tape, ids.norm2_w), bind(tape, ids.norm2_b), bind(tape, ids.fc1_w),
                   bind(tape, ids.fc1_b),   bind(tape, ids.fc2_w),   bind(tape, ids.fc2_b)};
    BlockTrace bt;
    bt.tokens.block = l;
    bt.tokens.t_attn = seq.length();

    std::function<TokenSequence<T>(const TokenSequence<T>&, Var<T>)> reduce;
    if (cfg_.is_reduction_layer(l) && cfg_.reduces_tokens()) {
      reduce = [&](const TokenSequence<T>& mid, Var<T> a0) {
        const KeptIndices* fixed = nullptr;
        if (opts.fixed_selection) {
          auto it = opts.fixed_selection->find(l);
          if (it != opts.fixed_selection->end()) fixed = &it->second;
        }
        auto r = reduce_tokens(mid, a0, cfg_.keep_rate, cfg_.reducer == ReducerKind::evit, l, fixed);
        bt.tokens.kept = r.kept.empty() ? 0 : r.kept[0].size();
        bt.tokens.fused = r.fused;
        bt.fused_fallback = r.fused_fallback;
        bt.kept = std::move(r.kept);
        return std::move(r.seq);
      };
    }
    BlockOutput<T> bo = encoder_block_forward(seq, w, cfg_, reduce);
    seq = std::move(bo.seq);
    bt.tokens.t_ffn = bo.t_ffn;
    {
      const auto& a0 = bo.cls_attention.value();
      const std::size_t t = a0.dim(1);
      bt.cls_attention.resize(a0.dim(0));
      for (std::size_t b = 0; b < a0.dim(0); ++b)
        bt.cls_attention[b].assign(a0.ptr() + b * t, a0.ptr() + (b + 1) * t);
    }

    if (cfg_.is_recovery_layer(l)) {
      bt.tokens.recovered = cache.size();
      for (const auto& e : cache.entries) bt.recovered_from.push_back(e.source_block);
      bt.empty_recovery = !clc_recover(cache, seq, opts.detach_recovered);
      bt.cache_after_recovery = cache.size();
    }
    if (cfg_.is_reduction_layer(l)) {
      pass.snapshots.push_back(ops::reshape(ops::slice(seq.data, 1, 0, 1), {seq.batch(), seq.width()}));
    }
    if (cfg_.stores_to_cache(l)) clc_store(cache, seq, l);
    seq.check_invariants(cfg_.clca_enabled);
    bt.tokens.cache_after = cache.size();
    bt.tokens.t_out = seq.length();
    bt.max_abs_activation = static_cast<double>(seq.data.value().max_abs());
    pass.trace.blocks.push_back(std::move(bt));
    ++pass.next_block;
  }

  // Final norm and classifier once every block has run.
  ForwardOutput<T> finish(Tape<T>& tape, Pass pass, ops::NormMode mode) {
    if (pass.next_block != cfg_.depth + 1) throw std::logic_error("finish: blocks remaining");
    ForwardOutput<T> out;
    out.trace = std::move(pass.trace);
    ForwardTrace<T>& trace = out.trace;
    trace.cache_at_end = pass.cache.size();
    const TokenSequence<T>& seq = pass.seq;
    Var<T> cls = ops::slice(seq.data, 1, 0, 1);
    cls = ops::reshape(ops::layer_norm(cls, bind(tape, norm_w_), bind(tape, norm_b_)), {seq.batch(), seq.width()});
    if (cfg_.clca_enabled) {
      pass.snapshots.push_back(cls);
      for (const auto& s : pass.snapshots) trace.group_snapshots.push_back(s.value());
      ClaHeadVars<T> hv{bind(tape, bn1_w_), bind(tape, bn1_b_), bind(tape, dw_w_), bind(tape, bn2_w_),
                        bind(tape, bn2_b_), bind(tape, head_w_), bind(tape, head_b_)};
      out.logits = cla_head_forward(pass.snapshots, hv, bn1_, bn2_, mode, cfg_.groups());
    } else {
      trace.group_snapshots.push_back(cls.value());
      out.logits = ops::linear(cls, bind(tape, head_w_), bind(tape, head_b_));
    }
    return out;
  }

  // Runs the full pipeline. In train mode the head's batch-norm layers use
  // batch statistics and update their running estimates.
  ForwardOutput<T> forward(Tape<T>& tape, const Tensor<T>& images, ops::NormMode mode,
                           const ForwardOptions& opts = {}) {
    Pass pass = begin(tape, images);
    while (pass.next_block <= cfg_.depth) step(tape, pass, opts);
    return finish(tape, std::move(pass), mode);
  }

  ForwardOutput<T> forward(Tape<T>& tape, const Tensor<T>& images, ops::NormMode mode,
                           const std::map<std::size_t, KeptIndices>& fixed) {
    ForwardOptions opts;
    opts.fixed_selection = &fixed;
    return forward(tape, images, mode, opts);
  }

 private:
  Var<T> bind(Tape<T>& tape, std::size_t id) {
    auto& p = params_[id];
    return tape.bind(p.value, tape.grad_enabled() ? &p.grad : nullptr);
  }

  template <typename Rng>
  void build(Rng& rng) {
    const std::size_t d = cfg_.width, p = cfg_.patch_size, c = cfg_.in_channels;
    constexpr double kStd = 0.02;
    auto tn = [&](Shape s) { return trunc_normal<T>(std::move(s), rng, kStd); };
    patch_w_ = params_.add("patch_embed.weight", tn({c * p * p, d}), true);
    patch_b_ = params_.add("patch_embed.bias", Tensor<T>({d}), false);
    cls_ = params_.add("cls_token", tn({1, 1, d}), false);
    if (cfg_.clca_enabled) clr_ = params_.add("clr_token", tn({1, 1, d}), false);
    pos_ = params_.add("pos_embed", tn({1, cfg_.initial_tokens(), d}), true);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      const std::string pre = "blocks." + std::to_string(i) + ".";
      const std::size_t f = cfg_.ffn_width();
      BlockIds ids{};
      ids.norm1_w = params_.add(pre + "norm1.weight", Tensor<T>::ones({d}), false);
      ids.norm1_b = params_.add(pre + "norm1.bias", Tensor<T>({d}), false);
      ids.qkv_w = params_.add(pre + "attn.qkv.weight", tn({d, 3 * d}), true);
      ids.qkv_b = params_.add(pre + "attn.qkv.bias", Tensor<T>({3 * d}), false);
      ids.proj_w = params_.add(pre + "attn.proj.weight", tn({d, d}), true);
      ids.proj_b = params_.add(pre + "attn.proj.bias", Tensor<T>({d}), false);
      ids.norm2_w = params_.add(pre + "norm2.weight", Tensor<T>::ones({d}), false);
      ids.norm2_b = params_.add(pre + "norm2.bias", Tensor<T>({d}), false);
      ids.fc1_w = params_.add(pre + "mlp.fc1.weight", tn({d, f}), true);
      ids.fc1_b = params_.add(pre + "mlp.fc1.bias", Tensor<T>({f}), false);
      ids.fc2_w = params_.add(pre + "mlp.fc2.weight", tn({f, d}), true);
      ids.fc2_b = params_.add(pre + "mlp.fc2.bias", Tensor<T>({d}), false);
      blocks_.push_back(ids);
    }
    norm_w_ = params_.add("norm.weight", Tensor<T>::ones({d}), false);
    norm_b_ = params_.add("norm.bias", Tensor<T>({d}), false);
    const std::size_t classes = cfg_.num_classes;
    if (cfg_.clca_enabled) {
      const std::size_t g = cfg_.groups(), m = cfg_.dwg;
      bn1_w_ = params_.add("cla.bn1.weight", Tensor<T>::ones({d}), false);
      bn1_b_ = params_.add("cla.bn1.bias", Tensor<T>({d}), false);
      dw_w_ = params_.add("cla.dw.weight", tn({d, m, g}), true);
      bn2_w_ = params_.add("cla.bn2.weight", Tensor<T>::ones({d * m}), false);
      bn2_b_ = params_.add("cla.bn2.bias", Tensor<T>({d * m}), false);
      head_w_ = params_.add("cla.pw.weight", Tensor<T>({d * m, classes}), true);
      head_b_ = params_.add("cla.pw.bias", Tensor<T>({classes}), false);
      bn1_ = ops::BatchNormStats<T>::init(d);
      bn2_ = ops::BatchNormStats<T>::init(d * m);
    } else {
      head_w_ = params_.add("head.weight", Tensor<T>({d, classes}), true);
      head_b_ = params_.add("head.bias", Tensor<T>({classes}), false);
    }
  }

  ModelConfig cfg_;
  ParameterStore<T> params_;
  std::vector<BlockIds> blocks_;
  std::size_t patch_w_ = 0, patch_b_ = 0, cls_ = 0, clr_ = 0, pos_ = 0, norm_w_ = 0, norm_b_ = 0;
  std::size_t bn1_w_ = 0, bn1_b_ = 0, dw_w_ = 0, bn2_w_ = 0, bn2_b_ = 0, head_w_ = 0, head_b_ = 0;
  ops::BatchNormStats<T> bn1_, bn2_;
};

}  // namespace clca
