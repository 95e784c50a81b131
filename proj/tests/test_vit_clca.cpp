#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "clca/model.hpp"
#include "clca/schedule.hpp"
#include "reduction_oracle.hpp"
#include "reference_vit.hpp"
#include "test_helpers.hpp"

using namespace clca;
using clca::testing::random_images;
using clca::testing::randomize;
using clca::testing::small_config;

namespace {

template <typename T>
BlockVars<T> block_vars(Tape<T>& tape, const ParameterStore<T>& ps, std::size_t i) {
  const std::string pre = "blocks." + std::to_string(i) + ".";
  auto b = [&](const std::string& n) { return tape.bind(ps.get(pre + n).value, nullptr); };
  return {b("norm1.weight"), b("norm1.bias"), b("attn.qkv.weight"), b("attn.qkv.bias"),
          b("attn.proj.weight"), b("attn.proj.bias"), b("norm2.weight"), b("norm2.bias"),
          b("mlp.fc1.weight"), b("mlp.fc1.bias"), b("mlp.fc2.weight"), b("mlp.fc2.bias")};
}

// [CLS, LOCAL x values.size(), CLR?] with D=1 and the given token values.
TokenSequence<double> scalar_sequence(Tape<double>& tape, const std::vector<double>& values, bool clr,
                                      double cls_value = 0.0) {
  std::vector<double> all{cls_value};
  all.insert(all.end(), values.begin(), values.end());
  if (clr) all.push_back(-1.0);
  TokenSequence<double> seq;
  Tensor<double> t({1, all.size(), 1});
  std::copy(all.begin(), all.end(), t.storage().begin());
  seq.data = tape.leaf(t);
  std::vector<Role> roles(all.size(), Role::local);
  roles.front() = Role::cls;
  if (clr) roles.back() = Role::clr;
  seq.roles = {roles};
  seq.origin = {std::vector<std::size_t>(all.size(), 0)};
  return seq;
}

Var<double> attention_row(Tape<double>& tape, std::vector<double> a0, bool clr) {
  a0.insert(a0.begin(), 0.0);
  if (clr) a0.push_back(0.0);
  Tensor<double> t({1, a0.size()});
  std::copy(a0.begin(), a0.end(), t.storage().begin());
  return tape.leaf(t);
}

std::vector<double> token_values(const TokenSequence<double>& s) {
  const auto& v = s.data.value();
  return {v.data().begin(), v.data().end()};
}

ModelConfig patch_config(std::size_t side, std::size_t patch) {
  ModelConfig c = small_config(false, 1.0);
  c.image_side = side;
  c.patch_size = patch;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- patchify

TEST(Patchify, TokenCountMatchesGrid) {
  for (auto [side, expected] : {std::pair<std::size_t, std::size_t>{224, 196}, {448, 784}}) {
    ModelConfig c = patch_config(side, 16);
    EXPECT_EQ(c.num_patches(), expected);
    Tape<double> tape(false);
    std::mt19937_64 rng(1);
    auto w = tape.leaf(Tensor<double>::randn({3 * 16 * 16, c.width}, rng, 0.01));
    auto b = tape.leaf(Tensor<double>({c.width}));
    auto out = patchify_embed(tape.leaf(Tensor<double>({1, 3, side, side}, 0.5)), c, w, b);
    EXPECT_EQ(out.shape(), (Shape{1, expected, c.width}));
  }
}

TEST(Patchify, AllOnesKernelOnConstantImage) {
  ModelConfig c = patch_config(4, 1);
  Tape<double> tape(false);
  auto w = tape.leaf(Tensor<double>::ones({3, c.width}));
  auto b = tape.leaf(Tensor<double>({c.width}));
  auto out = patchify_embed(tape.leaf(Tensor<double>({2, 3, 4, 4}, 0.25)), c, w, b);
  ASSERT_EQ(out.shape(), (Shape{2, 16, c.width}));
  for (double v : out.value().data()) EXPECT_DOUBLE_EQ(v, 0.75);
}

TEST(Patchify, MatchesDirectConvolution) {
  ModelConfig c = small_config(false, 1.0);
  VitClca<double> model(c, 3);
  randomize(model, 4);
  auto images = random_images<double>(c, 2, 5);
  Tape<double> tape(false);
  const auto& ps = model.params();
  auto out = patchify_embed(tape.leaf(images), c, tape.bind(ps.get("patch_embed.weight").value, nullptr),
                            tape.bind(ps.get("patch_embed.bias").value, nullptr));
  for (std::size_t b = 0; b < 2; ++b) {
    auto oracle = reference::patch_tokens(ps, c, images.storage(), b);
    for (std::size_t n = 0; n < oracle.size(); ++n)
      for (std::size_t d = 0; d < c.width; ++d) EXPECT_NEAR(out.value().at(b, n, d), oracle[n][d], 1e-12);
  }
}

TEST(Patchify, RejectsIndivisibleSide) {
  ModelConfig c = patch_config(16, 4);
  Tape<double> tape(false);
  auto w = tape.leaf(Tensor<double>({48, c.width}));
  auto b = tape.leaf(Tensor<double>({c.width}));
  EXPECT_THROW(patchify_embed(tape.leaf(Tensor<double>({1, 3, 18, 18})), c, w, b), DimensionError);
  ModelConfig bad = c;
  bad.image_side = 18;
  EXPECT_THROW(bad.validate(), ConfigError);
}

// ---------------------------------------------------------------- assemble

TEST(Assemble, RolesWithAndWithoutClr) {
  Tape<double> tape(false);
  auto patches = tape.leaf(Tensor<double>({1, 4, 2}, 1.0));
  auto cls = tape.leaf(Tensor<double>({1, 1, 2}, 2.0));
  auto clr = tape.leaf(Tensor<double>({1, 1, 2}, 3.0));
  auto on = assemble_sequence(patches, cls, std::optional(clr), tape.leaf(Tensor<double>({1, 6, 2})));
  EXPECT_EQ(on.length(), 6u);
  EXPECT_EQ(on.roles[0], (std::vector<Role>{Role::cls, Role::local, Role::local, Role::local, Role::local, Role::clr}));
  on.check_invariants(true);

  auto off = assemble_sequence(patches, cls, std::optional<Var<double>>{}, tape.leaf(Tensor<double>({1, 5, 2})));
  EXPECT_EQ(off.length(), 5u);
  EXPECT_FALSE(off.has_clr());
  off.check_invariants(false);
}

TEST(Assemble, ZeroPositionalEmbeddingIsIdentity) {
  Tape<double> tape(false);
  std::mt19937_64 rng(2);
  auto p = Tensor<double>::randn({2, 4, 3}, rng);
  auto c = Tensor<double>::randn({1, 1, 3}, rng);
  auto r = Tensor<double>::randn({1, 1, 3}, rng);
  auto seq = assemble_sequence(tape.leaf(p), tape.leaf(c), std::optional(tape.leaf(r)),
                               tape.leaf(Tensor<double>({1, 6, 3})));
  const auto& v = seq.data.value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_EQ(v.at(b, 0, d), c[d]);
      for (std::size_t n = 0; n < 4; ++n) EXPECT_EQ(v.at(b, n + 1, d), p.at(b, n, d));
      EXPECT_EQ(v.at(b, 5, d), r[d]);
    }
}

TEST(Assemble, PositionalEmbeddingReachesClsAndClr) {
  Tape<double> tape(false);
  Tensor<double> pos({1, 4, 1});
  pos.storage() = {10, 20, 30, 40};
  auto seq = assemble_sequence(tape.leaf(Tensor<double>({1, 2, 1})), tape.leaf(Tensor<double>({1, 1, 1})),
                               std::optional(tape.leaf(Tensor<double>({1, 1, 1}))), tape.leaf(pos));
  EXPECT_EQ(token_values(seq), (std::vector<double>{10, 20, 30, 40}));
}

TEST(Assemble, RejectsPositionalLengthMismatch) {
  Tape<double> tape(false);
  auto patches = tape.leaf(Tensor<double>({1, 4, 2}));
  auto cls = tape.leaf(Tensor<double>({1, 1, 2}));
  EXPECT_THROW(assemble_sequence(patches, cls, std::optional<Var<double>>{}, tape.leaf(Tensor<double>({1, 6, 2}))), DimensionError);
}

// ---------------------------------------------------------------- encoder block

TEST(EncoderBlock, ZeroOutputProjectionsGiveIdentity) {
  ModelConfig c = small_config();
  VitClca<double> model(c, 11);
  randomize(model, 12);
  for (const char* n : {"blocks.0.attn.proj.weight", "blocks.0.attn.proj.bias", "blocks.0.mlp.fc2.weight",
                        "blocks.0.mlp.fc2.bias"})
    model.params().get(n).value.fill(0.0);
  Tape<double> tape(false);
  std::mt19937_64 rng(13);
  auto x = tape.leaf(Tensor<double>::randn({2, 7, c.width}, rng));
  TokenSequence<double> seq{x, std::vector<std::vector<Role>>(2, std::vector<Role>(7, Role::local)),
                            std::vector<std::vector<std::size_t>>(2, std::vector<std::size_t>(7, 0))};
  auto out = encoder_block_forward(seq, block_vars(tape, model.params(), 0), c);
  EXPECT_EQ(out.seq.data.value(), x.value());
  const auto& a0 = out.cls_attention.value();
  for (std::size_t b = 0; b < 2; ++b) {
    double s = 0;
    for (std::size_t t = 0; t < 7; ++t) {
      EXPECT_GE(a0.at(b, t), 0.0);
      s += a0.at(b, t);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(EncoderBlock, SingleLocalTokenAttentionSumsToOne) {
  ModelConfig c = small_config();
  VitClca<float> model(c, 14);
  randomize(model, 15);
  for (std::size_t t : {2u, 3u}) {
    Tape<float> tape(false);
    std::mt19937_64 rng(t);
    TokenSequence<float> seq{tape.leaf(Tensor<float>::randn({1, t, c.width}, rng)),
                             {std::vector<Role>(t, Role::local)},
                             {std::vector<std::size_t>(t, 0)}};
    auto out = encoder_block_forward(seq, block_vars(tape, model.params(), 1), c);
    float s = 0;
    for (float v : out.cls_attention.value().data()) s += v;
    EXPECT_NEAR(s, 1.0f, 1e-6f);
  }
}

TEST(EncoderBlock, MatchesStraightLineReference) {
  ModelConfig c = small_config();
  VitClca<double> model(c, 16);
  randomize(model, 17, 0.3);
  Tape<double> tape(false);
  std::mt19937_64 rng(18);
  const std::size_t t = 9;
  auto x = Tensor<double>::randn({2, t, c.width}, rng);
  TokenSequence<double> seq{tape.leaf(x), std::vector<std::vector<Role>>(2, std::vector<Role>(t, Role::local)),
                            std::vector<std::vector<std::size_t>>(2, std::vector<std::size_t>(t, 0))};
  auto out = encoder_block_forward(seq, block_vars(tape, model.params(), 2), c);
  for (std::size_t b = 0; b < 2; ++b) {
    reference::Mat in(t, std::vector<double>(c.width));
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t d = 0; d < c.width; ++d) in[i][d] = x.at(b, i, d);
    std::vector<double> a0;
    auto ref = reference::block(model.params(), 2, c, in, &a0);
    for (std::size_t i = 0; i < t; ++i) {
      EXPECT_NEAR(out.cls_attention.value().at(b, i), a0[i], 1e-12);
      for (std::size_t d = 0; d < c.width; ++d) EXPECT_NEAR(out.seq.data.value().at(b, i, d), ref[i][d], 1e-5);
    }
  }
}

TEST(EncoderBlock, RejectsSingleToken) {
  ModelConfig c = small_config();
  VitClca<double> model(c, 1);
  Tape<double> tape(false);
  TokenSequence<double> seq{tape.leaf(Tensor<double>({1, 1, c.width})), {{Role::cls}}, {{0}}};
  EXPECT_THROW(encoder_block_forward(seq, block_vars(tape, model.params(), 0), c), DimensionError);
}

// ---------------------------------------------------------------- reduction

TEST(EvitReduce, WorkedExample) {
  for (bool clr : {false, true}) {
    Tape<double> tape(false);
    auto seq = scalar_sequence(tape, {1, 2, 3, 4, 5, 6}, clr);
    auto a0 = attention_row(tape, {.3, .05, .2, .1, .25, .1}, clr);
    auto r = evit_reduce(seq, a0, 0.5, 4);
    EXPECT_EQ(r.kept[0], (std::vector<std::size_t>{0, 2, 4}));
    auto v = token_values(r.seq);
    ASSERT_EQ(v.size(), clr ? 6u : 5u);
    EXPECT_EQ(std::vector<double>(v.begin() + 1, v.begin() + 4), (std::vector<double>{1, 3, 5}));
    // pruned tokens 2, 4, 6 with weights 0.05, 0.1, 0.1
    EXPECT_NEAR(v[4], (0.05 * 2 + 0.1 * 4 + 0.1 * 6) / 0.25, 1e-12);
    EXPECT_NEAR(v[4], 4.4, 1e-12);
    EXPECT_EQ(r.seq.roles[0][4], Role::fused);
    EXPECT_EQ(r.seq.origin[0][4], 4u);
    EXPECT_FALSE(r.fused_fallback);
    r.seq.check_invariants(clr);
  }
}

TEST(EvitReduce, KeepAllIsIdentity) {
  Tape<double> tape(false);
  auto seq = scalar_sequence(tape, {1, 2, 3, 4, 5, 6}, true);
  auto r = evit_reduce(seq, attention_row(tape, {.3, .05, .2, .1, .25, .1}, true), 1.0);
  EXPECT_EQ(r.seq.data.id, seq.data.id);
  EXPECT_FALSE(r.fused);
  EXPECT_EQ(r.seq.roles, seq.roles);
}

TEST(EvitReduce, ZeroPrunedAttentionFallsBackToUniform) {
  Tape<double> tape(false);
  auto seq = scalar_sequence(tape, {1, 2, 3, 4}, false);
  auto r = evit_reduce(seq, attention_row(tape, {.5, 0, .5, 0}, false), 0.5);
  EXPECT_TRUE(r.fused_fallback);
  EXPECT_NEAR(token_values(r.seq).back(), 3.0, 1e-12);
}

TEST(EvitReduce, FusedTokenGradientMatchesWeights) {
  Tape<double> tape(true);
  auto seq = scalar_sequence(tape, {1, 2, 3, 4, 5, 6}, false);
  seq.data = tape.leaf(seq.data.value(), true);
  auto r = evit_reduce(seq, attention_row(tape, {.3, .05, .2, .1, .25, .1}, false), 0.5);
  tape.backward(ops::sum_all(ops::slice(r.seq.data, 1, 4, 1)));
  auto g = tape.grad_of(seq.data);
  EXPECT_EQ(g.storage(), (std::vector<double>{0, 0, 0.2, 0, 0.4, 0, 0.4}));
}

TEST(StaticTopk, WorkedExample) {
  Tape<double> tape(false);
  auto seq = scalar_sequence(tape, {1, 2, 3, 4, 5, 6}, true);
  auto r = static_topk_reduce(seq, attention_row(tape, {.3, .05, .2, .1, .25, .1}, true), 0.5);
  EXPECT_FALSE(r.fused);
  EXPECT_EQ(token_values(r.seq), (std::vector<double>{0, 1, 3, 5, -1}));
  EXPECT_EQ(r.seq.length(), seq.length() - 3);
  r.seq.check_invariants(true);
}

TEST(StaticTopk, KeepAllAndLowerBound) {
  Tape<double> tape(false);
  auto seq = scalar_sequence(tape, {7, 8, 9}, false);
  auto a0 = attention_row(tape, {.2, .5, .3}, false);
  EXPECT_EQ(static_topk_reduce(seq, a0, 1.0).seq.length(), 4u);
  auto r = static_topk_reduce(seq, a0, 0.1);
  EXPECT_EQ(token_values(r.seq), (std::vector<double>{0, 8}));
}

TEST(KeepRule, PaperScaleCounts) {
  EXPECT_EQ(keep_count(0.7, 784), 549u);
  EXPECT_EQ(keep_count(0.1, 784), 79u);
}

TEST(StaticTopk, RandomInstancesMatchBruteForce) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng() % 15;
    const double r = std::vector<double>{0.1, 0.25, 0.5, 0.7, 0.9}[rng() % 5];
    std::vector<double> values(n), a0(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = static_cast<double>(i + 1);
      a0[i] = static_cast<double>(rng() % 5);  // ties on purpose
    }
    Tape<double> tape(false);
    auto res = static_topk_reduce(scalar_sequence(tape, values, true), attention_row(tape, a0, true), r);
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(r * n - 1e-9)));
    std::vector<double> expected{0};
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t better = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (a0[j] > a0[i] || (a0[j] == a0[i] && j < i)) ++better;
      if (better < k) expected.push_back(values[i]);
    }
    expected.push_back(-1);
    EXPECT_EQ(token_values(res.seq), expected) << "trial " << trial;
  }
}

TEST(EvitReduce, RandomInstancesMatchBruteForce) {
  std::mt19937_64 rng(101);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng() % 20, d = 1 + rng() % 4;
    const double r = std::vector<double>{0.1, 0.25, 0.5, 0.7, 0.9}[rng() % 5];
    const bool clr = trial % 2 == 0;
    std::vector<std::vector<double>> values(n, std::vector<double>(d));
    std::vector<double> a0(n), cls(d), clr_row(d);
    for (auto& row : values)
      for (auto& v : row) v = normal(rng);
    for (auto& v : cls) v = normal(rng);
    for (auto& v : clr_row) v = normal(rng);
    for (auto& a : a0) a = static_cast<double>(rng() % 6) / 10.0;  // ties and zeros on purpose
    const auto want = clca::testing::evit_oracle(values, a0, r);

    Tape<double> tape(false);
    auto seq = clca::testing::make_sequence(tape, cls, values, clr ? &clr_row : nullptr);
    auto res = evit_reduce(seq, clca::testing::attention_over(tape, a0, clr), r, 3);
    ASSERT_EQ(res.kept[0], want.kept) << "trial " << trial;
    const auto& out = res.seq.data.value();
    const std::size_t k = want.kept.size();
    ASSERT_EQ(out.dim(1), 1 + k + (want.fused.empty() ? 0 : 1) + (clr ? 1 : 0));
    for (std::size_t j = 0; j < d; ++j) {
      EXPECT_EQ(out.at(0, 0, j), cls[j]);
      for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(out.at(0, 1 + i, j), values[want.kept[i]][j]);
      if (!want.fused.empty()) EXPECT_NEAR(out.at(0, 1 + k, j), want.fused[j], 1e-12) << "trial " << trial;
      if (clr) EXPECT_EQ(out.at(0, out.dim(1) - 1, j), clr_row[j]);
    }
    res.seq.check_invariants(clr);
  }
}

TEST(EvitReduce, SelectionIsPermutationEquivariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 8;
    std::vector<double> values(n), a0(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = std::normal_distribution<double>()(rng);
      a0[i] = 0.01 + 0.1 * i;  // distinct
    }
    std::shuffle(a0.begin(), a0.end(), rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pv(n), pa(n);
    for (std::size_t i = 0; i < n; ++i) {
      pv[i] = values[perm[i]];
      pa[i] = a0[perm[i]];
    }
    Tape<double> tape(false);
    auto base = evit_reduce(scalar_sequence(tape, values, true), attention_row(tape, a0, true), 0.5);
    auto moved = evit_reduce(scalar_sequence(tape, pv, true), attention_row(tape, pa, true), 0.5);
    std::set<std::size_t> mapped;
    for (std::size_t i : moved.kept[0]) mapped.insert(perm[i]);
    EXPECT_EQ(mapped, std::set<std::size_t>(base.kept[0].begin(), base.kept[0].end()));
    const auto bv = token_values(base.seq), mv = token_values(moved.seq);
    EXPECT_NEAR(bv[bv.size() - 2], mv[mv.size() - 2], 1e-12);
  }
}

// ---------------------------------------------------------------- cache

TEST(CrossLayerCache, StoreComputesGapOverBody) {
  Tape<double> tape(false);
  Tensor<double> x({1, 4, 2});
  x.storage() = {9, 9, 1, 3, 3, 5, -7, -7};
  TokenSequence<double> seq{tape.leaf(x), {{Role::cls, Role::local, Role::local, Role::clr}}, {{0, 0, 0, 0}}};
  CrossLayerCache<double> cache;
  clc_store(cache, seq, 1);
  ASSERT_EQ(cache.size(), 2u);
  EXPECT_EQ(cache.entries[0].kind, CacheKind::gap);
  EXPECT_EQ(cache.entries[0].token.value().storage(), (std::vector<double>{2, 4}));
  EXPECT_EQ(cache.entries[1].kind, CacheKind::clr_snapshot);
  EXPECT_EQ(cache.entries[1].token.value().storage(), (std::vector<double>{-7, -7}));
  clc_store(cache, seq, 2);
  EXPECT_EQ(cache.size(), 4u);
  clc_store(cache, seq, 3);
  EXPECT_EQ(cache.size(), 6u);
}

TEST(CrossLayerCache, GapIgnoresClsAndClr) {
  Tape<double> tape(false);
  auto a = scalar_sequence(tape, {1, 2, 3}, true, 100.0);
  auto b = scalar_sequence(tape, {1, 2, 3}, true, -50.0);
  CrossLayerCache<double> ca, cb;
  clc_store(ca, a, 1);
  clc_store(cb, b, 1);
  EXPECT_EQ(ca.entries[0].token.value(), cb.entries[0].token.value());
}

TEST(CrossLayerCache, RecoverInsertsBeforeClrAndEmpties) {
  Tape<double> tape(false);
  auto seq = scalar_sequence(tape, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  ASSERT_EQ(seq.length(), 10u);
  CrossLayerCache<double> cache;
  for (std::size_t blk = 1; blk <= 3; ++blk) clc_store(cache, seq, blk);
  ASSERT_TRUE(clc_recover(cache, seq));
  EXPECT_EQ(seq.length(), 16u);
  EXPECT_TRUE(cache.empty());
  seq.check_invariants(true);
  for (std::size_t t = 9; t < 15; ++t) {
    EXPECT_EQ(seq.roles[0][t], Role::recovered);
    EXPECT_EQ(seq.origin[0][t], 1 + (t - 9) / 2);
  }
  auto v = token_values(seq);
  EXPECT_DOUBLE_EQ(v[9], 4.5);
  EXPECT_DOUBLE_EQ(v[10], -1.0);
  EXPECT_DOUBLE_EQ(v[15], -1.0);
  EXPECT_FALSE(clc_recover(cache, seq));
  EXPECT_EQ(seq.length(), 16u);
}

TEST(CrossLayerCache, DefaultLayersRecoverSixTokensAtBlockFour) {
  ModelConfig c;
  c.image_side = 32;
  c.patch_size = 8;
  c.width = 8;
  c.heads = 2;
  c.num_classes = 3;
  c.keep_rate = 0.5;
  VitClca<float> model(c, 21);
  Tape<float> tape(false);
  auto out = model.forward(tape, random_images<float>(c, 2, 22), ops::NormMode::eval);
  const auto& b4 = out.trace.blocks[3];
  EXPECT_EQ(b4.tokens.recovered, 6u);
  EXPECT_EQ(b4.recovered_from, (std::vector<std::size_t>{1, 1, 2, 2, 3, 3}));
  EXPECT_EQ(b4.cache_after_recovery, 0u);
  EXPECT_EQ(b4.tokens.cache_after, 2u);
}

// ---------------------------------------------------------------- head

namespace {

struct HeadFixture {
  Tape<double> tape{false};
  ops::BatchNormStats<double> bn1, bn2;
  ClaHeadVars<double> vars;

  HeadFixture(std::size_t d, std::size_t g, std::size_t m, std::size_t classes, const Tensor<double>& dw,
              const Tensor<double>& pw, const Tensor<double>& pb) {
    const double eps = 1e-5;
    bn1 = ops::BatchNormStats<double>::init(d);
    bn2 = ops::BatchNormStats<double>::init(d * m);
    bn1.running_var.fill(1.0 - eps);  // eval-mode batch norm becomes the identity
    bn2.running_var.fill(1.0 - eps);
    vars = {tape.leaf(Tensor<double>::ones({d})), tape.leaf(Tensor<double>({d})), tape.leaf(dw),
            tape.leaf(Tensor<double>::ones({d * m})), tape.leaf(Tensor<double>({d * m})), tape.leaf(pw),
            tape.leaf(pb)};
    (void)classes;
    (void)g;
  }
};

}  // namespace

TEST(ClaHead, AggregateWidth) {
  const std::size_t d = 8, g = 4, m = 2, classes = 3;
  std::mt19937_64 rng(3);
  HeadFixture f(d, g, m, classes, Tensor<double>::randn({d, m, g}, rng), Tensor<double>::randn({d * m, classes}, rng),
                Tensor<double>({classes}));
  std::vector<Var<double>> snaps;
  for (std::size_t i = 0; i < g; ++i) snaps.push_back(f.tape.leaf(Tensor<double>::randn({2, d}, rng)));
  std::vector<Var<double>> cols;
  for (const auto& s : snaps) cols.push_back(ops::reshape(s, {2, d, 1}));
  Var<double> agg = ops::depthwise_full(ops::concat(cols, 2), f.vars.dw_w);
  EXPECT_EQ(agg.shape(), (Shape{2, 16}));
  auto logits = cla_head_forward(snaps, f.vars, f.bn1, f.bn2, ops::NormMode::eval, g);
  EXPECT_EQ(logits.shape(), (Shape{2, classes}));
  snaps.pop_back();
  EXPECT_THROW(cla_head_forward(snaps, f.vars, f.bn1, f.bn2, ops::NormMode::eval, g), DimensionError);
}

TEST(ClaHead, ZeroKernelCollapsesToConstant) {
  const std::size_t d = 4, g = 3, m = 2, classes = 5;
  std::mt19937_64 rng(4);
  HeadFixture f(d, g, m, classes, Tensor<double>({d, m, g}), Tensor<double>::randn({d * m, classes}, rng),
                Tensor<double>::randn({classes}, rng));
  std::vector<Var<double>> snaps;
  for (std::size_t i = 0; i < g; ++i) snaps.push_back(f.tape.leaf(Tensor<double>::randn({3, d}, rng, 5.0)));
  const auto logits = cla_head_forward(snaps, f.vars, f.bn1, f.bn2, ops::NormMode::eval, g).value();
  for (std::size_t b = 1; b < 3; ++b)
    for (std::size_t c = 0; c < classes; ++c) EXPECT_EQ(logits.at(b, c), logits.at(0, c));
  // pw(GELU(bn2(0))) with identity bn2 is the bias
  for (std::size_t c = 0; c < classes; ++c) EXPECT_NEAR(logits.at(0, c), f.vars.pw_b.value()[c], 1e-12);
}

TEST(ClaHead, ScalarConvolutionOracle) {
  const double w1 = 0.7, w2 = -1.3, p = 2.0, bias = 0.25;
  HeadFixture f(1, 2, 1, 1, Tensor<double>::from({1, 1, 2}, {w1, w2}), Tensor<double>::from({1, 1}, {p}),
                Tensor<double>::from({1}, {bias}));
  const double c1 = 1.5, c2 = 0.4;
  auto logits = cla_head_forward({f.tape.leaf(Tensor<double>::from({1, 1}, {c1})),
                                  f.tape.leaf(Tensor<double>::from({1, 1}, {c2}))},
                                 f.vars, f.bn1, f.bn2, ops::NormMode::eval, 2);
  const double agg = w1 * c1 + w2 * c2;
  const double gelu = 0.5 * agg * (1 + std::erf(agg / std::sqrt(2.0)));
  EXPECT_NEAR(logits.value()[0], p * gelu + bias, 1e-9);
}

TEST(ClaHead, SingleGroupUnitKernelIsGeluLinearOverCls) {
  const std::size_t d = 3, classes = 2;
  std::mt19937_64 rng(8);
  auto pw = Tensor<double>::randn({d, classes}, rng);
  auto pb = Tensor<double>::randn({classes}, rng);
  HeadFixture f(d, 1, 1, classes, Tensor<double>::ones({d, 1, 1}), pw, pb);
  auto cls = Tensor<double>::randn({2, d}, rng);
  auto logits = cla_head_forward({f.tape.leaf(cls)}, f.vars, f.bn1, f.bn2, ops::NormMode::eval, 1).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < classes; ++c) {
      double acc = pb[c];
      for (std::size_t j = 0; j < d; ++j) acc += ops::gelu_scalar(cls.at(b, j)) * pw.at(j, c);
      EXPECT_NEAR(logits.at(b, c), acc, 1e-9);
    }
}

// ---------------------------------------------------------------- full model

TEST(Model, VanillaConfigMatchesReferenceViT) {
  ModelConfig c = small_config(false, 1.0);
  VitClca<float> model(c, 31);
  randomize(model, 32);
  auto images = random_images<float>(c, 3, 33);
  Tape<float> tape(false);
  auto out = model.forward(tape, images, ops::NormMode::eval);
  ASSERT_EQ(out.logits.shape(), (Shape{3, c.num_classes}));
  double worst = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    auto ref = reference::vanilla_logits(model.params(), c, images.storage(), b);
    for (std::size_t k = 0; k < c.num_classes; ++k)
      worst = std::max(worst, std::abs(double(out.logits.value().at(b, k)) - ref[k]));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Model, IdenticalImagesGiveIdenticalRows) {
  ModelConfig c = small_config(true, 0.5);
  VitClca<float> model(c, 41);
  randomize(model, 42);
  auto one = random_images<float>(c, 1, 43);
  Tensor<float> images({4, c.in_channels, c.image_side, c.image_side});
  for (std::size_t b = 0; b < 4; ++b)
    std::copy(one.storage().begin(), one.storage().end(), images.storage().begin() + b * one.numel());
  Tape<float> tape(false);
  const auto logits = model.forward(tape, images, ops::NormMode::eval).logits.value();
  for (std::size_t b = 1; b < 4; ++b)
    for (std::size_t k = 0; k < c.num_classes; ++k) EXPECT_EQ(logits.at(b, k), logits.at(0, k));
}

TEST(Model, TraceMatchesScheduleForViTBase) {
  ModelConfig c;  // ViT-B/16 at 224 with the default reduction/recovery layers
  c.keep_rate = 0.25;
  VitClca<float> model(c, 51);
  Tape<float> tape(false);
  auto out = model.forward(tape, random_images<float>(c, 1, 52), ops::NormMode::eval);
  EXPECT_EQ(out.trace.token_counts(), token_schedule(c));
  EXPECT_EQ(out.trace.group_snapshots.size(), c.groups());
}

TEST(Model, TraceMatchesScheduleOverRandomConfigs) {
  std::mt19937_64 rng(61);
  const std::vector<double> rates{0.1, 0.25, 0.5, 0.7, 1.0};
  for (int trial = 0; trial < 25; ++trial) {
    ModelConfig c;
    c.image_side = 16;
    c.patch_size = 2 + 2 * (rng() % 2);
    c.width = 8;
    c.heads = 2;
    c.num_classes = 3;
    c.depth = 2 + rng() % 11;
    c.keep_rate = rates[rng() % rates.size()];
    c.reducer = std::vector<ReducerKind>{ReducerKind::evit, ReducerKind::static_topk, ReducerKind::none}[rng() % 3];
    c.clca_enabled = rng() % 4 != 0;
    std::vector<std::size_t> red, rec;
    for (std::size_t l = 1; l < c.depth; ++l) {
      const bool r = rng() % 3 == 0;
      if (r) red.push_back(l);
      if (r || (c.clca_enabled && rng() % 4 == 0)) rec.push_back(l);
    }
    c.reduction_layers = red;
    c.recovery_layers = c.clca_enabled ? rec : red;
    c.validate();
    VitClca<float> model(c, trial);
    Tape<float> tape(false);
    auto out = model.forward(tape, random_images<float>(c, 2, trial), ops::NormMode::eval);
    ASSERT_EQ(out.trace.token_counts(), token_schedule(c)) << "trial " << trial;

    // cache protocol
    EXPECT_EQ(out.trace.cache_at_end, 0u);
    std::set<std::size_t> recovered;
    for (const auto& b : out.trace.blocks) {
      if (b.tokens.recovered > 0) {
        EXPECT_EQ(b.cache_after_recovery, 0u);
        std::set<std::size_t> here(b.recovered_from.begin(), b.recovered_from.end());
        for (std::size_t src : here) {
          EXPECT_TRUE(recovered.insert(src).second) << "block " << src << " recovered twice";
          EXPECT_LT(src, b.tokens.block);
        }
        EXPECT_EQ(b.recovered_from.size(), 2 * here.size());
      }
    }
  }
}

TEST(Model, CachedTokensCarryGradientToEarlyBlocks) {
  ModelConfig c = small_config(true, 0.5);
  VitClca<double> model(c, 71);
  randomize(model, 72);
  auto images = random_images<double>(c, 2, 73);
  auto clr_grad = [&](bool detach) {
    model.params().zero_grad();
    Tape<double> tape;
    ForwardOptions opts;
    opts.detach_recovered = detach;
    auto first = model.forward(tape, images, ops::NormMode::eval);
    auto plan = first.trace.selection();
    opts.fixed_selection = &plan;
    Tape<double> t2;
    auto out = model.forward(t2, images, ops::NormMode::eval, opts);
    t2.backward(ops::sum_all(out.logits));
    return model.params().get("clr_token").grad;
  };
  auto attached = clr_grad(false);
  auto detached = clr_grad(true);
  EXPECT_GT(max_abs_diff(attached, detached), 1e-8);
}

TEST(Model, BatchOfOneNeedsEvalMode) {
  ModelConfig c = small_config(true, 0.5);
  VitClca<float> model(c, 81);
  Tape<float> tape(false);
  auto img = random_images<float>(c, 1, 82);
  EXPECT_NO_THROW(model.forward(tape, img, ops::NormMode::eval));
  Tape<float> t2(false);
  EXPECT_THROW(model.forward(t2, img, ops::NormMode::train), DimensionError);
}
