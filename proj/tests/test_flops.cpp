#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "clca/flops.hpp"
#include "clca/model.hpp"
#include "clca/schedule.hpp"
#include "test_helpers.hpp"

using namespace clca;

namespace {

ModelConfig vit_b(std::size_t side, bool clca, double r) {
  ModelConfig c;
  c.image_side = side;
  c.clca_enabled = clca;
  c.keep_rate = r;
  c.num_classes = 200;
  if (!clca) c.recovery_layers = c.reduction_layers;
  return c;
}

double relative_gap(double value, double target) { return std::abs(value - target) / target; }

}  // namespace

TEST(BlockCost, ClosedFormAt785Tokens) {
  const auto c = block_cost(785, 785, 768, 12, 4);
  const double expected = 12.0 * 785 * 768 * 768 + 2.0 * 785 * 785 * 768;
  EXPECT_EQ(static_cast<double>(c.total()), expected);
  EXPECT_NEAR(c.total() / 1e9, 6.50, 0.01);
}

TEST(BlockCost, EmptyFfnContributesNothing) {
  const auto c = block_cost(10, 0, 16, 2, 4);
  EXPECT_EQ(c.ffn, 0u);
  EXPECT_EQ(c.total(), c.qkv + c.out_proj + c.attention);
}

TEST(BlockCost, DoublingTokensScalesTerms) {
  const auto a = block_cost(100, 100, 64, 4, 4), b = block_cost(200, 200, 64, 4, 4);
  EXPECT_EQ(b.qkv, 2 * a.qkv);
  EXPECT_EQ(b.out_proj, 2 * a.out_proj);
  EXPECT_EQ(b.ffn, 2 * a.ffn);
  EXPECT_EQ(b.attention, 4 * a.attention);
}

TEST(ModelCost, VanillaAnchor) {
  const auto r = model_cost(vit_b(448, false, 1.0));
  EXPECT_LT(relative_gap(r.total() / 1e9, 78.5), 0.03) << r.total();
}

TEST(ModelCost, ClcaRows) {
  EXPECT_LT(relative_gap(model_cost(vit_b(448, true, 0.7)).total() / 1e9, 50.9), 0.10);
  EXPECT_LT(relative_gap(model_cost(vit_b(448, true, 0.1)).total() / 1e9, 25.2), 0.10);
}

TEST(ModelCost, TotalIsSumOfParts) {
  const auto r = model_cost(vit_b(224, true, 0.5));
  std::uint64_t sum = r.patch_embed + r.head;
  for (const auto& b : r.blocks) sum += b.qkv + b.attention + b.out_proj + b.ffn;
  EXPECT_EQ(sum, r.total());
  EXPECT_EQ(r.head, 768u * 4 * 2 + 768u * 2 * 200);
  EXPECT_EQ(r.patch_embed, 196u * 3 * 16 * 16 * 768);
}

TEST(ModelCost, VanillaMatchesTextbookForm) {
  for (std::size_t side : {224u, 448u}) {
    const auto c = vit_b(side, false, 1.0);
    const double n = c.num_patches() + 1.0, d = 768;
    const double expected = 12 * (12 * n * d * d + 2 * n * n * d) + c.num_patches() * 3.0 * 256 * d + d * 200;
    EXPECT_EQ(static_cast<double>(model_cost(c).total()), expected);
  }
}

TEST(ModelCost, MonotoneInKeepRateAndResolution) {
  const std::vector<double> rates{0.1, 0.25, 0.5, 0.7, 1.0};
  for (bool clca : {true, false}) {
    for (std::size_t side : {224u, 448u}) {
      std::uint64_t prev = 0;
      for (double r : rates) {
        const auto total = model_cost(vit_b(side, clca, r)).total();
        EXPECT_GT(total, prev) << "side " << side << " r " << r;
        prev = total;
      }
    }
    for (double r : rates) EXPECT_GT(model_cost(vit_b(448, clca, r)).total(), model_cost(vit_b(224, clca, r)).total());
  }
}

TEST(ModelCost, TraceAndScheduleAgree) {
  for (double r : {0.1, 0.25, 0.5, 0.7, 1.0}) {
    auto c = clca::testing::small_config(true, r);
    VitClca<float> model(c, 1);
    Tape<float> tape(false);
    auto out = model.forward(tape, clca::testing::random_images<float>(c, 2, 4), ops::NormMode::eval);
    EXPECT_EQ(model_cost(c, out.trace.token_counts()).total(), model_cost(c).total());
  }
}

TEST(ModelCost, JsonAndCsv) {
  const auto c = vit_b(448, true, 0.7);
  const auto r = model_cost(c);
  const auto j = to_json(r);
  EXPECT_EQ(j["unit"], "MAC");
  EXPECT_EQ(j["total"].get<std::uint64_t>(), r.total());
  EXPECT_EQ(j["blocks"].size(), 12u);
  const std::string row = flops_csv_row(c, r);
  EXPECT_EQ(row.substr(16), ",448,0.7," + std::to_string(r.total()));
  EXPECT_EQ(config_hash(c), config_hash(vit_b(448, true, 0.7)));
  EXPECT_NE(config_hash(c), config_hash(vit_b(448, true, 0.1)));
}

// ---------------------------------------------------------------- schedule

TEST(Schedule, NoReductionKeepsLength) {
  for (const auto& b : token_schedule(vit_b(448, false, 1.0))) {
    EXPECT_EQ(b.t_attn, 785u);
    EXPECT_EQ(b.t_ffn, 785u);
    EXPECT_EQ(b.t_out, 785u);
  }
}

TEST(Schedule, TenPercentWalkThrough) {
  const auto s = token_schedule(vit_b(448, true, 0.1));
  // reducible counts: 784 -> 79 (+FUSED) -> +6 recovered
  EXPECT_EQ(s[3].kept, 79u);
  EXPECT_EQ(s[3].t_ffn, 2u + 80);
  EXPECT_EQ(s[3].t_out, 2u + 86);
  EXPECT_EQ(s[6].kept, 9u);
  EXPECT_EQ(s[6].t_out, 2u + 16);
  EXPECT_EQ(s[9].kept, 2u);
  EXPECT_EQ(s[9].t_out, 2u + 9);
  EXPECT_EQ(s[10].recovered, 2u);
  EXPECT_EQ(s[11].t_attn, 2u + 11);
  EXPECT_EQ(s[11].cache_after, 0u);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_LE(s[i].t_ffn, s[i].t_attn);
    if (i > 0 && s[i - 1].recovered == 0) {
      EXPECT_LE(s[i].t_attn, s[i - 1].t_attn);
    }
  }
}

TEST(Schedule, KeepAllGrowsOnlyAtRecovery) {
  const auto s = token_schedule(vit_b(448, true, 1.0));
  std::size_t t = 786;
  for (const auto& b : s) {
    EXPECT_EQ(b.t_attn, t);
    EXPECT_EQ(b.t_ffn, t);
    EXPECT_FALSE(b.fused);
    t += b.recovered;
    EXPECT_EQ(b.t_out, t);
  }
  EXPECT_EQ(s[3].recovered, 6u);
  EXPECT_EQ(s[6].recovered, 6u);
  EXPECT_EQ(s[9].recovered, 6u);
  EXPECT_EQ(s[10].recovered, 2u);
}

TEST(Schedule, SeventyPercentTrajectory) {
  const auto s = token_schedule(vit_b(448, true, 0.7));
  std::vector<std::pair<std::size_t, std::size_t>> expected{
      {786, 786}, {786, 786}, {786, 786}, {786, 552}, {558, 558}, {558, 558},
      {558, 393}, {399, 399}, {399, 399}, {399, 281}, {287, 287}, {289, 289}};
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(s[i].t_attn, expected[i].first) << "block " << i + 1;
    EXPECT_EQ(s[i].t_ffn, expected[i].second) << "block " << i + 1;
  }
}
