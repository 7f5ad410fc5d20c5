/*
 * Copyright 2026 The moeforge Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <random>
#include <set>

#include <gtest/gtest.h>

#include "moeforge/error.hpp"
#include "moeforge/layout_planner.hpp"
#include "oracles.hpp"

namespace moeforge {
namespace {

const ModelConfig kProductionModel{61, 3, 256, true};
const ParallelConfig kProductionParallel{31, 8};

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected moeforge::Error";
  return ErrorCode::kInvalidInput;
}

bool has_rule(const std::vector<LayoutViolation>& v, const std::string& rule) {
  for (const auto& x : v) {
    if (x.rule == rule) return true;
  }
  return false;
}

TEST(PlanLayout, ProductionScale) {
  const LayoutPlan plan = plan_layout(kProductionModel, kProductionParallel);
  EXPECT_EQ(plan.ranks().size(), 248u);
  ASSERT_EQ(plan.stage_layers.size(), 31u);
  const auto expected = oracle::dealt_stage_sizes(61, 31);
  std::int64_t total = 0;
  for (std::size_t s = 0; s < 31; ++s) {
    EXPECT_EQ(plan.stage_layers[s].size(), expected[s]);
    EXPECT_GE(plan.stage_layers[s].size(), 1);
    EXPECT_LE(plan.stage_layers[s].size(), 2);
    total += plan.stage_layers[s].size();
  }
  EXPECT_EQ(total, 61);
  EXPECT_EQ(plan.stage_layers[0], (IndexRange{0, 2}));
  EXPECT_EQ(plan.stage_layers[29], (IndexRange{58, 60}));
  EXPECT_EQ(plan.stage_layers[30], (IndexRange{60, 61}));
  EXPECT_EQ(plan.expert_ranges[0], (IndexRange{0, 32}));
  EXPECT_EQ(plan.expert_ranges[7], (IndexRange{224, 256}));
  EXPECT_EQ(plan.embedding_stage, 0);
  EXPECT_EQ(plan.head_stage, 30);
  // Stage 0 holds layers 0-1, both dense; stage 1 holds the third dense layer
  // and the first MoE layer.
  EXPECT_FALSE(plan.is_moe_stage(0));
  ASSERT_EQ(plan.moe_stages.size(), 30u);
  EXPECT_EQ(plan.moe_stages.front(), 1);
  EXPECT_TRUE(validate_layout(plan).empty());
}

TEST(PlanLayout, Degenerate) {
  const LayoutPlan plan = plan_layout({4, 0, 4, true}, {1, 1});
  EXPECT_EQ(plan.ranks().size(), 1u);
  EXPECT_EQ(plan.stage_layers[0], (IndexRange{0, 4}));
  EXPECT_EQ(plan.expert_ranges[0], (IndexRange{0, 4}));
  EXPECT_EQ(plan.moe_stages, std::vector<std::int64_t>{0});
}

TEST(PlanLayout, Infeasible) {
  EXPECT_EQ(code_of([] { plan_layout({3, 0, 8, true}, {4, 2}); }), ErrorCode::kInfeasibleLayout);
  EXPECT_EQ(code_of([] { plan_layout({8, 0, 10, true}, {2, 4}); }), ErrorCode::kInfeasibleLayout);
  EXPECT_EQ(code_of([] { plan_layout({8, 9, 8, true}, {2, 4}); }), ErrorCode::kInfeasibleLayout);
  EXPECT_EQ(code_of([] { plan_layout({8, 0, 8, true}, {0, 4}); }), ErrorCode::kInfeasibleLayout);
}

TEST(PlanLayout, RandomConfigsSatisfyInvariants) {
  std::mt19937 rng(9);
  std::uniform_int_distribution<std::int64_t> pp_d(1, 12), width_d(1, 8), mult_d(1, 6);
  for (int trial = 0; trial < 500; ++trial) {
    const std::int64_t pp = pp_d(rng), width = width_d(rng);
    const std::int64_t layers = pp + std::uniform_int_distribution<std::int64_t>(0, 30)(rng);
    const std::int64_t dense = std::uniform_int_distribution<std::int64_t>(0, layers)(rng);
    const ModelConfig m{layers, dense, width * mult_d(rng), true};
    const LayoutPlan plan = plan_layout(m, {pp, width});
    ASSERT_TRUE(validate_layout(plan).empty());
    ASSERT_EQ(plan, plan_layout(m, {pp, width}));
    const auto expected = oracle::dealt_stage_sizes(layers, pp);
    std::vector<int> seen(static_cast<std::size_t>(layers), 0);
    for (std::int64_t s = 0; s < pp; ++s) {
      ASSERT_EQ(plan.stage_layers[s].size(), expected[s]);
      for (auto l = plan.stage_layers[s].begin; l < plan.stage_layers[s].end; ++l) ++seen[l];
      const bool has_moe = plan.stage_layers[s].end > dense;
      ASSERT_EQ(plan.is_moe_stage(s), has_moe);
    }
    for (const int c : seen) ASSERT_EQ(c, 1);
    std::int64_t next = 0;
    for (const auto& r : plan.expert_ranges) {
      ASSERT_EQ(r.begin, next);
      next = r.end;
    }
    ASSERT_EQ(next, m.num_routed_experts);
    if (dense >= plan.stage_layers[0].size()) { ASSERT_FALSE(plan.is_moe_stage(0)); }
  }
}

TEST(AssignParam, WorkedExamples) {
  const LayoutPlan plan = plan_layout(kProductionModel, kProductionParallel);
  const std::int64_t layer = plan.stage_layers[5].begin;
  const auto expert =
      parse_param_name("model.layers." + std::to_string(layer) + ".mlp.experts.224.up_proj.weight");
  EXPECT_EQ(assign_param(expert, plan), (std::vector<RankId>{{5, 7}}));
  const auto shared = parse_param_name("model.layers." + std::to_string(layer) +
                                       ".mlp.shared_experts.up_proj.weight");
  const auto owners = assign_param(shared, plan);
  ASSERT_EQ(owners.size(), 8u);
  for (std::int64_t j = 0; j < 8; ++j) EXPECT_EQ(owners[j], (RankId{5, j}));
  const auto head = assign_param(parse_param_name("lm_head.weight"), plan);
  EXPECT_EQ(head.front(), (RankId{30, 0}));
  EXPECT_EQ(assign_param(parse_param_name("model.norm.weight"), plan).front().stage, 30);

  const LayoutPlan tiny = plan_layout({4, 0, 4, true}, {1, 1});
  EXPECT_EQ(assign_param(parse_param_name("model.embed_tokens.weight"), tiny),
            (std::vector<RankId>{{0, 0}}));
}

TEST(AssignParam, Errors) {
  const LayoutPlan plan = plan_layout({4, 1, 8, true}, {2, 2});
  EXPECT_EQ(code_of([&] { assign_param(parse_param_name("model.layers.4.self_attn.w"), plan); }),
            ErrorCode::kUnknownLayer);
  EXPECT_EQ(
      code_of([&] { assign_param(parse_param_name("model.layers.2.mlp.experts.8.w"), plan); }),
      ErrorCode::kUnknownExpert);
  EXPECT_TRUE(assign_param(parse_param_name("rotary_cache"), plan).empty());
}

TEST(AssignParam, OwnerCountsForEveryKind) {
  const LayoutPlan plan = plan_layout({6, 2, 8, true}, {3, 4});
  for (std::int64_t l = 0; l < 6; ++l) {
    const std::string p = "model.layers." + std::to_string(l) + ".";
    for (const std::string leaf : {"self_attn.o_proj.weight", "input_layernorm.weight",
                                   "mlp.gate.weight", "mlp.shared_experts.down_proj.weight"}) {
      const auto owners = assign_param(parse_param_name(p + leaf), plan);
      ASSERT_EQ(owners.size(), 4u);
      for (const auto& r : owners) EXPECT_EQ(r.stage, stage_of_layer(plan, l));
    }
    for (std::int64_t e = 0; e < 8; ++e) {
      const auto owners =
          assign_param(parse_param_name(p + "mlp.experts." + std::to_string(e) + ".w"), plan);
      ASSERT_EQ(owners.size(), 1u);
      EXPECT_EQ(owners[0].local, e / 2);
    }
  }
}

TEST(ValidateLayout, ForcedViolations) {
  LayoutPlan overlap = plan_layout(kProductionModel, kProductionParallel);
  overlap.expert_ranges[1].begin = 30;
  const auto v1 = validate_layout(overlap);
  ASSERT_EQ(v1.size(), 1u);
  EXPECT_EQ(v1[0].rule, "expert_overlap");
  EXPECT_NE(v1[0].message.find("0 and 1"), std::string::npos) << v1[0].message;

  LayoutPlan missing = plan_layout(kProductionModel, kProductionParallel);
  missing.stage_layers[30].end = 60;  // drops layer 60
  const auto v2 = validate_layout(missing);
  EXPECT_TRUE(has_rule(v2, "stage_coverage"));
  bool names_stage = false;
  for (const auto& v : v2) names_stage |= v.message.find("stage 30") != std::string::npos;
  EXPECT_TRUE(names_stage);

  LayoutPlan wrong_head = plan_layout(kProductionModel, kProductionParallel);
  wrong_head.head_stage = 0;
  wrong_head.moe_stages.push_back(0);
  const auto v3 = validate_layout(wrong_head);
  EXPECT_TRUE(has_rule(v3, "head_stage"));
  EXPECT_TRUE(has_rule(v3, "moe_stages"));
}

TEST(LayoutJson, RoundTrip) {
  const LayoutPlan plan = plan_layout(kProductionModel, kProductionParallel);
  const auto doc = layout_to_json(plan);
  EXPECT_EQ(doc["pp"], 31);
  EXPECT_EQ(doc["stage_layers"][0], nlohmann::json::array({0, 2}));
  EXPECT_EQ(layout_from_json(nlohmann::json::parse(doc.dump())), plan);
  EXPECT_EQ(code_of([] { layout_from_json(nlohmann::json{{"pp", 1}}); }), ErrorCode::kFormatError);
}

}  // namespace
}  // namespace moeforge
