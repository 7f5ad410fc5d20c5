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

#include <filesystem>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "moeforge/checkpoint_converter.hpp"
#include "moeforge/error.hpp"

namespace moeforge {
namespace {

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

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("moeforge_cc_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

Tensor tiny(const std::string& name, float v = 1.0f) {
  return make_tensor(name, Dtype::kFp32, {1}, std::vector<float>{v});
}

TEST(GroupByLayers, TwoLayers) {
  FlatCheckpoint c;
  for (const char* n : {"model.layers.1.self_attn.q_proj.weight", "model.layers.0.mlp.up_proj.weight",
                        "model.layers.0.self_attn.q_proj.weight", "model.layers.1.mlp.up_proj.weight",
                        "model.embed_tokens.weight", "lm_head.weight", "model.norm.weight"}) {
    c.tensors.push_back(tiny(n));
  }
  const LayeredModel m = group_by_layers(c);
  ASSERT_EQ(m.layers.size(), 2u);
  EXPECT_EQ(m.layers[0].size(), 2u);
  EXPECT_EQ(m.layers[0][0].name, "model.layers.0.mlp.up_proj.weight");
  EXPECT_EQ(m.pre_layers.size(), 1u);
  EXPECT_EQ(m.post_layers.size(), 2u);
  EXPECT_EQ(m.tensor_count(), c.tensors.size());
}

TEST(GroupByLayers, Errors) {
  FlatCheckpoint gap;
  gap.tensors.push_back(tiny("model.layers.3.self_attn.q_proj.weight"));
  EXPECT_EQ(code_of([&] { group_by_layers(gap); }), ErrorCode::kMissingLayer);
  FlatCheckpoint dup;
  dup.tensors.push_back(tiny("model.layers.0.self_attn.q_proj.weight"));
  dup.tensors.push_back(tiny("model.layers.0.self_attn.q_proj.weight"));
  EXPECT_EQ(code_of([&] { group_by_layers(dup); }), ErrorCode::kDuplicateParam);
}

TEST(GroupByLayers, ProductionScaleSynthetic) {
  const ModelConfig model{61, 3, 256, true};
  const LayeredModel m = group_by_layers(synthetic_checkpoint(model, Dtype::kFp8E4M3, {1}, 1));
  ASSERT_EQ(m.layers.size(), 61u);
  ASSERT_EQ(m.pre_layers.size(), 1u);
  EXPECT_EQ(m.pre_layers[0].name, "model.embed_tokens.weight");
  ASSERT_EQ(m.post_layers.size(), 2u);
  EXPECT_EQ(m.post_layers[0].name, "lm_head.weight");
  EXPECT_EQ(m.layers[0].size(), 2u + 7u + 3u);
  EXPECT_EQ(m.layers[60].size(), 2u + 7u + 1u + 3u + 256u * 3u);
}

TEST(Renaming, BijectiveOnSyntheticNames) {
  const ModelConfig model{5, 2, 6, true};
  std::set<std::string> trainer_names;
  for (const auto& name : synthetic_param_names(model)) {
    const std::string trainer = rename_to_trainer(name);
    EXPECT_NE(trainer, name);
    EXPECT_EQ(rename_to_release(trainer), name);
    trainer_names.insert(trainer);
  }
  EXPECT_EQ(trainer_names.size(), synthetic_param_names(model).size());
  EXPECT_EQ(rename_to_trainer("model.layers.3.mlp.experts.5.down_proj.weight"),
            "decoder.layers.3.mlp.experts.5.down_proj.weight");
  EXPECT_EQ(rename_to_trainer("model.layers.0.self_attn.q_proj.weight"),
            "decoder.layers.0.self_attention.q_proj.weight");
  EXPECT_EQ(rename_to_trainer("lm_head.weight"), "output_layer.weight");
}

TEST(Shard, SingleRankHoldsEverything) {
  const ModelConfig model{3, 1, 4, true};
  const auto c = synthetic_checkpoint(model, Dtype::kFp8E4M3, {2, 2}, 3);
  const ShardSet s = shard(c, plan_layout(model, {1, 1}));
  ASSERT_EQ(s.shards.size(), 1u);
  EXPECT_EQ(s.shards[0].tensors.size(), c.tensors.size());
  for (const auto& t : s.shards[0].tensors) EXPECT_EQ(t.dtype, Dtype::kBf16);
  EXPECT_EQ(s.manifest[0].file, "shard_s0_l0.adnk");
}

TEST(Shard, ExpertRangesAndReplication) {
  const ModelConfig model{8, 2, 16, true};
  const LayoutPlan plan = plan_layout(model, {4, 4});
  const auto c = synthetic_checkpoint(model, Dtype::kFp8E4M3, {2}, 9);
  const ShardSet s = shard(c, plan);
  ASSERT_EQ(s.shards.size(), 16u);
  std::map<std::string, int> copies;
  for (std::size_t r = 0; r < s.shards.size(); ++r) {
    const RankId rank = s.manifest[r].rank;
    for (const auto& t : s.shards[r].tensors) {
      ++copies[t.name];
      const ParamName p = parse_param_name(t.name, trainer_naming());
      if (p.kind == ParamKind::kRoutedExpert) {
        EXPECT_EQ(*p.expert / 4, rank.local) << t.name;
      }
      if (p.layer) { EXPECT_TRUE(plan.stage_layers[rank.stage].contains(*p.layer)) << t.name; }
    }
  }
  for (const auto& [name, n] : copies) {
    const ParamName p = parse_param_name(name, trainer_naming());
    EXPECT_EQ(n, p.kind == ParamKind::kRoutedExpert ? 1 : 4) << name;
  }
  EXPECT_EQ(copies.size(), c.tensors.size());
}

TEST(Shard, Errors) {
  const ModelConfig model{2, 0, 2, true};
  const LayoutPlan plan = plan_layout(model, {1, 2});
  auto c = synthetic_checkpoint(model, Dtype::kBf16, {1}, 1);
  auto orphan = c;
  orphan.tensors.push_back(tiny("rotary_cache"));
  EXPECT_EQ(code_of([&] { shard(orphan, plan); }), ErrorCode::kOrphanParam);
  auto extra_expert = c;
  extra_expert.tensors.push_back(tiny("model.layers.1.mlp.experts.2.w"));
  EXPECT_EQ(code_of([&] { shard(extra_expert, plan); }), ErrorCode::kConfigMismatch);
  EXPECT_EQ(code_of([&] { shard(c, plan_layout({3, 0, 2, true}, {1, 2})); }),
            ErrorCode::kConfigMismatch);
  EXPECT_EQ(code_of([&] { shard(c, plan_layout({2, 1, 2, true}, {1, 2})); }),
            ErrorCode::kConfigMismatch);
}

TEST(Merge, RoundTripsAcrossRandomConfigs) {
  std::mt19937 rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    const std::int64_t pp = std::uniform_int_distribution<std::int64_t>(1, 3)(rng);
    const std::int64_t width = std::uniform_int_distribution<std::int64_t>(1, 3)(rng);
    const std::int64_t layers = pp + std::uniform_int_distribution<std::int64_t>(0, 4)(rng);
    const ModelConfig model{layers,
                            std::uniform_int_distribution<std::int64_t>(0, layers)(rng),
                            width * std::uniform_int_distribution<std::int64_t>(1, 3)(rng),
                            trial % 3 != 0};
    const auto dtype = static_cast<Dtype>(trial % 3);
    const auto c = synthetic_checkpoint(model, dtype, {2, 3}, static_cast<std::uint64_t>(trial));
    const auto plan = plan_layout(model, {pp, width});
    ASSERT_EQ(merge(shard(c, plan), Dtype::kBf16), cast_checkpoint(c, Dtype::kBf16));
    if (dtype == Dtype::kFp8E4M3) {
      ASSERT_EQ(merge(shard(c, plan), Dtype::kFp8E4M3), c);
    }
  }
}

TEST(Merge, DetectsReplicaDivergence) {
  const ModelConfig model{2, 1, 4, true};
  ShardSet s = shard(synthetic_checkpoint(model, Dtype::kBf16, {2}, 5), plan_layout(model, {1, 2}));
  auto& t = s.shards[1].tensors.front();
  t.data[0] ^= std::byte{0x01};
  try {
    merge(s, Dtype::kBf16);
    FAIL() << "expected ReplicaMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kReplicaMismatch);
    EXPECT_NE(std::string(e.what()).find("(0,0)"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(0,1)"), std::string::npos);
  }
}

TEST(Merge, DetectsMissingShardsAndTensors) {
  const ModelConfig model{2, 1, 4, true};
  const ShardSet full = shard(synthetic_checkpoint(model, Dtype::kBf16, {2}, 5),
                              plan_layout(model, {2, 2}));
  ShardSet dropped = full;
  dropped.manifest.pop_back();
  dropped.shards.pop_back();
  EXPECT_EQ(code_of([&] { merge(dropped, Dtype::kBf16); }), ErrorCode::kIncompleteShardSet);
  ShardSet lost_tensor = full;
  lost_tensor.shards[2].tensors.pop_back();
  EXPECT_EQ(code_of([&] { merge(lost_tensor, Dtype::kBf16); }), ErrorCode::kIncompleteShardSet);
  ShardSet lost_replica = full;
  lost_replica.shards[3].tensors.erase(lost_replica.shards[3].tensors.begin());
  lost_replica.manifest[3].params.erase(lost_replica.manifest[3].params.begin());
  EXPECT_EQ(code_of([&] { merge(lost_replica, Dtype::kBf16); }), ErrorCode::kIncompleteShardSet);
}

TEST(ShardFiles, WriteReadMerge) {
  const ModelConfig model{4, 1, 8, true};
  const auto c = synthetic_checkpoint(model, Dtype::kFp8E4M3, {2, 2}, 77);
  const auto dir = fresh_dir("files");
  const ShardSet s = shard(c, plan_layout(model, {2, 4}));
  write_shard_set(s, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "shard_s1_l3.adnk"));
  const ShardSet back = read_shard_set(dir / "manifest.json");
  EXPECT_EQ(back.plan, s.plan);
  EXPECT_EQ(merge(back, Dtype::kFp8E4M3), c);

  std::filesystem::remove(dir / "shard_s1_l2.adnk");
  EXPECT_EQ(code_of([&] { read_shard_set(dir); }), ErrorCode::kIncompleteShardSet);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace moeforge
