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

// Pipeline x expert/data parallel layout: which stage owns which layers,
// which local rank owns which routed experts, and where each parameter lives.

#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "moeforge/tensor_store.hpp"

namespace moeforge {

struct ModelConfig {
  std::int64_t num_layers = 61;
  std::int64_t num_dense_layers = 3;  // leading layers with a dense MLP
  std::int64_t num_routed_experts = 256;
  bool has_shared_expert = true;

  bool is_moe_layer(std::int64_t layer) const { return layer >= num_dense_layers; }
  bool operator==(const ModelConfig&) const = default;
};

/// `width` is both the expert-parallel and the data-parallel degree.
struct ParallelConfig {
  std::int64_t pp = 31;
  std::int64_t width = 8;

  std::int64_t world_size() const { return pp * width; }
  bool operator==(const ParallelConfig&) const = default;
};

struct RankId {
  std::int64_t stage = 0;
  std::int64_t local = 0;

  auto operator<=>(const RankId&) const = default;
};

std::string to_string(const RankId& rank);  // "(stage,local)"

/// Half-open index range [begin, end).
struct IndexRange {
  std::int64_t begin = 0;
  std::int64_t end = 0;

  std::int64_t size() const { return end - begin; }
  bool contains(std::int64_t i) const { return i >= begin && i < end; }
  bool operator==(const IndexRange&) const = default;
};

struct LayoutPlan {
  ModelConfig model;
  ParallelConfig parallel;
  std::vector<IndexRange> stage_layers;   // indexed by stage
  std::vector<IndexRange> expert_ranges;  // indexed by local rank
  std::int64_t embedding_stage = 0;
  std::int64_t head_stage = 0;
  std::vector<std::int64_t> moe_stages;  // ascending

  /// All ranks in (stage, local) order.
  std::vector<RankId> ranks() const;
  bool is_moe_stage(std::int64_t stage) const;
  bool operator==(const LayoutPlan&) const = default;
};

/// Balanced contiguous layer split (remainder to the earliest stages) and
/// contiguous ascending expert split. Throws kInfeasibleLayout.
LayoutPlan plan_layout(const ModelConfig& model, const ParallelConfig& parallel);

/// Stage owning `layer`. Throws kUnknownLayer.
std::int64_t stage_of_layer(const LayoutPlan& plan, std::int64_t layer);
/// Local rank owning routed expert `expert`. Throws kUnknownExpert.
std::int64_t owner_of_expert(const LayoutPlan& plan, std::int64_t expert);

/// Ranks holding a parameter, ascending. Empty when the name carries no
/// placement information (kOther without a layer index).
std::vector<RankId> assign_param(const ParamName& name, const LayoutPlan& plan);

struct LayoutViolation {
  std::string rule;     // "stage_coverage", "expert_overlap", ...
  std::string message;  // names the offending stage or rank(s)
};

/// Empty when every LayoutPlan invariant holds.
std::vector<LayoutViolation> validate_layout(const LayoutPlan& plan);

nlohmann::ordered_json layout_to_json(const LayoutPlan& plan);
/// Throws kFormatError on missing or mistyped fields. The result is not
/// validated; call validate_layout.
LayoutPlan layout_from_json(const nlohmann::json& doc);

}  // namespace moeforge
