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

#include "moeforge/layout_planner.hpp"

#include <algorithm>

#include "moeforge/error.hpp"

namespace moeforge {
namespace {

std::vector<std::int64_t> compute_moe_stages(const ModelConfig& model,
                                             const std::vector<IndexRange>& stage_layers) {
  std::vector<std::int64_t> out;
  for (std::size_t s = 0; s < stage_layers.size(); ++s) {
    const auto& r = stage_layers[s];
    if (r.end > model.num_dense_layers && r.begin < model.num_layers && r.size() > 0) {
      out.push_back(static_cast<std::int64_t>(s));
    }
  }
  return out;
}

std::vector<RankId> whole_stage(const LayoutPlan& plan, std::int64_t stage) {
  std::vector<RankId> out;
  out.reserve(static_cast<std::size_t>(plan.parallel.width));
  for (std::int64_t j = 0; j < plan.parallel.width; ++j) out.push_back({stage, j});
  return out;
}

// Checks that `ranges` tile [0, total) in order. `what` is "stage" or
// "local rank"; `unit` is "layer" or "expert".
void check_tiling(const std::vector<IndexRange>& ranges, std::int64_t total,
                  const std::string& what, const std::string& unit,
                  std::vector<LayoutViolation>& out) {
  if (ranges.empty()) return;
  const std::string tag = unit == "layer" ? "stage" : "expert";
  if (ranges.front().begin != 0) {
    out.push_back({tag + "_coverage", unit + "s before " + std::to_string(ranges.front().begin) +
                                          " are not assigned (" + what + " 0 starts late)"});
  }
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (ranges[i].end < ranges[i].begin) {
      out.push_back({tag + "_range", what + " " + std::to_string(i) + " has an inverted range"});
    }
    if (i == 0) continue;
    const auto& prev = ranges[i - 1];
    const auto& cur = ranges[i];
    if (cur.begin < prev.end) {
      out.push_back({tag + "_overlap", what + "s " + std::to_string(i - 1) + " and " +
                                           std::to_string(i) + " both own " + unit + " " +
                                           std::to_string(cur.begin)});
    } else if (cur.begin > prev.end) {
      out.push_back({tag + "_coverage", unit + "s [" + std::to_string(prev.end) + ", " +
                                            std::to_string(cur.begin) + ") between " + what +
                                            "s " + std::to_string(i - 1) + " and " +
                                            std::to_string(i) + " are not assigned"});
    }
  }
  if (ranges.back().end != total) {
    out.push_back({tag + "_coverage", what + " " + std::to_string(ranges.size() - 1) +
                                          " ends at " + unit + " " +
                                          std::to_string(ranges.back().end) + ", expected " +
                                          std::to_string(total)});
  }
}

}  // namespace

std::string to_string(const RankId& rank) {
  return "(" + std::to_string(rank.stage) + "," + std::to_string(rank.local) + ")";
}

std::vector<RankId> LayoutPlan::ranks() const {
  std::vector<RankId> out;
  out.reserve(static_cast<std::size_t>(parallel.world_size()));
  for (std::int64_t s = 0; s < parallel.pp; ++s) {
    for (std::int64_t j = 0; j < parallel.width; ++j) out.push_back({s, j});
  }
  return out;
}

bool LayoutPlan::is_moe_stage(std::int64_t stage) const {
  return std::binary_search(moe_stages.begin(), moe_stages.end(), stage);
}

LayoutPlan plan_layout(const ModelConfig& model, const ParallelConfig& parallel) {
  if (parallel.pp <= 0 || parallel.width <= 0) {
    throw Error(ErrorCode::kInfeasibleLayout, "pp and width must be positive");
  }
  if (model.num_layers <= 0 || model.num_routed_experts <= 0 || model.num_dense_layers < 0 ||
      model.num_dense_layers > model.num_layers) {
    throw Error(ErrorCode::kInfeasibleLayout, "invalid model config");
  }
  if (model.num_layers < parallel.pp) {
    throw Error(ErrorCode::kInfeasibleLayout,
                std::to_string(model.num_layers) + " layers cannot fill " +
                    std::to_string(parallel.pp) + " pipeline stages");
  }
  if (model.num_routed_experts % parallel.width != 0) {
    throw Error(ErrorCode::kInfeasibleLayout,
                std::to_string(model.num_routed_experts) + " experts are not divisible by width " +
                    std::to_string(parallel.width));
  }

  LayoutPlan plan;
  plan.model = model;
  plan.parallel = parallel;
  const std::int64_t base = model.num_layers / parallel.pp;
  const std::int64_t extra = model.num_layers % parallel.pp;
  std::int64_t next = 0;
  for (std::int64_t s = 0; s < parallel.pp; ++s) {
    const std::int64_t size = base + (s < extra ? 1 : 0);
    plan.stage_layers.push_back({next, next + size});
    next += size;
  }
  const std::int64_t per_rank = model.num_routed_experts / parallel.width;
  for (std::int64_t j = 0; j < parallel.width; ++j) {
    plan.expert_ranges.push_back({j * per_rank, (j + 1) * per_rank});
  }
  plan.embedding_stage = 0;
  plan.head_stage = parallel.pp - 1;
  plan.moe_stages = compute_moe_stages(model, plan.stage_layers);
  return plan;
}

std::int64_t stage_of_layer(const LayoutPlan& plan, std::int64_t layer) {
  for (std::size_t s = 0; s < plan.stage_layers.size(); ++s) {
    if (plan.stage_layers[s].contains(layer)) return static_cast<std::int64_t>(s);
  }
  throw Error(ErrorCode::kUnknownLayer, "layer " + std::to_string(layer) + " is not in the plan");
}

std::int64_t owner_of_expert(const LayoutPlan& plan, std::int64_t expert) {
  for (std::size_t j = 0; j < plan.expert_ranges.size(); ++j) {
    if (plan.expert_ranges[j].contains(expert)) return static_cast<std::int64_t>(j);
  }
  throw Error(ErrorCode::kUnknownExpert,
              "expert " + std::to_string(expert) + " is not in the plan");
}

std::vector<RankId> assign_param(const ParamName& name, const LayoutPlan& plan) {
  if (name.layer) {
    if (*name.layer < 0 || *name.layer >= plan.model.num_layers) {
      throw Error(ErrorCode::kUnknownLayer,
                  name.raw + ": layer " + std::to_string(*name.layer) + " out of range");
    }
    const std::int64_t stage = stage_of_layer(plan, *name.layer);
    if (name.kind == ParamKind::kRoutedExpert) {
      const std::int64_t e = name.expert.value_or(-1);
      if (e < 0 || e >= plan.model.num_routed_experts) {
        throw Error(ErrorCode::kUnknownExpert,
                    name.raw + ": expert " + std::to_string(e) + " out of range");
      }
      return {{stage, owner_of_expert(plan, e)}};
    }
    // Attention, dense MLP, router, norms, shared expert: replicated across
    // the data-parallel ranks of the owning stage.
    return whole_stage(plan, stage);
  }
  switch (name.kind) {
    case ParamKind::kEmbedding: return whole_stage(plan, plan.embedding_stage);
    case ParamKind::kOutputHead:
    case ParamKind::kNorm: return whole_stage(plan, plan.head_stage);
    default: return {};
  }
}

std::vector<LayoutViolation> validate_layout(const LayoutPlan& plan) {
  std::vector<LayoutViolation> out;
  const auto& m = plan.model;
  const auto& p = plan.parallel;
  if (p.pp <= 0 || p.width <= 0) {
    out.push_back({"parallel_config", "pp and width must be positive"});
    return out;
  }
  if (m.num_layers <= 0 || m.num_routed_experts <= 0 || m.num_dense_layers < 0 ||
      m.num_dense_layers > m.num_layers) {
    out.push_back({"model_config", "invalid model config"});
  }
  if (static_cast<std::int64_t>(plan.stage_layers.size()) != p.pp) {
    out.push_back({"stage_count", "plan has " + std::to_string(plan.stage_layers.size()) +
                                      " stage ranges for pp=" + std::to_string(p.pp)});
  }
  if (static_cast<std::int64_t>(plan.expert_ranges.size()) != p.width) {
    out.push_back({"expert_count", "plan has " + std::to_string(plan.expert_ranges.size()) +
                                       " expert ranges for width=" + std::to_string(p.width)});
  }
  check_tiling(plan.stage_layers, m.num_layers, "stage", "layer", out);
  check_tiling(plan.expert_ranges, m.num_routed_experts, "local rank", "expert", out);

  if (!plan.stage_layers.empty()) {
    const auto [lo, hi] = std::minmax_element(
        plan.stage_layers.begin(), plan.stage_layers.end(),
        [](const IndexRange& a, const IndexRange& b) { return a.size() < b.size(); });
    if (hi->size() - lo->size() > 1) {
      out.push_back({"stage_balance",
                     "stage " + std::to_string(hi - plan.stage_layers.begin()) + " has " +
                         std::to_string(hi->size()) + " layers but stage " +
                         std::to_string(lo - plan.stage_layers.begin()) + " has " +
                         std::to_string(lo->size())});
    }
  }
  if (plan.embedding_stage != 0) {
    out.push_back({"embedding_stage", "embedding must live on stage 0, found stage " +
                                          std::to_string(plan.embedding_stage)});
  }
  if (plan.head_stage != p.pp - 1) {
    out.push_back({"head_stage", "head must live on stage " + std::to_string(p.pp - 1) +
                                     ", found stage " + std::to_string(plan.head_stage)});
  }
  if (plan.moe_stages != compute_moe_stages(m, plan.stage_layers)) {
    out.push_back({"moe_stages", "moe_stages does not match the layer ranges"});
  }
  return out;
}

nlohmann::ordered_json layout_to_json(const LayoutPlan& plan) {
  auto ranges = [](const std::vector<IndexRange>& rs) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rs) arr.push_back({r.begin, r.end});
    return arr;
  };
  nlohmann::ordered_json doc;
  doc["pp"] = plan.parallel.pp;
  doc["width"] = plan.parallel.width;
  doc["num_layers"] = plan.model.num_layers;
  doc["num_dense_layers"] = plan.model.num_dense_layers;
  doc["num_routed_experts"] = plan.model.num_routed_experts;
  doc["has_shared_expert"] = plan.model.has_shared_expert;
  doc["stage_layers"] = ranges(plan.stage_layers);
  doc["expert_ranges"] = ranges(plan.expert_ranges);
  doc["embedding_stage"] = plan.embedding_stage;
  doc["head_stage"] = plan.head_stage;
  doc["moe_stages"] = plan.moe_stages;
  return doc;
}

LayoutPlan layout_from_json(const nlohmann::json& doc) {
  auto ranges = [](const nlohmann::json& arr) {
    std::vector<IndexRange> out;
    for (const auto& r : arr) {
      if (!r.is_array() || r.size() != 2) {
        throw Error(ErrorCode::kFormatError, "range must be a [begin, end] pair");
      }
      out.push_back({r[0].get<std::int64_t>(), r[1].get<std::int64_t>()});
    }
    return out;
  };
  try {
    LayoutPlan plan;
    plan.parallel.pp = doc.at("pp").get<std::int64_t>();
    plan.parallel.width = doc.at("width").get<std::int64_t>();
    plan.model.num_layers = doc.at("num_layers").get<std::int64_t>();
    plan.model.num_dense_layers = doc.at("num_dense_layers").get<std::int64_t>();
    plan.model.num_routed_experts = doc.at("num_routed_experts").get<std::int64_t>();
    plan.model.has_shared_expert = doc.at("has_shared_expert").get<bool>();
    plan.stage_layers = ranges(doc.at("stage_layers"));
    plan.expert_ranges = ranges(doc.at("expert_ranges"));
    plan.embedding_stage = doc.at("embedding_stage").get<std::int64_t>();
    plan.head_stage = doc.at("head_stage").get<std::int64_t>();
    plan.moe_stages = doc.at("moe_stages").get<std::vector<std::int64_t>>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("bad layout plan JSON: ") + e.what());
  }
}

}  // namespace moeforge
