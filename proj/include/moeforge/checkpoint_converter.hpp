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

// Release checkpoint <-> per-rank trainer shards.
//
// Forward: cast to BF16, group by layer, rename to the trainer dialect, and
// emit one shard per rank with exactly the tensors assign_param gives it.
// Reverse: rename back, merge replicas (after checking they agree) and cast
// to the requested dtype.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moeforge/layout_planner.hpp"
#include "moeforge/tensor_store.hpp"

namespace moeforge {

struct LayeredModel {
  std::vector<Tensor> pre_layers;           // embedding and unplaced names
  std::vector<std::vector<Tensor>> layers;  // dense 0..num_layers-1
  std::vector<Tensor> post_layers;          // final norm and output head

  std::size_t tensor_count() const;
};

/// Throws kDuplicateParam for a repeated name, kMissingLayer when layer
/// indices are not dense from 0.
LayeredModel group_by_layers(const FlatCheckpoint& checkpoint);

/// Trainer-side dialect. Global layer and expert indices are kept; rank
/// coordinates live in the manifest only.
const NamingScheme& trainer_naming();
std::string rename_to_trainer(std::string_view release_name);
std::string rename_to_release(std::string_view trainer_name);

struct ShardEntry {
  RankId rank;
  std::string file;                 // shard_s<stage>_l<local>.adnk
  std::vector<std::string> params;  // trainer names, canonical order
};

struct ShardSet {
  LayoutPlan plan;
  std::vector<ShardEntry> manifest;   // (stage, local) order
  std::vector<FlatCheckpoint> shards;  // parallel to manifest
};

std::string shard_file_name(const RankId& rank);

/// Throws kOrphanParam for tensors without an owner and kConfigMismatch when
/// the checkpoint does not fit the plan's model config.
ShardSet shard(const FlatCheckpoint& checkpoint, const LayoutPlan& plan);

/// Throws kReplicaMismatch if two owners of a replicated tensor disagree and
/// kIncompleteShardSet if ranks or manifest-listed tensors are missing.
FlatCheckpoint merge(const ShardSet& shards, Dtype target);

/// Writes every shard file and then manifest.json into `dir`.
void write_shard_set(const ShardSet& shards, const std::filesystem::path& dir);
/// Reads manifest.json and every shard it lists. Missing shard files raise
/// kIncompleteShardSet.
ShardSet read_shard_set(const std::filesystem::path& manifest_path);

nlohmann::ordered_json manifest_to_json(const ShardSet& shards);

/// Every parameter name of an MLA-attention MoE model under `model`, in release
/// naming: embedding, per-layer norms and attention, dense MLPs or router +
/// shared expert + routed experts, final norm and head.
std::vector<std::string> synthetic_param_names(const ModelConfig& model);

/// Checkpoint holding every synthetic name with a small tensor of
/// deterministic pseudo-random values (seeded), encoded as `dtype`.
FlatCheckpoint synthetic_checkpoint(const ModelConfig& model, Dtype dtype,
                                    std::vector<std::int64_t> shape, std::uint64_t seed);

}  // namespace moeforge
