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

#include "moeforge/checkpoint_converter.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "moeforge/error.hpp"
#include "moeforge/util.hpp"

namespace moeforge {
namespace {

constexpr const char* kManifestFile = "manifest.json";

void sort_by_name(std::vector<Tensor>& tensors) {
  std::sort(tensors.begin(), tensors.end(),
            [](const Tensor& a, const Tensor& b) { return a.name < b.name; });
}

std::size_t rank_index(const LayoutPlan& plan, const RankId& rank) {
  return static_cast<std::size_t>(rank.stage * plan.parallel.width + rank.local);
}

// Rejects names whose placement is inconsistent with the plan's model.
void check_against_model(const ParamName& p, const ModelConfig& model) {
  if (p.layer && *p.layer >= model.num_layers) {
    throw Error(ErrorCode::kConfigMismatch,
                p.raw + " references layer " + std::to_string(*p.layer) + " but the model has " +
                    std::to_string(model.num_layers));
  }
  if (p.kind == ParamKind::kRoutedExpert) {
    if (!model.is_moe_layer(*p.layer)) {
      throw Error(ErrorCode::kConfigMismatch, p.raw + " is a routed expert in dense layer " +
                                                  std::to_string(*p.layer));
    }
    if (*p.expert >= model.num_routed_experts) {
      throw Error(ErrorCode::kConfigMismatch,
                  p.raw + " references expert " + std::to_string(*p.expert) +
                      " but the model has " + std::to_string(model.num_routed_experts));
    }
  }
  if (p.kind == ParamKind::kSharedExpert &&
      (!model.has_shared_expert || !model.is_moe_layer(*p.layer))) {
    throw Error(ErrorCode::kConfigMismatch, p.raw + " is a shared expert the model does not have");
  }
}

}  // namespace

std::size_t LayeredModel::tensor_count() const {
  std::size_t n = pre_layers.size() + post_layers.size();
  for (const auto& layer : layers) n += layer.size();
  return n;
}

LayeredModel group_by_layers(const FlatCheckpoint& checkpoint) {
  validate_checkpoint(checkpoint);
  LayeredModel out;
  std::map<std::int64_t, std::vector<Tensor>> by_layer;
  for (const auto& t : checkpoint.tensors) {
    const ParamName p = parse_param_name(t.name);
    if (p.layer) {
      by_layer[*p.layer].push_back(t);
    } else if (p.kind == ParamKind::kNorm || p.kind == ParamKind::kOutputHead) {
      out.post_layers.push_back(t);
    } else {
      out.pre_layers.push_back(t);
    }
  }
  if (!by_layer.empty()) {
    const std::int64_t last = by_layer.rbegin()->first;
    std::vector<std::int64_t> missing;
    for (std::int64_t i = 0; i <= last; ++i) {
      if (!by_layer.contains(i)) missing.push_back(i);
    }
    if (!missing.empty()) {
      std::string list;
      for (const auto i : missing) list += (list.empty() ? "" : ",") + std::to_string(i);
      throw Error(ErrorCode::kMissingLayer, "no tensors for layer(s) " + list);
    }
    out.layers.resize(static_cast<std::size_t>(last + 1));
    for (auto& [i, tensors] : by_layer) {
      sort_by_name(tensors);
      out.layers[static_cast<std::size_t>(i)] = std::move(tensors);
    }
  }
  sort_by_name(out.pre_layers);
  sort_by_name(out.post_layers);
  return out;
}

const NamingScheme& trainer_naming() {
  static const NamingScheme scheme{
      .layers = "decoder.layers.",
      .attention = "self_attention.",
      .mlp = "mlp.",
      .experts = "experts.",
      .shared = "shared_experts.",
      .embedding = "embedding.word_embeddings.",
      .output_head = "output_layer.",
      .final_norm = "decoder.final_layernorm.",
  };
  return scheme;
}

std::string rename_to_trainer(std::string_view release_name) {
  return format_param_name(parse_param_name(release_name, release_naming()), trainer_naming());
}

std::string rename_to_release(std::string_view trainer_name) {
  return format_param_name(parse_param_name(trainer_name, trainer_naming()), release_naming());
}

std::string shard_file_name(const RankId& rank) {
  return "shard_s" + std::to_string(rank.stage) + "_l" + std::to_string(rank.local) + ".adnk";
}

ShardSet shard(const FlatCheckpoint& checkpoint, const LayoutPlan& plan) {
  if (const auto violations = validate_layout(plan); !violations.empty()) {
    throw Error(ErrorCode::kConfigMismatch, "invalid plan: " + violations.front().message);
  }
  const LayeredModel layered = group_by_layers(checkpoint);
  if (static_cast<std::int64_t>(layered.layers.size()) != plan.model.num_layers) {
    throw Error(ErrorCode::kConfigMismatch,
                "checkpoint has " + std::to_string(layered.layers.size()) +
                    " layers but the plan expects " + std::to_string(plan.model.num_layers));
  }

  const std::size_t world = static_cast<std::size_t>(plan.parallel.world_size());
  std::vector<std::vector<std::size_t>> owned(world);
  for (std::size_t i = 0; i < checkpoint.tensors.size(); ++i) {
    const ParamName p = parse_param_name(checkpoint.tensors[i].name);
    check_against_model(p, plan.model);
    const auto owners = assign_param(p, plan);
    if (owners.empty()) throw Error(ErrorCode::kOrphanParam, p.raw + " has no owning rank");
    for (const auto& r : owners) owned[rank_index(plan, r)].push_back(i);
  }

  FlatCheckpoint trainer = cast_checkpoint(checkpoint, Dtype::kBf16);
  parallel_for(trainer.tensors.size(), [&](std::size_t i) {
    trainer.tensors[i].name = rename_to_trainer(trainer.tensors[i].name);
  });

  ShardSet out;
  out.plan = plan;
  const auto ranks = plan.ranks();
  out.manifest.resize(world);
  out.shards.resize(world);
  parallel_for(world, [&](std::size_t r) {
    FlatCheckpoint& s = out.shards[r];
    s.metadata = checkpoint.metadata;
    s.tensors.reserve(owned[r].size());
    for (const auto i : owned[r]) s.tensors.push_back(trainer.tensors[i]);
    s.canonicalize();
    ShardEntry& entry = out.manifest[r];
    entry.rank = ranks[r];
    entry.file = shard_file_name(ranks[r]);
    entry.params.reserve(s.tensors.size());
    for (const auto& t : s.tensors) entry.params.push_back(t.name);
  });
  return out;
}

FlatCheckpoint merge(const ShardSet& shards, Dtype target) {
  const LayoutPlan& plan = shards.plan;
  if (const auto violations = validate_layout(plan); !violations.empty()) {
    throw Error(ErrorCode::kConfigMismatch, "invalid plan: " + violations.front().message);
  }
  if (shards.manifest.size() != shards.shards.size()) {
    throw Error(ErrorCode::kIncompleteShardSet, "manifest and shard counts differ");
  }
  const std::size_t world = static_cast<std::size_t>(plan.parallel.world_size());
  std::vector<const FlatCheckpoint*> by_rank(world, nullptr);
  for (std::size_t i = 0; i < shards.manifest.size(); ++i) {
    const RankId& r = shards.manifest[i].rank;
    if (r.stage < 0 || r.stage >= plan.parallel.pp || r.local < 0 ||
        r.local >= plan.parallel.width) {
      throw Error(ErrorCode::kIncompleteShardSet, "manifest lists unknown rank " + to_string(r));
    }
    if (by_rank[rank_index(plan, r)]) {
      throw Error(ErrorCode::kIncompleteShardSet, "rank " + to_string(r) + " listed twice");
    }
    std::vector<std::string> names;
    for (const auto& t : shards.shards[i].tensors) names.push_back(t.name);
    std::sort(names.begin(), names.end());
    std::vector<std::string> listed = shards.manifest[i].params;
    std::sort(listed.begin(), listed.end());
    if (names != listed) {
      throw Error(ErrorCode::kIncompleteShardSet,
                  "shard " + to_string(r) + " does not hold the tensors its manifest lists");
    }
    by_rank[rank_index(plan, r)] = &shards.shards[i];
  }
  const auto ranks = plan.ranks();
  for (std::size_t r = 0; r < world; ++r) {
    if (!by_rank[r]) throw Error(ErrorCode::kIncompleteShardSet, "missing shard " + to_string(ranks[r]));
  }

  struct Source {
    const Tensor* tensor;
    RankId rank;
    std::size_t copies;
  };
  std::map<std::string, Source> merged;
  for (std::size_t r = 0; r < world; ++r) {
    for (const auto& t : by_rank[r]->tensors) {
      std::string name = rename_to_release(t.name);
      auto [it, inserted] = merged.try_emplace(std::move(name), Source{&t, ranks[r], 1});
      if (inserted) continue;
      const Tensor& first = *it->second.tensor;
      if (first.dtype != t.dtype || first.shape != t.shape || first.data != t.data) {
        throw Error(ErrorCode::kReplicaMismatch,
                    it->first + " differs between ranks " + to_string(it->second.rank) +
                        " and " + to_string(ranks[r]));
      }
      ++it->second.copies;
    }
  }

  FlatCheckpoint release;
  release.metadata = by_rank[0]->metadata;
  release.tensors.reserve(merged.size());
  for (const auto& [name, src] : merged) {
    const auto owners = assign_param(parse_param_name(name), plan);
    if (owners.size() != src.copies) {
      throw Error(ErrorCode::kIncompleteShardSet,
                  name + " is held by " + std::to_string(src.copies) + " ranks, expected " +
                      std::to_string(owners.size()));
    }
    Tensor t = *src.tensor;
    t.name = name;
    release.tensors.push_back(std::move(t));
  }
  FlatCheckpoint out = cast_checkpoint(release, target);
  out.canonicalize();
  return out;
}

nlohmann::ordered_json manifest_to_json(const ShardSet& shards) {
  nlohmann::ordered_json doc;
  doc["plan"] = layout_to_json(shards.plan);
  doc["shards"] = nlohmann::ordered_json::array();
  for (const auto& e : shards.manifest) {
    nlohmann::ordered_json entry;
    entry["stage"] = e.rank.stage;
    entry["local"] = e.rank.local;
    entry["file"] = e.file;
    entry["params"] = e.params;
    doc["shards"].push_back(std::move(entry));
  }
  return doc;
}

void write_shard_set(const ShardSet& shards, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + dir.string());
  parallel_for(shards.shards.size(), [&](std::size_t i) {
    write_checkpoint(shards.shards[i], dir / shards.manifest[i].file);
  });
  // Manifest last: its presence marks a complete shard set.
  atomic_write_text(dir / kManifestFile, manifest_to_json(shards).dump(1) + "\n");
}

ShardSet read_shard_set(const std::filesystem::path& manifest_path) {
  std::filesystem::path path = manifest_path;
  if (std::filesystem::is_directory(path)) path /= kManifestFile;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("bad manifest: ") + e.what());
  }
  ShardSet out;
  try {
    out.plan = layout_from_json(doc.at("plan"));
    for (const auto& entry : doc.at("shards")) {
      ShardEntry e;
      e.rank = {entry.at("stage").get<std::int64_t>(), entry.at("local").get<std::int64_t>()};
      e.file = entry.at("file").get<std::string>();
      e.params = entry.at("params").get<std::vector<std::string>>();
      out.manifest.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("bad manifest: ") + e.what());
  }
  const auto dir = path.parent_path();
  for (const auto& e : out.manifest) {
    if (!std::filesystem::exists(dir / e.file)) {
      throw Error(ErrorCode::kIncompleteShardSet, "missing shard file " + e.file);
    }
  }
  out.shards.resize(out.manifest.size());
  parallel_for(out.manifest.size(), [&](std::size_t i) {
    out.shards[i] = read_checkpoint(dir / out.manifest[i].file);
  });
  return out;
}

std::vector<std::string> synthetic_param_names(const ModelConfig& model) {
  static const char* const kAttention[] = {
      "self_attn.q_a_proj.weight",          "self_attn.q_a_layernorm.weight",
      "self_attn.q_b_proj.weight",          "self_attn.kv_a_proj_with_mqa.weight",
      "self_attn.kv_a_layernorm.weight",    "self_attn.kv_b_proj.weight",
      "self_attn.o_proj.weight",
  };
  static const char* const kProjections[] = {"gate_proj.weight", "up_proj.weight",
                                             "down_proj.weight"};
  std::vector<std::string> names;
  names.emplace_back("model.embed_tokens.weight");
  for (std::int64_t i = 0; i < model.num_layers; ++i) {
    const std::string prefix = "model.layers." + std::to_string(i) + ".";
    names.push_back(prefix + "input_layernorm.weight");
    names.push_back(prefix + "post_attention_layernorm.weight");
    for (const char* a : kAttention) names.push_back(prefix + a);
    if (!model.is_moe_layer(i)) {
      for (const char* p : kProjections) names.push_back(prefix + "mlp." + p);
      continue;
    }
    names.push_back(prefix + "mlp.gate.weight");
    if (model.has_shared_expert) {
      for (const char* p : kProjections) names.push_back(prefix + "mlp.shared_experts." + p);
    }
    for (std::int64_t e = 0; e < model.num_routed_experts; ++e) {
      for (const char* p : kProjections) {
        names.push_back(prefix + "mlp.experts." + std::to_string(e) + "." + p);
      }
    }
  }
  names.emplace_back("model.norm.weight");
  names.emplace_back("lm_head.weight");
  return names;
}

FlatCheckpoint synthetic_checkpoint(const ModelConfig& model, Dtype dtype,
                                    std::vector<std::int64_t> shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
  FlatCheckpoint out;
  out.metadata["format"] = "release";
  for (auto& name : synthetic_param_names(model)) {
    Tensor probe{name, dtype, shape, {}};
    std::vector<float> values(probe.numel());
    for (auto& v : values) v = dist(rng);
    out.tensors.push_back(make_tensor(std::move(name), dtype, shape, values));
  }
  out.canonicalize();
  return out;
}

}  // namespace moeforge
