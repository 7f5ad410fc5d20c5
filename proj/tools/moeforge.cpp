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

// moeforge command-line tool.
//
// Exit codes: 0 ok, 1 usage, 2 format or validation error, 3 simulated
// deadlock, 4 I/O failure.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moeforge/checkpoint_converter.hpp"
#include "moeforge/collective_simulator.hpp"
#include "moeforge/error.hpp"
#include "moeforge/eval_metrics.hpp"
#include "moeforge/layout_planner.hpp"
#include "moeforge/multitask_scheduler.hpp"
#include "moeforge/tensor_store.hpp"
#include "moeforge/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace moeforge {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitDeadlock = 3;
constexpr int kExitIo = 4;

bool g_json = false;

void emit(const ordered_json& doc, const std::string& human) {
  if (g_json) {
    std::cout << doc.dump(2) << "\n";
  } else {
    std::cout << human;
  }
}

json parse_json_file(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormatError, path.string() + ": " + e.what());
  }
}

LayoutPlan load_plan(const fs::path& path) {
  const auto doc = parse_json_file(path);
  // A manifest embeds its plan.
  return layout_from_json(doc.contains("plan") ? doc.at("plan") : doc);
}

std::vector<std::int64_t> parse_shape(const std::string& text) {
  std::vector<std::int64_t> shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      shape.push_back(v);
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kInvalidInput, "bad shape '" + text + "'");
    }
  }
  if (shape.empty()) throw Error(ErrorCode::kInvalidInput, "empty shape");
  return shape;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(trim(cell));
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", round_half_away(v));
  return buf;
}

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// plan ----------------------------------------------------------------------

struct PlanArgs {
  ModelConfig model;
  ParallelConfig parallel;
  bool no_shared = false;
  std::string out;
};

int run_plan(PlanArgs& a) {
  a.model.has_shared_expert = !a.no_shared;
  const auto plan = plan_layout(a.model, a.parallel);
  const auto doc = layout_to_json(plan);
  if (!a.out.empty()) atomic_write_text(a.out, doc.dump(1) + "\n");
  std::ostringstream os;
  os << "stages " << plan.parallel.pp << " x width " << plan.parallel.width << " = "
     << plan.parallel.world_size() << " ranks\n";
  for (std::size_t s = 0; s < plan.stage_layers.size(); ++s) {
    const auto& r = plan.stage_layers[s];
    os << "  stage " << s << ": layers " << r.begin << "-" << r.end - 1
       << (plan.is_moe_stage(static_cast<std::int64_t>(s)) ? " (moe)" : " (dense)") << "\n";
  }
  for (std::size_t l = 0; l < plan.expert_ranges.size(); ++l) {
    const auto& r = plan.expert_ranges[l];
    os << "  local " << l << ": experts " << r.begin << "-" << r.end - 1 << "\n";
  }
  emit(doc, os.str());
  return kExitOk;
}

// cast / synth --------------------------------------------------------------

struct CastArgs {
  std::string input;
  std::string out;
  std::string dtype;
};

ordered_json checkpoint_summary(const FlatCheckpoint& c, const std::string& path) {
  ordered_json j;
  j["path"] = path;
  j["tensors"] = c.tensors.size();
  std::size_t bytes = 0;
  std::map<std::string, std::size_t> dtypes;
  for (const auto& t : c.tensors) {
    bytes += t.data.size();
    ++dtypes[std::string(dtype_name(t.dtype))];
  }
  j["payload_bytes"] = bytes;
  j["dtypes"] = dtypes;
  return j;
}

std::string summary_text(const ordered_json& j) {
  return "wrote " + j["path"].get<std::string>() + ": " + std::to_string(j["tensors"].get<std::size_t>()) +
         " tensors, " + std::to_string(j["payload_bytes"].get<std::size_t>()) + " payload bytes\n";
}

int run_cast(const CastArgs& a) {
  const Dtype target = parse_dtype(a.dtype);
  const auto out = cast_checkpoint(read_checkpoint(a.input), target);
  write_checkpoint(out, a.out);
  const auto j = checkpoint_summary(out, a.out);
  emit(j, summary_text(j));
  return kExitOk;
}

struct SynthArgs {
  ModelConfig model{4, 1, 8, true};
  bool no_shared = false;
  std::string dtype = "fp8_e4m3";
  std::string shape = "2,2";
  std::uint64_t seed = 0;
  std::string out;
};

int run_synth(SynthArgs& a) {
  a.model.has_shared_expert = !a.no_shared;
  const Dtype dtype = parse_dtype(a.dtype);
  const auto shape = parse_shape(a.shape);
  const auto c = synthetic_checkpoint(a.model, dtype, shape, a.seed);
  write_checkpoint(c, a.out);
  const auto j = checkpoint_summary(c, a.out);
  emit(j, summary_text(j));
  return kExitOk;
}

// shard / merge -------------------------------------------------------------

struct ShardArgs {
  std::string input;
  std::string plan;
  std::string out;
};

int run_shard(const ShardArgs& a) {
  const auto plan = load_plan(a.plan);
  const auto shards = shard(read_checkpoint(a.input), plan);
  write_shard_set(shards, a.out);
  ordered_json j;
  j["dir"] = a.out;
  j["manifest"] = (fs::path(a.out) / "manifest.json").string();
  j["shards"] = shards.shards.size();
  std::size_t tensors = 0;
  for (const auto& s : shards.shards) tensors += s.tensors.size();
  j["tensors"] = tensors;
  emit(j, "wrote " + std::to_string(shards.shards.size()) + " shards (" + std::to_string(tensors) +
              " tensors) and manifest to " + a.out + "\n");
  return kExitOk;
}

struct MergeArgs {
  std::string manifest;
  std::string dtype = "bf16";
  std::string out;
};

int run_merge(const MergeArgs& a) {
  const Dtype target = parse_dtype(a.dtype);
  const auto merged = merge(read_shard_set(a.manifest), target);
  write_checkpoint(merged, a.out);
  const auto j = checkpoint_summary(merged, a.out);
  emit(j, summary_text(j));
  return kExitOk;
}

// simulate ------------------------------------------------------------------

struct SimulateArgs {
  std::string plan;
  bool stub = false;
};

int run_simulate(const SimulateArgs& a) {
  const auto outcome = simulate(build_step_program(load_plan(a.plan), a.stub));
  emit(outcome_to_json(outcome), explain(outcome));
  return outcome.verdict == Verdict::kDeadlock ? kExitDeadlock : kExitOk;
}

// schedule ------------------------------------------------------------------

struct ScheduleArgs {
  std::string traces;
  std::string metrics;
  ScheduleOptions options;
  std::size_t minibatch = 0;
  std::string out;
};

int run_schedule(ScheduleArgs& a) {
  validate_config(a.options.weighting);
  if (a.minibatch > 0) {
    a.options.mode = ProgressMode::kMiniBatch;
    a.options.minibatch_size = a.minibatch;
  }
  std::map<std::string, double> metrics;
  if (!a.metrics.empty()) {
    const auto doc = parse_json_file(a.metrics);
    if (!doc.is_object()) throw Error(ErrorCode::kFormatError, "metrics file must be an object");
    for (const auto& [task, value] : doc.items()) {
      if (!value.is_number()) throw Error(ErrorCode::kFormatError, "metric for " + task + " is not a number");
      metrics[task] = value.get<double>();
    }
  }
  const auto records = parse_nll_traces(read_text_file(a.traces));
  const auto result = schedule(records, metrics, a.options);
  const auto doc = schedule_to_json(result);
  if (!a.out.empty()) atomic_write_text(a.out, doc.dump(1) + "\n");
  std::ostringstream os;
  os << "task                 metric  difficulty  lambda\n";
  for (const auto& t : result.tasks) {
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %6.4f  %10.4f  %6.4f\n", t.task.c_str(), t.metric,
                  t.difficulty, t.weight);
    os << line;
  }
  os << "\nsample               task                      delta    weight\n";
  for (const auto& s : result.samples) {
    char line[200];
    std::snprintf(line, sizeof line, "%-20s %-20s %10.4g  %8.4f\n", s.sample.c_str(),
                  s.task.c_str(), s.delta, s.weight);
    os << line;
  }
  emit(doc, os.str());
  return kExitOk;
}

// metrics -------------------------------------------------------------------

struct MetricsArgs {
  std::string csv;
  bool scored = false;
  std::string polarity = "non-defect";
};

Polarity parse_polarity(const std::string& text) {
  if (text == "non-defect") return Polarity::kNonDefectPositive;
  if (text == "defect") return Polarity::kDefectPositive;
  throw Error(ErrorCode::kInvalidInput, "polarity must be non-defect or defect");
}

int run_metrics(const MetricsArgs& a) {
  const Polarity polarity = parse_polarity(a.polarity);
  const auto rows = read_csv(a.csv);
  const Label positive = polarity == Polarity::kNonDefectPositive ? Label::kNonDefect : Label::kDefect;
  auto row_error = [](std::size_t i, const std::string& why) {
    return Error(ErrorCode::kFormatError, "row " + std::to_string(i + 1) + ": " + why);
  };
  if (a.scored) {
    std::vector<ScoredLabel> scored;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != 2) throw row_error(i, "expected score,gold");
      double score = 0;
      try {
        std::size_t used = 0;
        score = std::stod(rows[i][0], &used);
        if (used != rows[i][0].size()) throw std::invalid_argument(rows[i][0]);
      } catch (const std::logic_error&) {
        if (i == 0) continue;  // header
        throw row_error(i, "bad score '" + rows[i][0] + "'");
      }
      scored.push_back({score, parse_label(rows[i][1]) == positive});
    }
    const double value = auc(scored);
    ordered_json j;
    j["n"] = scored.size();
    j["AUC"] = value;
    emit(j, "n " + std::to_string(scored.size()) + "\nAUC " + fmt(value) + "\n");
    return kExitOk;
  }
  std::vector<Label> gold, pred;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != 2) throw row_error(i, "expected gold,pred");
    try {
      const Label g = parse_label(rows[i][0]);
      const Label p = parse_label(rows[i][1]);
      gold.push_back(g);
      pred.push_back(p);
    } catch (const Error&) {
      if (i == 0) continue;  // header
      throw row_error(i, "bad label");
    }
  }
  const auto counts = confusion(gold, pred, polarity);
  const auto m = binary_metrics(counts, polarity);
  const auto table = binary_metrics_to_json(m);
  auto doc = table;
  doc["counts"] = {{"tp", counts.tp}, {"fp", counts.fp}, {"tn", counts.tn}, {"fn", counts.fn}};
  std::ostringstream os;
  os << "n " << counts.total() << "  (tp " << counts.tp << ", fp " << counts.fp << ", tn "
     << counts.tn << ", fn " << counts.fn << ")\n";
  for (const auto& [key, value] : table.items()) {
    os << key << std::string(10 - key.size(), ' ') << fmt2(value.get<double>()) << "\n";
  }
  emit(doc, os.str());
  return kExitOk;
}

// rank-metrics --------------------------------------------------------------

struct RankArgs {
  std::string input;
  std::vector<std::size_t> ks = {10};
};

int run_rank_metrics(const RankArgs& a) {
  const auto doc = parse_json_file(a.input);
  RankedList list;
  try {
    list.items = doc.at("items").get<std::vector<std::string>>();
    list.judgments = doc.at("judgments").get<std::map<std::string, double>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormatError, a.input + ": " + e.what());
  }
  ordered_json out = ordered_json::array();
  std::ostringstream os;
  os << "k      recall   ndcg\n";
  for (const std::size_t k : a.ks) {
    const double r = recall_at_k(list, k), n = ndcg_at_k(list, k);
    out.push_back({{"k", k}, {"recall", r}, {"ndcg", n}});
    char line[96];
    std::snprintf(line, sizeof line, "%-6zu %.4f   %.4f\n", k, r, n);
    os << line;
  }
  emit(out, os.str());
  return kExitOk;
}

// reward --------------------------------------------------------------------

struct RewardArgs {
  double m_with = 0;
  double m_base = 0;
  std::string shaping = "identity";
  std::string batch;
  std::string out;
};

int run_reward(const RewardArgs& a) {
  const Shaping g = parse_shaping(a.shaping);
  RewardBatch batch;
  if (!a.batch.empty()) {
    const auto doc = parse_json_file(a.batch);
    try {
      batch.task = doc.value("task", "");
      for (const auto& s : doc.at("samples")) {
        batch.samples.push_back({s.at("input").get<std::string>(), s.at("output").get<std::string>(), 0.0});
      }
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kFormatError, a.batch + ": " + e.what());
    }
  }
  const auto r = batch_reward(a.m_with, a.m_base, g, batch);
  ordered_json j;
  j["task"] = r.task;
  j["m_with"] = r.m_with;
  j["m_base"] = r.m_base;
  j["shaping"] = a.shaping;
  j["reward"] = r.reward;
  j["samples"] = ordered_json::array();
  for (const auto& s : r.samples) {
    j["samples"].push_back({{"input", s.input}, {"output", s.output}, {"reward", s.reward}});
  }
  if (!a.out.empty()) atomic_write_text(a.out, j.dump(1) + "\n");
  emit(j, "reward " + fmt(r.reward, 10) + " (" + std::to_string(r.samples.size()) + " samples)\n");
  return kExitOk;
}

int main_impl(int argc, char** argv) {
  CLI::App app{"moeforge: layout planning, checkpoint sharding, collective simulation, "
               "multi-task scheduling and evaluation metrics"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_flag("--json", g_json, "Print machine-readable JSON");

  std::function<int()> action;

  PlanArgs plan_args;
  auto* plan = app.add_subcommand("plan", "Plan the pipeline/expert layout");
  plan->add_option("--layers", plan_args.model.num_layers, "Transformer layers")->capture_default_str();
  plan->add_option("--dense-layers", plan_args.model.num_dense_layers, "Leading dense layers")->capture_default_str();
  plan->add_option("--experts", plan_args.model.num_routed_experts, "Routed experts per MoE layer")->capture_default_str();
  plan->add_flag("--no-shared-expert", plan_args.no_shared, "Model has no shared expert");
  plan->add_option("--pp", plan_args.parallel.pp, "Pipeline stages")->capture_default_str();
  plan->add_option("--width", plan_args.parallel.width, "Expert/data parallel width")->capture_default_str();
  plan->add_option("-o,--output", plan_args.out, "Write plan JSON here");
  plan->callback([&] { action = [&] { return run_plan(plan_args); }; });

  CastArgs cast_args;
  auto* cast = app.add_subcommand("cast", "Cast every tensor of a checkpoint");
  cast->add_option("input", cast_args.input, "Input checkpoint")->required();
  cast->add_option("--dtype", cast_args.dtype, "fp8_e4m3, bf16 or fp32")->required();
  cast->add_option("-o,--output", cast_args.out, "Output checkpoint")->required();
  cast->callback([&] { action = [&] { return run_cast(cast_args); }; });

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Write a synthetic release-named checkpoint");
  synth->add_option("--layers", synth_args.model.num_layers)->capture_default_str();
  synth->add_option("--dense-layers", synth_args.model.num_dense_layers)->capture_default_str();
  synth->add_option("--experts", synth_args.model.num_routed_experts)->capture_default_str();
  synth->add_flag("--no-shared-expert", synth_args.no_shared);
  synth->add_option("--dtype", synth_args.dtype)->capture_default_str();
  synth->add_option("--shape", synth_args.shape, "Comma-separated tensor shape")->capture_default_str();
  synth->add_option("--seed", synth_args.seed)->capture_default_str();
  synth->add_option("-o,--output", synth_args.out, "Output checkpoint")->required();
  synth->callback([&] { action = [&] { return run_synth(synth_args); }; });

  ShardArgs shard_args;
  auto* shard_cmd = app.add_subcommand("shard", "Convert and shard a release checkpoint");
  shard_cmd->add_option("input", shard_args.input, "Release checkpoint")->required();
  shard_cmd->add_option("--plan", shard_args.plan, "Plan JSON")->required();
  shard_cmd->add_option("-o,--output", shard_args.out, "Output directory")->required();
  shard_cmd->callback([&] { action = [&] { return run_shard(shard_args); }; });

  MergeArgs merge_args;
  auto* merge_cmd = app.add_subcommand("merge", "Merge a shard set back into a release checkpoint");
  merge_cmd->add_option("manifest", merge_args.manifest, "manifest.json or its directory")->required();
  merge_cmd->add_option("--dtype", merge_args.dtype, "Target dtype")->capture_default_str();
  merge_cmd->add_option("-o,--output", merge_args.out, "Output checkpoint")->required();
  merge_cmd->callback([&] { action = [&] { return run_merge(merge_args); }; });

  SimulateArgs sim_args;
  auto* sim = app.add_subcommand("simulate", "Simulate one optimizer step's collectives");
  sim->add_option("--plan", sim_args.plan, "Plan JSON or shard manifest")->required();
  sim->add_flag("--stub", sim_args.stub, "Give non-MoE stages a stub MoE optimizer");
  sim->callback([&] { action = [&] { return run_simulate(sim_args); }; });

  ScheduleArgs sched_args;
  auto* sched = app.add_subcommand("schedule", "Instance and task weights from NLL traces");
  sched->add_option("traces", sched_args.traces, "NLL trace JSONL")->required();
  sched->add_option("--metrics", sched_args.metrics, "JSON object task -> metric in [0,1]");
  sched->add_option("--beta", sched_args.options.weighting.beta)->capture_default_str();
  sched->add_option("--wmin", sched_args.options.weighting.w_min)->capture_default_str();
  sched->add_option("--wmax", sched_args.options.weighting.w_max)->capture_default_str();
  sched->add_option("--alpha", sched_args.options.weighting.alpha)->capture_default_str();
  sched->add_option("--prev", sched_args.options.prev_tag, "Previous checkpoint tag")->capture_default_str();
  sched->add_option("--curr", sched_args.options.curr_tag, "Current checkpoint tag")->capture_default_str();
  sched->add_option("--minibatch", sched_args.minibatch, "Estimate progress per mini-batch of this size (0 = per sample)")->capture_default_str();
  sched->add_option("-o,--output", sched_args.out, "Write schedule JSON here");
  sched->callback([&] { action = [&] { return run_schedule(sched_args); }; });

  MetricsArgs metrics_args;
  auto* metrics = app.add_subcommand("metrics", "Binary metrics from gold,pred CSV (or AUC from score,gold)");
  metrics->add_option("csv", metrics_args.csv)->required();
  metrics->add_flag("--scored", metrics_args.scored, "Rows are score,gold; report AUC");
  metrics->add_option("--positive", metrics_args.polarity, "Positive class: non-defect or defect")->capture_default_str();
  metrics->callback([&] { action = [&] { return run_metrics(metrics_args); }; });

  RankArgs rank_args;
  auto* rank = app.add_subcommand("rank-metrics", "recall@k and NDCG@k of a ranked list");
  rank->add_option("input", rank_args.input, "JSON {items:[...], judgments:{item: rel}}")->required();
  rank->add_option("-k", rank_args.ks, "Cutoffs")->capture_default_str()->check(CLI::PositiveNumber);
  rank->callback([&] { action = [&] { return run_rank_metrics(rank_args); }; });

  RewardArgs reward_args;
  auto* reward = app.add_subcommand("reward", "Batch reward from downstream metric uplift");
  reward->add_option("--m-with", reward_args.m_with)->required();
  reward->add_option("--m-base", reward_args.m_base)->required();
  reward->add_option("--shaping", reward_args.shaping, "identity, scale:C or clip:LO:HI:C")->capture_default_str();
  reward->add_option("--batch", reward_args.batch, "JSON {task, samples:[{input, output}]}");
  reward->add_option("-o,--output", reward_args.out, "Write the rewarded batch here");
  reward->callback([&] { action = [&] { return run_reward(reward_args); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    return action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::kIoError ? kExitIo : kExitInvalid;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace
}  // namespace moeforge

int main(int argc, char** argv) { return moeforge::main_impl(argc, argv); }
