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

#include "moeforge/multitask_scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "moeforge/error.hpp"

namespace moeforge {
namespace {

const std::vector<double>& trace(const SampleRecord& record, const std::string& tag) {
  const auto it = record.nll_by_checkpoint.find(tag);
  if (it == record.nll_by_checkpoint.end()) {
    throw Error(ErrorCode::kUnknownCheckpoint,
                "sample " + record.task + "/" + record.sample + " has no trace for '" + tag + "'");
  }
  return it->second;
}

}  // namespace

void validate_sample(const SampleRecord& record) {
  std::size_t length = 0;
  for (const auto& [tag, nll] : record.nll_by_checkpoint) {
    const std::string where = record.task + "/" + record.sample + "@" + tag;
    if (nll.empty()) throw Error(ErrorCode::kInvalidInput, where + ": empty NLL trace");
    for (const double v : nll) {
      if (!std::isfinite(v) || v < 0) {
        throw Error(ErrorCode::kInvalidInput, where + ": NLL entries must be finite and >= 0");
      }
    }
    if (length != 0 && nll.size() != length) {
      throw Error(ErrorCode::kInvalidInput, where + ": token count differs across checkpoints");
    }
    length = nll.size();
  }
}

void validate_config(const WeightingConfig& cfg) {
  if (!(cfg.beta > 0)) throw Error(ErrorCode::kInvalidInput, "beta must be positive");
  if (!(cfg.w_min > 0)) throw Error(ErrorCode::kInvalidInput, "w_min must be positive");
  if (!(cfg.w_max >= cfg.w_min)) throw Error(ErrorCode::kInvalidInput, "w_max must be >= w_min");
  if (!(cfg.alpha >= 1)) throw Error(ErrorCode::kInvalidInput, "alpha must be >= 1");
}

double sequence_nll(std::span<const double> token_nll) {
  if (token_nll.empty()) throw Error(ErrorCode::kEmptySequence, "no tokens");
  return std::accumulate(token_nll.begin(), token_nll.end(), 0.0);
}

double perplexity(std::span<const double> token_nll) {
  return std::exp(sequence_nll(token_nll) / static_cast<double>(token_nll.size()));
}

double progress(const SampleRecord& record, const std::string& prev_tag,
                const std::string& curr_tag) {
  return perplexity(trace(record, prev_tag)) - perplexity(trace(record, curr_tag));
}

double minibatch_progress(std::span<const SampleRecord> batch, const std::string& prev_tag,
                          const std::string& curr_tag) {
  if (batch.empty()) throw Error(ErrorCode::kEmptySequence, "empty mini-batch");
  double prev_sum = 0, curr_sum = 0;
  std::size_t prev_tokens = 0, curr_tokens = 0;
  for (const auto& r : batch) {
    const auto& prev = trace(r, prev_tag);
    const auto& curr = trace(r, curr_tag);
    prev_sum += sequence_nll(prev);
    curr_sum += sequence_nll(curr);
    prev_tokens += prev.size();
    curr_tokens += curr.size();
  }
  return std::exp(prev_sum / static_cast<double>(prev_tokens)) -
         std::exp(curr_sum / static_cast<double>(curr_tokens));
}

double instance_weight(double delta, const WeightingConfig& cfg) {
  return std::clamp(std::exp(-cfg.beta * delta), cfg.w_min, cfg.w_max);
}

std::map<std::string, double> task_weights(const std::map<std::string, double>& metrics,
                                           double alpha) {
  if (metrics.empty()) throw Error(ErrorCode::kInvalidInput, "no tasks");
  if (!(alpha >= 1)) throw Error(ErrorCode::kInvalidInput, "alpha must be >= 1");
  std::map<std::string, double> powered;
  double total = 0;
  for (const auto& [task, m] : metrics) {
    if (!(m >= 0.0 && m <= 1.0)) {
      throw Error(ErrorCode::kInvalidMetric, "metric for " + task + " is outside [0, 1]");
    }
    const double p = std::pow(1.0 - m, alpha);
    powered[task] = p;
    total += p;
  }
  std::map<std::string, double> out;
  const double uniform = 1.0 / static_cast<double>(metrics.size());
  for (const auto& [task, p] : powered) out[task] = total > 0 ? p / total : uniform;
  return out;
}

std::vector<TaskState> task_states(const std::map<std::string, double>& metrics, double alpha) {
  const auto lambdas = task_weights(metrics, alpha);
  std::vector<TaskState> out;
  for (const auto& [task, m] : metrics) out.push_back({task, m, 1.0 - m, lambdas.at(task)});
  return out;
}

double weighted_loss(std::span<const WeightedLoss> batch,
                     const std::map<std::string, double>& lambdas, LambdaRole role) {
  for (const auto& item : batch) {
    if (!lambdas.contains(item.task)) {
      throw Error(ErrorCode::kUnknownTask, "no task weight for " + item.task);
    }
  }
  if (batch.empty()) return 0.0;
  if (role == LambdaRole::kSamplingProbability) {
    double sum = 0;
    for (const auto& item : batch) sum += item.weight * item.loss;
    return sum / static_cast<double>(batch.size());
  }
  // Per-task expectation estimated by the within-batch mean.
  std::map<std::string, std::pair<double, std::size_t>> per_task;
  for (const auto& item : batch) {
    auto& [sum, count] = per_task[item.task];
    sum += item.weight * item.loss;
    ++count;
  }
  double total = 0;
  for (const auto& [task, acc] : per_task) {
    total += lambdas.at(task) * acc.first / static_cast<double>(acc.second);
  }
  return total;
}

std::string sample_task(const std::map<std::string, double>& lambdas, std::mt19937_64& rng) {
  double total = 0;
  for (const auto& [task, l] : lambdas) {
    if (!(l >= 0) || !std::isfinite(l)) {
      throw Error(ErrorCode::kInvalidWeights, "weight for " + task + " is negative or not finite");
    }
    total += l;
  }
  if (lambdas.empty() || std::fabs(total - 1.0) > 1e-9) {
    throw Error(ErrorCode::kInvalidWeights, "task weights must sum to 1");
  }
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cumulative = 0;
  const std::string* last_positive = nullptr;
  for (const auto& [task, l] : lambdas) {
    if (l <= 0) continue;
    last_positive = &task;
    cumulative += l;
    if (u < cumulative) return task;
  }
  return *last_positive;
}

ScheduleResult schedule(std::span<const SampleRecord> records,
                        const std::map<std::string, double>& metrics,
                        const ScheduleOptions& options) {
  validate_config(options.weighting);
  for (const auto& r : records) validate_sample(r);

  ScheduleResult out;
  out.samples.reserve(records.size());
  for (const auto& r : records) out.samples.push_back({r.task, r.sample, 0.0, 0.0});

  if (options.mode == ProgressMode::kExact) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      out.samples[i].delta = progress(records[i], options.prev_tag, options.curr_tag);
    }
  } else {
    if (options.minibatch_size == 0) {
      throw Error(ErrorCode::kInvalidInput, "minibatch size must be positive");
    }
    std::map<std::string, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < records.size(); ++i) by_task[records[i].task].push_back(i);
    for (const auto& [task, idx] : by_task) {
      for (std::size_t start = 0; start < idx.size(); start += options.minibatch_size) {
        const std::size_t stop = std::min(idx.size(), start + options.minibatch_size);
        std::vector<SampleRecord> batch;
        for (std::size_t k = start; k < stop; ++k) batch.push_back(records[idx[k]]);
        const double delta = minibatch_progress(batch, options.prev_tag, options.curr_tag);
        for (std::size_t k = start; k < stop; ++k) out.samples[idx[k]].delta = delta;
      }
    }
  }
  for (auto& s : out.samples) s.weight = instance_weight(s.delta, options.weighting);

  std::map<std::string, double> effective = metrics;
  if (effective.empty()) {
    for (const auto& r : records) effective.try_emplace(r.task, 0.0);
  } else {
    for (const auto& r : records) {
      if (!effective.contains(r.task)) {
        throw Error(ErrorCode::kUnknownTask, "no metric for task " + r.task);
      }
    }
  }
  if (!effective.empty()) out.tasks = task_states(effective, options.weighting.alpha);
  return out;
}

std::vector<SampleRecord> parse_nll_traces(std::string_view jsonl) {
  std::vector<SampleRecord> out;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= jsonl.size()) {
    const std::size_t nl = std::min(jsonl.find('\n', pos), jsonl.size());
    const std::string_view line = jsonl.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    std::string task, sample, ckpt;
    std::vector<double> nll;
    try {
      const auto doc = nlohmann::json::parse(line);
      task = doc.at("task").get<std::string>();
      sample = doc.at("sample").get<std::string>();
      ckpt = doc.at("ckpt").get<std::string>();
      nll = doc.at("nll").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kFormatError,
                  "trace line " + std::to_string(line_no) + ": " + e.what());
    }
    auto [it, inserted] = index.try_emplace({task, sample}, out.size());
    if (inserted) out.push_back({task, sample, {}});
    auto& record = out[it->second];
    if (!record.nll_by_checkpoint.try_emplace(ckpt, std::move(nll)).second) {
      throw Error(ErrorCode::kInvalidInput, "trace line " + std::to_string(line_no) +
                                                ": duplicate checkpoint " + ckpt + " for " +
                                                task + "/" + sample);
    }
  }
  for (const auto& r : out) validate_sample(r);
  return out;
}

nlohmann::ordered_json schedule_to_json(const ScheduleResult& result) {
  nlohmann::ordered_json doc;
  doc["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : result.samples) {
    doc["samples"].push_back(
        {{"task", s.task}, {"sample", s.sample}, {"delta", s.delta}, {"weight", s.weight}});
  }
  doc["tasks"] = nlohmann::ordered_json::array();
  for (const auto& t : result.tasks) {
    doc["tasks"].push_back({{"task", t.task},
                            {"metric", t.metric},
                            {"difficulty", t.difficulty},
                            {"lambda", t.weight}});
  }
  return doc;
}

}  // namespace moeforge
