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

// Multi-task SFT weighting: sequence loss, perplexity, learning progress,
// clipped instance weights, difficulty-based task weights and the combined
// weighted objective.

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace moeforge {

struct SampleRecord {
  std::string task;
  std::string sample;
  /// Checkpoint tag -> per-token negative log-probabilities in nats.
  std::map<std::string, std::vector<double>> nll_by_checkpoint;
};

/// Throws kInvalidInput unless every trace is non-empty, finite, >= 0 and all
/// traces share one length.
void validate_sample(const SampleRecord& record);

struct WeightingConfig {
  double beta = 1.0;
  double w_min = 0.1;
  double w_max = 10.0;
  double alpha = 1.0;
};

/// Throws kInvalidInput for beta <= 0, w_min <= 0, w_max < w_min or alpha < 1.
void validate_config(const WeightingConfig& cfg);

/// Sum of token NLLs. Throws kEmptySequence.
double sequence_nll(std::span<const double> token_nll);
/// exp(mean token NLL). Throws kEmptySequence.
double perplexity(std::span<const double> token_nll);

/// ppl(prev) - ppl(curr); positive when the model improved. Throws
/// kUnknownCheckpoint.
double progress(const SampleRecord& record, const std::string& prev_tag,
                const std::string& curr_tag);

/// Mini-batch estimate of progress: one delta for the whole batch, computed
/// from pooled token NLLs, ppl = exp(sum NLL / sum tokens).
double minibatch_progress(std::span<const SampleRecord> batch, const std::string& prev_tag,
                          const std::string& curr_tag);

/// clip(exp(-beta * delta), w_min, w_max).
double instance_weight(double delta, const WeightingConfig& cfg);

struct TaskState {
  std::string task;
  double metric = 0.0;
  double difficulty = 0.0;
  double weight = 0.0;
};

/// lambda_t = (1 - M_t)^alpha / sum (1 - M)^alpha, uniform when every task is
/// solved. Throws kInvalidMetric for M outside [0, 1].
std::map<std::string, double> task_weights(const std::map<std::string, double>& metrics,
                                           double alpha);
std::vector<TaskState> task_states(const std::map<std::string, double>& metrics, double alpha);

/// How the task weights enter training.
enum class LambdaRole {
  kLossMultiplier,       // sum_t lambda_t * mean_{i in t}(w * loss)
  kSamplingProbability,  // batch drawn with P(t) = lambda_t; mean over batch of w * loss
};

struct WeightedLoss {
  std::string task;
  double weight = 1.0;
  double loss = 0.0;
};

/// Throws kUnknownTask when a batch task has no lambda.
double weighted_loss(std::span<const WeightedLoss> batch,
                     const std::map<std::string, double>& lambdas,
                     LambdaRole role = LambdaRole::kLossMultiplier);

/// Draws a task with probability lambda_t. Throws kInvalidWeights unless the
/// weights are non-negative and sum to 1 within 1e-9.
std::string sample_task(const std::map<std::string, double>& lambdas, std::mt19937_64& rng);

enum class ProgressMode { kExact, kMiniBatch };

struct ScheduleOptions {
  WeightingConfig weighting;
  std::string prev_tag = "k-1";
  std::string curr_tag = "k";
  ProgressMode mode = ProgressMode::kExact;
  std::size_t minibatch_size = 32;  // kMiniBatch: consecutive records per task
};

struct SampleWeight {
  std::string task;
  std::string sample;
  double delta = 0.0;
  double weight = 0.0;
};

struct ScheduleResult {
  std::vector<SampleWeight> samples;
  std::vector<TaskState> tasks;
};

/// Instance weights for every record and task weights from `metrics`. When
/// `metrics` is empty every task present in `records` gets M = 0, which
/// yields uniform lambda.
ScheduleResult schedule(std::span<const SampleRecord> records,
                        const std::map<std::string, double>& metrics,
                        const ScheduleOptions& options);

/// Parses line-delimited {"task","sample","ckpt","nll":[...]} records and
/// groups them per (task, sample) in first-seen order. Throws kFormatError on
/// malformed lines and kInvalidInput on invalid traces.
std::vector<SampleRecord> parse_nll_traces(std::string_view jsonl);

nlohmann::ordered_json schedule_to_json(const ScheduleResult& result);

}  // namespace moeforge
