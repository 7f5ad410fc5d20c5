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

// Evaluation and reward arithmetic: confusion-matrix metrics, AUC, ranking
// metrics, downstream batch reward and serving cost.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace moeforge {

enum class Label { kDefect, kNonDefect };

/// Which label is the positive class. Defaults to non-defect positive.
enum class Polarity { kNonDefectPositive, kDefectPositive };

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Throws kInvalidInput on empty input or a length mismatch.
ConfusionCounts confusion(std::span<const Label> gold, std::span<const Label> pred,
                          Polarity polarity = Polarity::kNonDefectPositive);

/// All fields are unrounded percentages in [0, 100].
struct BinaryMetrics {
  double acc = 0;
  double bacc = 0;
  double pos_acc = 0;  // positive recall
  double pos_prec = 0;
  double neg_acc = 0;  // negative recall
  double neg_prec = 0;
  double pos_f1 = 0;
  double neg_f1 = 0;
  double defect_rate = 0;        // gold defects / total
  double model_defect_rate = 0;  // predicted defects / total
};

/// Precision with nothing predicted in the class is 0. A class with no gold
/// examples has undefined recall and raises kDegenerateInput; total == 0
/// raises kInvalidInput.
BinaryMetrics binary_metrics(const ConfusionCounts& counts,
                             Polarity polarity = Polarity::kNonDefectPositive);

/// Harmonic mean; 0 when both inputs are 0.
double f1_score(double precision, double recall);

/// Mean of the two class recalls, both percentages. Throws kInvalidInput
/// outside [0, 100].
double bacc(double pos_recall, double neg_recall);

/// Round half away from zero to `decimals` places, treating values within
/// 1e-9 (in units of the last place) of a tie as ties.
double round_half_away(double value, int decimals = 2);

struct ScoredLabel {
  double score = 0;
  bool positive = false;
};

/// P(score_pos > score_neg) with ties counted 1/2, computed from average
/// ranks. Throws kDegenerateInput unless both classes are present.
double auc(std::span<const ScoredLabel> scored);

struct RankedList {
  std::vector<std::string> items;              // rank 1 first, distinct
  std::map<std::string, double> judgments;  // graded relevance >= 0; absent = 0
};

/// |relevant in top-k| / |relevant|, relevant = judgment > 0. Throws
/// kDegenerateInput without relevant items, kInvalidInput for k == 0 or
/// repeated items.
double recall_at_k(const RankedList& list, std::size_t k);

/// DCG@k / IDCG@k with gain 2^rel - 1 and discount 1/log2(rank + 1). The ideal
/// ordering ranks every judged item. Throws kDegenerateInput when all gains
/// are zero.
double ndcg_at_k(const RankedList& list, std::size_t k);

struct Shaping {
  enum class Kind { kIdentity, kScale, kClipScale };
  Kind kind = Kind::kIdentity;
  double scale = 1.0;
  double lo = 0.0;
  double hi = 0.0;

  static Shaping identity() { return {}; }
  static Shaping scaled(double c) { return {Kind::kScale, c, 0, 0}; }
  static Shaping clipped(double lo, double hi, double c) { return {Kind::kClipScale, c, lo, hi}; }

  double operator()(double x) const;
};

/// "identity", "scale:C" or "clip:LO:HI:C". Throws kInvalidInput.
Shaping parse_shaping(std::string_view spec);

struct RewardSample {
  std::string input;
  std::string output;
  double reward = 0.0;
};

struct RewardBatch {
  std::string task;
  std::vector<RewardSample> samples;
  double m_with = 0.0;
  double m_base = 0.0;
  Shaping shaping;
  double reward = 0.0;
};

/// reward = g(m_with - m_base), written onto the batch and every sample.
RewardBatch batch_reward(double m_with, double m_base, const Shaping& shaping, RewardBatch batch);

/// Dollars per million samples. Throws kInvalidInput for throughput <= 0 or a
/// negative cost.
double cost_per_million(double gpu_cost_per_second, double samples_per_second);

/// Two-decimal percentages, keys as in the metric tables.
nlohmann::ordered_json binary_metrics_to_json(const BinaryMetrics& m);

/// Accepts "defect"/"d"/"0" and "non-defect"/"nondefect"/"n"/"1",
/// case-insensitive. Throws kInvalidInput.
Label parse_label(std::string_view text);

}  // namespace moeforge
