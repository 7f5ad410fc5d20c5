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

#include "moeforge/eval_metrics.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>

#include "moeforge/error.hpp"

namespace moeforge {
namespace {

double percent(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

void check_ranked_list(const RankedList& list, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::kInvalidInput, "k must be positive");
  std::set<std::string_view> seen;
  for (const auto& item : list.items) {
    if (!seen.insert(item).second) {
      throw Error(ErrorCode::kInvalidInput, "item '" + item + "' appears twice in the ranking");
    }
  }
  for (const auto& [item, rel] : list.judgments) {
    if (!(rel >= 0) || !std::isfinite(rel)) {
      throw Error(ErrorCode::kInvalidInput, "judgment for '" + item + "' must be finite and >= 0");
    }
  }
}

double relevance(const RankedList& list, const std::string& item) {
  const auto it = list.judgments.find(item);
  return it == list.judgments.end() ? 0.0 : it->second;
}

double gain(double rel) { return std::exp2(rel) - 1.0; }

double parse_number(std::string_view text) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::kInvalidInput, "not a number: '" + std::string(text) + "'");
  }
  return v;
}

}  // namespace

ConfusionCounts confusion(std::span<const Label> gold, std::span<const Label> pred,
                          Polarity polarity) {
  if (gold.size() != pred.size()) {
    throw Error(ErrorCode::kInvalidInput, "gold and prediction lengths differ");
  }
  if (gold.empty()) throw Error(ErrorCode::kInvalidInput, "no examples");
  const Label positive =
      polarity == Polarity::kNonDefectPositive ? Label::kNonDefect : Label::kDefect;
  ConfusionCounts c;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool g = gold[i] == positive;
    const bool p = pred[i] == positive;
    if (g && p) ++c.tp;
    else if (g) ++c.fn;
    else if (p) ++c.fp;
    else ++c.tn;
  }
  return c;
}

double f1_score(double precision, double recall) {
  const double sum = precision + recall;
  return sum == 0 ? 0.0 : 2.0 * precision * recall / sum;
}

BinaryMetrics binary_metrics(const ConfusionCounts& c, Polarity polarity) {
  const std::uint64_t total = c.total();
  if (total == 0) throw Error(ErrorCode::kInvalidInput, "empty confusion matrix");
  if (c.tp + c.fn == 0 || c.tn + c.fp == 0) {
    throw Error(ErrorCode::kDegenerateInput, "a class has no gold examples; recall is undefined");
  }
  BinaryMetrics m;
  m.pos_acc = percent(c.tp, c.tp + c.fn);
  m.neg_acc = percent(c.tn, c.tn + c.fp);
  m.bacc = (m.pos_acc + m.neg_acc) / 2.0;
  m.acc = percent(c.tp + c.tn, total);
  m.pos_prec = percent(c.tp, c.tp + c.fp);
  m.neg_prec = percent(c.tn, c.tn + c.fn);
  m.pos_f1 = f1_score(m.pos_prec, m.pos_acc);
  m.neg_f1 = f1_score(m.neg_prec, m.neg_acc);
  if (polarity == Polarity::kNonDefectPositive) {
    m.defect_rate = percent(c.tn + c.fp, total);
    m.model_defect_rate = percent(c.tn + c.fn, total);
  } else {
    m.defect_rate = percent(c.tp + c.fn, total);
    m.model_defect_rate = percent(c.tp + c.fp, total);
  }
  return m;
}

double bacc(double pos_recall, double neg_recall) {
  for (const double r : {pos_recall, neg_recall}) {
    if (!(r >= 0.0 && r <= 100.0)) {
      throw Error(ErrorCode::kInvalidInput, "recall must be a percentage in [0, 100]");
    }
  }
  return (pos_recall + neg_recall) / 2.0;
}

double round_half_away(double value, int decimals) {
  if (!std::isfinite(value)) return value;
  const double scale = std::pow(10.0, decimals);
  const double scaled = std::fabs(value) * scale;
  double whole = std::floor(scaled);
  if (scaled - whole >= 0.5 - 1e-9) whole += 1.0;
  return std::copysign(whole / scale, value);
}

double auc(std::span<const ScoredLabel> scored) {
  std::vector<ScoredLabel> sorted(scored.begin(), scored.end());
  for (const auto& s : sorted) {
    if (std::isnan(s.score)) throw Error(ErrorCode::kInvalidInput, "NaN score");
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const ScoredLabel& a, const ScoredLabel& b) { return a.score < b.score; });
  double positives = 0, negatives = 0, positive_rank_sum = 0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].score == sorted[i].score) ++j;
    // Ranks i+1..j share their average.
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (sorted[t].positive) {
        positives += 1;
        positive_rank_sum += avg_rank;
      } else {
        negatives += 1;
      }
    }
    i = j;
  }
  if (positives == 0 || negatives == 0) {
    throw Error(ErrorCode::kDegenerateInput, "AUC needs at least one positive and one negative");
  }
  const double u = positive_rank_sum - positives * (positives + 1) / 2.0;
  return u / (positives * negatives);
}

double recall_at_k(const RankedList& list, std::size_t k) {
  check_ranked_list(list, k);
  std::size_t relevant = 0;
  for (const auto& [item, rel] : list.judgments) relevant += rel > 0 ? 1 : 0;
  if (relevant == 0) throw Error(ErrorCode::kDegenerateInput, "no relevant items");
  const std::size_t depth = std::min(k, list.items.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < depth; ++i) hits += relevance(list, list.items[i]) > 0 ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(relevant);
}

double ndcg_at_k(const RankedList& list, std::size_t k) {
  check_ranked_list(list, k);
  std::vector<double> ideal;
  for (const auto& [item, rel] : list.judgments) ideal.push_back(rel);
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0;
  for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i) {
    idcg += gain(ideal[i]) / std::log2(static_cast<double>(i) + 2.0);
  }
  if (idcg == 0) throw Error(ErrorCode::kDegenerateInput, "all gains are zero");
  double dcg = 0;
  for (std::size_t i = 0; i < std::min(k, list.items.size()); ++i) {
    dcg += gain(relevance(list, list.items[i])) / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / idcg;
}

double Shaping::operator()(double x) const {
  switch (kind) {
    case Kind::kIdentity: return x;
    case Kind::kScale: return scale * x;
    case Kind::kClipScale: return std::clamp(scale * x, lo, hi);
  }
  return x;
}

Shaping parse_shaping(std::string_view spec) {
  std::vector<std::string_view> parts;
  std::size_t pos = 0;
  while (true) {
    const std::size_t colon = spec.find(':', pos);
    parts.push_back(spec.substr(pos, colon - pos));
    if (colon == std::string_view::npos) break;
    pos = colon + 1;
  }
  if (parts[0] == "identity" && parts.size() == 1) return Shaping::identity();
  if (parts[0] == "scale" && parts.size() == 2) return Shaping::scaled(parse_number(parts[1]));
  if (parts[0] == "clip" && parts.size() == 4) {
    const double lo = parse_number(parts[1]);
    const double hi = parse_number(parts[2]);
    if (lo > hi) throw Error(ErrorCode::kInvalidInput, "clip bounds are inverted");
    return Shaping::clipped(lo, hi, parse_number(parts[3]));
  }
  throw Error(ErrorCode::kInvalidInput,
              "shaping must be identity, scale:C or clip:LO:HI:C, got '" + std::string(spec) + "'");
}

RewardBatch batch_reward(double m_with, double m_base, const Shaping& shaping, RewardBatch batch) {
  batch.m_with = m_with;
  batch.m_base = m_base;
  batch.shaping = shaping;
  batch.reward = shaping(m_with - m_base);
  for (auto& s : batch.samples) s.reward = batch.reward;
  return batch;
}

double cost_per_million(double gpu_cost_per_second, double samples_per_second) {
  if (!(samples_per_second > 0)) throw Error(ErrorCode::kInvalidInput, "throughput must be positive");
  if (!(gpu_cost_per_second >= 0)) throw Error(ErrorCode::kInvalidInput, "cost must be >= 0");
  return gpu_cost_per_second / samples_per_second * 1e6;
}

nlohmann::ordered_json binary_metrics_to_json(const BinaryMetrics& m) {
  auto r = [](double v) { return round_half_away(v, 2); };
  nlohmann::ordered_json doc;
  doc["DR"] = r(m.defect_rate);
  doc["ModelDR"] = r(m.model_defect_rate);
  doc["BACC"] = r(m.bacc);
  doc["Acc"] = r(m.acc);
  doc["PosAcc"] = r(m.pos_acc);
  doc["PosPrec"] = r(m.pos_prec);
  doc["NegAcc"] = r(m.neg_acc);
  doc["NegPrec"] = r(m.neg_prec);
  doc["PosF1"] = r(m.pos_f1);
  doc["NegF1"] = r(m.neg_f1);
  return doc;
}

Label parse_label(std::string_view text) {
  std::string lower;
  for (const char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) {
      lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (lower == "defect" || lower == "d" || lower == "0") return Label::kDefect;
  if (lower == "non-defect" || lower == "nondefect" || lower == "n" || lower == "1") {
    return Label::kNonDefect;
  }
  throw Error(ErrorCode::kInvalidInput, "unknown label '" + std::string(text) + "'");
}

}  // namespace moeforge
