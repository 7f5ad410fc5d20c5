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

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "moeforge/error.hpp"
#include "moeforge/eval_metrics.hpp"
#include "oracles.hpp"

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

constexpr Label D = Label::kDefect;
constexpr Label N = Label::kNonDefect;

TEST(Confusion, Examples) {
  const std::vector<Label> all_n(5, N);
  EXPECT_EQ(confusion(all_n, all_n), (ConfusionCounts{5, 0, 0, 0}));
  const std::vector<Label> gold = {D, N}, pred = {N, D};
  EXPECT_EQ(confusion(gold, pred), (ConfusionCounts{0, 1, 0, 1}));
  EXPECT_EQ(confusion(gold, pred, Polarity::kDefectPositive), (ConfusionCounts{0, 1, 0, 1}));
  EXPECT_EQ(confusion(gold, gold, Polarity::kDefectPositive), (ConfusionCounts{1, 0, 1, 0}));
  EXPECT_EQ(code_of([] { confusion({}, {}); }), ErrorCode::kInvalidInput);
  EXPECT_EQ(code_of([&] { confusion(gold, all_n); }), ErrorCode::kInvalidInput);
}

TEST(Confusion, MatchesHandTally) {
  std::mt19937 rng(7);
  for (int t = 0; t < 100; ++t) {
    std::vector<Label> gold(20), pred(20);
    ConfusionCounts expect;
    for (int i = 0; i < 20; ++i) {
      gold[i] = rng() % 2 ? N : D;
      pred[i] = rng() % 2 ? N : D;
      const bool g = gold[i] == N, p = pred[i] == N;
      (g ? (p ? expect.tp : expect.fn) : (p ? expect.fp : expect.tn)) += 1;
    }
    ASSERT_EQ(confusion(gold, pred), expect);
  }
}

TEST(BinaryMetrics, Examples) {
  const auto m = binary_metrics({9, 1, 3, 1});
  EXPECT_NEAR(m.pos_acc, 90.0, 1e-12);
  EXPECT_NEAR(m.neg_acc, 75.0, 1e-12);
  EXPECT_NEAR(m.bacc, 82.5, 1e-12);
  EXPECT_NEAR(m.acc, 12.0 / 14 * 100, 1e-12);
  EXPECT_NEAR(m.pos_prec, 90.0, 1e-12);
  EXPECT_NEAR(m.neg_prec, 75.0, 1e-12);
  EXPECT_NEAR(m.defect_rate, 4.0 / 14 * 100, 1e-12);
  EXPECT_NEAR(m.model_defect_rate, 4.0 / 14 * 100, 1e-12);

  const auto perfect = binary_metrics({4, 0, 6, 0});
  EXPECT_EQ(perfect.acc, 100.0);
  EXPECT_EQ(perfect.bacc, 100.0);

  const auto json = binary_metrics_to_json(binary_metrics({9, 1, 3, 1}));
  EXPECT_EQ(json["BACC"], 82.5);
  EXPECT_EQ(json["Acc"], 85.71);
  EXPECT_EQ(json["DR"], 28.57);
}

TEST(BinaryMetrics, Conventions) {
  // Nothing predicted defect: defect precision is 0.
  const auto m = binary_metrics({5, 2, 0, 0});
  EXPECT_EQ(m.neg_prec, 0.0);
  EXPECT_EQ(m.neg_acc, 0.0);
  EXPECT_EQ(m.neg_f1, 0.0);
  EXPECT_EQ(code_of([] { binary_metrics({0, 0, 0, 0}); }), ErrorCode::kInvalidInput);
  EXPECT_EQ(code_of([] { binary_metrics({3, 0, 0, 2}); }), ErrorCode::kDegenerateInput);
}

TEST(BinaryMetrics, Properties) {
  std::mt19937 rng(8);
  for (int t = 0; t < 2000; ++t) {
    const ConfusionCounts c{rng() % 50, rng() % 50, 1 + rng() % 50, 1 + rng() % 50};
    const auto m = binary_metrics(c);
    ASSERT_EQ(m.bacc, (m.pos_acc + m.neg_acc) / 2);
    ASSERT_DOUBLE_EQ(m.pos_f1, f1_score(m.pos_prec, m.pos_acc));
    ASSERT_DOUBLE_EQ(m.neg_f1, f1_score(m.neg_prec, m.neg_acc));
    for (const double v : {m.acc, m.bacc, m.pos_acc, m.pos_prec, m.neg_acc, m.neg_prec, m.pos_f1,
                           m.neg_f1, m.defect_rate, m.model_defect_rate}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 100.0);
    }
    // Swapping polarity swaps the class-wise metrics.
    const ConfusionCounts flipped{c.tn, c.fn, c.tp, c.fp};
    const auto f = binary_metrics(flipped, Polarity::kDefectPositive);
    ASSERT_DOUBLE_EQ(f.pos_acc, m.neg_acc);
    ASSERT_DOUBLE_EQ(f.neg_acc, m.pos_acc);
    ASSERT_DOUBLE_EQ(f.pos_f1, m.neg_f1);
    ASSERT_DOUBLE_EQ(f.bacc, m.bacc);
    ASSERT_DOUBLE_EQ(f.defect_rate, m.defect_rate);
    ASSERT_DOUBLE_EQ(f.model_defect_rate, m.model_defect_rate);
  }
}

TEST(Scalars, PublishedAnchors) {
  EXPECT_NEAR(bacc(94.49, 74.76), 84.625, 1e-12);
  EXPECT_EQ(round_half_away(bacc(94.49, 74.76)), 84.63);
  EXPECT_EQ(round_half_away(bacc(91.59, 79.81)), 85.70);
  EXPECT_EQ(bacc(100, 100), 100.0);
  EXPECT_EQ(code_of([] { bacc(101, 50); }), ErrorCode::kInvalidInput);
  EXPECT_EQ(code_of([] { bacc(50, -1); }), ErrorCode::kInvalidInput);
  EXPECT_EQ(round_half_away(f1_score(73.24, 72.87)), 73.05);
  EXPECT_NEAR(f1_score(73.24, 72.87), 2 * 73.24 * 72.87 / (73.24 + 72.87), 1e-12);
  EXPECT_EQ(f1_score(0, 0), 0.0);
}

TEST(Scalars, RoundHalfAway) {
  EXPECT_EQ(round_half_away(0.125), 0.13);
  EXPECT_EQ(round_half_away(-0.125), -0.13);
  EXPECT_EQ(round_half_away(2.5, 0), 3.0);
  EXPECT_EQ(round_half_away(-2.5, 0), -3.0);
  EXPECT_EQ(round_half_away(1.004), 1.0);
  EXPECT_EQ(round_half_away(133.5333), 133.53);
}

TEST(Auc, Examples) {
  const std::vector<ScoredLabel> ordered = {{0.9, true}, {0.8, true}, {0.1, false}, {0.7, false}};
  EXPECT_EQ(auc(ordered), 1.0);
  const std::vector<ScoredLabel> tie = {{0.5, true}, {0.5, false}};
  EXPECT_EQ(auc(tie), 0.5);
  const std::vector<ScoredLabel> one_class = {{0.5, true}, {0.7, true}};
  EXPECT_EQ(code_of([&] { auc(one_class); }), ErrorCode::kDegenerateInput);
  const std::vector<ScoredLabel> nan = {{std::nan(""), true}, {0.7, false}};
  EXPECT_EQ(code_of([&] { auc(nan); }), ErrorCode::kInvalidInput);
}

TEST(Auc, PairwiseOracleAndMonotoneInvariance) {
  std::mt19937 rng(9);
  for (int t = 0; t < 500; ++t) {
    const int n = 2 + static_cast<int>(rng() % 29);
    std::vector<ScoredLabel> s;
    std::vector<double> pos, neg;
    for (int i = 0; i < n; ++i) {
      // Coarse scores so ties are common.
      const double score = static_cast<double>(rng() % 8) / 8.0;
      const bool p = i == 0 || (i != 1 && rng() % 2);
      s.push_back({score, p});
      (p ? pos : neg).push_back(score);
    }
    const double a = auc(s);
    ASSERT_NEAR(a, oracle::pairwise_auc(pos, neg), 1e-12);
    auto transformed = s;
    for (auto& x : transformed) x.score = std::exp(3 * x.score) - 7;
    ASSERT_NEAR(auc(transformed), a, 1e-12);
  }
}

RankedList make_list(std::vector<std::string> items, std::map<std::string, double> j) {
  return {std::move(items), std::move(j)};
}

TEST(Ranking, Examples) {
  const auto r = make_list({"a", "x", "b"}, {{"a", 1}, {"b", 1}});
  EXPECT_EQ(recall_at_k(r, 2), 0.5);
  EXPECT_EQ(recall_at_k(r, 3), 1.0);
  EXPECT_EQ(recall_at_k(r, 10), 1.0);
  const auto g = make_list({"u", "v"}, {{"v", 3}});
  EXPECT_NEAR(ndcg_at_k(g, 2), 1.0 / std::log2(3.0), 1e-12);
  EXPECT_NEAR(ndcg_at_k(g, 2), 0.6309, 5e-5);
  EXPECT_EQ(ndcg_at_k(make_list({"v", "u"}, {{"v", 3}, {"u", 1}}), 2), 1.0);
  // A judged item missing from the ranking still counts in the ideal.
  EXPECT_NEAR(ndcg_at_k(make_list({"a"}, {{"a", 1}, {"b", 1}}), 2),
              1.0 / (1.0 + 1.0 / std::log2(3.0)), 1e-12);
}

TEST(Ranking, Errors) {
  const auto none = make_list({"a"}, {{"a", 0}});
  EXPECT_EQ(code_of([&] { recall_at_k(none, 1); }), ErrorCode::kDegenerateInput);
  EXPECT_EQ(code_of([&] { ndcg_at_k(none, 1); }), ErrorCode::kDegenerateInput);
  const auto ok = make_list({"a"}, {{"a", 1}});
  EXPECT_EQ(code_of([&] { recall_at_k(ok, 0); }), ErrorCode::kInvalidInput);
  EXPECT_EQ(code_of([&] { ndcg_at_k(ok, 0); }), ErrorCode::kInvalidInput);
  const auto dup = make_list({"a", "a"}, {{"a", 1}});
  EXPECT_EQ(code_of([&] { recall_at_k(dup, 1); }), ErrorCode::kInvalidInput);
  const auto neg = make_list({"a"}, {{"a", -1}});
  EXPECT_EQ(code_of([&] { ndcg_at_k(neg, 1); }), ErrorCode::kInvalidInput);
}

TEST(Ranking, OraclesAndMonotoneInK) {
  std::mt19937 rng(10);
  const std::vector<std::string> pool = {"a", "b", "c", "d", "e", "f"};
  int checked = 0;
  for (int t = 0; t < 1000; ++t) {
    auto items = pool;
    std::shuffle(items.begin(), items.end(), rng);
    items.resize(1 + rng() % 6);
    std::map<std::string, double> j;
    for (const auto& p : pool) {
      if (rng() % 3 != 0) j[p] = static_cast<double>(rng() % 4);
    }
    std::set<std::string> relevant;
    std::vector<double> all_rels;
    for (const auto& [item, rel] : j) {
      if (rel > 0) relevant.insert(item);
      all_rels.push_back(rel);
    }
    for (const auto& item : items) {
      if (!j.count(item)) all_rels.push_back(0);
    }
    if (relevant.empty()) continue;
    ++checked;
    const RankedList list{items, j};
    std::vector<double> ranked;
    for (const auto& item : items) ranked.push_back(j.count(item) ? j.at(item) : 0.0);
    double prev_r = 0, prev_dcg = 0;
    for (std::size_t k = 1; k <= 7; ++k) {
      const double r = recall_at_k(list, k), n = ndcg_at_k(list, k);
      ASSERT_NEAR(r, oracle::recall_by_sets(items, relevant, k), 1e-12);
      ASSERT_NEAR(n, oracle::ndcg_by_permutation(ranked, all_rels, k), 1e-12);
      ASSERT_GE(r, prev_r);
      ASSERT_GE(oracle::dcg(ranked, k), prev_dcg);
      ASSERT_GE(n, 0.0);
      ASSERT_LE(n, 1.0 + 1e-12);
      prev_r = r;
      prev_dcg = oracle::dcg(ranked, k);
    }
  }
  EXPECT_GT(checked, 500);
}

// The ideal is recomputed at every cutoff, so NDCG itself can drop as k grows.
TEST(Ranking, NdcgIsNotMonotoneInK) {
  const auto r = make_list({"a", "x"}, {{"a", 3}, {"b", 3}});
  EXPECT_EQ(ndcg_at_k(r, 1), 1.0);
  EXPECT_LT(ndcg_at_k(r, 2), 1.0);
}

TEST(Ranking, IdealOrderScoresOne) {
  std::mt19937 rng(11);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::pair<double, std::string>> graded;
    for (int i = 0; i < 6; ++i) graded.push_back({static_cast<double>(rng() % 4), std::string(1, 'a' + i)});
    graded[0].first = 2;
    std::sort(graded.begin(), graded.end(), std::greater<>());
    RankedList list;
    for (const auto& [rel, item] : graded) {
      list.items.push_back(item);
      list.judgments[item] = rel;
    }
    for (std::size_t k = 1; k <= 6; ++k) ASSERT_NEAR(ndcg_at_k(list, k), 1.0, 1e-12);
  }
}

TEST(Reward, Examples) {
  RewardBatch b;
  b.task = "kw";
  b.samples = {{"x1", "y1", 0}, {"x2", "y2", 0}, {"x3", "y3", 0}};
  const auto r = batch_reward(0.62, 0.60, Shaping::identity(), b);
  EXPECT_NEAR(r.reward, 0.02, 1e-12);
  for (const auto& s : r.samples) EXPECT_EQ(s.reward, r.reward);
  EXPECT_EQ(batch_reward(0.6, 0.6, Shaping::identity(), b).reward, 0.0);
  const auto scaled = batch_reward(0.62, 0.60, Shaping::scaled(10), b);
  EXPECT_NEAR(scaled.reward, 0.2, 1e-12);
  for (const auto& s : scaled.samples) EXPECT_EQ(s.reward, scaled.reward);
  EXPECT_EQ(batch_reward(0.9, 0.1, Shaping::clipped(-1, 1, 10), b).reward, 1.0);
  EXPECT_EQ(batch_reward(0.1, 0.9, Shaping::clipped(-1, 1, 10), b).reward, -1.0);
  EXPECT_EQ(r.m_with, 0.62);
  EXPECT_EQ(r.m_base, 0.60);
}

TEST(Reward, AntisymmetricUnderIdentity) {
  std::mt19937 rng(12);
  std::uniform_real_distribution<double> d(-1, 1);
  for (int t = 0; t < 100; ++t) {
    const double a = d(rng), c = d(rng);
    ASSERT_EQ(batch_reward(a, c, Shaping::identity(), {}).reward,
              -batch_reward(c, a, Shaping::identity(), {}).reward);
  }
}

TEST(Reward, ParseShaping) {
  EXPECT_EQ(parse_shaping("identity")(0.3), 0.3);
  EXPECT_EQ(parse_shaping("scale:2")(0.25), 0.5);
  EXPECT_EQ(parse_shaping("clip:-1:1:10")(0.5), 1.0);
  for (const char* bad : {"", "scale", "scale:x", "clip:1:0:1", "clip:0:1", "cube"}) {
    EXPECT_EQ(code_of([&] { parse_shaping(bad); }), ErrorCode::kInvalidInput) << bad;
  }
}

TEST(Cost, Examples) {
  EXPECT_EQ(round_half_away(cost_per_million(0.0027, 20.22)), 133.53);
  EXPECT_EQ(round_half_away(cost_per_million(0.0027, 8.79)), 307.17);
  EXPECT_NEAR(cost_per_million(0.0027, 20.22), 134, 1.0);
  EXPECT_NEAR(cost_per_million(0.0027, 8.79), 307, 1.0);
  EXPECT_EQ(cost_per_million(0, 3), 0.0);
  EXPECT_EQ(code_of([] { cost_per_million(1, 0); }), ErrorCode::kInvalidInput);
  EXPECT_EQ(code_of([] { cost_per_million(-1, 2); }), ErrorCode::kInvalidInput);
}

TEST(Labels, Parse) {
  EXPECT_EQ(parse_label("Defect"), D);
  EXPECT_EQ(parse_label("0"), D);
  EXPECT_EQ(parse_label("NON-DEFECT"), N);
  EXPECT_EQ(parse_label("n"), N);
  EXPECT_EQ(code_of([] { parse_label("maybe"); }), ErrorCode::kInvalidInput);
}

}  // namespace
}  // namespace moeforge
