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

#include "moeforge/collective_simulator.hpp"

#include <set>
#include <sstream>

#include "moeforge/error.hpp"

namespace moeforge {
namespace {

// "s1[0-7] s2[0-3,5]" style summary of a sorted rank list.
std::string compact_ranks(const std::vector<RankId>& ranks) {
  std::ostringstream os;
  std::size_t i = 0;
  while (i < ranks.size()) {
    const std::int64_t stage = ranks[i].stage;
    if (i > 0) os << ' ';
    os << 's' << stage << '[';
    bool first = true;
    while (i < ranks.size() && ranks[i].stage == stage) {
      std::size_t j = i;
      while (j + 1 < ranks.size() && ranks[j + 1].stage == stage &&
             ranks[j + 1].local == ranks[j].local + 1) {
        ++j;
      }
      if (!first) os << ',';
      first = false;
      os << ranks[i].local;
      if (j > i) os << '-' << ranks[j].local;
      i = j + 1;
    }
    os << ']';
  }
  return os.str();
}

}  // namespace

StepProgram build_step_program(const LayoutPlan& plan, bool stub_enabled) {
  StepProgram out;
  const auto ranks = plan.ranks();
  out.groups.push_back({kDenseGroup, ranks});
  out.groups.push_back({kMoeGroup, ranks});
  for (const auto& r : ranks) {
    RankProgram prog{r, {}};
    prog.calls.push_back({kDenseGroup, kDenseAllReduce, Payload::kReal});
    if (plan.is_moe_stage(r.stage)) {
      prog.calls.push_back({kMoeGroup, kMoeAllReduce, Payload::kReal});
    } else if (stub_enabled) {
      prog.calls.push_back({kMoeGroup, kMoeAllReduce, Payload::kEmpty});
    }
    out.programs.push_back(std::move(prog));
  }
  return out;
}

SimOutcome simulate(const std::vector<ProcessGroup>& groups,
                    const std::vector<RankProgram>& programs) {
  std::map<std::string, std::size_t> group_index;
  std::vector<std::set<RankId>> member_sets;
  for (const auto& g : groups) {
    if (g.members.empty()) {
      throw Error(ErrorCode::kInvalidInput, "group " + g.name + " has no members");
    }
    if (!group_index.try_emplace(g.name, member_sets.size()).second) {
      throw Error(ErrorCode::kInvalidInput, "group " + g.name + " declared twice");
    }
    member_sets.emplace_back(g.members.begin(), g.members.end());
  }

  // Every rank that appears anywhere gets a (possibly empty) program.
  std::map<RankId, const std::vector<CollectiveCall>*> calls_of;
  static const std::vector<CollectiveCall> kNoCalls;
  for (const auto& members : member_sets) {
    for (const auto& m : members) calls_of.try_emplace(m, &kNoCalls);
  }
  for (const auto& prog : programs) {
    auto [it, inserted] = calls_of.try_emplace(prog.rank, &prog.calls);
    if (!inserted) {
      if (it->second != &kNoCalls) {
        throw Error(ErrorCode::kInvalidInput, "two programs for rank " + to_string(prog.rank));
      }
      it->second = &prog.calls;
    }
    for (std::size_t i = 0; i < prog.calls.size(); ++i) {
      const auto& call = prog.calls[i];
      const auto g = group_index.find(call.group);
      if (g == group_index.end()) {
        throw Error(ErrorCode::kInvalidInput, "rank " + to_string(prog.rank) + " call " +
                                                  std::to_string(i) + " uses undeclared group " +
                                                  call.group);
      }
      if (!member_sets[g->second].contains(prog.rank)) {
        throw Error(ErrorCode::kInvalidInput, "rank " + to_string(prog.rank) +
                                                  " is not a member of group " + call.group);
      }
      if (call.op_tag.empty()) {
        throw Error(ErrorCode::kInvalidInput, "empty op tag at rank " + to_string(prog.rank));
      }
    }
  }

  std::map<RankId, std::size_t> pc;
  for (const auto& [r, _] : calls_of) pc[r] = 0;
  std::vector<std::size_t> completed(groups.size(), 0);

  auto waiting_on = [&](const RankId& r) -> const CollectiveCall* {
    const auto& calls = *calls_of.at(r);
    const std::size_t i = pc.at(r);
    return i < calls.size() ? &calls[i] : nullptr;
  };

  SimOutcome out;
  bool progressed = true;
  while (progressed) {
    progressed = false;
    for (const auto& [rank, _] : calls_of) {
      const CollectiveCall* call = waiting_on(rank);
      if (!call) continue;
      const std::size_t g = group_index.at(call->group);
      bool all_arrived = true;
      for (const auto& m : member_sets[g]) {
        const CollectiveCall* c = waiting_on(m);
        if (!c || c->group != call->group) {
          all_arrived = false;
          break;
        }
      }
      if (!all_arrived) continue;
      for (const auto& m : member_sets[g]) {
        const CollectiveCall* c = waiting_on(m);
        if (c->op_tag != call->op_tag) {
          throw Error(ErrorCode::kCollectiveMismatch,
                      "group " + call->group + " collective #" + std::to_string(completed[g]) +
                          ": rank " + to_string(rank) + " issued " + call->op_tag + " but rank " +
                          to_string(m) + " issued " + c->op_tag);
        }
      }
      for (const auto& m : member_sets[g]) ++pc[m];
      ++completed[g];
      ++out.steps;
      progressed = true;
    }
  }

  for (const auto& [rank, calls] : calls_of) {
    const std::size_t i = pc.at(rank);
    if (i < calls->size()) {
      out.blocked[rank] = {i, (*calls)[i].group};
    } else {
      out.finished[rank] = i;
    }
  }
  if (out.blocked.empty()) return out;

  out.verdict = Verdict::kDeadlock;
  for (const auto& group : groups) {
    const std::size_t g = group_index.at(group.name);
    GroupStall stall{group.name, completed[g], {}, {}};
    for (const auto& m : member_sets[g]) {
      const auto it = out.blocked.find(m);
      if (it != out.blocked.end() && it->second.group == group.name) {
        stall.arrived.push_back(m);
      } else {
        stall.missing.push_back(m);
      }
    }
    if (!stall.arrived.empty()) out.stalls.push_back(std::move(stall));
  }
  return out;
}

std::string explain(const SimOutcome& outcome) {
  std::ostringstream os;
  if (outcome.verdict == Verdict::kCompleted) {
    os << "completed; " << outcome.steps << " collectives matched\n";
    return os.str();
  }
  os << "deadlock; " << outcome.steps << " collectives matched, " << outcome.blocked.size()
     << " ranks blocked\n";
  for (const auto& stall : outcome.stalls) {
    os << "group " << stall.group << ", collective #" << stall.collective_index << ": "
       << stall.arrived.size() << " of " << stall.arrived.size() + stall.missing.size()
       << " members arrived, " << stall.missing.size() << " missing\n";
    os << "  arrived: " << compact_ranks(stall.arrived) << "\n";
    for (const auto& m : stall.missing) {
      os << "  missing " << to_string(m) << ": ";
      if (const auto it = outcome.blocked.find(m); it != outcome.blocked.end()) {
        os << "blocked at call " << it->second.call_index << " on group " << it->second.group;
      } else {
        const auto f = outcome.finished.find(m);
        os << "never arrives (program finished after "
           << (f == outcome.finished.end() ? 0 : f->second) << " calls)";
      }
      os << "\n";
    }
  }
  return os.str();
}

nlohmann::ordered_json outcome_to_json(const SimOutcome& outcome) {
  auto rank_json = [](const RankId& r) {
    return nlohmann::ordered_json{{"stage", r.stage}, {"local", r.local}};
  };
  nlohmann::ordered_json doc;
  doc["verdict"] = outcome.verdict == Verdict::kCompleted ? "completed" : "deadlock";
  doc["steps"] = outcome.steps;
  doc["blocked"] = nlohmann::ordered_json::array();
  for (const auto& [r, site] : outcome.blocked) {
    auto entry = rank_json(r);
    entry["call_index"] = site.call_index;
    entry["group"] = site.group;
    doc["blocked"].push_back(std::move(entry));
  }
  doc["stalls"] = nlohmann::ordered_json::array();
  for (const auto& s : outcome.stalls) {
    nlohmann::ordered_json entry;
    entry["group"] = s.group;
    entry["collective_index"] = s.collective_index;
    entry["arrived"] = nlohmann::ordered_json::array();
    for (const auto& r : s.arrived) entry["arrived"].push_back(rank_json(r));
    entry["missing"] = nlohmann::ordered_json::array();
    for (const auto& r : s.missing) entry["missing"].push_back(rank_json(r));
    doc["stalls"].push_back(std::move(entry));
  }
  return doc;
}

}  // namespace moeforge
