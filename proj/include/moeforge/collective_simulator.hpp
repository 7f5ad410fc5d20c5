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

// Lockstep simulation of per-rank collective programs over declared process
// groups. No data moves; a collective completes when every member of its
// group has issued its next call on that group.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moeforge/layout_planner.hpp"

namespace moeforge {

struct ProcessGroup {
  std::string name;
  std::vector<RankId> members;  // ascending, distinct
};

enum class Payload { kReal, kEmpty };

struct CollectiveCall {
  std::string group;
  std::string op_tag;  // "dense_grad_allreduce", "moe_grad_allreduce", ...
  Payload payload = Payload::kReal;
};

struct RankProgram {
  RankId rank;
  std::vector<CollectiveCall> calls;
};

struct StepProgram {
  std::vector<ProcessGroup> groups;
  std::vector<RankProgram> programs;  // (stage, local) order
};

inline constexpr const char* kDenseGroup = "dense_optimizer";
inline constexpr const char* kMoeGroup = "moe_optimizer";
inline constexpr const char* kDenseAllReduce = "dense_grad_allreduce";
inline constexpr const char* kMoeAllReduce = "moe_grad_allreduce";

/// One training step of gradient synchronization under `plan`. Every rank
/// all-reduces dense gradients; ranks on MoE stages then all-reduce MoE
/// gradients. Ranks on dense-only stages join the MoE collective with an
/// empty payload only when `stub_enabled`.
StepProgram build_step_program(const LayoutPlan& plan, bool stub_enabled);

enum class Verdict { kCompleted, kDeadlock };

struct BlockedSite {
  std::size_t call_index = 0;
  std::string group;
  bool operator==(const BlockedSite&) const = default;
};

/// State of one group that has waiting members when the simulation stalls.
struct GroupStall {
  std::string group;
  std::size_t collective_index = 0;  // per-group FIFO index that cannot complete
  std::vector<RankId> arrived;
  std::vector<RankId> missing;
  bool operator==(const GroupStall&) const = default;
};

struct SimOutcome {
  Verdict verdict = Verdict::kCompleted;
  std::map<RankId, BlockedSite> blocked;
  std::size_t steps = 0;  // matched collectives
  std::vector<GroupStall> stalls;
  std::map<RankId, std::size_t> finished;  // rank -> calls completed, for ranks that ran to the end
  bool operator==(const SimOutcome&) const = default;
};

/// Throws kInvalidInput when a program names an undeclared group or a group
/// it is not a member of, and kCollectiveMismatch when matched calls carry
/// different op tags.
SimOutcome simulate(const std::vector<ProcessGroup>& groups,
                    const std::vector<RankProgram>& programs);

inline SimOutcome simulate(const StepProgram& program) {
  return simulate(program.groups, program.programs);
}

/// "completed; N collectives matched", or a per-group table of arrived and
/// missing members for a deadlock.
std::string explain(const SimOutcome& outcome);

nlohmann::ordered_json outcome_to_json(const SimOutcome& outcome);

}  // namespace moeforge
