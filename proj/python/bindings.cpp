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

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>
#include <string>
#include <vector>

#include "moeforge/checkpoint_converter.hpp"
#include "moeforge/collective_simulator.hpp"
#include "moeforge/error.hpp"
#include "moeforge/eval_metrics.hpp"
#include "moeforge/layout_planner.hpp"
#include "moeforge/multitask_scheduler.hpp"
#include "moeforge/tensor_store.hpp"

namespace py = pybind11;
using namespace moeforge;

namespace {

Dtype dtype_arg(const std::string& name) { return parse_dtype(name); }

std::pair<std::int64_t, std::int64_t> as_pair(const IndexRange& r) { return {r.begin, r.end}; }

py::object json_to_py(const nlohmann::ordered_json& doc) {
  return py::module_::import("json").attr("loads")(doc.dump());
}

}  // namespace

PYBIND11_MODULE(_moeforge, m) {
  m.doc() = "moeforge native core";

  PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> error_type;
  error_type.call_once_and_store_result([&]() {
    return py::object(py::exception<Error>(m, "MoeforgeError", PyExc_RuntimeError));
  });
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object type = error_type.get_stored();
      py::object inst = type(e.what());
      inst.attr("code") = std::string(error_code_name(e.code()));
      PyErr_SetObject(type.ptr(), inst.ptr());
    }
  });

  // numerics
  m.def("encode_fp8", &encode_fp8, py::arg("value"));
  m.def("decode_fp8", &decode_fp8, py::arg("code"));
  m.def("is_fp8_nan", &is_fp8_nan, py::arg("code"));
  m.def("encode_bf16", &encode_bf16, py::arg("value"));
  m.def("decode_bf16", &decode_bf16, py::arg("bits"));
  m.def(
      "accumulate",
      [](const std::vector<std::uint16_t>& bits, const std::string& mode) {
        if (mode != "bf16" && mode != "fp32") {
          throw Error(ErrorCode::kInvalidInput, "mode must be bf16 or fp32");
        }
        return accumulate(bits, mode == "bf16" ? AccumulateMode::kBf16 : AccumulateMode::kFp32);
      },
      py::arg("bf16_values"), py::arg("mode"));

  // tensors and checkpoints
  py::class_<Tensor>(m, "Tensor")
      .def_readonly("name", &Tensor::name)
      .def_property_readonly("dtype", [](const Tensor& t) { return std::string(dtype_name(t.dtype)); })
      .def_readonly("shape", &Tensor::shape)
      .def_property_readonly("nbytes", [](const Tensor& t) { return t.data.size(); })
      .def("values", &tensor_values)
      .def("raw", [](const Tensor& t) {
        return py::bytes(reinterpret_cast<const char*>(t.data.data()), t.data.size());
      })
      .def("__eq__", [](const Tensor& a, const Tensor& b) { return a == b; })
      .def("__repr__", [](const Tensor& t) {
        return "<Tensor " + t.name + " " + std::string(dtype_name(t.dtype)) + ">";
      });
  m.def(
      "make_tensor",
      [](std::string name, const std::string& dtype, std::vector<std::int64_t> shape,
         const std::vector<float>& values) {
        return make_tensor(std::move(name), dtype_arg(dtype), std::move(shape), values);
      },
      py::arg("name"), py::arg("dtype"), py::arg("shape"), py::arg("values"));
  m.def("cast_tensor", [](const Tensor& t, const std::string& dtype) { return cast_tensor(t, dtype_arg(dtype)); },
        py::arg("tensor"), py::arg("dtype"));

  py::class_<FlatCheckpoint>(m, "FlatCheckpoint")
      .def(py::init([](std::vector<Tensor> tensors, std::map<std::string, std::string> metadata) {
             return FlatCheckpoint{std::move(tensors), std::move(metadata)};
           }),
           py::arg("tensors"), py::arg("metadata") = std::map<std::string, std::string>{})
      .def_readonly("tensors", &FlatCheckpoint::tensors)
      .def_readonly("metadata", &FlatCheckpoint::metadata)
      .def("names", [](const FlatCheckpoint& c) {
        std::vector<std::string> out;
        for (const auto& t : c.tensors) out.push_back(t.name);
        return out;
      })
      .def("__len__", [](const FlatCheckpoint& c) { return c.tensors.size(); })
      .def("__eq__", [](const FlatCheckpoint& a, const FlatCheckpoint& b) { return a == b; })
      .def("find", [](const FlatCheckpoint& c, const std::string& name) -> std::optional<Tensor> {
        const Tensor* t = c.find(name);
        return t ? std::optional<Tensor>(*t) : std::nullopt;
      });
  m.def("validate_checkpoint", &validate_checkpoint, py::arg("checkpoint"));
  m.def("cast_checkpoint",
        [](const FlatCheckpoint& c, const std::string& dtype) { return cast_checkpoint(c, dtype_arg(dtype)); },
        py::arg("checkpoint"), py::arg("dtype"));
  m.def("read_checkpoint", &read_checkpoint, py::arg("path"));
  m.def("write_checkpoint", &write_checkpoint, py::arg("checkpoint"), py::arg("path"));
  m.def("serialize_checkpoint", [](const FlatCheckpoint& c) {
    const auto bytes = serialize_checkpoint(c);
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  m.def("deserialize_checkpoint", [](const py::bytes& data) {
    const std::string_view view = data;
    return deserialize_checkpoint(std::as_bytes(std::span(view.data(), view.size())));
  });
  m.def("parse_param_name", [](const std::string& name) {
    const auto p = parse_param_name(name);
    py::dict d;
    d["kind"] = std::string(param_kind_name(p.kind));
    d["layer"] = p.layer;
    d["expert"] = p.expert;
    d["leaf"] = p.leaf;
    return d;
  });
  m.def("rename_to_trainer", &rename_to_trainer);
  m.def("rename_to_release", &rename_to_release);

  // layout
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init([](std::int64_t layers, std::int64_t dense, std::int64_t experts, bool shared) {
             return ModelConfig{layers, dense, experts, shared};
           }),
           py::arg("num_layers") = 61, py::arg("num_dense_layers") = 3,
           py::arg("num_routed_experts") = 256, py::arg("has_shared_expert") = true)
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("num_dense_layers", &ModelConfig::num_dense_layers)
      .def_readwrite("num_routed_experts", &ModelConfig::num_routed_experts)
      .def_readwrite("has_shared_expert", &ModelConfig::has_shared_expert);
  py::class_<LayoutPlan>(m, "LayoutPlan")
      .def_readonly("model", &LayoutPlan::model)
      .def_property_readonly("pp", [](const LayoutPlan& p) { return p.parallel.pp; })
      .def_property_readonly("width", [](const LayoutPlan& p) { return p.parallel.width; })
      .def_property_readonly("world_size", [](const LayoutPlan& p) { return p.parallel.world_size(); })
      .def_property_readonly("stage_layers", [](const LayoutPlan& p) {
        std::vector<std::pair<std::int64_t, std::int64_t>> out;
        for (const auto& r : p.stage_layers) out.push_back(as_pair(r));
        return out;
      })
      .def_property_readonly("expert_ranges", [](const LayoutPlan& p) {
        std::vector<std::pair<std::int64_t, std::int64_t>> out;
        for (const auto& r : p.expert_ranges) out.push_back(as_pair(r));
        return out;
      })
      .def_readonly("embedding_stage", &LayoutPlan::embedding_stage)
      .def_readonly("head_stage", &LayoutPlan::head_stage)
      .def_readonly("moe_stages", &LayoutPlan::moe_stages)
      .def("to_json", [](const LayoutPlan& p) { return layout_to_json(p).dump(); })
      .def("__eq__", [](const LayoutPlan& a, const LayoutPlan& b) { return a == b; });
  m.def(
      "plan_layout",
      [](const ModelConfig& model, std::int64_t pp, std::int64_t width) {
        return plan_layout(model, ParallelConfig{pp, width});
      },
      py::arg("model") = ModelConfig{}, py::arg("pp") = 31, py::arg("width") = 8);
  m.def("plan_from_json", [](const std::string& text) {
    try {
      return layout_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kFormatError, e.what());
    }
  });
  m.def("validate_layout", [](const LayoutPlan& p) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& v : validate_layout(p)) out.emplace_back(v.rule, v.message);
    return out;
  });
  m.def("stage_of_layer", &stage_of_layer, py::arg("plan"), py::arg("layer"));
  m.def("owner_of_expert", &owner_of_expert, py::arg("plan"), py::arg("expert"));
  m.def("assign_param", [](const std::string& name, const LayoutPlan& plan) {
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    for (const auto& r : assign_param(parse_param_name(name), plan)) out.emplace_back(r.stage, r.local);
    return out;
  });

  // conversion
  py::class_<ShardSet>(m, "ShardSet")
      .def_readonly("plan", &ShardSet::plan)
      .def_readonly("shards", &ShardSet::shards)
      .def("__len__", [](const ShardSet& s) { return s.shards.size(); })
      .def("manifest", [](const ShardSet& s) { return json_to_py(manifest_to_json(s)); });
  m.def("synthetic_checkpoint",
        [](const ModelConfig& model, const std::string& dtype, std::vector<std::int64_t> shape, std::uint64_t seed) {
          return synthetic_checkpoint(model, dtype_arg(dtype), std::move(shape), seed);
        },
        py::arg("model"), py::arg("dtype") = "fp8_e4m3", py::arg("shape") = std::vector<std::int64_t>{2, 2},
        py::arg("seed") = 0);
  m.def("shard", &shard, py::arg("checkpoint"), py::arg("plan"),
        py::call_guard<py::gil_scoped_release>());
  m.def(
      "merge", [](const ShardSet& s, const std::string& dtype) { return merge(s, dtype_arg(dtype)); },
      py::arg("shards"), py::arg("dtype") = "bf16");
  m.def("write_shard_set", &write_shard_set, py::arg("shards"), py::arg("directory"));
  m.def("read_shard_set", &read_shard_set, py::arg("path"));

  // collectives
  m.def(
      "simulate",
      [](const LayoutPlan& plan, bool stub) {
        const auto outcome = simulate(build_step_program(plan, stub));
        py::dict d = json_to_py(outcome_to_json(outcome));
        d["report"] = explain(outcome);
        return d;
      },
      py::arg("plan"), py::arg("stub") = false);

  // scheduler
  m.def("sequence_nll", [](const std::vector<double>& v) { return sequence_nll(v); }, py::arg("token_nll"));
  m.def("perplexity", [](const std::vector<double>& v) { return perplexity(v); }, py::arg("token_nll"));
  m.def(
      "instance_weight",
      [](double delta, double beta, double w_min, double w_max) {
        const WeightingConfig cfg{beta, w_min, w_max, 1.0};
        validate_config(cfg);
        return instance_weight(delta, cfg);
      },
      py::arg("delta"), py::arg("beta") = 1.0, py::arg("w_min") = 0.1, py::arg("w_max") = 10.0);
  m.def("task_weights", &task_weights, py::arg("metrics"), py::arg("alpha") = 1.0);
  m.def(
      "weighted_loss",
      [](const std::vector<std::tuple<std::string, double, double>>& batch,
         const std::map<std::string, double>& lambdas, const std::string& role) {
        std::vector<WeightedLoss> items;
        for (const auto& [task, w, loss] : batch) items.push_back({task, w, loss});
        if (role != "multiplier" && role != "sampling") {
          throw Error(ErrorCode::kInvalidInput, "role must be multiplier or sampling");
        }
        return weighted_loss(items, lambdas,
                             role == "multiplier" ? LambdaRole::kLossMultiplier : LambdaRole::kSamplingProbability);
      },
      py::arg("batch"), py::arg("lambdas"), py::arg("role") = "multiplier");
  m.def(
      "schedule",
      [](const std::string& jsonl, const std::map<std::string, double>& metrics, double beta, double w_min,
         double w_max, double alpha, std::size_t minibatch) {
        ScheduleOptions opts;
        opts.weighting = {beta, w_min, w_max, alpha};
        validate_config(opts.weighting);
        if (minibatch > 0) {
          opts.mode = ProgressMode::kMiniBatch;
          opts.minibatch_size = minibatch;
        }
        return json_to_py(schedule_to_json(schedule(parse_nll_traces(jsonl), metrics, opts)));
      },
      py::arg("traces"), py::arg("metrics") = std::map<std::string, double>{}, py::arg("beta") = 1.0,
      py::arg("w_min") = 0.1, py::arg("w_max") = 10.0, py::arg("alpha") = 1.0, py::arg("minibatch") = 0);

  // metrics
  m.def(
      "binary_metrics",
      [](const std::vector<std::string>& gold, const std::vector<std::string>& pred) {
        std::vector<Label> g, p;
        for (const auto& s : gold) g.push_back(parse_label(s));
        for (const auto& s : pred) p.push_back(parse_label(s));
        return json_to_py(binary_metrics_to_json(binary_metrics(confusion(g, p))));
      },
      py::arg("gold"), py::arg("pred"));
  m.def("bacc", &bacc, py::arg("pos_recall"), py::arg("neg_recall"));
  m.def("f1_score", &f1_score, py::arg("precision"), py::arg("recall"));
  m.def("round_half_away", &round_half_away, py::arg("value"), py::arg("decimals") = 2);
  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<bool>& positive) {
        if (scores.size() != positive.size()) throw Error(ErrorCode::kInvalidInput, "length mismatch");
        std::vector<ScoredLabel> s;
        for (std::size_t i = 0; i < scores.size(); ++i) s.push_back({scores[i], positive[i]});
        return auc(s);
      },
      py::arg("scores"), py::arg("positive"));
  m.def(
      "recall_at_k",
      [](std::vector<std::string> items, std::map<std::string, double> judgments, std::size_t k) {
        return recall_at_k({std::move(items), std::move(judgments)}, k);
      },
      py::arg("items"), py::arg("judgments"), py::arg("k"));
  m.def(
      "ndcg_at_k",
      [](std::vector<std::string> items, std::map<std::string, double> judgments, std::size_t k) {
        return ndcg_at_k({std::move(items), std::move(judgments)}, k);
      },
      py::arg("items"), py::arg("judgments"), py::arg("k"));
  m.def(
      "batch_reward",
      [](double m_with, double m_base, const std::string& shaping, std::size_t samples) {
        RewardBatch b;
        b.samples.resize(samples);
        const auto r = batch_reward(m_with, m_base, parse_shaping(shaping), std::move(b));
        std::vector<double> per_sample;
        for (const auto& s : r.samples) per_sample.push_back(s.reward);
        return std::make_pair(r.reward, per_sample);
      },
      py::arg("m_with"), py::arg("m_base"), py::arg("shaping") = "identity", py::arg("samples") = 0);
  m.def("cost_per_million", &cost_per_million, py::arg("gpu_cost_per_second"), py::arg("samples_per_second"));
}
