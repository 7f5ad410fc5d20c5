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

#include "moeforge/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "moeforge/error.hpp"
#include "moeforge/util.hpp"

namespace moeforge {
namespace {

constexpr std::uint8_t kFp8SignBit = 0x80;
constexpr std::uint8_t kFp8MaxFinite = 0x7E;  // +448
constexpr float kFp8MaxValue = 448.0f;
constexpr float kFp8MinNormal = 0x1p-6f;
constexpr float kFp8SubnormalStep = 0x1p-9f;

constexpr char kMagic[4] = {'A', 'D', 'N', 'K'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::size_t kPreambleSize = 16;
constexpr std::size_t kPayloadAlignment = 64;

template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(std::span<const std::byte> in, std::size_t offset) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(in[offset + i])) << (8 * i);
  }
  return static_cast<T>(v);
}

void store_element(std::byte* dst, Dtype dtype, float value) {
  switch (dtype) {
    case Dtype::kFp8E4M3:
      dst[0] = static_cast<std::byte>(encode_fp8(value));
      return;
    case Dtype::kBf16: {
      const std::uint16_t bits = encode_bf16(value);
      dst[0] = static_cast<std::byte>(bits & 0xFF);
      dst[1] = static_cast<std::byte>(bits >> 8);
      return;
    }
    case Dtype::kFp32: {
      const auto bits = std::bit_cast<std::uint32_t>(value);
      for (int i = 0; i < 4; ++i) dst[i] = static_cast<std::byte>((bits >> (8 * i)) & 0xFF);
      return;
    }
  }
}

float load_element(const std::byte* src, Dtype dtype) {
  switch (dtype) {
    case Dtype::kFp8E4M3:
      return decode_fp8(std::to_integer<std::uint8_t>(src[0]));
    case Dtype::kBf16:
      return decode_bf16(static_cast<std::uint16_t>(std::to_integer<std::uint16_t>(src[0]) |
                                                    (std::to_integer<std::uint16_t>(src[1]) << 8)));
    case Dtype::kFp32: {
      std::uint32_t bits = 0;
      for (int i = 0; i < 4; ++i) bits |= std::to_integer<std::uint32_t>(src[i]) << (8 * i);
      return std::bit_cast<float>(bits);
    }
  }
  return 0.0f;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return !prefix.empty() && s.size() > prefix.size() && s.substr(0, prefix.size()) == prefix;
}

// Parses "<digits>." at the front of s. Rejects leading zeros so that
// formatting the parsed index reproduces the original text.
std::optional<std::int64_t> take_index(std::string_view& s) {
  const auto dot = s.find('.');
  if (dot == std::string_view::npos || dot == 0 || dot + 1 >= s.size()) return std::nullopt;
  const std::string_view digits = s.substr(0, dot);
  if (digits.size() > 1 && digits[0] == '0') return std::nullopt;
  std::int64_t value = 0;
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (ec != std::errc() || ptr != digits.data() + digits.size() || value < 0) return std::nullopt;
  s.remove_prefix(dot + 1);
  return value;
}

bool first_segment_is_norm(std::string_view body) {
  const std::string_view seg = body.substr(0, body.find('.'));
  return seg.size() >= 4 && seg.substr(seg.size() - 4) == "norm";
}

}  // namespace

std::size_t element_size(Dtype dtype) {
  switch (dtype) {
    case Dtype::kFp8E4M3: return 1;
    case Dtype::kBf16: return 2;
    case Dtype::kFp32: return 4;
  }
  return 0;
}

std::string_view dtype_name(Dtype dtype) {
  switch (dtype) {
    case Dtype::kFp8E4M3: return "fp8_e4m3";
    case Dtype::kBf16: return "bf16";
    case Dtype::kFp32: return "fp32";
  }
  return "?";
}

Dtype parse_dtype(std::string_view name) {
  if (name == "fp8_e4m3") return Dtype::kFp8E4M3;
  if (name == "bf16") return Dtype::kBf16;
  if (name == "fp32") return Dtype::kFp32;
  throw Error(ErrorCode::kInvalidInput, "unknown dtype '" + std::string(name) + "'");
}

std::uint8_t encode_fp8(float value) {
  if (!std::isfinite(value)) {
    throw Error(ErrorCode::kInvalidValue, "cannot encode non-finite value as fp8");
  }
  const std::uint8_t sign = std::signbit(value) ? kFp8SignBit : 0;
  const float mag = std::fabs(value);
  if (mag > kFp8MaxValue) return sign | kFp8MaxFinite;
  if (mag < kFp8MinNormal) {
    // Subnormal grid; a rounded count of 8 lands exactly on the first normal
    // code (exponent field 1, mantissa 0), which is also 8.
    const auto steps = static_cast<std::uint8_t>(std::nearbyint(mag / kFp8SubnormalStep));
    return sign | steps;
  }
  int exp2 = 0;
  std::frexp(mag, &exp2);  // mag = f * 2^exp2, f in [0.5, 1)
  int exponent = exp2 - 1;
  const float significand = std::ldexp(mag, -exponent);  // [1, 2)
  auto mantissa = static_cast<int>(std::nearbyint((significand - 1.0f) * 8.0f));
  if (mantissa == 8) {
    mantissa = 0;
    ++exponent;
  }
  return sign | static_cast<std::uint8_t>(((exponent + 7) << 3) | mantissa);
}

bool is_fp8_nan(std::uint8_t code) { return (code & 0x7F) == 0x7F; }

float decode_fp8(std::uint8_t code) {
  if (is_fp8_nan(code)) return std::numeric_limits<float>::quiet_NaN();
  const int exponent = (code >> 3) & 0x0F;
  const int mantissa = code & 0x07;
  const float mag = exponent == 0 ? std::ldexp(static_cast<float>(mantissa), -9)
                                  : std::ldexp(1.0f + static_cast<float>(mantissa) / 8.0f,
                                               exponent - 7);
  return (code & kFp8SignBit) ? -mag : mag;
}

std::uint16_t encode_bf16(float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  if (std::isnan(value)) return static_cast<std::uint16_t>((bits >> 16) | 0x0040);
  const std::uint32_t rounding = 0x7FFF + ((bits >> 16) & 1);
  return static_cast<std::uint16_t>((bits + rounding) >> 16);
}

float decode_bf16(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

float accumulate(std::span<const std::uint16_t> bf16_values, AccumulateMode mode) {
  float sum = 0.0f;
  for (const std::uint16_t v : bf16_values) {
    sum += decode_bf16(v);
    if (mode == AccumulateMode::kBf16) sum = decode_bf16(encode_bf16(sum));
  }
  return sum;
}

std::size_t Tensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, std::int64_t d) {
                           return acc * static_cast<std::size_t>(d);
                         });
}

Tensor make_tensor(std::string name, Dtype dtype, std::vector<std::int64_t> shape,
                   std::span<const float> values) {
  Tensor t{std::move(name), dtype, std::move(shape), {}};
  if (values.size() != t.numel()) {
    throw Error(ErrorCode::kInvalidInput, "value count does not match shape of " + t.name);
  }
  const std::size_t width = element_size(dtype);
  t.data.resize(values.size() * width);
  for (std::size_t i = 0; i < values.size(); ++i) {
    store_element(t.data.data() + i * width, dtype, values[i]);
  }
  return t;
}

std::vector<float> tensor_values(const Tensor& tensor) {
  const std::size_t width = element_size(tensor.dtype);
  std::vector<float> out(tensor.data.size() / width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = load_element(tensor.data.data() + i * width, tensor.dtype);
  }
  return out;
}

void validate_tensor(const Tensor& tensor) {
  if (tensor.name.empty()) throw Error(ErrorCode::kInvalidInput, "tensor name is empty");
  for (const auto d : tensor.shape) {
    if (d <= 0) throw Error(ErrorCode::kInvalidInput, "non-positive dimension in " + tensor.name);
  }
  if (tensor.data.size() != tensor.numel() * element_size(tensor.dtype)) {
    throw Error(ErrorCode::kInvalidInput, "payload length mismatch in " + tensor.name);
  }
}

Tensor cast_tensor(const Tensor& tensor, Dtype target) {
  if (tensor.dtype == target) return tensor;
  Tensor out{tensor.name, target, tensor.shape, {}};
  const std::size_t in_width = element_size(tensor.dtype);
  const std::size_t out_width = element_size(target);
  const std::size_t n = tensor.data.size() / in_width;
  out.data.resize(n * out_width);
  for (std::size_t i = 0; i < n; ++i) {
    store_element(out.data.data() + i * out_width, target,
                  load_element(tensor.data.data() + i * in_width, tensor.dtype));
  }
  return out;
}

const Tensor* FlatCheckpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void FlatCheckpoint::canonicalize() {
  std::sort(tensors.begin(), tensors.end(),
            [](const Tensor& a, const Tensor& b) { return a.name < b.name; });
}

void validate_checkpoint(const FlatCheckpoint& checkpoint) {
  std::vector<std::string_view> names;
  names.reserve(checkpoint.tensors.size());
  for (const auto& t : checkpoint.tensors) {
    validate_tensor(t);
    names.push_back(t.name);
  }
  std::sort(names.begin(), names.end());
  const auto dup = std::adjacent_find(names.begin(), names.end());
  if (dup != names.end()) {
    throw Error(ErrorCode::kDuplicateParam, "duplicate tensor name " + std::string(*dup));
  }
}

FlatCheckpoint cast_checkpoint(const FlatCheckpoint& checkpoint, Dtype target) {
  FlatCheckpoint out;
  out.metadata = checkpoint.metadata;
  out.tensors.resize(checkpoint.tensors.size());
  parallel_for(checkpoint.tensors.size(), [&](std::size_t i) {
    out.tensors[i] = cast_tensor(checkpoint.tensors[i], target);
  });
  return out;
}

std::vector<std::byte> serialize_checkpoint(const FlatCheckpoint& checkpoint) {
  validate_checkpoint(checkpoint);
  std::vector<const Tensor*> ordered;
  ordered.reserve(checkpoint.tensors.size());
  for (const auto& t : checkpoint.tensors) ordered.push_back(&t);
  std::sort(ordered.begin(), ordered.end(),
            [](const Tensor* a, const Tensor* b) { return a->name < b->name; });

  nlohmann::ordered_json header;
  header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const Tensor* t : ordered) {
    nlohmann::ordered_json entry;
    entry["name"] = t->name;
    entry["dtype"] = dtype_name(t->dtype);
    entry["shape"] = t->shape;
    entry["offset"] = offset;
    entry["nbytes"] = t->data.size();
    header["tensors"].push_back(std::move(entry));
    offset += t->data.size();
  }
  header["metadata"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : checkpoint.metadata) header["metadata"][k] = v;
  const std::string text = header.dump();

  std::vector<std::byte> out;
  const std::size_t header_end = kPreambleSize + text.size();
  const std::size_t payload_start =
      (header_end + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
  out.reserve(payload_start + offset);
  for (const char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_le<std::uint16_t>(out, kFormatVersion);
  put_le<std::uint16_t>(out, 0);
  put_le<std::uint64_t>(out, text.size());
  for (const char c : text) out.push_back(static_cast<std::byte>(c));
  out.resize(payload_start, std::byte{0});
  for (const Tensor* t : ordered) out.insert(out.end(), t->data.begin(), t->data.end());
  return out;
}

FlatCheckpoint deserialize_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < kPreambleSize) {
    throw Error(ErrorCode::kCorruptFile, "file shorter than the fixed preamble");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::kFormatError, "bad magic");
  }
  const auto version = get_le<std::uint16_t>(bytes, 4);
  const auto flags = get_le<std::uint16_t>(bytes, 6);
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (version != kFormatVersion) {
    throw Error(ErrorCode::kFormatError, "unsupported version " + std::to_string(version));
  }
  if (flags != 0) throw Error(ErrorCode::kFormatError, "unsupported flags");
  if (header_len > bytes.size() - kPreambleSize) {
    throw Error(ErrorCode::kCorruptFile, "header extends past end of file");
  }
  const std::size_t header_end = kPreambleSize + header_len;
  const std::size_t payload_start =
      (header_end + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(
        std::string_view(reinterpret_cast<const char*>(bytes.data()) + kPreambleSize, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("header is not valid JSON: ") + e.what());
  }

  FlatCheckpoint out;
  std::uint64_t end_of_data = 0;
  try {
    for (const auto& [k, v] : header.at("metadata").items()) {
      out.metadata[k] = v.get<std::string>();
    }
    for (const auto& entry : header.at("tensors")) {
      Tensor t;
      t.name = entry.at("name").get<std::string>();
      t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
      t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (t.name.empty() || std::any_of(t.shape.begin(), t.shape.end(),
                                        [](std::int64_t d) { return d <= 0; })) {
        throw Error(ErrorCode::kFormatError, "malformed tensor entry '" + t.name + "'");
      }
      if (!out.tensors.empty() && !(out.tensors.back().name < t.name)) {
        throw Error(ErrorCode::kFormatError, "tensor names not in canonical order at " + t.name);
      }
      if (offset < end_of_data) {
        throw Error(ErrorCode::kFormatError, "tensor offsets not ascending at " + t.name);
      }
      if (nbytes != t.numel() * element_size(t.dtype)) {
        throw Error(ErrorCode::kCorruptFile, "payload length mismatch for " + t.name);
      }
      if (payload_start > bytes.size() || offset + nbytes > bytes.size() - payload_start) {
        throw Error(ErrorCode::kCorruptFile, "payload of " + t.name + " is truncated");
      }
      const auto* begin = bytes.data() + payload_start + offset;
      t.data.assign(begin, begin + nbytes);
      end_of_data = offset + nbytes;
      out.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("malformed header: ") + e.what());
  }
  const std::size_t expected_size = std::max(header_end, payload_start + end_of_data);
  if (!out.tensors.empty() && bytes.size() != expected_size) {
    throw Error(ErrorCode::kCorruptFile, "unexpected trailing bytes");
  }
  return out;
}

void write_checkpoint(const FlatCheckpoint& checkpoint, const std::filesystem::path& path) {
  atomic_write_file(path, serialize_checkpoint(checkpoint));
}

FlatCheckpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string raw = read_text_file(path);
  return deserialize_checkpoint(std::as_bytes(std::span(raw.data(), raw.size())));
}

std::string_view param_kind_name(ParamKind kind) {
  switch (kind) {
    case ParamKind::kEmbedding: return "embedding";
    case ParamKind::kAttention: return "attention";
    case ParamKind::kDenseMlp: return "dense_mlp";
    case ParamKind::kRoutedExpert: return "routed_expert";
    case ParamKind::kSharedExpert: return "shared_expert";
    case ParamKind::kNorm: return "norm";
    case ParamKind::kOutputHead: return "output_head";
    case ParamKind::kOther: return "other";
  }
  return "other";
}

const NamingScheme& release_naming() {
  static const NamingScheme scheme{
      .layers = "model.layers.",
      .attention = "self_attn.",
      .mlp = "mlp.",
      .experts = "experts.",
      .shared = "shared_experts.",
      .embedding = "model.embed_tokens.",
      .output_head = "lm_head.",
      .final_norm = "model.norm.",
  };
  return scheme;
}

ParamName parse_param_name(std::string_view name, const NamingScheme& scheme) {
  ParamName p;
  p.raw = std::string(name);
  p.leaf = p.raw;

  if (starts_with(name, scheme.layers)) {
    std::string_view body = name.substr(scheme.layers.size());
    const auto layer = take_index(body);
    if (!layer) return p;
    p.layer = layer;
    p.leaf = std::string(body);
    if (starts_with(body, scheme.attention)) {
      p.kind = ParamKind::kAttention;
      p.leaf = std::string(body.substr(scheme.attention.size()));
    } else if (starts_with(body, scheme.mlp)) {
      std::string_view mlp = body.substr(scheme.mlp.size());
      p.kind = ParamKind::kDenseMlp;
      p.leaf = std::string(mlp);
      if (starts_with(mlp, scheme.shared)) {
        p.kind = ParamKind::kSharedExpert;
        p.leaf = std::string(mlp.substr(scheme.shared.size()));
      } else if (starts_with(mlp, scheme.experts)) {
        std::string_view rest = mlp.substr(scheme.experts.size());
        if (const auto expert = take_index(rest)) {
          p.kind = ParamKind::kRoutedExpert;
          p.expert = expert;
          p.leaf = std::string(rest);
        }
      }
    } else if (first_segment_is_norm(body)) {
      p.kind = ParamKind::kNorm;
    }
    return p;
  }
  if (starts_with(name, scheme.embedding)) {
    p.kind = ParamKind::kEmbedding;
    p.leaf = std::string(name.substr(scheme.embedding.size()));
  } else if (starts_with(name, scheme.output_head)) {
    p.kind = ParamKind::kOutputHead;
    p.leaf = std::string(name.substr(scheme.output_head.size()));
  } else if (starts_with(name, scheme.final_norm)) {
    p.kind = ParamKind::kNorm;
    p.leaf = std::string(name.substr(scheme.final_norm.size()));
  }
  return p;
}

std::string format_param_name(const ParamName& name, const NamingScheme& scheme) {
  if (name.layer) {
    std::string out = scheme.layers + std::to_string(*name.layer) + ".";
    switch (name.kind) {
      case ParamKind::kAttention: return out + scheme.attention + name.leaf;
      case ParamKind::kDenseMlp: return out + scheme.mlp + name.leaf;
      case ParamKind::kSharedExpert: return out + scheme.mlp + scheme.shared + name.leaf;
      case ParamKind::kRoutedExpert:
        return out + scheme.mlp + scheme.experts + std::to_string(name.expert.value_or(0)) + "." +
               name.leaf;
      default: return out + name.leaf;
    }
  }
  switch (name.kind) {
    case ParamKind::kEmbedding: return scheme.embedding + name.leaf;
    case ParamKind::kOutputHead: return scheme.output_head + name.leaf;
    case ParamKind::kNorm: return scheme.final_norm + name.leaf;
    default: return name.leaf;
  }
}

}  // namespace moeforge
