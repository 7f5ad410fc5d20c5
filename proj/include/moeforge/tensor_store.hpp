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

// Tensor checkpoint container: FP8-E4M3FN / BF16 / FP32 numerics, casting,
// parameter-name parsing and the ADNK file format.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace moeforge {

enum class Dtype : std::uint8_t { kFp8E4M3, kBf16, kFp32 };

std::size_t element_size(Dtype dtype);
std::string_view dtype_name(Dtype dtype);  // "fp8_e4m3" | "bf16" | "fp32"
Dtype parse_dtype(std::string_view name);   // throws kInvalidInput

// Scalar numerics. All encoders round to nearest, ties to even.

/// Nearest E4M3FN code; |value| > 448 saturates to +-448. Throws kInvalidValue
/// for NaN or infinity.
std::uint8_t encode_fp8(float value);
/// Exact E4M3FN value. Codes 0x7F and 0xFF decode to a quiet NaN.
float decode_fp8(std::uint8_t code);
bool is_fp8_nan(std::uint8_t code);

std::uint16_t encode_bf16(float value);
float decode_bf16(std::uint16_t bits);

enum class AccumulateMode { kBf16, kFp32 };

/// Running sum of BF16 values. kBf16 re-rounds the partial sum to BF16 after
/// every addition, kFp32 keeps the partial in 32-bit.
float accumulate(std::span<const std::uint16_t> bf16_values, AccumulateMode mode);

struct Tensor {
  std::string name;
  Dtype dtype = Dtype::kFp32;
  std::vector<std::int64_t> shape;
  std::vector<std::byte> data;  // little-endian, row-major

  std::size_t numel() const;
  bool operator==(const Tensor&) const = default;
};

/// Builds a tensor by encoding float values into `dtype`.
Tensor make_tensor(std::string name, Dtype dtype, std::vector<std::int64_t> shape,
                   std::span<const float> values);
/// Decodes every element to float.
std::vector<float> tensor_values(const Tensor& tensor);
/// Throws kInvalidInput if the name is empty, a dimension is non-positive, or
/// the payload length disagrees with the shape.
void validate_tensor(const Tensor& tensor);

/// Element-wise cast through decode/encode; same-dtype casts copy bytes.
Tensor cast_tensor(const Tensor& tensor, Dtype target);

struct FlatCheckpoint {
  std::vector<Tensor> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor* find(std::string_view name) const;
  /// Sorts tensors lexicographically by name.
  void canonicalize();
  bool operator==(const FlatCheckpoint&) const = default;
};

/// Throws kDuplicateParam on repeated names, kInvalidInput on malformed tensors.
void validate_checkpoint(const FlatCheckpoint& checkpoint);

/// Casts every tensor; tensors are processed in parallel.
FlatCheckpoint cast_checkpoint(const FlatCheckpoint& checkpoint, Dtype target);

// ADNK container. Written atomically (temp file + rename) in canonical order.
void write_checkpoint(const FlatCheckpoint& checkpoint, const std::filesystem::path& path);
FlatCheckpoint read_checkpoint(const std::filesystem::path& path);
std::vector<std::byte> serialize_checkpoint(const FlatCheckpoint& checkpoint);
FlatCheckpoint deserialize_checkpoint(std::span<const std::byte> bytes);

enum class ParamKind {
  kEmbedding,
  kAttention,
  kDenseMlp,
  kRoutedExpert,
  kSharedExpert,
  kNorm,
  kOutputHead,
  kOther,
};

std::string_view param_kind_name(ParamKind kind);

struct ParamName {
  std::string raw;
  std::optional<std::int64_t> layer;
  ParamKind kind = ParamKind::kOther;
  std::optional<std::int64_t> expert;  // set iff kind == kRoutedExpert
  std::string leaf;

  bool operator==(const ParamName&) const = default;
};

/// Prefix vocabulary of one parameter naming dialect. The release (HF-style)
/// dialect is the default; the converter defines the trainer dialect.
struct NamingScheme {
  std::string layers;        // "model.layers."
  std::string attention;     // "self_attn."
  std::string mlp;           // "mlp."
  std::string experts;       // "experts."
  std::string shared;        // "shared_experts."
  std::string embedding;     // "model.embed_tokens."
  std::string output_head;   // "lm_head."
  std::string final_norm;    // "model.norm."
};

const NamingScheme& release_naming();

/// Total: names that match no known pattern classify as kOther.
ParamName parse_param_name(std::string_view name,
                           const NamingScheme& scheme = release_naming());
std::string format_param_name(const ParamName& name,
                              const NamingScheme& scheme = release_naming());

}  // namespace moeforge
