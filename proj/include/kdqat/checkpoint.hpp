// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdqat/encoder.hpp"

namespace kdqat {

// Binary layout, little-endian throughout:
//   "KDQT" | u32 version | u32 tensor count
//   per tensor: u32 name bytes | name (UTF-8) | u32 rank | u64 extent * rank | f32 value * numel
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;  // row-major

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

std::vector<char> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
Checkpoint to_checkpoint(const EncoderModel<Scalar>& model) {
  Checkpoint ckpt;
  for (const auto& [name, t] : model.named_parameters()) {
    NamedTensor nt{name, t.shape(), {}};
    nt.values.reserve(static_cast<std::size_t>(t.numel()));
    for (Index i = 0; i < t.value().size(); ++i) nt.values.push_back(static_cast<float>(t.value().data()[i]));
    ckpt.tensors.push_back(std::move(nt));
  }
  return ckpt;
}

// Copies every parameter of `model` from the checkpoint; names and shapes must match exactly.
template <typename Scalar>
void load_into(EncoderModel<Scalar>& model, const Checkpoint& ckpt) {
  const auto expected = parameter_shapes(model.config());
  if (expected.size() != ckpt.tensors.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                      std::to_string(expected.size()));
  }
  std::size_t i = 0;
  visit_parameters(model.params(), [&](const std::string& name, Tensor<Scalar>& t) {
    const auto& src = ckpt.tensors[i++];
    if (src.name != name || src.shape != t.shape()) {
      throw ConfigError("checkpoint tensor '" + src.name + "' " + shape_string(src.shape) + " does not match model '" +
                        name + "' " + shape_string(t.shape()));
    }
    auto& v = t.mutable_value();
    for (Index k = 0; k < v.size(); ++k) v.data()[k] = static_cast<Scalar>(src.values[static_cast<std::size_t>(k)]);
  });
}

// Plain matrices (optimizer moments and the like) under arbitrary names.
NamedTensor named_matrix(const std::string& name, const RowMatrix<float>& m, const Shape& shape);
RowMatrix<float> matrix_of(const NamedTensor& t);

}  // namespace kdqat
