// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "kdqat/encoder.hpp"
#include "kdqat/quantizer.hpp"

namespace kdqat {

// Forward-compatible view of `model` under `spec`. Weight matrices of every layer are
// ternarized per tensor, the token embedding per row, each through a straight-through
// wrapper so gradients land on the latent leaves. Biases, LayerNorm, position embedding
// and the task head stay full precision.
template <typename Scalar>
EncoderView<Scalar> quantized_view(const EncoderModel<Scalar>& model, const QuantSpec& spec) {
  spec.validate();
  EncoderView<Scalar> view = model.view();
  view.activation_bits = spec.activation_bits;
  const double k = spec.threshold_factor;
  if (spec.embedding == EmbeddingQuant::ternary_rowwise) {
    view.params.token_embedding = fake_ternarize(view.params.token_embedding, Granularity::per_row, k);
  }
  if (spec.weights == WeightQuant::ternary_layerwise) {
    for (auto& layer : view.params.layers) {
      for (Tensor<Scalar>* w : {&layer.query_weight, &layer.key_weight, &layer.value_weight, &layer.output_weight,
                                &layer.ffn_in_weight, &layer.ffn_out_weight}) {
        *w = fake_ternarize(*w, Granularity::whole_tensor, k);
      }
    }
  }
  return view;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const EncoderModel<Scalar>& model, std::span<const int> tokens, bool capture,
                              const std::optional<QuantSpec>& quant) {
  if (!quant) return forward(model.view(), tokens, capture);
  return forward(quantized_view(model, *quant), tokens, capture);
}

// Size inventory of an encoder under `spec`, for compression accounting.
inline std::vector<ParameterGroup> parameter_groups(const EncoderConfig& config, const QuantSpec& spec) {
  std::vector<ParameterGroup> groups;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    ParameterGroup g{name, shape_numel(shape), 0, false};
    if (name == "embeddings.token" && spec.embedding == EmbeddingQuant::ternary_rowwise) {
      g.quantized = true;
      g.scale_groups = shape[0];
    } else if (name.ends_with(".weight") && name.starts_with("layers.") &&
               spec.weights == WeightQuant::ternary_layerwise) {
      g.quantized = true;
      g.scale_groups = 1;
    }
    groups.push_back(g);
  }
  return groups;
}

}  // namespace kdqat
