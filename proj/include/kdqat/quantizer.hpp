// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "kdqat/ops.hpp"
#include "kdqat/tensor.hpp"

namespace kdqat {

enum class WeightQuant { off, ternary_layerwise };
enum class EmbeddingQuant { off, ternary_rowwise };
enum class Granularity { whole_tensor, per_row };

// Which parameter groups and activations pass through fake quantization.
struct QuantSpec {
  WeightQuant weights = WeightQuant::off;
  EmbeddingQuant embedding = EmbeddingQuant::off;
  int activation_bits = 0;  // 0 disables, 8 is the only supported width
  double threshold_factor = 0.7;

  bool enabled() const {
    return weights != WeightQuant::off || embedding != EmbeddingQuant::off || activation_bits != 0;
  }

  void validate() const {
    if (!(threshold_factor > 0.0) || !std::isfinite(threshold_factor)) {
      throw ConfigError("quant: threshold factor must be positive, got " + std::to_string(threshold_factor));
    }
    if (activation_bits != 0 && activation_bits != 8) {
      throw ConfigError("quant: activation bits must be 8 or off, got " + std::to_string(activation_bits));
    }
  }

  bool operator==(const QuantSpec&) const = default;

  static QuantSpec off() { return {}; }
  // Ternary weights, row-wise ternary word embedding, 8-bit activations.
  static QuantSpec ternary() { return {WeightQuant::ternary_layerwise, EmbeddingQuant::ternary_rowwise, 8, 0.7}; }
};

using CodeMatrix = Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TernaryResult {
  CodeMatrix codes;
  Eigen::VectorXd scales;  // one per tensor, or one per row
  Granularity granularity = Granularity::whole_tensor;

  double scale_for_row(Index row) const { return granularity == Granularity::per_row ? scales(row) : scales(0); }

  template <typename Scalar>
  RowMatrix<Scalar> dequantize() const {
    RowMatrix<Scalar> out(codes.rows(), codes.cols());
    for (Index r = 0; r < codes.rows(); ++r) {
      const Scalar alpha = static_cast<Scalar>(scale_for_row(r));
      for (Index c = 0; c < codes.cols(); ++c) out(r, c) = alpha * static_cast<Scalar>(codes(r, c));
    }
    return out;
  }
};

namespace detail {

// Threshold and scale of one group, visited in row-major order:
//   delta = k * mean|w|, code = sign(w) * [|w| > delta], alpha = mean of surviving |w|.
template <typename Derived>
double ternarize_group(const Eigen::MatrixBase<Derived>& w, double k, Eigen::Ref<CodeMatrix> codes) {
  double total = 0.0;
  for (Index r = 0; r < w.rows(); ++r)
    for (Index c = 0; c < w.cols(); ++c) total += std::abs(static_cast<double>(w(r, c)));
  const double delta = k * (total / static_cast<double>(w.size()));
  double kept = 0.0;
  Index count = 0;
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) {
      const double v = static_cast<double>(w(r, c));
      if (std::abs(v) > delta) {
        codes(r, c) = v > 0 ? 1 : -1;
        kept += std::abs(v);
        ++count;
      } else {
        codes(r, c) = 0;
      }
    }
  }
  return count == 0 ? 0.0 : kept / static_cast<double>(count);
}

}  // namespace detail

template <typename Derived>
TernaryResult ternarize(const Eigen::MatrixBase<Derived>& w, Granularity granularity, double threshold_factor = 0.7) {
  if (w.size() == 0) throw InputError("ternarize: empty tensor");
  if (!w.allFinite()) throw NumericError("ternarize: non-finite weight");
  TernaryResult result;
  result.granularity = granularity;
  result.codes.resize(w.rows(), w.cols());
  if (granularity == Granularity::whole_tensor) {
    result.scales.resize(1);
    result.scales(0) = detail::ternarize_group(w, threshold_factor, result.codes);
  } else {
    result.scales.resize(w.rows());
    for (Index r = 0; r < w.rows(); ++r) {
      result.scales(r) = detail::ternarize_group(w.row(r), threshold_factor, result.codes.row(r));
    }
  }
  return result;
}

template <typename Scalar>
TernaryResult ternarize(const Tensor<Scalar>& w, Granularity granularity, double threshold_factor = 0.7) {
  return ternarize(w.value(), granularity, threshold_factor);
}

// Symmetric per-tensor 8-bit fake quantization: s = max|x| / 127,
// q(x) = clamp(round(x / s), -127, 127) * s, rounding half away from zero.
template <typename Scalar>
RowMatrix<Scalar> quantize_activation(const RowMatrix<Scalar>& x, int bits = 8) {
  if (bits != 8) throw ConfigError("quantize_activation: only 8-bit is supported");
  if (!x.allFinite()) throw NumericError("quantize_activation: non-finite input");
  using Wide = std::conditional_t<std::is_same_v<Scalar, float>, double, long double>;
  constexpr Wide levels = 127;
  const Wide max_abs = x.size() ? static_cast<Wide>(x.cwiseAbs().maxCoeff()) : Wide(0);
  RowMatrix<Scalar> out = RowMatrix<Scalar>::Zero(x.rows(), x.cols());
  if (max_abs == 0) return out;
  const Wide step = max_abs / levels;
  for (Index i = 0; i < x.size(); ++i) {
    Wide code = std::round(static_cast<Wide>(x.data()[i]) * levels / max_abs);
    code = std::clamp(code, -levels, levels);
    out.data()[i] = static_cast<Scalar>(code * step);
  }
  return out;
}

// Forward value is q(latent); the gradient reaches `latent` unchanged.
template <typename Scalar>
Tensor<Scalar> ste_wrap(const Tensor<Scalar>& latent,
                        const std::function<RowMatrix<Scalar>(const RowMatrix<Scalar>&)>& quantize) {
  return straight_through(latent, quantize(latent.value()));
}

template <typename Scalar>
Tensor<Scalar> fake_quantize_activation(const Tensor<Scalar>& x, int bits = 8) {
  return straight_through(x, quantize_activation<Scalar>(x.value(), bits));
}

template <typename Scalar>
Tensor<Scalar> fake_ternarize(const Tensor<Scalar>& latent, Granularity granularity, double threshold_factor) {
  return straight_through(latent, ternarize(latent.value(), granularity, threshold_factor).template dequantize<Scalar>());
}

// Model-size accounting: quantized groups cost `code_bits` per element plus one
// `scale_bits` scale per scale group; everything else is stored at 32 bits.
struct ParameterGroup {
  std::string name;
  Index count = 0;
  Index scale_groups = 0;  // 0 for full-precision groups
  bool quantized = false;
};

struct CompressionReport {
  double full_precision_bits = 0;
  double quantized_bits = 0;
  double ratio() const { return quantized_bits > 0 ? full_precision_bits / quantized_bits : 0.0; }
};

inline CompressionReport compression(std::span<const ParameterGroup> groups, int code_bits = 2, int scale_bits = 32) {
  CompressionReport report;
  for (const auto& g : groups) {
    report.full_precision_bits += 32.0 * static_cast<double>(g.count);
    if (g.quantized) {
      report.quantized_bits += static_cast<double>(code_bits) * static_cast<double>(g.count) +
                               static_cast<double>(scale_bits) * static_cast<double>(g.scale_groups);
    } else {
      report.quantized_bits += 32.0 * static_cast<double>(g.count);
    }
  }
  return report;
}

// Parameter inventory of a BERT-style classifier (word/position/type embeddings, pooler,
// classifier) under the ternary policy: word embedding row-wise, every encoder and pooler
// weight matrix layer-wise; biases, LayerNorm, position/type embeddings, and the
// classifier kept at full precision.
inline std::vector<ParameterGroup> bert_parameter_groups(Index layers, Index hidden, Index ffn, Index vocab = 30522,
                                                         Index positions = 512, Index types = 2, Index classes = 2) {
  std::vector<ParameterGroup> g;
  g.push_back({"embeddings.word", vocab * hidden, vocab, true});
  g.push_back({"embeddings.position", positions * hidden, 0, false});
  g.push_back({"embeddings.type", types * hidden, 0, false});
  g.push_back({"embeddings.norm", 2 * hidden, 0, false});
  for (Index l = 0; l < layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* m : {"query", "key", "value", "output"}) {
      g.push_back({p + m + ".weight", hidden * hidden, 1, true});
      g.push_back({p + m + ".bias", hidden, 0, false});
    }
    g.push_back({p + "ffn_in.weight", hidden * ffn, 1, true});
    g.push_back({p + "ffn_in.bias", ffn, 0, false});
    g.push_back({p + "ffn_out.weight", ffn * hidden, 1, true});
    g.push_back({p + "ffn_out.bias", hidden, 0, false});
    g.push_back({p + "norms", 4 * hidden, 0, false});
  }
  g.push_back({"pooler.weight", hidden * hidden, 1, true});
  g.push_back({"pooler.bias", hidden, 0, false});
  g.push_back({"classifier", hidden * classes + classes, 0, false});
  return g;
}

}  // namespace kdqat
