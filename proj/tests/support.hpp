// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "kdqat/encoder.hpp"
#include "kdqat/ops.hpp"
#include "kdqat/tensor.hpp"

namespace kdqat::testing {

template <typename Scalar>
RowMatrix<Scalar> random_matrix(Index rows, Index cols, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  RowMatrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
  return m;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0, bool requires_grad = false) {
  const auto [rows, cols] = storage_extents(shape);
  auto m = random_matrix<Scalar>(rows, cols, seed, stddev);
  return requires_grad ? Tensor<Scalar>::parameter(std::move(shape), std::move(m))
                       : Tensor<Scalar>::constant(std::move(shape), std::move(m));
}

inline std::vector<int> random_tokens(int n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = pick(rng);
  return out;
}

inline EncoderConfig micro_config() {
  EncoderConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 16;
  c.vocab = 12;
  c.max_len = 6;
  c.classes = 3;
  c.init_std = 0.5;
  return c;
}

// Random weights large enough that attention maps are far from uniform.
template <typename Scalar>
EncoderModel<Scalar> random_model(const EncoderConfig& config, std::uint64_t seed) {
  EncoderModel<Scalar> m(config, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 0.3);
  visit_parameters(m.params(), [&](const std::string& name, Tensor<Scalar>& t) {
    if (name.ends_with(".bias") || name.ends_with(".gain")) {
      auto& v = t.mutable_value();
      for (Index i = 0; i < v.size(); ++i) v.data()[i] += static_cast<Scalar>(normal(rng));
    }
  });
  return m;
}

// A trace assembled from explicit per-layer, per-head scores; the other fields are filled
// with the given matrices (or zeros of the score width).
inline AttentionTrace<double> make_trace(const std::vector<std::vector<RowMatrix<double>>>& scores, double scale = 1.0,
                                  const std::vector<RowMatrix<double>>& y = {}, bool scores_require_grad = false) {
  AttentionTrace<double> t;
  t.softmax_scale = scale;
  t.heads = static_cast<int>(scores.front().size());
  const Index n = scores.front().front().rows();
  t.embedding_output = Tensor<double>::constant({n, 1}, RowMatrix<double>::Zero(n, 1));
  for (std::size_t l = 0; l < scores.size(); ++l) {
    LayerTrace<double> lt;
    for (const auto& s : scores[l]) {
      const auto as = scores_require_grad ? Tensor<double>::parameter({s.rows(), s.cols()}, s)
                                          : Tensor<double>::constant({s.rows(), s.cols()}, s);
      lt.scores.push_back(as);
      lt.maps.push_back(softmax_rows(as, scale));
    }
    const RowMatrix<double> out = l < y.size() ? y[l] : RowMatrix<double>::Zero(n, 1);
    lt.attention_output = Tensor<double>::constant({out.rows(), out.cols()}, out);
    lt.mha = lt.attention_output;
    lt.output = lt.attention_output;
    lt.input = t.embedding_output;
    t.layers.push_back(std::move(lt));
  }
  return t;
}

// Largest |MHA_i - (sum_h sum_j alpha^h_ij f_h(x_j) + b^O)| over a captured trace.
template <typename Scalar>
double recomposition_error(const EncoderView<Scalar>& view, const AttentionTrace<Scalar>& trace) {
  double worst = 0.0;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const auto& lt = trace.layers[l];
    RowMatrix<double> rebuilt = RowMatrix<double>::Zero(lt.mha.rows(), lt.mha.cols());
    for (std::size_t h = 0; h < lt.maps.size(); ++h) {
      rebuilt += lt.maps[h].value().template cast<double>() * lt.sa_prop_heads[h].template cast<double>();
    }
    rebuilt.rowwise() += view.params.layers[l].output_bias.value().row(0).template cast<double>();
    worst = std::max(worst, (rebuilt - lt.mha.value().template cast<double>()).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace kdqat::testing
