// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdqat/encoder.hpp"
#include "kdqat/ops.hpp"

namespace kdqat {

enum class LossTerm { soft_label, trm_output, score, map, output, mha_only, unified, hard_label };
enum class UnifiedMode { off, sm1, sm2 };
enum class LayerStrategy { all, uniform };
enum class OutputKind { classification, regression };

std::string_view to_string(LossTerm term);
LossTerm parse_loss_term(std::string_view name);
std::string_view to_string(UnifiedMode mode);
UnifiedMode parse_unified_mode(std::string_view name);

// Student attention probabilities are floored here before taking logs.
inline constexpr double kMapProbabilityFloor = 1e-12;

struct TermWeight {
  LossTerm term;
  double weight = 1.0;

  bool operator==(const TermWeight&) const = default;
};

struct KDLossConfig {
  std::vector<TermWeight> terms;
  double tau = 1.0;
  double gamma = 0.5;
  UnifiedMode unified = UnifiedMode::off;
  std::vector<int> layers;  // distilled layers; empty means all
  bool include_embedding = true;
  OutputKind output_kind = OutputKind::classification;

  bool active(LossTerm term) const;
  double weight(LossTerm term) const;
  std::vector<int> resolved_layers(int num_layers) const;
  void validate(int num_layers) const;

  // "baseline", "map", "output" or "map+output".
  static KDLossConfig preset(std::string_view name);
  bool operator==(const KDLossConfig&) const = default;
};

// The grid {0.1, ..., 0.9}.
bool gamma_on_grid(double gamma);
std::vector<double> gamma_grid();

// Layer mapping for distillation: all layers, or k uniformly spaced ones
// {ceil((i + 1) * L / k) - 1 : i < k}.
std::vector<int> select_layers(int num_layers, int k, LayerStrategy strategy);

namespace detail {

template <typename Scalar>
void require_compatible(const AttentionTrace<Scalar>& t, const AttentionTrace<Scalar>& s, std::span<const int> layers) {
  if (t.layers.size() != s.layers.size() || t.heads != s.heads || t.sequence_length() != s.sequence_length()) {
    throw ContractError("teacher and student traces have different layer/head/sequence extents");
  }
  for (int l : layers) {
    if (l < 0 || static_cast<std::size_t>(l) >= t.layers.size()) {
      throw ContractError("distilled layer " + std::to_string(l) + " outside the traced layers");
    }
    const auto& tl = t.layers[static_cast<std::size_t>(l)];
    const auto& sl = s.layers[static_cast<std::size_t>(l)];
    if (tl.attention_output.shape() != sl.attention_output.shape() || tl.scores.size() != sl.scores.size()) {
      throw ContractError("teacher and student layer " + std::to_string(l) + " shapes differ");
    }
  }
}

template <typename Scalar>
Tensor<Scalar> sum_layers(std::span<const int> layers, auto&& per_layer) {
  std::vector<Tensor<Scalar>> terms;
  for (int l : layers) terms.push_back(per_layer(static_cast<std::size_t>(l)));
  return add_n(terms);
}

}  // namespace detail

// Sum over layers of MSE(AS_T, AS_S), averaged over every head and element of a layer.
template <typename Scalar>
Tensor<Scalar> score_loss(const AttentionTrace<Scalar>& t, const AttentionTrace<Scalar>& s, std::span<const int> layers) {
  detail::require_compatible(t, s, layers);
  return detail::sum_layers<Scalar>(layers, [&](std::size_t l) {
    std::vector<Tensor<Scalar>> heads;
    for (std::size_t h = 0; h < t.layers[l].scores.size(); ++h) {
      heads.push_back(mse(t.layers[l].scores[h], s.layers[l].scores[h]));
    }
    return scale(add_n(heads), static_cast<Scalar>(1.0 / static_cast<double>(heads.size())));
  });
}

// Sum over layers of tau^2 / (heads * n) * sum_{h,t} KL(AM_T(tau) || AM_S(tau)), where
// AM(tau) is the softmax of AS / (softmax_scale * tau).
template <typename Scalar>
Tensor<Scalar> map_loss(const AttentionTrace<Scalar>& t, const AttentionTrace<Scalar>& s, std::span<const int> layers,
                        double tau = 1.0) {
  detail::require_compatible(t, s, layers);
  if (!(tau > 0.0)) throw ConfigError("map_loss: tau must be positive");
  const Scalar floor = static_cast<Scalar>(kMapProbabilityFloor);
  return detail::sum_layers<Scalar>(layers, [&](std::size_t l) {
    const auto& tl = t.layers[l];
    const auto& sl = s.layers[l];
    std::vector<Tensor<Scalar>> heads;
    for (std::size_t h = 0; h < tl.scores.size(); ++h) {
      Tensor<Scalar> p, q;
      if (tau == 1.0) {
        p = tl.maps[h];
        q = sl.maps[h];
      } else {
        p = softmax_rows(tl.scores[h], static_cast<Scalar>(static_cast<double>(t.softmax_scale) * tau));
        q = softmax_rows(sl.scores[h], static_cast<Scalar>(static_cast<double>(s.softmax_scale) * tau));
      }
      heads.push_back(kl_divergence(p, log_floored(q, floor)));
    }
    const double n = static_cast<double>(tl.scores.front().rows());
    const double k = tau * tau / (static_cast<double>(heads.size()) * n);
    return scale(add_n(heads), static_cast<Scalar>(k));
  });
}

// Sum over layers of MSE(Y_T, Y_S).
template <typename Scalar>
Tensor<Scalar> output_loss(const AttentionTrace<Scalar>& t, const AttentionTrace<Scalar>& s, std::span<const int> layers) {
  detail::require_compatible(t, s, layers);
  return detail::sum_layers<Scalar>(
      layers, [&](std::size_t l) { return mse(t.layers[l].attention_output, s.layers[l].attention_output); });
}

// Sum over layers of MSE(MHA_T, MHA_S): the attention-output objective without the residual path.
template <typename Scalar>
Tensor<Scalar> mha_only_loss(const AttentionTrace<Scalar>& t, const AttentionTrace<Scalar>& s, std::span<const int> layers) {
  detail::require_compatible(t, s, layers);
  return detail::sum_layers<Scalar>(layers, [&](std::size_t l) { return mse(t.layers[l].mha, s.layers[l].mha); });
}

// Sum over layers of MSE(X_{l+1}^T, X_{l+1}^S), optionally plus the embedding output X_0.
template <typename Scalar>
Tensor<Scalar> trm_output_loss(const AttentionTrace<Scalar>& t, const AttentionTrace<Scalar>& s,
                               std::span<const int> layers, bool include_embedding) {
  detail::require_compatible(t, s, layers);
  std::vector<Tensor<Scalar>> terms;
  if (include_embedding) terms.push_back(mse(t.embedding_output, s.embedding_output));
  for (int l : layers) {
    terms.push_back(mse(t.layers[static_cast<std::size_t>(l)].output, s.layers[static_cast<std::size_t>(l)].output));
  }
  return add_n(terms);
}

// SM1 = map + gamma * output, SM2 = output + gamma * map. No grid check.
template <typename Scalar>
Tensor<Scalar> mix_losses(UnifiedMode mode, double gamma, const Tensor<Scalar>& map, const Tensor<Scalar>& output) {
  const Scalar g = static_cast<Scalar>(gamma);
  switch (mode) {
    case UnifiedMode::sm1: return add_n<Scalar>({map, scale(output, g)});
    case UnifiedMode::sm2: return add_n<Scalar>({output, scale(map, g)});
    case UnifiedMode::off: break;
  }
  throw ConfigError("unified loss needs mode sm1 or sm2");
}

template <typename Scalar>
Tensor<Scalar> unified_loss(const AttentionTrace<Scalar>& t, const AttentionTrace<Scalar>& s, std::span<const int> layers,
                            UnifiedMode mode, double gamma, double tau = 1.0) {
  if (mode == UnifiedMode::off) throw ConfigError("unified loss needs mode sm1 or sm2");
  if (!gamma_on_grid(gamma)) throw ConfigError("gamma " + std::to_string(gamma) + " is not on the grid {0.1, ..., 0.9}");
  return mix_losses(mode, gamma, map_loss(t, s, layers, tau), output_loss(t, s, layers));
}

// KL(softmax(teacher) || softmax(student)) averaged over rows (the batch).
template <typename Scalar>
Tensor<Scalar> soft_label_loss(const Tensor<Scalar>& teacher_logits, const Tensor<Scalar>& student_logits) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("soft_label_loss: logits " + shape_string(teacher_logits.shape()) + " vs " +
                         shape_string(student_logits.shape()));
  }
  const auto kl = kl_divergence(softmax_rows(teacher_logits), log_softmax_rows(student_logits));
  return scale(kl, static_cast<Scalar>(1.0 / static_cast<double>(teacher_logits.rows())));
}

struct HardTarget {
  int label = 0;
  double value = 0.0;  // regression target
};

template <typename Scalar>
struct LossComponent {
  LossTerm term;
  double weight;
  Tensor<Scalar> value;
};

template <typename Scalar>
struct LossBreakdown {
  std::vector<LossComponent<Scalar>> components;
  Tensor<Scalar> total;

  double total_value() const { return static_cast<double>(total.item()); }

  double term_value(LossTerm term) const {
    for (const auto& c : components)
      if (c.term == term) return static_cast<double>(c.value.item());
    throw ContractError("loss term '" + std::string(to_string(term)) + "' is not active");
  }
};

// Weighted sum of every active term for one example.
template <typename Scalar>
LossBreakdown<Scalar> total_loss(const KDLossConfig& cfg, const ForwardResult<Scalar>& teacher,
                                 const ForwardResult<Scalar>& student, const std::optional<HardTarget>& target = {}) {
  LossBreakdown<Scalar> out;
  const bool needs_trace = std::any_of(cfg.terms.begin(), cfg.terms.end(), [](const TermWeight& w) {
    return w.term != LossTerm::soft_label && w.term != LossTerm::hard_label;
  });
  if (needs_trace && (!teacher.trace || !student.trace)) {
    throw ContractError("intermediate KD terms need captured teacher and student traces");
  }
  std::vector<int> layers;
  if (needs_trace) {
    cfg.validate(static_cast<int>(teacher.trace->layers.size()));
    layers = cfg.resolved_layers(static_cast<int>(teacher.trace->layers.size()));
  }
  const bool regression = cfg.output_kind == OutputKind::regression;

  std::vector<Tensor<Scalar>> weighted;
  for (const auto& [term, weight] : cfg.terms) {
    Tensor<Scalar> value;
    switch (term) {
      case LossTerm::soft_label:
        value = regression ? mse(teacher.logits, student.logits) : soft_label_loss(teacher.logits, student.logits);
        break;
      case LossTerm::trm_output:
        value = trm_output_loss(*teacher.trace, *student.trace, layers, cfg.include_embedding);
        break;
      case LossTerm::score: value = score_loss(*teacher.trace, *student.trace, layers); break;
      case LossTerm::map: value = map_loss(*teacher.trace, *student.trace, layers, cfg.tau); break;
      case LossTerm::output: value = output_loss(*teacher.trace, *student.trace, layers); break;
      case LossTerm::mha_only: value = mha_only_loss(*teacher.trace, *student.trace, layers); break;
      case LossTerm::unified:
        value = unified_loss(*teacher.trace, *student.trace, layers, cfg.unified, cfg.gamma, cfg.tau);
        break;
      case LossTerm::hard_label: {
        if (!target) throw ContractError("hard-label term needs a target");
        if (regression) {
          RowMatrix<Scalar> y(1, 1);
          y(0, 0) = static_cast<Scalar>(target->value);
          value = mse(student.logits, Tensor<Scalar>::constant(student.logits.shape(), y));
        } else {
          const int label = target->label;
          value = cross_entropy(student.logits, std::span<const int>(&label, 1));
        }
        break;
      }
    }
    out.components.push_back({term, weight, value});
    weighted.push_back(weight == 1.0 ? value : scale(value, static_cast<Scalar>(weight)));
  }
  out.total = add_n(weighted);
  return out;
}

}  // namespace kdqat
