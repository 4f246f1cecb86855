// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kdqat/ops.hpp"
#include "kdqat/quantizer.hpp"
#include "kdqat/tensor.hpp"

namespace kdqat {

// Attention logits are divided by sqrt(hidden) by default; `head` uses sqrt(hidden / heads).
enum class SoftmaxScale { hidden, head };

struct EncoderConfig {
  int layers = 4;
  int hidden = 64;
  int heads = 4;
  int ffn = 128;
  int vocab = 64;
  int max_len = 24;
  int classes = 2;
  SoftmaxScale softmax_scale = SoftmaxScale::hidden;
  double layer_norm_eps = 1e-12;
  double init_std = 0.02;

  int head_size() const { return hidden / heads; }

  double attention_scale() const {
    return std::sqrt(static_cast<double>(softmax_scale == SoftmaxScale::hidden ? hidden : head_size()));
  }

  void validate() const {
    if (layers < 0) throw ConfigError("model: layer count must be >= 0");
    if (hidden < 1 || heads < 1 || ffn < 1 || vocab < 1 || max_len < 1 || classes < 1) {
      throw ConfigError("model: hidden, heads, ffn, vocab, max_len and classes must all be >= 1");
    }
    if (hidden % heads != 0) {
      throw ConfigError("model: hidden size " + std::to_string(hidden) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (!(layer_norm_eps >= 0.0)) throw ConfigError("model: layer_norm_eps must be >= 0");
    if (!(init_std > 0.0)) throw ConfigError("model: init_std must be positive");
  }

  bool operator==(const EncoderConfig&) const = default;
};

// Per-layer weights. Query/key/value hold all heads side by side: columns
// [h * head_size, (h + 1) * head_size) belong to head h.
template <typename Scalar>
struct LayerParams {
  Tensor<Scalar> query_weight, query_bias;
  Tensor<Scalar> key_weight, key_bias;
  Tensor<Scalar> value_weight, value_bias;
  Tensor<Scalar> output_weight, output_bias;
  Tensor<Scalar> attention_norm_gain, attention_norm_bias;
  Tensor<Scalar> ffn_in_weight, ffn_in_bias;
  Tensor<Scalar> ffn_out_weight, ffn_out_bias;
  Tensor<Scalar> output_norm_gain, output_norm_bias;
};

template <typename Scalar>
struct EncoderParams {
  Tensor<Scalar> token_embedding;     // vocab x hidden
  Tensor<Scalar> position_embedding;  // max_len x hidden
  std::vector<LayerParams<Scalar>> layers;
  Tensor<Scalar> head_weight;  // hidden x classes
  Tensor<Scalar> head_bias;    // classes
};

// Calls fn(name, tensor) for every parameter in a fixed order.
template <typename Params, typename Fn>
void visit_parameters(Params& p, Fn&& fn) {
  fn("embeddings.token", p.token_embedding);
  fn("embeddings.position", p.position_embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    fn(prefix + "attention.query.weight", layer.query_weight);
    fn(prefix + "attention.query.bias", layer.query_bias);
    fn(prefix + "attention.key.weight", layer.key_weight);
    fn(prefix + "attention.key.bias", layer.key_bias);
    fn(prefix + "attention.value.weight", layer.value_weight);
    fn(prefix + "attention.value.bias", layer.value_bias);
    fn(prefix + "attention.output.weight", layer.output_weight);
    fn(prefix + "attention.output.bias", layer.output_bias);
    fn(prefix + "attention.norm.gain", layer.attention_norm_gain);
    fn(prefix + "attention.norm.bias", layer.attention_norm_bias);
    fn(prefix + "ffn.in.weight", layer.ffn_in_weight);
    fn(prefix + "ffn.in.bias", layer.ffn_in_bias);
    fn(prefix + "ffn.out.weight", layer.ffn_out_weight);
    fn(prefix + "ffn.out.bias", layer.ffn_out_bias);
    fn(prefix + "output.norm.gain", layer.output_norm_gain);
    fn(prefix + "output.norm.bias", layer.output_norm_bias);
  }
  fn("head.weight", p.head_weight);
  fn("head.bias", p.head_bias);
}

// Expected shape of every parameter, in visit order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const EncoderConfig& c) {
  const Index d = c.hidden;
  std::vector<std::pair<std::string, Shape>> shapes;
  shapes.emplace_back("embeddings.token", Shape{c.vocab, d});
  shapes.emplace_back("embeddings.position", Shape{c.max_len, d});
  for (int l = 0; l < c.layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    for (const char* m : {"query", "key", "value", "output"}) {
      shapes.emplace_back(prefix + "attention." + m + ".weight", Shape{d, d});
      shapes.emplace_back(prefix + "attention." + m + ".bias", Shape{d});
    }
    shapes.emplace_back(prefix + "attention.norm.gain", Shape{d});
    shapes.emplace_back(prefix + "attention.norm.bias", Shape{d});
    shapes.emplace_back(prefix + "ffn.in.weight", Shape{d, c.ffn});
    shapes.emplace_back(prefix + "ffn.in.bias", Shape{c.ffn});
    shapes.emplace_back(prefix + "ffn.out.weight", Shape{c.ffn, d});
    shapes.emplace_back(prefix + "ffn.out.bias", Shape{d});
    shapes.emplace_back(prefix + "output.norm.gain", Shape{d});
    shapes.emplace_back(prefix + "output.norm.bias", Shape{d});
  }
  shapes.emplace_back("head.weight", Shape{d, c.classes});
  shapes.emplace_back("head.bias", Shape{c.classes});
  return shapes;
}

inline Index count_params(const EncoderConfig& c) {
  Index total = 0;
  for (const auto& [name, shape] : parameter_shapes(c)) total += shape_numel(shape);
  return total;
}

// Effective parameters a forward pass reads: either the latent leaves themselves or
// fake-quantized wrappers around them.
template <typename Scalar>
struct EncoderView {
  EncoderConfig config;
  EncoderParams<Scalar> params;
  int activation_bits = 0;  // 8 quantizes the input of every projection and Q/K before QK^T
};

template <typename Scalar>
class EncoderModel {
 public:
  EncoderModel(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, config_.init_std);
    build([&](const std::string& name, const Shape& shape) {
      const auto [rows, cols] = storage_extents(shape);
      RowMatrix<Scalar> m(rows, cols);
      if (name.ends_with(".gain")) {
        m.setOnes();
      } else if (name.ends_with(".bias")) {
        m.setZero();
      } else {
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
      }
      return m;
    });
  }

  static EncoderModel zeros(EncoderConfig config) {
    EncoderModel m(std::move(config));
    m.build([](const std::string&, const Shape& shape) {
      const auto [rows, cols] = storage_extents(shape);
      return RowMatrix<Scalar>(RowMatrix<Scalar>::Zero(rows, cols));
    });
    return m;
  }

  EncoderModel(EncoderModel&&) noexcept = default;
  EncoderModel& operator=(EncoderModel&&) noexcept = default;
  EncoderModel(const EncoderModel&) = delete;
  EncoderModel& operator=(const EncoderModel&) = delete;

  const EncoderConfig& config() const { return config_; }
  EncoderParams<Scalar>& params() { return params_; }
  const EncoderParams<Scalar>& params() const { return params_; }

  std::vector<std::pair<std::string, Tensor<Scalar>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<Scalar>>> out;
    auto& p = const_cast<EncoderParams<Scalar>&>(params_);
    visit_parameters(p, [&](const std::string& name, Tensor<Scalar>& t) { out.emplace_back(name, t); });
    return out;
  }

  // Deep copy with fresh leaves.
  EncoderModel clone() const { return cast<Scalar>(); }

  template <typename Other>
  EncoderModel<Other> cast() const {
    auto out = EncoderModel<Other>::zeros(config_);
    auto src = named_parameters();
    std::size_t i = 0;
    visit_parameters(out.params(), [&](const std::string&, Tensor<Other>& dst) {
      const auto& s = src[i++].second;
      dst.mutable_value() = s.value().template cast<Other>();
      dst.set_requires_grad(s.requires_grad());
    });
    return out;
  }

  void set_requires_grad(bool on) {
    visit_parameters(params_, [&](const std::string&, Tensor<Scalar>& t) { t.set_requires_grad(on); });
  }

  void zero_grad() {
    visit_parameters(params_, [](const std::string&, Tensor<Scalar>& t) { t.zero_grad(); });
  }

  Index num_params() const { return count_params(config_); }

  EncoderView<Scalar> view() const { return {config_, params_, 0}; }

 private:
  explicit EncoderModel(EncoderConfig config) : config_(std::move(config)) { config_.validate(); }

  template <typename Init>
  void build(Init&& init) {
    const auto shapes = parameter_shapes(config_);
    params_.layers.resize(static_cast<std::size_t>(config_.layers));
    std::size_t i = 0;
    visit_parameters(params_, [&](const std::string& name, Tensor<Scalar>& t) {
      const Shape& shape = shapes[i++].second;
      t = Tensor<Scalar>::parameter(shape, init(name, shape));
    });
  }

  EncoderConfig config_;
  EncoderParams<Scalar> params_;
};

// Everything recorded for one layer during a capturing forward pass.
template <typename Scalar>
struct LayerTrace {
  Tensor<Scalar> input;                  // X_l
  std::vector<Tensor<Scalar>> scores;    // AS per head, n x n
  std::vector<Tensor<Scalar>> maps;      // AM per head, n x n, row-stochastic
  std::vector<Tensor<Scalar>> contexts;  // AC per head, n x head_size
  Tensor<Scalar> mha;                    // Concat(AC) W^O + b^O
  Tensor<Scalar> attention_output;       // Y_l
  Tensor<Scalar> output;                 // X_{l+1}
  // SA-PROP values: f_h(x_j) = (x_j W^V_h + b^V_h) W^O_h for every token j, and their sum over heads.
  std::vector<RowMatrix<Scalar>> sa_prop_heads;
  RowMatrix<Scalar> sa_prop;
};

template <typename Scalar>
struct AttentionTrace {
  Tensor<Scalar> embedding_output;  // X_0
  std::vector<LayerTrace<Scalar>> layers;
  Scalar softmax_scale = Scalar(1);
  int heads = 0;

  Index sequence_length() const { return embedding_output.rows(); }
};

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;  // 1 x classes, read from the first token
  std::optional<AttentionTrace<Scalar>> trace;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> maybe_quantize(const Tensor<Scalar>& x, int bits) {
  return bits ? fake_quantize_activation(x, bits) : x;
}

template <typename Scalar>
void require_layer(const EncoderView<Scalar>& view, int l) {
  if (l < 0 || l >= view.config.layers) {
    throw IndexError("layer " + std::to_string(l) + " outside [0, " + std::to_string(view.config.layers) + ")");
  }
}

}  // namespace detail

// Per-head SA-PROP values of layer l applied to the rows of `x`.
template <typename Scalar>
std::vector<Tensor<Scalar>> sa_prop_values_per_head(const EncoderView<Scalar>& view, const Tensor<Scalar>& x, int l) {
  detail::require_layer(view, l);
  const auto& p = view.params.layers[static_cast<std::size_t>(l)];
  const Index dh = view.config.head_size();
  const auto v = add_bias(matmul(detail::maybe_quantize(x, view.activation_bits), p.value_weight), p.value_bias);
  std::vector<Tensor<Scalar>> out;
  for (int h = 0; h < view.config.heads; ++h) {
    out.push_back(matmul(slice_cols(v, h * dh, dh), slice_rows(p.output_weight, h * dh, dh)));
  }
  return out;
}

// f(x_j) = (x_j W^V + b^V) W^O for every token row of x.
template <typename Scalar>
Tensor<Scalar> sa_prop_values(const EncoderView<Scalar>& view, const Tensor<Scalar>& x, int l) {
  detail::require_layer(view, l);
  const auto& p = view.params.layers[static_cast<std::size_t>(l)];
  const auto v = add_bias(matmul(detail::maybe_quantize(x, view.activation_bits), p.value_weight), p.value_bias);
  return matmul(v, p.output_weight);
}

template <typename Scalar>
ForwardResult<Scalar> forward(const EncoderView<Scalar>& view, std::span<const int> tokens, bool capture) {
  const auto& cfg = view.config;
  const auto& p = view.params;
  const Index n = static_cast<Index>(tokens.size());
  if (n < 1 || n > cfg.max_len) {
    throw InputError("sequence length " + std::to_string(n) + " outside [1, " + std::to_string(cfg.max_len) + "]");
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab) {
      throw InputError("token id " + std::to_string(t) + " outside [0, " + std::to_string(cfg.vocab) + ")");
    }
  }
  const int bits = view.activation_bits;
  const Index dh = cfg.head_size();
  const Scalar attn_scale = static_cast<Scalar>(cfg.attention_scale());
  const Scalar eps = static_cast<Scalar>(cfg.layer_norm_eps);

  ForwardResult<Scalar> result;
  AttentionTrace<Scalar> trace;
  trace.softmax_scale = attn_scale;
  trace.heads = cfg.heads;

  Tensor<Scalar> x = gather_rows(p.token_embedding, tokens) + slice_rows(p.position_embedding, 0, n);
  trace.embedding_output = x;

  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lp = p.layers[static_cast<std::size_t>(l)];
    LayerTrace<Scalar> lt;
    lt.input = x;

    const auto xq = detail::maybe_quantize(x, bits);
    const auto q = detail::maybe_quantize(add_bias(matmul(xq, lp.query_weight), lp.query_bias), bits);
    const auto k = detail::maybe_quantize(add_bias(matmul(xq, lp.key_weight), lp.key_bias), bits);
    const auto v = add_bias(matmul(xq, lp.value_weight), lp.value_bias);

    std::vector<Tensor<Scalar>> contexts;
    contexts.reserve(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      const auto scores = matmul(slice_cols(q, h * dh, dh), transpose(slice_cols(k, h * dh, dh)));
      const auto map = softmax_rows(scores, attn_scale);
      const auto context = matmul(map, slice_cols(v, h * dh, dh));
      contexts.push_back(context);
      if (capture) {
        lt.scores.push_back(scores);
        lt.maps.push_back(map);
        lt.contexts.push_back(context);
      }
    }
    const auto mha = add_bias(matmul(concat_cols(contexts), lp.output_weight), lp.output_bias);
    const auto y = layer_norm(x + mha, lp.attention_norm_gain, lp.attention_norm_bias, eps);
    const auto hidden = gelu(add_bias(matmul(detail::maybe_quantize(y, bits), lp.ffn_in_weight), lp.ffn_in_bias));
    const auto ffn = add_bias(matmul(detail::maybe_quantize(hidden, bits), lp.ffn_out_weight), lp.ffn_out_bias);
    const auto next = layer_norm(y + ffn, lp.output_norm_gain, lp.output_norm_bias, eps);

    if (capture) {
      lt.mha = mha;
      lt.attention_output = y;
      lt.output = next;
      // Recorded as plain values from the same V the forward used.
      lt.sa_prop = RowMatrix<Scalar>::Zero(n, cfg.hidden);
      for (int h = 0; h < cfg.heads; ++h) {
        RowMatrix<Scalar> f = v.value().middleCols(h * dh, dh) * lp.output_weight.value().middleRows(h * dh, dh);
        lt.sa_prop += f;
        lt.sa_prop_heads.push_back(std::move(f));
      }
      trace.layers.push_back(std::move(lt));
    }
    x = next;
  }

  result.logits = add_bias(matmul(slice_rows(x, 0, 1), p.head_weight), p.head_bias);
  if (capture) result.trace = std::move(trace);
  return result;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const EncoderModel<Scalar>& model, std::span<const int> tokens, bool capture) {
  return forward(model.view(), tokens, capture);
}

}  // namespace kdqat
