// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "kdqat/tensor.hpp"

namespace kdqat {

namespace detail {

template <typename Scalar>
void require_finite(const RowMatrix<Scalar>& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
}

template <typename Scalar>
void require_rank2(const Tensor<Scalar>& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <typename Derived>
Accum accumulate(const Eigen::DenseBase<Derived>& m) {
  return m.template cast<Accum>().sum();
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents of " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                         " do not match");
  }
  RowMatrix<Scalar> out = a.value() * b.value();
  return Tensor<Scalar>::make("matmul", {a.rows(), b.cols()}, std::move(out), {a, b},
                              [av = a.value(), bv = b.value()](const auto& g, auto grads) {
                                if (grads[0].size()) grads[0].noalias() += g * bv.transpose();
                                if (grads[1].size()) grads[1].noalias() += av.transpose() * g;
                              });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  detail::require_rank2(a, "transpose");
  RowMatrix<Scalar> out = a.value().transpose();
  return Tensor<Scalar>::make("transpose", {a.cols(), a.rows()}, std::move(out), {a},
                              [](const auto& g, auto grads) { grads[0] += g.transpose(); });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  RowMatrix<Scalar> out = a.value() + b.value();
  return Tensor<Scalar>::make("add", a.shape(), std::move(out), {a, b}, [](const auto& g, auto grads) {
    if (grads[0].size()) grads[0] += g;
    if (grads[1].size()) grads[1] += g;
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  RowMatrix<Scalar> out = a.value() - b.value();
  return Tensor<Scalar>::make("sub", a.shape(), std::move(out), {a, b}, [](const auto& g, auto grads) {
    if (grads[0].size()) grads[0] += g;
    if (grads[1].size()) grads[1] -= g;
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  RowMatrix<Scalar> out = a.value().cwiseProduct(b.value());
  return Tensor<Scalar>::make("mul", a.shape(), std::move(out), {a, b},
                              [av = a.value(), bv = b.value()](const auto& g, auto grads) {
                                if (grads[0].size()) grads[0] += g.cwiseProduct(bv);
                                if (grads[1].size()) grads[1] += g.cwiseProduct(av);
                              });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  RowMatrix<Scalar> out = a.value() * factor;
  return Tensor<Scalar>::make("scale", a.shape(), std::move(out), {a},
                              [factor](const auto& g, auto grads) { grads[0] += g * factor; });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) { return scale(a, s); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) { return scale(a, s); }

// x[..., n] + bias[n], bias broadcast over every leading index.
template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  if (bias.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  }
  const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.value().data(), x.cols());
  RowMatrix<Scalar> out = x.value().rowwise() + b;
  return Tensor<Scalar>::make("add_bias", x.shape(), std::move(out), {x, bias}, [](const auto& g, auto grads) {
    if (grads[0].size()) grads[0] += g;
    if (grads[1].size()) grads[1] += g.colwise().sum().reshaped(grads[1].rows(), grads[1].cols());
  });
}

// Sum of every element as a rank-0 tensor, accumulated in double.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(detail::accumulate(x.value()));
  return Tensor<Scalar>::make("sum", {}, std::move(out), {x},
                              [](const auto& g, auto grads) { grads[0].array() += g(0, 0); });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  const Index n = x.numel();
  if (n == 0) throw InputError("mean of an empty tensor");
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(detail::accumulate(x.value()) / static_cast<Accum>(n));
  return Tensor<Scalar>::make("mean", {}, std::move(out), {x}, [n](const auto& g, auto grads) {
    grads[0].array() += static_cast<Scalar>(static_cast<Accum>(g(0, 0)) / static_cast<Accum>(n));
  });
}

// Sum of a list of scalar tensors.
template <typename Scalar>
Tensor<Scalar> add_n(const std::vector<Tensor<Scalar>>& terms) {
  if (terms.empty()) return Tensor<Scalar>::scalar(Scalar(0));
  Accum total = 0;
  for (const auto& t : terms) {
    if (t.numel() != 1) throw DimensionError("add_n: term of shape " + shape_string(t.shape()) + " is not scalar");
    total += static_cast<Accum>(t.item());
  }
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total);
  return Tensor<Scalar>::make("add_n", {}, std::move(out), terms, [](const auto& g, auto grads) {
    for (auto& gi : grads)
      if (gi.size()) gi(0, 0) += g(0, 0);
  });
}

// Mean squared error over all elements.
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mse");
  const Index n = a.numel();
  if (n == 0) throw InputError("mse of empty tensors");
  RowMatrix<Scalar> diff = a.value() - b.value();
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(diff.template cast<Accum>().squaredNorm() / static_cast<Accum>(n));
  return Tensor<Scalar>::make("mse", {}, std::move(out), {a, b}, [diff = std::move(diff), n](const auto& g, auto grads) {
    const Scalar k = static_cast<Scalar>(2.0 * static_cast<Accum>(g(0, 0)) / static_cast<Accum>(n));
    if (grads[0].size()) grads[0] += diff * k;
    if (grads[1].size()) grads[1] -= diff * k;
  });
}

// Row-wise softmax of x / scale with max subtraction; normalizer accumulated in double.
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x, Scalar scale = Scalar(1)) {
  if (x.cols() < 1) throw DimensionError("softmax_rows: empty last axis in " + shape_string(x.shape()));
  if (!(scale > Scalar(0))) throw ContractError("softmax_rows: scale must be positive");
  detail::require_finite(x.value(), "softmax_rows");
  const auto& xv = x.value();
  RowMatrix<Scalar> y(xv.rows(), xv.cols());
  const Accum inv_scale = Accum(1) / static_cast<Accum>(scale);
  Eigen::Matrix<Accum, 1, Eigen::Dynamic> e(xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Accum m = static_cast<Accum>(xv.row(r).maxCoeff());
    Accum z = 0;
    for (Index c = 0; c < xv.cols(); ++c) {
      e(c) = std::exp((static_cast<Accum>(xv(r, c)) - m) * inv_scale);
      z += e(c);
    }
    for (Index c = 0; c < xv.cols(); ++c) y(r, c) = static_cast<Scalar>(e(c) / z);
  }
  return Tensor<Scalar>::make("softmax_rows", x.shape(), y, {x}, [y, inv_scale](const auto& g, auto grads) {
    for (Index r = 0; r < y.rows(); ++r) {
      const Accum dot = (y.row(r).template cast<Accum>().array() * g.row(r).template cast<Accum>().array()).sum();
      for (Index c = 0; c < y.cols(); ++c) {
        grads[0](r, c) += static_cast<Scalar>(inv_scale * static_cast<Accum>(y(r, c)) *
                                              (static_cast<Accum>(g(r, c)) - dot));
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> log_softmax_rows(const Tensor<Scalar>& x, Scalar scale = Scalar(1)) {
  if (x.cols() < 1) throw DimensionError("log_softmax_rows: empty last axis in " + shape_string(x.shape()));
  if (!(scale > Scalar(0))) throw ContractError("log_softmax_rows: scale must be positive");
  detail::require_finite(x.value(), "log_softmax_rows");
  const auto& xv = x.value();
  RowMatrix<Scalar> y(xv.rows(), xv.cols());
  RowMatrix<Scalar> p(xv.rows(), xv.cols());
  const Accum inv_scale = Accum(1) / static_cast<Accum>(scale);
  for (Index r = 0; r < xv.rows(); ++r) {
    const Accum m = static_cast<Accum>(xv.row(r).maxCoeff());
    Accum z = 0;
    for (Index c = 0; c < xv.cols(); ++c) z += std::exp((static_cast<Accum>(xv(r, c)) - m) * inv_scale);
    const Accum log_z = std::log(z);
    for (Index c = 0; c < xv.cols(); ++c) {
      const Accum shifted = (static_cast<Accum>(xv(r, c)) - m) * inv_scale - log_z;
      y(r, c) = static_cast<Scalar>(shifted);
      p(r, c) = static_cast<Scalar>(std::exp(shifted));
    }
  }
  return Tensor<Scalar>::make("log_softmax_rows", x.shape(), std::move(y), {x},
                              [p = std::move(p), inv_scale](const auto& g, auto grads) {
                                for (Index r = 0; r < p.rows(); ++r) {
                                  const Accum gs = detail::accumulate(g.row(r));
                                  for (Index c = 0; c < p.cols(); ++c) {
                                    grads[0](r, c) += static_cast<Scalar>(
                                        inv_scale * (static_cast<Accum>(g(r, c)) - static_cast<Accum>(p(r, c)) * gs));
                                  }
                                }
                              });
}

// log(max(x, floor)); zero gradient where the floor is active.
template <typename Scalar>
Tensor<Scalar> log_floored(const Tensor<Scalar>& x, Scalar floor) {
  RowMatrix<Scalar> clamped = x.value().cwiseMax(floor);
  if (!(clamped.array() > Scalar(0)).all() || !clamped.allFinite()) {
    throw NumericError("log_floored: non-positive or non-finite value after flooring");
  }
  RowMatrix<Scalar> out = clamped.array().log().matrix();
  return Tensor<Scalar>::make("log_floored", x.shape(), std::move(out), {x},
                              [xv = x.value(), floor](const auto& g, auto grads) {
                                for (Index i = 0; i < xv.size(); ++i) {
                                  if (xv.data()[i] > floor) grads[0].data()[i] += g.data()[i] / xv.data()[i];
                                }
                              });
}

// Sum over rows of KL(p_r || q_r) given p and log q; natural log, 0·log 0 = 0.
template <typename Scalar>
Tensor<Scalar> kl_divergence(const Tensor<Scalar>& p, const Tensor<Scalar>& log_q) {
  detail::require_same_shape(p.shape(), log_q.shape(), "kl_divergence");
  const auto& pv = p.value();
  const auto& lq = log_q.value();
  // log p at working precision, the same way log q was taken, so KL(p || p) is exactly 0.
  const RowMatrix<Scalar> lp = pv.array().log().matrix();
  Accum total = 0;
  for (Index i = 0; i < pv.size(); ++i) {
    const Accum pi = static_cast<Accum>(pv.data()[i]);
    if (pi > 0) total += pi * (static_cast<Accum>(lp.data()[i]) - static_cast<Accum>(lq.data()[i]));
  }
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total);
  return Tensor<Scalar>::make("kl_divergence", {}, std::move(out), {p, log_q}, [pv, lp, lq](const auto& g, auto grads) {
    const Accum gs = static_cast<Accum>(g(0, 0));
    if (grads[0].size()) {
      for (Index i = 0; i < pv.size(); ++i) {
        const Accum pi = static_cast<Accum>(pv.data()[i]);
        if (pi > 0) {
          grads[0].data()[i] +=
              static_cast<Scalar>(gs * (static_cast<Accum>(lp.data()[i]) + 1 - static_cast<Accum>(lq.data()[i])));
        }
      }
    }
    if (grads[1].size()) grads[1] -= pv * static_cast<Scalar>(gs);
  });
}

// Per-row normalization over the last axis followed by gain and bias.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps = Scalar(1e-12)) {
  const Index d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: zero-width last axis");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " + shape_string(bias.shape()) +
                         " vs input " + shape_string(x.shape()));
  }
  const auto& xv = x.value();
  const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gv(gain.value().data(), d);
  const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bv(bias.value().data(), d);
  RowMatrix<Scalar> xhat(xv.rows(), d);
  Eigen::Matrix<Accum, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const auto row = xv.row(r).template cast<Accum>();
    const Accum mu = row.sum() / static_cast<Accum>(d);
    const Accum var = (row.array() - mu).square().sum() / static_cast<Accum>(d);
    const Accum denom = var + static_cast<Accum>(eps);
    inv_std(r) = denom > 0 ? 1.0 / std::sqrt(denom) : 0.0;
    xhat.row(r) = ((row.array() - mu) * inv_std(r)).template cast<Scalar>().matrix();
  }
  RowMatrix<Scalar> out = (xhat.array().rowwise() * gv.array()).rowwise() + bv.array();
  return Tensor<Scalar>::make(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xhat, inv_std, gamma = RowMatrix<Scalar>(gv)](const auto& g, auto grads) {
        const Index width = xhat.cols();
        if (grads[0].size()) {
          for (Index r = 0; r < xhat.rows(); ++r) {
            const auto dxhat = (g.row(r).array() * gamma.array()).template cast<Accum>();
            const auto xh = xhat.row(r).array().template cast<Accum>();
            const Accum s1 = dxhat.sum();
            const Accum s2 = (dxhat * xh).sum();
            const Accum k = inv_std(r) / static_cast<Accum>(width);
            grads[0].row(r) +=
                (k * (static_cast<Accum>(width) * dxhat - s1 - xh * s2)).template cast<Scalar>().matrix();
          }
        }
        if (grads[1].size()) {
          RowMatrix<Scalar> dg = (g.array() * xhat.array()).matrix().colwise().sum();
          grads[1] += dg.reshaped(grads[1].rows(), grads[1].cols());
        }
        if (grads[2].size()) {
          RowMatrix<Scalar> db = g.colwise().sum();
          grads[2] += db.reshaped(grads[2].rows(), grads[2].cols());
        }
      });
}

// Exact GELU: x * Phi(x) with the erf-based normal CDF.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  const auto& xv = x.value();
  RowMatrix<Scalar> out(xv.rows(), xv.cols());
  for (Index i = 0; i < xv.size(); ++i) {
    const Accum v = static_cast<Accum>(xv.data()[i]);
    out.data()[i] = static_cast<Scalar>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
  }
  return Tensor<Scalar>::make("gelu", x.shape(), std::move(out), {x}, [xv](const auto& g, auto grads) {
    constexpr Accum inv_sqrt_2pi = 0.3989422804014327;
    for (Index i = 0; i < xv.size(); ++i) {
      const Accum v = static_cast<Accum>(xv.data()[i]);
      const Accum cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const Accum pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      grads[0].data()[i] += static_cast<Scalar>(static_cast<Accum>(g.data()[i]) * (cdf + v * pdf));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& x, Index start, Index count) {
  detail::require_rank2(x, "slice_cols");
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw IndexError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) + ") outside " +
                     shape_string(x.shape()));
  }
  RowMatrix<Scalar> out = x.value().middleCols(start, count);
  return Tensor<Scalar>::make("slice_cols", {x.rows(), count}, std::move(out), {x},
                              [start, count](const auto& g, auto grads) { grads[0].middleCols(start, count) += g; });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, Index start, Index count) {
  detail::require_rank2(x, "slice_rows");
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) + ") outside " +
                     shape_string(x.shape()));
  }
  RowMatrix<Scalar> out = x.value().middleRows(start, count);
  return Tensor<Scalar>::make("slice_rows", {count, x.cols()}, std::move(out), {x},
                              [start, count](const auto& g, auto grads) { grads[0].middleRows(start, count) += g; });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
  }
  RowMatrix<Scalar> out(rows, cols);
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return Tensor<Scalar>::make("concat_cols", {rows, cols}, std::move(out), parts,
                              [offsets](const auto& g, auto grads) {
                                for (std::size_t i = 0; i < grads.size(); ++i) {
                                  if (grads[i].size()) grads[i] += g.middleCols(offsets[i], grads[i].cols());
                                }
                              });
}

// Embedding lookup: rows of `table` selected by `ids`.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const int> ids) {
  detail::require_rank2(table, "gather_rows");
  RowMatrix<Scalar> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw InputError("gather_rows: id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(table.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  return Tensor<Scalar>::make("gather_rows", {static_cast<Index>(ids.size()), table.cols()}, std::move(out), {table},
                              [idx = std::vector<int>(ids.begin(), ids.end())](const auto& g, auto grads) {
                                for (std::size_t i = 0; i < idx.size(); ++i) grads[0].row(idx[i]) += g.row(static_cast<Index>(i));
                              });
}

// Forward value replaced by `forward_value`; gradient passed to `latent` unchanged.
template <typename Scalar>
Tensor<Scalar> straight_through(const Tensor<Scalar>& latent, RowMatrix<Scalar> forward_value) {
  if (forward_value.rows() != latent.rows() || forward_value.cols() != latent.cols()) {
    throw DimensionError("straight_through: value does not match " + shape_string(latent.shape()));
  }
  return Tensor<Scalar>::make("straight_through", latent.shape(), std::move(forward_value), {latent},
                              [](const auto& g, auto grads) { grads[0] += g; });
}

// Mean over rows of the cross-entropy between softmax(logits) and integer labels.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_string(logits.shape()));
  }
  const auto logp = log_softmax_rows(logits);
  RowMatrix<Scalar> mask = RowMatrix<Scalar>::Zero(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= logits.cols()) throw InputError("cross_entropy: label out of range");
    mask(static_cast<Index>(r), labels[r]) = Scalar(-1) / static_cast<Scalar>(labels.size());
  }
  return sum(mul(logp, Tensor<Scalar>::constant(logits.shape(), std::move(mask))));
}

}  // namespace kdqat
