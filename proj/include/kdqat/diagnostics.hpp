// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "kdqat/encoder.hpp"
#include "kdqat/errors.hpp"

namespace kdqat {

namespace detail {

// Indices of `row` ordered by descending value; ties keep the lower index first.
template <typename Derived>
std::vector<Index> descending_order(const Eigen::DenseBase<Derived>& row) {
  std::vector<Index> idx(static_cast<std::size_t>(row.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return row(a) > row(b); });
  return idx;
}

template <typename T>
int sign(T v) {
  return (T(0) < v) - (v < T(0));
}

}  // namespace detail

// Length of the shortest prefix of the student's descending order that contains all of
// the teacher's top-k tokens, divided by the row length.
template <typename DerivedT, typename DerivedS>
double cover_length_ratio(const Eigen::DenseBase<DerivedT>& teacher, const Eigen::DenseBase<DerivedS>& student,
                          Index k) {
  const Index n = teacher.size();
  if (student.size() != n) throw DimensionError("cover_length_ratio: rows differ in length");
  if (k < 1 || k > n) throw ConfigError("cover_length_ratio: need 1 <= K <= n");
  const auto t_order = detail::descending_order(teacher);
  const auto s_order = detail::descending_order(student);
  std::vector<char> wanted(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < k; ++i) wanted[static_cast<std::size_t>(t_order[static_cast<std::size_t>(i)])] = 1;
  Index remaining = k;
  Index length = 0;
  while (remaining > 0) {
    if (wanted[static_cast<std::size_t>(s_order[static_cast<std::size_t>(length)])]) --remaining;
    ++length;
  }
  return static_cast<double>(length) / static_cast<double>(n);
}

// Pairwise hinge ranking loss of one attention map (rows x n):
// sum over rows and i < j of max(0, -(S_i - S_j) * sign(T_i - T_j)).
template <typename DerivedT, typename DerivedS>
double ranking_loss(const Eigen::DenseBase<DerivedT>& teacher, const Eigen::DenseBase<DerivedS>& student) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols()) {
    throw DimensionError("ranking_loss: map shapes differ");
  }
  double total = 0.0;
  for (Index r = 0; r < teacher.rows(); ++r) {
    for (Index i = 0; i + 1 < teacher.cols(); ++i) {
      for (Index j = i + 1; j < teacher.cols(); ++j) {
        const int s = detail::sign(static_cast<double>(teacher(r, i)) - static_cast<double>(teacher(r, j)));
        const double arg = (static_cast<double>(student(r, i)) - static_cast<double>(student(r, j))) * s;
        total += std::max(0.0, -arg);
      }
    }
  }
  return total;
}

// Sum of the per-head ranking losses of one layer.
template <typename Scalar>
double ranking_loss(const std::vector<Tensor<Scalar>>& teacher_maps, const std::vector<Tensor<Scalar>>& student_maps) {
  if (teacher_maps.size() != student_maps.size()) throw DimensionError("ranking_loss: head counts differ");
  double total = 0.0;
  for (std::size_t h = 0; h < teacher_maps.size(); ++h) total += ranking_loss(teacher_maps[h].value(), student_maps[h].value());
  return total;
}

// 1-based descending rank of row[t] divided by the row length; ties rank the lower index first.
template <typename Derived>
double ranking_ratio(const Eigen::DenseBase<Derived>& row, Index t) {
  const Index n = row.size();
  if (t < 0 || t >= n) throw IndexError("ranking_ratio: token " + std::to_string(t) + " outside the row");
  Index rank = 1;
  for (Index j = 0; j < n; ++j) {
    if (row(j) > row(t) || (row(j) == row(t) && j < t)) ++rank;
  }
  return static_cast<double>(rank) / static_cast<double>(n);
}

// Per-token (min, max) over the hidden features: column 0 is min, column 1 is max.
template <typename Derived>
Eigen::MatrixX2d token_dynamic_range(const Eigen::DenseBase<Derived>& y) {
  Eigen::MatrixX2d out(y.rows(), 2);
  for (Index r = 0; r < y.rows(); ++r) {
    out(r, 0) = static_cast<double>(y.row(r).minCoeff());
    out(r, 1) = static_cast<double>(y.row(r).maxCoeff());
  }
  return out;
}

struct SaDistance {
  double generation = 0.0;   // attention probabilities of the token, averaged over heads
  double propagation = 0.0;  // SA-PROP values f(x_t)
};

// Per-layer teacher/student distance of token t: L2 norm of the difference divided by
// the vector length, for the attention row alpha_{t,.} (mean over heads) and for f(x_t).
template <typename Scalar>
std::vector<SaDistance> sa_distance(const AttentionTrace<Scalar>& teacher, const AttentionTrace<Scalar>& student,
                                    Index token) {
  if (teacher.layers.size() != student.layers.size()) throw ContractError("sa_distance: layer counts differ");
  if (token < 0 || token >= teacher.sequence_length() || teacher.sequence_length() != student.sequence_length()) {
    throw IndexError("sa_distance: token " + std::to_string(token) + " outside the sequence");
  }
  std::vector<SaDistance> out;
  for (std::size_t l = 0; l < teacher.layers.size(); ++l) {
    const auto& tl = teacher.layers[l];
    const auto& sl = student.layers[l];
    SaDistance d;
    for (std::size_t h = 0; h < tl.maps.size(); ++h) {
      const auto diff = (tl.maps[h].value().row(token) - sl.maps[h].value().row(token)).template cast<double>();
      d.generation += diff.norm() / static_cast<double>(diff.size());
    }
    d.generation /= static_cast<double>(tl.maps.size());
    const auto fdiff = (tl.sa_prop.row(token) - sl.sa_prop.row(token)).template cast<double>();
    d.propagation = fdiff.norm() / static_cast<double>(fdiff.size());
    out.push_back(d);
  }
  return out;
}

// Gradient of a scalar loss at a flat parameter vector.
using GradientFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct PowerIterationOptions {
  int steps = 100;
  double tol = 1e-6;
};

struct EigenEstimate {
  double eigenvalue = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Hessian-vector product by central differences of the gradient:
// Hv ~ (g(theta + e v) - g(theta - e v)) / (2 e), e = 1e-3 * (1 + ||theta||_inf).
Eigen::VectorXd hessian_vector_product(const GradientFn& gradient, const Eigen::VectorXd& theta, const Eigen::VectorXd& v);

// Dominant Hessian eigenvalue by power iteration from v0; returns the Rayleigh quotient
// once it changes by less than `tol` or after `steps` iterations.
EigenEstimate hessian_max_eig(const GradientFn& gradient, const Eigen::VectorXd& theta, const Eigen::VectorXd& v0,
                              const PowerIterationOptions& options);

// One estimate per seed, each from a Gaussian unit start vector.
std::vector<EigenEstimate> hessian_spectrum(const GradientFn& gradient, const Eigen::VectorXd& theta,
                                            const std::vector<std::uint64_t>& seeds, const PowerIterationOptions& options);

}  // namespace kdqat
