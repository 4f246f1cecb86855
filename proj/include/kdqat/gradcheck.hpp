// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "kdqat/tensor.hpp"

namespace kdqat {

// Largest per-coordinate relative error between the tape gradient of `loss` with respect to
// the leaf `param` and its central-difference estimate:
//   |analytic - cd| / max(|analytic|, |cd|, 1e-8).
// `loss` must rebuild the graph from the current value of `param` on every call. The
// parameter value is restored on exit; other leaves in the graph receive gradients too.
template <typename Scalar>
double gradcheck_parameter(Tensor<Scalar>& param, const std::function<Tensor<Scalar>()>& loss, double step) {
  if (!param.requires_grad()) throw ContractError("gradcheck: parameter does not require grad");
  param.zero_grad();
  backward(loss());
  const RowMatrix<Scalar> analytic = param.has_grad() ? param.grad() : RowMatrix<Scalar>::Zero(param.rows(), param.cols());

  auto& value = param.mutable_value();
  double worst = 0.0;
  for (Index i = 0; i < value.size(); ++i) {
    const Scalar original = value.data()[i];
    value.data()[i] = static_cast<Scalar>(static_cast<double>(original) + step);
    const double up = static_cast<double>(loss().item());
    value.data()[i] = static_cast<Scalar>(static_cast<double>(original) - step);
    const double down = static_cast<double>(loss().item());
    value.data()[i] = original;
    const double cd = (up - down) / (2.0 * step);
    const double a = static_cast<double>(analytic.data()[i]);
    const double denom = std::max({std::abs(a), std::abs(cd), 1e-8});
    worst = std::max(worst, std::abs(a - cd) / denom);
  }
  return worst;
}

// gradcheck for a pure tensor function f evaluated at x.
template <typename Scalar>
double gradcheck(const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& f, const Tensor<Scalar>& x, double step) {
  auto probe = Tensor<Scalar>::parameter(x.shape(), x.value());
  return gradcheck_parameter<Scalar>(probe, [&] { return f(probe); }, step);
}

struct GradientPair {
  double analytic = 0.0;
  double numeric = 0.0;

  double relative_error() const {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  }
};

// Tape gradient computed at working precision next to central differences of a
// double-precision twin of the same parameter. `twin_loss` must read `twin` afresh on every
// call. Only the listed coordinates are probed; an empty list probes all of them.
template <typename Scalar>
std::vector<GradientPair> gradient_pairs(const RowMatrix<Scalar>& analytic, Tensor<double>& twin,
                                         const std::function<double()>& twin_loss, double step,
                                         std::span<const Index> coords = {}) {
  if (analytic.rows() != twin.rows() || analytic.cols() != twin.cols()) {
    throw DimensionError("gradcheck: gradient and twin parameter shapes differ");
  }
  auto& value = twin.mutable_value();
  const Index count = coords.empty() ? value.size() : static_cast<Index>(coords.size());
  std::vector<GradientPair> out;
  for (Index n = 0; n < count; ++n) {
    const Index i = coords.empty() ? n : coords[static_cast<std::size_t>(n)];
    const double original = value.data()[i];
    value.data()[i] = original + step;
    const double up = twin_loss();
    value.data()[i] = original - step;
    const double down = twin_loss();
    value.data()[i] = original;
    out.push_back({static_cast<double>(analytic.data()[i]), (up - down) / (2.0 * step)});
  }
  return out;
}

template <typename Scalar>
double gradcheck_against(const RowMatrix<Scalar>& analytic, Tensor<double>& twin,
                         const std::function<double()>& twin_loss, double step, std::span<const Index> coords = {}) {
  double worst = 0.0;
  for (const auto& p : gradient_pairs(analytic, twin, twin_loss, step, coords)) worst = std::max(worst, p.relative_error());
  return worst;
}

}  // namespace kdqat
