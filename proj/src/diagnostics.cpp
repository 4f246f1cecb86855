// SPDX-License-Identifier: Apache-2.0
#include "kdqat/diagnostics.hpp"

#include <random>

namespace kdqat {

Eigen::VectorXd hessian_vector_product(const GradientFn& gradient, const Eigen::VectorXd& theta,
                                       const Eigen::VectorXd& v) {
  const double eps = 1e-3 * (1.0 + (theta.size() ? theta.cwiseAbs().maxCoeff() : 0.0));
  const Eigen::VectorXd up = gradient(theta + eps * v);
  const Eigen::VectorXd down = gradient(theta - eps * v);
  if (!up.allFinite() || !down.allFinite()) throw NumericError("hessian: non-finite gradient");
  return (up - down) / (2.0 * eps);
}

EigenEstimate hessian_max_eig(const GradientFn& gradient, const Eigen::VectorXd& theta, const Eigen::VectorXd& v0,
                              const PowerIterationOptions& options) {
  if (options.steps < 1) throw ConfigError("hessian: power-iteration steps must be >= 1");
  if (v0.size() != theta.size()) throw DimensionError("hessian: start vector and parameters differ in size");
  const double norm0 = v0.norm();
  if (!(norm0 > 0.0)) throw InputError("hessian: start vector is zero");

  EigenEstimate est;
  Eigen::VectorXd v = v0 / norm0;
  double previous = 0.0;
  for (int it = 1; it <= options.steps; ++it) {
    const Eigen::VectorXd hv = hessian_vector_product(gradient, theta, v);
    est.eigenvalue = v.dot(hv);
    est.iterations = it;
    const double norm = hv.norm();
    if (it > 1 && std::abs(est.eigenvalue - previous) < options.tol) {
      est.converged = true;
      break;
    }
    if (norm == 0.0) {
      est.converged = true;
      break;
    }
    previous = est.eigenvalue;
    v = hv / norm;
  }
  return est;
}

std::vector<EigenEstimate> hessian_spectrum(const GradientFn& gradient, const Eigen::VectorXd& theta,
                                            const std::vector<std::uint64_t>& seeds,
                                            const PowerIterationOptions& options) {
  std::vector<EigenEstimate> out;
  for (auto seed : seeds) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Eigen::VectorXd v0(theta.size());
    for (Index i = 0; i < v0.size(); ++i) v0(i) = normal(rng);
    out.push_back(hessian_max_eig(gradient, theta, v0, options));
  }
  return out;
}

}  // namespace kdqat
