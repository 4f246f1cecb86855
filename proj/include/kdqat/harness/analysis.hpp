// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "kdqat/diagnostics.hpp"
#include "kdqat/encoder.hpp"
#include "kdqat/harness/config.hpp"
#include "kdqat/harness/metrics.hpp"
#include "kdqat/harness/training.hpp"
#include "kdqat/kd_losses.hpp"
#include "kdqat/quantizer.hpp"

namespace kdqat {

// Records, in order:
//   {"record": "head", layer, head, cover_ratio, ranking_loss}              one per layer x head
//   {"record": "layer", layer, token, ranking_ratio_teacher, ranking_ratio_student,
//    range_teacher: [min, max], range_student: [min, max], sa_generation, sa_propagation}
//   {"record": "summary", examples, ranking_loss_median, cover_ratio_mean}
// Every value is a mean over the first `config.examples` sequences of `data`.
std::vector<Json> diagnose(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                           const std::optional<QuantSpec>& student_quant, const Dataset& data,
                           const DiagnosticsConfig& config);

// Flat views of every parameter of a model, in visit order.
template <typename Scalar>
Eigen::VectorXd flat_parameters(const EncoderModel<Scalar>& model) {
  Eigen::VectorXd theta(model.num_params());
  Index at = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    theta.segment(at, t.numel()) = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(t.value().data(), t.numel()).template cast<double>();
    at += t.numel();
  }
  return theta;
}

template <typename Scalar>
void set_flat_parameters(EncoderModel<Scalar>& model, const Eigen::VectorXd& theta) {
  Index at = 0;
  visit_parameters(model.params(), [&](const std::string&, Tensor<Scalar>& t) {
    auto& v = t.mutable_value();
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(theta(at + i));
    at += v.size();
  });
}

template <typename Scalar>
Eigen::VectorXd flat_gradient(const EncoderModel<Scalar>& model) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(model.num_params());
  Index at = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    if (t.has_grad()) {
      g.segment(at, t.numel()) = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(t.grad().data(), t.numel()).template cast<double>();
    }
    at += t.numel();
  }
  return g;
}

// Gradient of the mean KD loss of `student` (through its quantized view) against `teacher`
// on `data`, as a function of the student's flat parameters. Evaluated in double.
GradientFn kd_loss_gradient(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                            const ExperimentConfig& config, const Dataset& data);

// One {"record": "hessian", seed, eigenvalue, iterations, converged} per start-vector seed.
std::vector<Json> hessian_report(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                                 const ExperimentConfig& config, const Dataset& data);

// One record per run: {"record": "sweep", sweep, mode|tau, gamma?, seed, dev, run}.
// Runs go to <out_dir>/<run>; records replace <out_dir>/sweep.jsonl.
std::vector<Json> sweep_gamma(const ExperimentConfig& config, const EncoderModel<float>& teacher,
                              const TaskSplits& data, const std::filesystem::path& out_dir);
std::vector<Json> sweep_tau(const ExperimentConfig& config, const EncoderModel<float>& teacher,
                            const TaskSplits& data, const std::filesystem::path& out_dir);

// f32 tape gradients of the composite encoder loss and of every KD preset against f64
// central differences, on `seeds` random models of the configured shape. Probes up to
// `coords` random coordinates per tensor. One {"record": "gradcheck", target, seed,
// max_rel_error, max_rel_error_conditioned, key_bias_max_abs_error, coordinates} per
// target and seed. The conditioned error only counts coordinates whose gradient is at least
// 1e-3 of the largest probed one. Key biases are reported by absolute error because their
// exact gradient is zero.
std::vector<Json> gradcheck_report(const ExperimentConfig& config, int seeds, int coords);

inline constexpr const char* kSweepFile = "sweep.jsonl";

}  // namespace kdqat
