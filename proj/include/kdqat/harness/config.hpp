// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "kdqat/encoder.hpp"
#include "kdqat/kd_losses.hpp"
#include "kdqat/optimizer.hpp"
#include "kdqat/quantizer.hpp"
#include "kdqat/task.hpp"

namespace kdqat {

struct DiagnosticsConfig {
  int top_k = 3;          // teacher tokens the cover length must reach
  int token = 0;          // token tracked by ranking ratio and SA distances
  int examples = 32;      // dev examples analysed
  int power_steps = 50;
  double power_tol = 1e-4;
  int hessian_seeds = 3;  // random start vectors per Hessian spectrum
  int hessian_examples = 8;

  void validate(int sequence_length) const;
  bool operator==(const DiagnosticsConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  TaskConfig task;
  EncoderConfig model;  // vocab, max_len and classes always follow the task
  OptimizerConfig teacher;
  OptimizerConfig qat;
  QuantSpec quant = QuantSpec::ternary();
  std::string preset = "baseline";
  std::string layers = "all";  // "all", "uniform:K" or a comma list
  KDLossConfig kd = KDLossConfig::preset("baseline");
  DiagnosticsConfig diagnostics;

  ExperimentConfig();

  // Swaps in the terms of a named preset, keeping tau, gamma and the layer choice.
  void apply_preset(const std::string& name);
  // Copies task-derived extents into the model and resolves the layer choice into kd.
  void resolve();
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

// INI text with sections [run] [task] [model] [teacher] [qat] [quant] [kd] [diagnostics].
// Missing keys keep their defaults; unknown sections or keys are errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Every key with its resolved value; parse_config(to_ini(c)) == c.
std::string to_ini(const ExperimentConfig& config);

}  // namespace kdqat
