// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "kdqat/encoder.hpp"
#include "kdqat/harness/config.hpp"
#include "kdqat/harness/metrics.hpp"
#include "kdqat/task.hpp"

namespace kdqat {

// Where and how a training stage persists itself. An empty out_dir keeps everything in memory.
struct RunOptions {
  std::filesystem::path out_dir;
  bool resume = false;        // continue from <out_dir>/state.json when present
  int stop_after_epoch = -1;  // stop cleanly once this many epochs are complete
};

// Run directory layout.
inline constexpr const char* kConfigFile = "config.ini";
inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kModelFile = "model.ckpt";
inline constexpr const char* kOptimizerFile = "optimizer.ckpt";
inline constexpr const char* kStateFile = "state.json";

struct Evaluation {
  double metric = 0.0;  // accuracy, or mean squared error for regression
  bool regression = false;

  Json to_json() const;
};

// Dev metric of `model`, optionally through its quantized view.
Evaluation evaluate(const EncoderModel<float>& model, const Dataset& data, bool regression,
                    const std::optional<QuantSpec>& quant = {});

// Median over layers x heads of the per-head ranking loss (mean over examples) between
// teacher and student attention maps.
double median_head_ranking_loss(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                                const std::optional<QuantSpec>& student_quant, const Dataset& data, int max_examples);

struct StageResult {
  EncoderModel<float> model;
  Evaluation dev;
  long steps = 0;
  Json dev_record;  // the full dev block of the final metrics record
};

// Full-precision fine-tuning with cross-entropy (or MSE on regression tasks).
StageResult train_teacher(const ExperimentConfig& config, const TaskSplits& data, const RunOptions& options = {});

// KD-QAT: the student starts as a copy of the teacher and trains its latent weights through
// the quantized view against config.kd.
StageResult run_qat(const ExperimentConfig& config, const EncoderModel<float>& teacher, const TaskSplits& data,
                    const RunOptions& options = {});

}  // namespace kdqat
