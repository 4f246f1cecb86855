// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kdqat/checkpoint.hpp"
#include "kdqat/tensor.hpp"

namespace kdqat {

struct OptimizerConfig {
  int epochs = 3;
  int batch_size = 16;
  int examples = 0;  // train on the first N training examples only; 0 uses all
  double learning_rate = 1e-3;  // peak, reached at the end of warmup
  double warmup_fraction = 0.1;
  double weight_decay = 0.0;  // decoupled; never applied to biases or LayerNorm gains
  double clip_norm = 1.0;     // global gradient norm; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// Linear warmup to the peak over the first ceil(warmup_fraction * total) steps, then
// linear decay reaching zero after `total` steps. `step` counts from 0.
double learning_rate_at(long step, long total, double peak, double warmup_fraction);

// Adam without bias correction (the BERT fine-tuning variant):
//   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2,  w -= lr * (m / (sqrt(v) + eps) + wd * w).
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<float>>> params, OptimizerConfig config, long total_steps);

  // Clips, updates every parameter that received a gradient, clears gradients and
  // returns the pre-clip global gradient norm.
  double step();

  long steps_taken() const { return step_; }
  double current_learning_rate() const;

  // Moments as named tensors "adam.m.<param>" / "adam.v.<param>".
  Checkpoint state() const;
  void load_state(const Checkpoint& state, long steps_taken);

 private:
  std::vector<std::pair<std::string, Tensor<float>>> params_;
  std::vector<RowMatrix<float>> m_, v_;
  std::vector<bool> decay_;
  OptimizerConfig config_;
  long total_;
  long step_ = 0;
};

}  // namespace kdqat
