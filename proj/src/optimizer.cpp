// SPDX-License-Identifier: Apache-2.0
#include "kdqat/optimizer.hpp"

#include <cmath>

namespace kdqat {

void OptimizerConfig::validate() const {
  if (epochs < 0) throw ConfigError("optimizer: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("optimizer: batch_size must be >= 1");
  if (examples < 0) throw ConfigError("optimizer: examples must be >= 0");
  if (!(learning_rate >= 0.0)) throw ConfigError("optimizer: learning_rate must be >= 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("optimizer: warmup_fraction must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("optimizer: clip_norm must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer: betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
}

double learning_rate_at(long step, long total, double peak, double warmup_fraction) {
  if (total <= 0) return 0.0;
  const long warmup = static_cast<long>(std::ceil(warmup_fraction * static_cast<double>(total)));
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double remaining = static_cast<double>(total - step) / static_cast<double>(total - warmup);
  return std::max(0.0, peak * remaining);
}

Adam::Adam(std::vector<std::pair<std::string, Tensor<float>>> params, OptimizerConfig config, long total_steps)
    : params_(std::move(params)), config_(config), total_(total_steps) {
  config_.validate();
  for (const auto& [name, t] : params_) {
    m_.push_back(RowMatrix<float>::Zero(t.rows(), t.cols()));
    v_.push_back(RowMatrix<float>::Zero(t.rows(), t.cols()));
    decay_.push_back(!(name.ends_with(".bias") || name.ends_with(".gain")));
  }
}

double Adam::current_learning_rate() const {
  return learning_rate_at(step_, total_, config_.learning_rate, config_.warmup_fraction);
}

double Adam::step() {
  double norm2 = 0.0;
  for (const auto& [name, t] : params_)
    if (t.has_grad()) norm2 += t.grad().cast<double>().squaredNorm();
  const double norm = std::sqrt(norm2);
  const double clip = config_.clip_norm > 0.0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  const auto lr = static_cast<float>(current_learning_rate());
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto eps = static_cast<float>(config_.eps);
  const auto wd = static_cast<float>(config_.weight_decay);

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].second;
    if (!t.has_grad()) continue;
    const RowMatrix<float> g = t.grad() * static_cast<float>(clip);
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g.cwiseProduct(g);
    RowMatrix<float> update = m_[i].array() / (v_[i].array().sqrt() + eps);
    auto& w = t.mutable_value();
    if (decay_[i] && wd > 0.0f) update += wd * w;
    w -= lr * update;
    t.zero_grad();
  }
  ++step_;
  return norm;
}

Checkpoint Adam::state() const {
  Checkpoint ckpt;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, t] = params_[i];
    ckpt.tensors.push_back(named_matrix("adam.m." + name, m_[i], t.shape()));
    ckpt.tensors.push_back(named_matrix("adam.v." + name, v_[i], t.shape()));
  }
  return ckpt;
}

void Adam::load_state(const Checkpoint& state, long steps_taken) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, t] = params_[i];
    const auto* m = state.find("adam.m." + name);
    const auto* v = state.find("adam.v." + name);
    if (!m || !v || m->shape != t.shape() || v->shape != t.shape()) {
      throw ConfigError("optimizer state is missing or misshapen for '" + name + "'");
    }
    m_[i] = matrix_of(*m);
    v_[i] = matrix_of(*v);
  }
  step_ = steps_taken;
}

}  // namespace kdqat
