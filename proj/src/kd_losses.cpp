// SPDX-License-Identifier: Apache-2.0
#include "kdqat/kd_losses.hpp"

#include <array>
#include <numeric>

namespace kdqat {

namespace {

constexpr std::array<std::pair<LossTerm, std::string_view>, 8> kTermNames{{
    {LossTerm::soft_label, "soft-label"},
    {LossTerm::trm_output, "trm-output"},
    {LossTerm::score, "score"},
    {LossTerm::map, "map"},
    {LossTerm::output, "output"},
    {LossTerm::mha_only, "mha-only"},
    {LossTerm::unified, "unified"},
    {LossTerm::hard_label, "hard-label"},
}};

}  // namespace

std::string_view to_string(LossTerm term) {
  for (const auto& [t, name] : kTermNames)
    if (t == term) return name;
  return "unknown";
}

LossTerm parse_loss_term(std::string_view name) {
  for (const auto& [t, n] : kTermNames)
    if (n == name) return t;
  throw ConfigError("unknown loss term '" + std::string(name) + "'");
}

std::string_view to_string(UnifiedMode mode) {
  switch (mode) {
    case UnifiedMode::off: return "off";
    case UnifiedMode::sm1: return "sm1";
    case UnifiedMode::sm2: return "sm2";
  }
  return "off";
}

UnifiedMode parse_unified_mode(std::string_view name) {
  if (name == "off") return UnifiedMode::off;
  if (name == "sm1" || name == "SM1") return UnifiedMode::sm1;
  if (name == "sm2" || name == "SM2") return UnifiedMode::sm2;
  throw ConfigError("unknown unified mode '" + std::string(name) + "'");
}

bool gamma_on_grid(double gamma) {
  const double tenths = std::round(gamma * 10.0);
  return tenths >= 1.0 && tenths <= 9.0 && std::abs(gamma - tenths / 10.0) < 1e-9;
}

std::vector<double> gamma_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 9; ++i) grid.push_back(i / 10.0);
  return grid;
}

std::vector<int> select_layers(int num_layers, int k, LayerStrategy strategy) {
  if (k < 1 || k > num_layers) {
    throw ConfigError("select_layers: need 1 <= k <= L, got k=" + std::to_string(k) + " L=" + std::to_string(num_layers));
  }
  std::vector<int> layers;
  if (strategy == LayerStrategy::all) {
    layers.resize(static_cast<std::size_t>(num_layers));
    std::iota(layers.begin(), layers.end(), 0);
    return layers;
  }
  for (int i = 0; i < k; ++i) {
    // ceil((i + 1) * L / k) - 1 in integer arithmetic
    layers.push_back(((i + 1) * num_layers + k - 1) / k - 1);
  }
  return layers;
}

bool KDLossConfig::active(LossTerm term) const {
  return std::any_of(terms.begin(), terms.end(), [&](const TermWeight& w) { return w.term == term; });
}

double KDLossConfig::weight(LossTerm term) const {
  for (const auto& w : terms)
    if (w.term == term) return w.weight;
  return 0.0;
}

std::vector<int> KDLossConfig::resolved_layers(int num_layers) const {
  if (!layers.empty()) return layers;
  std::vector<int> all(static_cast<std::size_t>(num_layers));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

void KDLossConfig::validate(int num_layers) const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("kd: tau must be positive");
  for (int l : layers) {
    if (l < 0 || l >= num_layers) {
      throw ConfigError("kd: layer " + std::to_string(l) + " outside [0, " + std::to_string(num_layers) + ")");
    }
  }
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (!(terms[i].weight >= 0.0) || !std::isfinite(terms[i].weight)) {
      throw ConfigError("kd: weight of '" + std::string(to_string(terms[i].term)) + "' must be >= 0");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (terms[j].term == terms[i].term) {
        throw ConfigError("kd: term '" + std::string(to_string(terms[i].term)) + "' listed twice");
      }
    }
  }
  if (active(LossTerm::unified)) {
    if (unified == UnifiedMode::off) throw ConfigError("kd: unified term active but mode is off");
    if (!gamma_on_grid(gamma)) throw ConfigError("kd: gamma " + std::to_string(gamma) + " is not on the 0.1..0.9 grid");
  }
}

KDLossConfig KDLossConfig::preset(std::string_view name) {
  KDLossConfig cfg;
  cfg.terms = {{LossTerm::soft_label, 1.0}, {LossTerm::trm_output, 1.0}};
  if (name == "baseline" || name == "Baseline") {
    cfg.terms.push_back({LossTerm::score, 1.0});
  } else if (name == "map" || name == "Map") {
    cfg.terms.push_back({LossTerm::map, 1.0});
  } else if (name == "output" || name == "Output") {
    cfg.terms.push_back({LossTerm::output, 1.0});
  } else if (name == "map+output" || name == "Map+Output") {
    cfg.terms.push_back({LossTerm::unified, 1.0});
    cfg.unified = UnifiedMode::sm1;
  } else {
    throw ConfigError("unknown KD preset '" + std::string(name) + "' (baseline, map, output, map+output)");
  }
  return cfg;
}

}  // namespace kdqat
