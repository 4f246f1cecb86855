// SPDX-License-Identifier: Apache-2.0
#include "kdqat/harness/analysis.hpp"

#include <algorithm>
#include <memory>
#include <sstream>

#include "kdqat/gradcheck.hpp"
#include "kdqat/quantized_view.hpp"

namespace kdqat {

std::vector<Json> diagnose(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                           const std::optional<QuantSpec>& student_quant, const Dataset& data,
                           const DiagnosticsConfig& config) {
  if (teacher.config() != student.config()) throw ConfigError("diagnose: teacher and student architectures differ");
  const auto& c = teacher.config();
  const auto count = std::min<std::size_t>(data.size(), static_cast<std::size_t>(config.examples));
  if (count == 0) throw InputError("diagnose: no examples");
  const auto sview = student_quant ? quantized_view(student, *student_quant) : student.view();
  const auto L = static_cast<std::size_t>(c.layers);
  const auto H = static_cast<std::size_t>(c.heads);
  const Index tok = config.token;

  std::vector<double> cover(L * H, 0.0), rank_loss(L * H, 0.0);
  struct LayerSums {
    double ratio_t = 0, ratio_s = 0, min_t = 0, max_t = 0, min_s = 0, max_s = 0, gen = 0, prop = 0;
  };
  std::vector<LayerSums> layers(L);

  for (std::size_t e = 0; e < count; ++e) {
    const auto& tokens = data[e].tokens;
    if (tok >= static_cast<Index>(tokens.size())) throw IndexError("diagnose: tracked token outside the sequence");
    const auto t = forward(teacher.view(), tokens, true);
    const auto s = forward(sview, tokens, true);
    const auto dist = sa_distance(*t.trace, *s.trace, tok);
    for (std::size_t l = 0; l < L; ++l) {
      const auto& tl = t.trace->layers[l];
      const auto& sl = s.trace->layers[l];
      auto& acc = layers[l];
      for (std::size_t h = 0; h < H; ++h) {
        const auto& tm = tl.maps[h].value();
        const auto& sm = sl.maps[h].value();
        double cov = 0.0;
        for (Index r = 0; r < tm.rows(); ++r) {
          cov += cover_length_ratio(tm.row(r), sm.row(r), config.top_k);
          acc.ratio_t += ranking_ratio(tm.row(r), tok) / static_cast<double>(tm.rows() * c.heads);
          acc.ratio_s += ranking_ratio(sm.row(r), tok) / static_cast<double>(sm.rows() * c.heads);
        }
        cover[l * H + h] += cov / static_cast<double>(tm.rows());
        rank_loss[l * H + h] += ranking_loss(tm, sm);
      }
      const auto rt = token_dynamic_range(tl.attention_output.value());
      const auto rs = token_dynamic_range(sl.attention_output.value());
      acc.min_t += rt(tok, 0);
      acc.max_t += rt(tok, 1);
      acc.min_s += rs(tok, 0);
      acc.max_s += rs(tok, 1);
      acc.gen += dist[l].generation;
      acc.prop += dist[l].propagation;
    }
  }

  const double n = static_cast<double>(count);
  std::vector<Json> records;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      records.push_back({{"record", "head"},
                         {"layer", l},
                         {"head", h},
                         {"cover_ratio", cover[l * H + h] / n},
                         {"ranking_loss", rank_loss[l * H + h] / n}});
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    const auto& a = layers[l];
    records.push_back({{"record", "layer"},
                       {"layer", l},
                       {"token", tok},
                       {"ranking_ratio_teacher", a.ratio_t / n},
                       {"ranking_ratio_student", a.ratio_s / n},
                       {"range_teacher", {a.min_t / n, a.max_t / n}},
                       {"range_student", {a.min_s / n, a.max_s / n}},
                       {"sa_generation", a.gen / n},
                       {"sa_propagation", a.prop / n}});
  }
  std::vector<double> sorted(rank_loss);
  for (auto& v : sorted) v /= n;
  std::sort(sorted.begin(), sorted.end());
  double median = 0.0;
  if (!sorted.empty()) {
    const std::size_t mid = sorted.size() / 2;
    median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  }
  double cover_mean = 0.0;
  for (double v : cover) cover_mean += v / n;
  records.push_back({{"record", "summary"},
                     {"examples", count},
                     {"ranking_loss_median", median},
                     {"cover_ratio_mean", cover.empty() ? 0.0 : cover_mean / static_cast<double>(cover.size())}});
  return records;
}

GradientFn kd_loss_gradient(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                            const ExperimentConfig& config, const Dataset& data) {
  if (teacher.config() != student.config()) throw ConfigError("hessian: teacher and student architectures differ");
  if (data.empty()) throw InputError("hessian: no examples");
  auto t = std::make_shared<EncoderModel<double>>(teacher.cast<double>());
  t->set_requires_grad(false);
  auto s = std::make_shared<EncoderModel<double>>(student.cast<double>());
  s->set_requires_grad(true);
  const std::optional<QuantSpec> quant =
      config.quant.enabled() ? std::optional<QuantSpec>(config.quant) : std::nullopt;
  const KDLossConfig kd = config.kd;
  return [t, s, quant, kd, data](const Eigen::VectorXd& theta) {
    set_flat_parameters(*s, theta);
    s->zero_grad();
    const auto view = quant ? quantized_view(*s, *quant) : s->view();
    const double inv = 1.0 / static_cast<double>(data.size());
    for (const auto& ex : data) {
      const auto tf = forward(t->view(), ex.tokens, true);
      const auto sf = forward(view, ex.tokens, true);
      backward(scale(total_loss(kd, tf, sf, HardTarget{ex.label, ex.target}).total, inv));
    }
    return flat_gradient(*s);
  };
}

std::vector<Json> hessian_report(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                                 const ExperimentConfig& config, const Dataset& data) {
  const auto& d = config.diagnostics;
  const Dataset slice(data.begin(), data.begin() + std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(data.size()),
                                                                            d.hessian_examples));
  const auto gradient = kd_loss_gradient(teacher, student, config, slice);
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < d.hessian_seeds; ++i) seeds.push_back(config.seed * 1000 + static_cast<std::uint64_t>(i));
  const auto estimates =
      hessian_spectrum(gradient, flat_parameters(student), seeds, PowerIterationOptions{d.power_steps, d.power_tol});
  std::vector<Json> records;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    records.push_back({{"record", "hessian"},
                       {"seed", seeds[i]},
                       {"eigenvalue", estimates[i].eigenvalue},
                       {"iterations", estimates[i].iterations},
                       {"converged", estimates[i].converged}});
  }
  return records;
}

std::vector<Json> gradcheck_report(const ExperimentConfig& config, int seeds, int coords) {
  config.validate();
  ExperimentConfig small = config;
  small.task.train_size = 1;
  small.task.dev_size = std::max(1, seeds);
  const auto data = generate_task(small.task).dev;
  std::vector<std::string> targets{"encoder"};
  for (const char* p : {"baseline", "map", "output", "map+output"}) targets.push_back(std::string("kd:") + p);

  std::vector<Json> records;
  for (int k = 0; k < seeds; ++k) {
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(k);
    const auto& ex = data[static_cast<std::size_t>(k) % data.size()];
    EncoderModel<float> student(config.model, seed);
    const EncoderModel<float> teacher(config.model, seed + 7919);
    auto twin = student.cast<double>();
    auto teacher_twin = teacher.cast<double>();
    teacher_twin.set_requires_grad(false);
    std::mt19937_64 rng(seed);

    for (const auto& target : targets) {
      KDLossConfig kd;
      if (target != "encoder") {
        kd = KDLossConfig::preset(target.substr(3));
        kd.output_kind = config.kd.output_kind;
      }
      auto loss = [&](const auto& s, const auto& t) {
        if (target == "encoder") {
          const auto logits = forward(s, ex.tokens, false).logits;
          if (config.task.regression()) {
            using S = typename std::decay_t<decltype(logits)>::Scalar;
            RowMatrix<S> y(1, 1);
            y(0, 0) = static_cast<S>(ex.target);
            return mse(logits, decltype(logits)::constant(logits.shape(), y));
          }
          const int label = ex.label;
          return cross_entropy(logits, std::span<const int>(&label, 1));
        }
        return total_loss(kd, forward(t, ex.tokens, true), forward(s, ex.tokens, true), HardTarget{ex.label, ex.target})
            .total;
      };
      student.zero_grad();
      backward(loss(student, teacher));

      double key_bias = 0.0;
      Index probed = 0;
      std::vector<GradientPair> pairs;
      const auto fp = student.named_parameters();
      auto wp = twin.named_parameters();
      for (std::size_t i = 0; i < fp.size(); ++i) {
        const auto& [name, p] = fp[i];
        const RowMatrix<float> analytic = p.has_grad() ? p.grad() : RowMatrix<float>::Zero(p.rows(), p.cols());
        std::vector<Index> picks;
        std::uniform_int_distribution<Index> pick(0, p.numel() - 1);
        for (int c = 0; c < std::min<Index>(coords, p.numel()); ++c) picks.push_back(pick(rng));
        probed += static_cast<Index>(picks.size());
        const std::function<double()> twin_loss = [&] { return loss(twin, teacher_twin).item(); };
        const auto got = gradient_pairs(analytic, wp[i].second, twin_loss, 1e-5, picks);
        if (name.ends_with("attention.key.bias")) {
          // Softmax rows are shift invariant, so the exact gradient is zero: compare absolutely.
          for (const auto& g : got) key_bias = std::max(key_bias, std::abs(g.analytic - g.numeric));
          continue;
        }
        pairs.insert(pairs.end(), got.begin(), got.end());
      }
      // Coordinates whose gradient is tiny next to the largest one carry f32 cancellation
      // error in relative terms; they are held to the looser bound only.
      double largest = 0.0;
      for (const auto& g : pairs) largest = std::max(largest, std::abs(g.numeric));
      double worst = 0.0, worst_conditioned = 0.0;
      for (const auto& g : pairs) {
        worst = std::max(worst, g.relative_error());
        if (std::abs(g.numeric) >= 1e-3 * largest) worst_conditioned = std::max(worst_conditioned, g.relative_error());
      }
      records.push_back({{"record", "gradcheck"},
                         {"target", target},
                         {"seed", seed},
                         {"max_rel_error", worst},
                         {"max_rel_error_conditioned", worst_conditioned},
                         {"key_bias_max_abs_error", key_bias},
                         {"coordinates", probed}});
    }
  }
  return records;
}

namespace {

std::string tag(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

Json sweep_record(const ExperimentConfig& cfg, const StageResult& result, const std::string& run) {
  Json r;
  r["record"] = "sweep";
  r["seed"] = cfg.seed;
  r["dev"] = result.dev_record;
  r["run"] = run;
  return r;
}

}  // namespace

std::vector<Json> sweep_gamma(const ExperimentConfig& config, const EncoderModel<float>& teacher,
                              const TaskSplits& data, const std::filesystem::path& out_dir) {
  std::filesystem::remove(out_dir / kSweepFile);
  const MetricsWriter writer(out_dir / kSweepFile);
  std::vector<Json> records;
  for (const auto mode : {UnifiedMode::sm1, UnifiedMode::sm2}) {
    for (const double gamma : gamma_grid()) {
      ExperimentConfig cfg = config;
      cfg.apply_preset("map+output");
      cfg.kd.unified = mode;
      cfg.kd.gamma = gamma;
      const std::string run = std::string(to_string(mode)) + "-gamma" + tag(gamma);
      const auto result = run_qat(cfg, teacher, data, {out_dir / run});
      Json r = sweep_record(cfg, result, run);
      r["sweep"] = "gamma";
      r["mode"] = to_string(mode);
      r["gamma"] = gamma;
      writer.append(r);
      records.push_back(std::move(r));
    }
  }
  return records;
}

std::vector<Json> sweep_tau(const ExperimentConfig& config, const EncoderModel<float>& teacher,
                            const TaskSplits& data, const std::filesystem::path& out_dir) {
  std::filesystem::remove(out_dir / kSweepFile);
  const MetricsWriter writer(out_dir / kSweepFile);
  std::vector<Json> records;
  for (const double tau : {1.0, 5.0, 10.0, 20.0, 0.0}) {
    ExperimentConfig cfg = config;
    // tau = 0 stands for the MSE endpoint: score matching on the pre-softmax logits.
    cfg.apply_preset(tau > 0.0 ? "map" : "baseline");
    if (tau > 0.0) cfg.kd.tau = tau;
    const std::string run = tau > 0.0 ? "tau" + tag(tau) : "mse";
    const auto result = run_qat(cfg, teacher, data, {out_dir / run});
    Json r = sweep_record(cfg, result, run);
    r["sweep"] = "tau";
    if (tau > 0.0) {
      r["tau"] = tau;
    } else {
      r["tau"] = "mse";
    }
    writer.append(r);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace kdqat
