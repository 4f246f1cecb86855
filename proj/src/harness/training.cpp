// SPDX-License-Identifier: Apache-2.0
#include "kdqat/harness/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "kdqat/checkpoint.hpp"
#include "kdqat/diagnostics.hpp"
#include "kdqat/kd_losses.hpp"
#include "kdqat/optimizer.hpp"
#include "kdqat/quantized_view.hpp"

namespace kdqat {

Json Evaluation::to_json() const {
  Json j;
  j[regression ? "mse" : "accuracy"] = metric;
  return j;
}

Evaluation evaluate(const EncoderModel<float>& model, const Dataset& data, bool regression,
                    const std::optional<QuantSpec>& quant) {
  const auto view = quant ? quantized_view(model, *quant) : model.view();
  Evaluation ev;
  ev.regression = regression;
  if (data.empty()) return ev;
  double total = 0.0;
  for (const auto& ex : data) {
    const auto logits = forward(view, ex.tokens, false).logits.value();
    if (regression) {
      const double err = static_cast<double>(logits(0, 0)) - ex.target;
      total += err * err;
    } else {
      Index best = 0;
      logits.row(0).maxCoeff(&best);
      total += best == ex.label ? 1.0 : 0.0;
    }
  }
  ev.metric = total / static_cast<double>(data.size());
  return ev;
}

double median_head_ranking_loss(const EncoderModel<float>& teacher, const EncoderModel<float>& student,
                                const std::optional<QuantSpec>& student_quant, const Dataset& data, int max_examples) {
  const auto sview = student_quant ? quantized_view(student, *student_quant) : student.view();
  const auto& c = teacher.config();
  std::vector<double> per_head(static_cast<std::size_t>(c.layers * c.heads), 0.0);
  const auto count = std::min<std::size_t>(data.size(), static_cast<std::size_t>(max_examples));
  if (count == 0 || per_head.empty()) return 0.0;
  for (std::size_t e = 0; e < count; ++e) {
    const auto t = forward(teacher.view(), data[e].tokens, true);
    const auto s = forward(sview, data[e].tokens, true);
    for (int l = 0; l < c.layers; ++l) {
      for (int h = 0; h < c.heads; ++h) {
        const auto& tm = t.trace->layers[static_cast<std::size_t>(l)].maps[static_cast<std::size_t>(h)];
        const auto& sm = s.trace->layers[static_cast<std::size_t>(l)].maps[static_cast<std::size_t>(h)];
        per_head[static_cast<std::size_t>(l * c.heads + h)] += ranking_loss(tm.value(), sm.value());
      }
    }
  }
  for (auto& v : per_head) v /= static_cast<double>(count);
  std::sort(per_head.begin(), per_head.end());
  const std::size_t mid = per_head.size() / 2;
  return per_head.size() % 2 ? per_head[mid] : 0.5 * (per_head[mid - 1] + per_head[mid]);
}

namespace {

struct Stage {
  std::string name;
  const OptimizerConfig& optimizer;
  std::uint64_t shuffle_seed;
  // Effective parameters for one batch; rebuilt after every update.
  std::function<EncoderView<float>(const EncoderModel<float>&)> view;
  std::function<LossBreakdown<float>(const EncoderView<float>&, const Example&)> loss;
  std::function<Json(const EncoderModel<float>&)> evaluate;
};

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

StageResult fit(EncoderModel<float> model, const ExperimentConfig& config, const Dataset& all, const Stage& stage,
                const RunOptions& options) {
  const auto& opt = stage.optimizer;
  const std::size_t used = opt.examples > 0 ? std::min(all.size(), static_cast<std::size_t>(opt.examples)) : all.size();
  const std::span<const Example> train(all.data(), used);
  const long batches = (static_cast<long>(train.size()) + opt.batch_size - 1) / opt.batch_size;
  const long total_steps = batches * opt.epochs;
  Adam adam(model.named_parameters(), opt, total_steps);
  std::mt19937_64 rng(stage.shuffle_seed);
  int start_epoch = 0;

  const bool persist = !options.out_dir.empty();
  const auto dir = options.out_dir;
  std::optional<MetricsWriter> writer;
  if (persist) writer.emplace(dir / kMetricsFile);

  if (persist && options.resume && std::filesystem::exists(dir / kStateFile)) {
    const auto state = Json::parse(read_text(dir / kStateFile));
    if (state.at("stage") != stage.name) throw ConfigError("cannot resume: run directory holds a different stage");
    load_into(model, load_checkpoint(dir / kModelFile));
    adam.load_state(load_checkpoint(dir / kOptimizerFile), state.at("step").get<long>());
    std::istringstream in(state.at("rng").get<std::string>());
    in >> rng;
    start_epoch = state.at("epoch").get<int>();
  } else if (persist) {
    std::filesystem::create_directories(dir);
    for (const char* f : {kMetricsFile, kStateFile, kModelFile, kOptimizerFile}) std::filesystem::remove(dir / f);
    write_text(dir / kConfigFile, to_ini(config));
  }

  std::vector<std::size_t> order(train.size());
  for (int epoch = start_epoch; epoch < opt.epochs; ++epoch) {
    if (options.stop_after_epoch >= 0 && epoch >= options.stop_after_epoch) {
      return {std::move(model), {}, adam.steps_taken(), {}};
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::vector<std::pair<LossTerm, double>> term_sums;
    double grad_norm = 0.0, lr = 0.0;
    for (long b = 0; b < batches; ++b) {
      const auto first = static_cast<std::size_t>(b * opt.batch_size);
      const auto last = std::min(order.size(), first + static_cast<std::size_t>(opt.batch_size));
      const float inv = 1.0f / static_cast<float>(last - first);
      const auto view = stage.view(model);
      const auto diverged = [&] {
        return TrainingError(stage.name + ": non-finite loss at step " + std::to_string(adam.steps_taken()),
                             adam.steps_taken());
      };
      for (std::size_t i = first; i < last; ++i) {
        LossBreakdown<float> br;
        try {
          br = stage.loss(view, train[order[i]]);
        } catch (const NumericError&) {
          throw diverged();  // non-finite activations reached a softmax
        }
        const double value = br.total_value();
        if (!std::isfinite(value)) throw diverged();
        backward(scale(br.total, inv));
        loss_sum += value;
        if (term_sums.empty()) {
          for (const auto& c : br.components) term_sums.emplace_back(c.term, 0.0);
        }
        for (std::size_t k = 0; k < br.components.size(); ++k) {
          term_sums[k].second += static_cast<double>(br.components[k].value.item());
        }
      }
      lr = adam.current_learning_rate();
      grad_norm = adam.step();
    }

    const double n = static_cast<double>(std::max<std::size_t>(train.size(), 1));
    Json record;
    record["record"] = "epoch";
    record["stage"] = stage.name;
    record["seed"] = config.seed;
    record["epoch"] = epoch + 1;
    record["step"] = adam.steps_taken();
    record["learning_rate"] = lr;
    record["grad_norm"] = grad_norm;
    record["train_loss"] = loss_sum / n;
    Json terms = Json::object();
    for (const auto& [term, sum] : term_sums) terms[std::string(to_string(term))] = sum / n;
    record["loss_terms"] = terms;
    record["dev"] = stage.evaluate(model);
    if (writer) writer->append(record);

    if (persist) {
      save_checkpoint(dir / kModelFile, to_checkpoint(model));
      save_checkpoint(dir / kOptimizerFile, adam.state());
      Json state{{"stage", stage.name}, {"epoch", epoch + 1}, {"step", adam.steps_taken()}, {"rng", rng_state(rng)}};
      write_text(dir / kStateFile, state.dump(1) + "\n");
    }
  }

  StageResult result{std::move(model), {}, adam.steps_taken(), {}};
  const Json dev = stage.evaluate(result.model);
  const bool regression = config.task.regression();
  result.dev = {dev.at(regression ? "mse" : "accuracy").get<double>(), regression};
  result.dev_record = dev;
  if (writer) {
    Json record;
    record["record"] = "final";
    record["stage"] = stage.name;
    record["seed"] = config.seed;
    record["step"] = result.steps;
    record["dev"] = dev;
    writer->append(record);
  }
  if (persist && opt.epochs == 0) save_checkpoint(dir / kModelFile, to_checkpoint(result.model));
  return result;
}

}  // namespace

StageResult train_teacher(const ExperimentConfig& config, const TaskSplits& data, const RunOptions& options) {
  config.validate();
  const bool regression = config.task.regression();
  Stage stage{
      "teacher",
      config.teacher,
      config.seed * 2 + 1,
      [](const EncoderModel<float>& m) { return m.view(); },
      [regression](const EncoderView<float>& view, const Example& ex) {
        const auto logits = forward(view, ex.tokens, false).logits;
        Tensor<float> value;
        if (regression) {
          RowMatrix<float> y(1, 1);
          y(0, 0) = static_cast<float>(ex.target);
          value = mse(logits, Tensor<float>::constant(logits.shape(), y));
        } else {
          const int label = ex.label;
          value = cross_entropy(logits, std::span<const int>(&label, 1));
        }
        LossBreakdown<float> br;
        br.components.push_back({LossTerm::hard_label, 1.0, value});
        br.total = value;
        return br;
      },
      [&](const EncoderModel<float>& m) { return evaluate(m, data.dev, regression).to_json(); },
  };
  return fit(EncoderModel<float>(config.model, config.seed), config, data.train, stage, options);
}

StageResult run_qat(const ExperimentConfig& config, const EncoderModel<float>& teacher, const TaskSplits& data,
                    const RunOptions& options) {
  config.validate();
  if (teacher.config() != config.model) {
    throw ConfigError("teacher architecture does not match the configured student model");
  }
  const bool regression = config.task.regression();
  auto frozen = teacher.clone();
  frozen.set_requires_grad(false);
  const std::optional<QuantSpec> quant =
      config.quant.enabled() ? std::optional<QuantSpec>(config.quant) : std::nullopt;
  const bool capture = std::any_of(config.kd.terms.begin(), config.kd.terms.end(), [](const TermWeight& w) {
    return w.term != LossTerm::soft_label && w.term != LossTerm::hard_label;
  });
  const int probe = config.diagnostics.examples;

  Stage stage{
      "qat",
      config.qat,
      config.seed * 2 + 2,
      [&](const EncoderModel<float>& m) { return quant ? quantized_view(m, *quant) : m.view(); },
      [&](const EncoderView<float>& view, const Example& ex) {
        const auto t = forward(frozen.view(), ex.tokens, capture);
        const auto s = forward(view, ex.tokens, capture);
        return total_loss(config.kd, t, s, HardTarget{ex.label, ex.target});
      },
      [&](const EncoderModel<float>& m) {
        Json dev = evaluate(m, data.dev, regression, quant).to_json();
        dev["ranking_loss_median"] = median_head_ranking_loss(frozen, m, quant, data.dev, probe);
        return dev;
      },
  };
  return fit(teacher.clone(), config, data.train, stage, options);
}

}  // namespace kdqat
