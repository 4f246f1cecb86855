// SPDX-License-Identifier: Apache-2.0
// kdqat: command-line front end for teacher training, KD-QAT, diagnostics and sweeps.
#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "kdqat/checkpoint.hpp"
#include "kdqat/harness/analysis.hpp"
#include "kdqat/harness/config.hpp"
#include "kdqat/harness/training.hpp"

using namespace kdqat;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string preset;
  std::string teacher;
  std::string student;
  bool resume = false;
  int gradcheck_seeds = 3;
  int gradcheck_coords = 8;
};

ExperimentConfig load(const Common& opt) {
  ExperimentConfig cfg = opt.config.empty() ? ExperimentConfig{} : load_config(opt.config);
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.preset.empty()) cfg.apply_preset(opt.preset);
  cfg.resolve();
  cfg.validate();
  return cfg;
}

EncoderModel<float> load_model(const ExperimentConfig& cfg, const std::string& path) {
  auto model = EncoderModel<float>(cfg.model, cfg.seed);
  load_into(model, load_checkpoint(path));
  return model;
}

// A teacher from --teacher, or one trained on the spot under <out>/teacher.
EncoderModel<float> obtain_teacher(const ExperimentConfig& cfg, const Common& opt, const TaskSplits& data,
                                   const std::filesystem::path& out) {
  if (!opt.teacher.empty()) return load_model(cfg, opt.teacher);
  std::cerr << "no --teacher given; training one under " << (out / "teacher").string() << "\n";
  return train_teacher(cfg, data, {out / "teacher"}).model;
}

void emit(const std::filesystem::path& file, const std::vector<Json>& records) {
  std::filesystem::remove(file);
  const MetricsWriter writer(file);
  for (const auto& r : records) writer.append(r);
  std::cout << "wrote " << records.size() << " records to " << file.string() << "\n";
}

void write_echo(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  write_text(out / kConfigFile, to_ini(cfg));
}

int dispatch(const std::string& command, const Common& opt) {
  const auto cfg = load(opt);
  const std::filesystem::path out = opt.out_dir.empty() ? std::filesystem::path("runs") / command : std::filesystem::path(opt.out_dir);
  const auto data = generate_task(cfg.task);
  const std::optional<QuantSpec> quant = cfg.quant.enabled() ? std::optional<QuantSpec>(cfg.quant) : std::nullopt;

  if (command == "train-teacher") {
    const auto r = train_teacher(cfg, data, {out, opt.resume});
    std::cout << "teacher dev " << r.dev.to_json().dump() << " -> " << (out / kModelFile).string() << "\n";
  } else if (command == "qat") {
    const auto teacher = obtain_teacher(cfg, opt, data, out);
    const auto r = run_qat(cfg, teacher, data, {out, opt.resume});
    std::cout << "student dev " << r.dev.to_json().dump() << " -> " << (out / kModelFile).string() << "\n";
  } else if (command == "diagnose") {
    if (opt.teacher.empty()) throw ConfigError("diagnose needs --teacher");
    const auto teacher = load_model(cfg, opt.teacher);
    const auto student = load_model(cfg, opt.student.empty() ? opt.teacher : opt.student);
    write_echo(cfg, out);
    emit(out / "diagnostics.jsonl", diagnose(teacher, student, quant, data.dev, cfg.diagnostics));
  } else if (command == "hessian") {
    if (opt.teacher.empty()) throw ConfigError("hessian needs --teacher");
    const auto teacher = load_model(cfg, opt.teacher);
    const auto student = load_model(cfg, opt.student.empty() ? opt.teacher : opt.student);
    write_echo(cfg, out);
    emit(out / "hessian.jsonl", hessian_report(teacher, student, cfg, data.dev));
  } else if (command == "gradcheck") {
    write_echo(cfg, out);
    const auto records = gradcheck_report(cfg, opt.gradcheck_seeds, opt.gradcheck_coords);
    emit(out / "gradcheck.jsonl", records);
    double worst = 0.0;
    for (const auto& r : records) worst = std::max(worst, r.at("max_rel_error").get<double>());
    std::cout << "max relative error " << worst << "\n";
  } else if (command == "sweep-gamma" || command == "sweep-tau") {
    const auto teacher = obtain_teacher(cfg, opt, data, out);
    write_echo(cfg, out);
    const auto records =
        command == "sweep-gamma" ? sweep_gamma(cfg, teacher, data, out) : sweep_tau(cfg, teacher, data, out);
    for (const auto& r : records) std::cout << r.dump() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-distillation QAT laboratory for small ternary encoders"};
  app.require_subcommand(1);
  Common opt;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"train-teacher", "Fine-tune a full-precision teacher"},
      {"qat", "Distil a quantized student from a teacher"},
      {"diagnose", "Attention diagnostics of a student against its teacher"},
      {"gradcheck", "Check tape gradients against finite differences"},
      {"hessian", "Top Hessian eigenvalue of the KD loss per start seed"},
      {"sweep-gamma", "QAT over the gamma grid for both unified-loss modes"},
      {"sweep-tau", "QAT over map-loss temperatures plus the MSE endpoint"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "Experiment config (INI)")->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "Override run.seed");
    sub->add_option("--out-dir", opt.out_dir, "Run directory")->envname("KDQAT_OUT_DIR");
    sub->add_option("--preset", opt.preset, "KD preset")
        ->check(CLI::IsMember({"baseline", "map", "output", "map+output"}));
    if (name != "train-teacher" && name != "gradcheck") {
      sub->add_option("--teacher", opt.teacher, "Teacher checkpoint")->check(CLI::ExistingFile);
    }
    if (name == "diagnose" || name == "hessian") {
      sub->add_option("--student", opt.student, "Student checkpoint")->check(CLI::ExistingFile);
    }
    if (name == "train-teacher" || name == "qat") sub->add_flag("--resume", opt.resume, "Continue from state.json");
    if (name == "gradcheck") {
      sub->add_option("--seeds", opt.gradcheck_seeds, "Random models")->check(CLI::PositiveNumber);
      sub->add_option("--coords", opt.gradcheck_coords, "Coordinates probed per tensor")->check(CLI::PositiveNumber);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    return dispatch(app.get_subcommands().front()->get_name(), opt);
  } catch (const TrainingError& e) {
    std::cerr << "training error (step " << e.step() << "): " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return 1;
}
