// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>

#include "kdqat/checkpoint.hpp"
#include "kdqat/harness/training.hpp"

using namespace kdqat;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.task.kind = TaskKind::key_lookup;
  c.task.vocab = 10;
  c.task.length = 6;
  c.task.train_size = 40;
  c.task.dev_size = 12;
  c.model.layers = 2;
  c.model.hidden = 8;
  c.model.heads = 2;
  c.model.ffn = 16;
  c.model.init_std = 0.2;
  c.teacher.epochs = 3;
  c.teacher.batch_size = 8;
  c.qat.epochs = 2;
  c.qat.batch_size = 8;
  c.diagnostics.examples = 4;
  c.resolve();
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "kdqat-test-training" / name;
  fs::remove_all(dir);
  return dir;
}

std::vector<char> bytes_of(const fs::path& p) {
  const auto text = read_text(p);
  return {text.begin(), text.end()};
}

}  // namespace

TEST_CASE("identical seeds reproduce checkpoints and metrics bitwise") {
  const auto c = tiny();
  const auto data = generate_task(c.task);
  const auto a = fresh_dir("det-a"), b = fresh_dir("det-b");
  train_teacher(c, data, {a});
  train_teacher(c, data, {b});
  CHECK(bytes_of(a / kModelFile) == bytes_of(b / kModelFile));
  CHECK(bytes_of(a / kOptimizerFile) == bytes_of(b / kOptimizerFile));
  CHECK(read_text(a / kMetricsFile) == read_text(b / kMetricsFile));

  auto other = c;
  other.seed = 2;
  const auto d = fresh_dir("det-c");
  train_teacher(other, data, {d});
  CHECK(bytes_of(a / kModelFile) != bytes_of(d / kModelFile));
}

TEST_CASE("run directory contents") {
  const auto c = tiny();
  const auto data = generate_task(c.task);
  const auto dir = fresh_dir("layout");
  const auto result = train_teacher(c, data, {dir});
  CHECK(parse_config(read_text(dir / kConfigFile)) == c);

  const auto records = read_records(dir / kMetricsFile);
  REQUIRE(records.size() == 4);
  for (int e = 0; e < 3; ++e) {
    const auto& r = records[static_cast<std::size_t>(e)];
    CHECK(r["record"] == "epoch");
    CHECK(r["stage"] == "teacher");
    CHECK(r["epoch"] == e + 1);
    CHECK(r["step"] == 5 * (e + 1));
    CHECK(r["seed"] == 1);
    CHECK(r["loss_terms"].contains("hard-label"));
    CHECK(r["dev"].contains("accuracy"));
    CHECK(r["train_loss"].get<double>() > 0.0);
  }
  CHECK(records[3]["record"] == "final");
  CHECK(records[3]["dev"]["accuracy"].get<double>() == doctest::Approx(result.dev.metric));
  CHECK(result.steps == 15);

  auto reloaded = EncoderModel<float>(c.model, 99);
  load_into(reloaded, load_checkpoint(dir / kModelFile));
  CHECK(to_checkpoint(reloaded) == to_checkpoint(result.model));
}

TEST_CASE("zero epochs leaves the initialization untouched") {
  auto c = tiny();
  c.teacher.epochs = 0;
  const auto data = generate_task(c.task);
  const auto dir = fresh_dir("zero");
  const auto result = train_teacher(c, data, {dir});
  CHECK(to_checkpoint(result.model) == to_checkpoint(EncoderModel<float>(c.model, c.seed)));
  CHECK(load_checkpoint(dir / kModelFile) == to_checkpoint(result.model));
  CHECK(result.steps == 0);
}

TEST_CASE("an interrupted run resumes identically") {
  const auto c = tiny();
  const auto data = generate_task(c.task);
  const auto whole = fresh_dir("whole"), split = fresh_dir("split");
  train_teacher(c, data, {whole});

  train_teacher(c, data, {split, false, 1});
  CHECK(read_records(split / kMetricsFile).size() == 1);
  const auto resumed = train_teacher(c, data, {split, true});
  CHECK(resumed.steps == 15);
  CHECK(bytes_of(whole / kModelFile) == bytes_of(split / kModelFile));
  CHECK(bytes_of(whole / kOptimizerFile) == bytes_of(split / kOptimizerFile));
  CHECK(read_text(whole / kMetricsFile) == read_text(split / kMetricsFile));

  // QAT resumes the same way.
  const auto teacher = train_teacher(c, data).model;
  const auto qa = fresh_dir("qat-whole"), qb = fresh_dir("qat-split");
  run_qat(c, teacher, data, {qa});
  run_qat(c, teacher, data, {qb, false, 1});
  run_qat(c, teacher, data, {qb, true});
  CHECK(bytes_of(qa / kModelFile) == bytes_of(qb / kModelFile));
  CHECK(read_text(qa / kMetricsFile) == read_text(qb / kMetricsFile));

  // A stage cannot resume from another stage's directory.
  CHECK_THROWS_AS(run_qat(c, teacher, data, {split, true}), ConfigError);
}

TEST_CASE("resume on an empty directory starts fresh") {
  const auto c = tiny();
  const auto data = generate_task(c.task);
  const auto a = fresh_dir("resume-fresh-a"), b = fresh_dir("resume-fresh-b");
  train_teacher(c, data, {a});
  train_teacher(c, data, {b, true});
  CHECK(bytes_of(a / kModelFile) == bytes_of(b / kModelFile));
}

TEST_CASE("self-distillation without quantization has zero loss and gradient") {
  auto c = tiny();
  c.quant = QuantSpec::off();
  // Adam normalizes away the size of float round-off gradients, so hold the weights fixed.
  c.qat.learning_rate = 0.0;
  const auto data = generate_task(c.task);
  const auto teacher = train_teacher(c, data).model;
  for (const char* preset : {"baseline", "map", "output", "map+output"}) {
    c.apply_preset(preset);
    const auto dir = fresh_dir(std::string("self-") + (preset[3] == '+' ? "mapout" : preset));
    const auto student = run_qat(c, teacher, data, {dir});
    CHECK(to_checkpoint(student.model) == to_checkpoint(teacher));
    for (const auto& r : read_records(dir / kMetricsFile)) {
      if (r["record"] != "epoch") continue;
      CHECK(r["train_loss"].get<double>() < 1e-6);
      CHECK(r["grad_norm"].get<double>() < 1e-4);
      CHECK(r["dev"]["ranking_loss_median"].get<double>() == 0.0);
    }
  }
}

TEST_CASE("QAT records carry every configured loss term") {
  auto c = tiny();
  const auto data = generate_task(c.task);
  const auto teacher = train_teacher(c, data).model;
  c.apply_preset("baseline");
  const auto dir = fresh_dir("terms");
  run_qat(c, teacher, data, {dir});
  const auto first = read_records(dir / kMetricsFile).front();
  CHECK(first["stage"] == "qat");
  CHECK(first["loss_terms"].contains("soft-label"));
  CHECK(first["loss_terms"].contains("trm-output"));
  CHECK(first["loss_terms"].contains("score"));
  CHECK(first["dev"].contains("ranking_loss_median"));
}

TEST_CASE("the example limit trains on a prefix") {
  auto c = tiny();
  c.teacher.examples = 16;
  const auto data = generate_task(c.task);
  const auto r = train_teacher(c, data);
  CHECK(r.steps == 2 * 3);
  auto prefix = data;
  prefix.train.resize(16);
  c.teacher.examples = 0;
  CHECK(to_checkpoint(train_teacher(c, prefix).model) == to_checkpoint(r.model));
}

TEST_CASE("architecture mismatch and divergence") {
  auto c = tiny();
  const auto data = generate_task(c.task);
  auto other = c.model;
  other.hidden = 12;
  other.heads = 3;
  CHECK_THROWS_AS(run_qat(c, EncoderModel<float>(other, 1), data), ConfigError);

  c.teacher.learning_rate = 1e30;
  c.teacher.warmup_fraction = 0.0;
  c.teacher.clip_norm = 0.0;
  try {
    train_teacher(c, data);
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(e.step() >= 1);
  }
}

TEST_CASE("regression tasks report mse") {
  auto c = tiny();
  c.task.kind = TaskKind::pair_similarity;
  c.task.classes = 1;
  c.resolve();
  const auto data = generate_task(c.task);
  const auto dir = fresh_dir("regression");
  const auto r = train_teacher(c, data, {dir});
  CHECK(r.dev.regression);
  CHECK(read_records(dir / kMetricsFile).back()["dev"].contains("mse"));
}
