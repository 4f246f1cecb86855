// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "kdqat/errors.hpp"
#include "kdqat/task.hpp"

using namespace kdqat;

namespace {

TaskConfig small(TaskKind kind) {
  TaskConfig t;
  t.kind = kind;
  t.vocab = 16;
  t.length = 12;
  t.classes = kind == TaskKind::pair_similarity ? 1 : 3;
  t.train_size = 300;
  t.dev_size = 100;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("task kinds parse and print") {
  for (auto k : {TaskKind::key_lookup, TaskKind::bag_majority, TaskKind::pair_similarity}) {
    CHECK(parse_task_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_task_kind("sst-2"), ConfigError);
}

TEST_CASE("task config validation") {
  auto t = small(TaskKind::key_lookup);
  CHECK_NOTHROW(t.validate());
  t.vocab = 4;  // two specials + two content tokens cannot cover three classes
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = small(TaskKind::bag_majority);
  t.classes = 1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = small(TaskKind::key_lookup);
  t.length = 2;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  CHECK_THROWS_AS(generate_task(t), ConfigError);
}

TEST_CASE("same seed gives identical datasets") {
  for (auto kind : {TaskKind::key_lookup, TaskKind::bag_majority, TaskKind::pair_similarity}) {
    const auto a = generate_task(small(kind));
    const auto b = generate_task(small(kind));
    CHECK(a.train == b.train);
    CHECK(a.dev == b.dev);
    auto other = small(kind);
    other.seed = 6;
    CHECK(generate_task(other).train != a.train);
  }
}

TEST_CASE("splits are disjoint and labels follow the rules") {
  for (auto kind : {TaskKind::key_lookup, TaskKind::bag_majority, TaskKind::pair_similarity}) {
    const auto cfg = small(kind);
    const auto s = generate_task(cfg);
    REQUIRE(s.train.size() == 300);
    REQUIRE(s.dev.size() == 100);
    std::set<std::vector<int>> train;
    for (const auto& ex : s.train) train.insert(ex.tokens);
    for (const auto& ex : s.dev) CHECK(train.count(ex.tokens) == 0);
    for (const auto* split : {&s.train, &s.dev}) {
      for (const auto& ex : *split) {
        REQUIRE(ex.tokens.size() == 12);
        CHECK(ex.tokens[0] == kClsToken);
        for (int t : ex.tokens) CHECK((t >= 0 && t < cfg.vocab));
        switch (kind) {
          case TaskKind::key_lookup: CHECK(ex.label == key_lookup_label(ex.tokens, cfg.classes)); break;
          case TaskKind::bag_majority: CHECK(ex.label == bag_majority_label(ex.tokens, cfg.classes)); break;
          case TaskKind::pair_similarity: CHECK(ex.target == pair_similarity_target(ex.tokens)); break;
        }
      }
    }
  }
}

TEST_CASE("key-lookup has exactly one marker with a content neighbour") {
  const auto s = generate_task(small(TaskKind::key_lookup));
  for (const auto& ex : s.train) {
    int markers = 0;
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      if (ex.tokens[i] != kMarkerToken) continue;
      ++markers;
      REQUIRE(i + 1 < ex.tokens.size());
      CHECK(ex.tokens[i + 1] >= kFirstContentToken);
    }
    CHECK(markers == 1);
  }
}

TEST_CASE("key-lookup label flips when the key neighbour is swapped") {
  const int classes = 3;
  const auto s = generate_task(small(TaskKind::key_lookup));
  int checked = 0;
  for (const auto& ex : s.train) {
    auto tokens = ex.tokens;
    const auto key = std::find(tokens.begin(), tokens.end(), kMarkerToken) - tokens.begin();
    const auto at = static_cast<std::size_t>(key + 1);
    // Next content token of another class, found by direct search.
    const int old_class = (tokens[at] - kFirstContentToken) % classes;
    int replacement = -1;
    for (int t = kFirstContentToken; t < 16; ++t) {
      if ((t - kFirstContentToken) % classes != old_class) {
        replacement = t;
        break;
      }
    }
    tokens[at] = replacement;
    CHECK(key_lookup_label(tokens, classes) == (replacement - kFirstContentToken) % classes);
    CHECK(key_lookup_label(tokens, classes) != ex.label);

    // Tokens away from the key do not matter.
    auto far = ex.tokens;
    const std::size_t other = at + 1 < far.size() ? at + 1 : 1;
    if (far[other] != kMarkerToken && other != static_cast<std::size_t>(key)) {
      far[other] = far[other] == kFirstContentToken ? kFirstContentToken + 1 : kFirstContentToken;
      CHECK(key_lookup_label(far, classes) == ex.label);
    }
    ++checked;
  }
  CHECK(checked == 300);
  CHECK_THROWS_AS(key_lookup_label({0, 2, 3, 1}, 2), InputError);
}

TEST_CASE("bag-majority on an all-one-class sequence") {
  // Classes of 2..7 with 3 classes: 2->0, 3->1, 4->2, 5->0, 6->1, 7->2.
  CHECK(bag_majority_label({0, 4, 7, 4, 7, 4}, 3) == 2);
  CHECK(bag_majority_label({0, 3, 6, 3}, 3) == 1);
  CHECK(bag_majority_label({0, 2, 3, 2, 5, 6}, 3) == 0);
  const auto s = generate_task(small(TaskKind::bag_majority));
  std::set<int> labels;
  for (const auto& ex : s.train) labels.insert(ex.label);
  CHECK(labels.size() == 3);
}

TEST_CASE("pair-similarity target is the Jaccard index of the two halves") {
  CHECK(pair_similarity_target({0, 2, 3, 1, 2, 3}) == doctest::Approx(1.0));
  CHECK(pair_similarity_target({0, 2, 3, 1, 4, 5}) == doctest::Approx(0.0));
  CHECK(pair_similarity_target({0, 2, 3, 1, 3, 4}) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(pair_similarity_target({0, 2, 3, 4}), InputError);
  const auto s = generate_task(small(TaskKind::pair_similarity));
  double lo = 1.0, hi = 0.0;
  for (const auto& ex : s.train) {
    lo = std::min(lo, ex.target);
    hi = std::max(hi, ex.target);
  }
  CHECK(lo < 0.2);
  CHECK(hi > 0.8);
}

TEST_CASE("tiny vocabularies that cannot fill the dev split are reported") {
  TaskConfig t;
  t.kind = TaskKind::key_lookup;
  t.vocab = 3;
  t.length = 3;
  t.classes = 1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.classes = 2;
  t.vocab = 4;
  t.train_size = 50;
  t.dev_size = 50;
  CHECK_THROWS_AS(generate_task(t), ConfigError);
}
