// SPDX-License-Identifier: Apache-2.0
#include "kdqat/task.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "kdqat/errors.hpp"

namespace kdqat {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::key_lookup: return "key-lookup";
    case TaskKind::bag_majority: return "bag-majority";
    case TaskKind::pair_similarity: return "pair-similarity";
  }
  return "key-lookup";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "key-lookup") return TaskKind::key_lookup;
  if (name == "bag-majority") return TaskKind::bag_majority;
  if (name == "pair-similarity") return TaskKind::pair_similarity;
  throw ConfigError("unknown task kind '" + std::string(name) + "' (key-lookup, bag-majority, pair-similarity)");
}

void TaskConfig::validate() const {
  if (classes < 1) throw ConfigError("task: classes must be >= 1");
  if (!regression() && classes < 2) throw ConfigError("task: classification needs at least 2 classes");
  if (vocab < kFirstContentToken + (regression() ? 1 : classes)) {
    throw ConfigError("task: vocab " + std::to_string(vocab) + " cannot hold the special tokens and " +
                      std::to_string(classes) + " content classes");
  }
  if (length < 3) throw ConfigError("task: sequence length must be >= 3");
  if (train_size < 1 || dev_size < 0) throw ConfigError("task: train_size must be >= 1 and dev_size >= 0");
}

int content_class(int token, int classes) { return (token - kFirstContentToken) % classes; }

int key_lookup_label(const std::vector<int>& tokens, int classes) {
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == kMarkerToken) return content_class(tokens[i + 1], classes);
  }
  throw InputError("key-lookup sequence without a key marker followed by a token");
}

int bag_majority_label(const std::vector<int>& tokens, int classes) {
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (int t : tokens)
    if (t >= kFirstContentToken) ++counts[static_cast<std::size_t>(content_class(t, classes))];
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

double pair_similarity_target(const std::vector<int>& tokens) {
  const auto sep = std::find(tokens.begin() + 1, tokens.end(), kMarkerToken);
  if (sep == tokens.end()) throw InputError("pair-similarity sequence without a separator");
  const std::set<int> a(tokens.begin() + 1, sep);
  const std::set<int> b(sep + 1, tokens.end());
  std::vector<int> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  const std::size_t unions = a.size() + b.size() - both.size();
  return unions ? static_cast<double>(both.size()) / static_cast<double>(unions) : 0.0;
}

namespace {

class Generator {
 public:
  Generator(const TaskConfig& task, std::uint64_t stream) : task_(task), rng_(task.seed * 2 + stream) {}

  Example next() {
    switch (task_.kind) {
      case TaskKind::key_lookup: return key_lookup();
      case TaskKind::bag_majority: return bag_majority();
      case TaskKind::pair_similarity: return pair_similarity();
    }
    return {};
  }

 private:
  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  int content() { return uniform(kFirstContentToken, task_.vocab - 1); }

  // A content token of the given class.
  int content_of(int cls) {
    const int per_class = (task_.vocab - kFirstContentToken - cls + task_.classes - 1) / task_.classes;
    return kFirstContentToken + cls + task_.classes * uniform(0, per_class - 1);
  }

  Example key_lookup() {
    Example ex;
    ex.tokens.assign(static_cast<std::size_t>(task_.length), 0);
    for (std::size_t i = 1; i < ex.tokens.size(); ++i) ex.tokens[i] = content();
    const int key = uniform(1, task_.length - 2);
    ex.tokens[static_cast<std::size_t>(key)] = kMarkerToken;
    ex.label = key_lookup_label(ex.tokens, task_.classes);
    return ex;
  }

  Example bag_majority() {
    Example ex;
    for (;;) {
      const int favored = uniform(0, task_.classes - 1);
      std::bernoulli_distribution lean(0.3);
      ex.tokens.assign(1, kClsToken);
      std::vector<int> counts(static_cast<std::size_t>(task_.classes), 0);
      for (int i = 1; i < task_.length; ++i) {
        const int cls = lean(rng_) ? favored : uniform(0, task_.classes - 1);
        ex.tokens.push_back(content_of(cls));
        ++counts[static_cast<std::size_t>(cls)];
      }
      const int top = *std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), top) == 1) break;  // redraw ties
    }
    ex.label = bag_majority_label(ex.tokens, task_.classes);
    return ex;
  }

  Example pair_similarity() {
    Example ex;
    const int half = (task_.length - 2) / 2;
    const double copy_rate = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    ex.tokens.assign(1, kClsToken);
    for (int i = 0; i < half; ++i) ex.tokens.push_back(content());
    ex.tokens.push_back(kMarkerToken);
    std::bernoulli_distribution copy(copy_rate);
    for (int i = 0; i < task_.length - 2 - half; ++i) {
      ex.tokens.push_back(copy(rng_) ? ex.tokens[static_cast<std::size_t>(uniform(1, half))] : content());
    }
    ex.target = pair_similarity_target(ex.tokens);
    return ex;
  }

  const TaskConfig& task_;
  std::mt19937_64 rng_;
};

}  // namespace

TaskSplits generate_task(const TaskConfig& task) {
  task.validate();
  TaskSplits splits;
  Generator train(task, 0);
  std::set<std::vector<int>> seen;
  for (int i = 0; i < task.train_size; ++i) {
    splits.train.push_back(train.next());
    seen.insert(splits.train.back().tokens);
  }
  Generator dev(task, 1);
  // Bounded redraws so tiny vocabularies cannot loop forever.
  for (int i = 0, tries = 0; i < task.dev_size && tries < 100 * (task.dev_size + 1); ++tries) {
    Example ex = dev.next();
    if (seen.count(ex.tokens)) continue;
    seen.insert(ex.tokens);
    splits.dev.push_back(std::move(ex));
    ++i;
  }
  if (static_cast<int>(splits.dev.size()) < task.dev_size) {
    throw ConfigError("task: could not draw " + std::to_string(task.dev_size) + " distinct dev sequences");
  }
  return splits;
}

}  // namespace kdqat
