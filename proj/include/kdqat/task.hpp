// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kdqat {

// Synthetic sequence tasks. Token 0 is the leading [CLS] position, token 1 a marker
// (the key in key-lookup, the separator in pair-similarity); ids >= 2 are content
// tokens whose class is (id - 2) mod classes.
enum class TaskKind {
  key_lookup,       // label = class of the token right after the key marker
  bag_majority,     // label = most frequent content class
  pair_similarity,  // regression target = Jaccard overlap of the two halves
};

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

inline constexpr int kClsToken = 0;
inline constexpr int kMarkerToken = 1;
inline constexpr int kFirstContentToken = 2;

struct TaskConfig {
  TaskKind kind = TaskKind::key_lookup;
  int vocab = 64;
  int length = 24;
  int classes = 2;
  int train_size = 2000;
  int dev_size = 500;
  std::uint64_t seed = 7;

  bool regression() const { return kind == TaskKind::pair_similarity; }
  // Output width of the model head.
  int outputs() const { return regression() ? 1 : classes; }
  void validate() const;
  bool operator==(const TaskConfig&) const = default;
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
  double target = 0.0;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

struct TaskSplits {
  Dataset train;
  Dataset dev;
};

int content_class(int token, int classes);

// Label rules, applied to any sequence.
int key_lookup_label(const std::vector<int>& tokens, int classes);
int bag_majority_label(const std::vector<int>& tokens, int classes);
double pair_similarity_target(const std::vector<int>& tokens);

// Train and dev splits drawn from separate generator streams; dev sequences that also
// occur in train are redrawn.
TaskSplits generate_task(const TaskConfig& task);

}  // namespace kdqat
