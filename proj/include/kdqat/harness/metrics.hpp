// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace kdqat {

using Json = nlohmann::ordered_json;

// Append-only JSON Lines file: one object per line, every object carrying a "record" type.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::filesystem::path path) : path_(std::move(path)) {}

  void append(const Json& record) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

std::vector<Json> read_records(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace kdqat
