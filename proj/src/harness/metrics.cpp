// SPDX-License-Identifier: Apache-2.0
#include "kdqat/harness/metrics.hpp"

#include <fstream>
#include <sstream>

#include "kdqat/errors.hpp"

namespace kdqat {

void MetricsWriter::append(const Json& record) const {
  if (!record.contains("record")) throw ContractError("metrics record without a \"record\" field");
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  if (!out) throw InputError("cannot append to " + path_.string());
  out << record.dump() << '\n';
}

std::vector<Json> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<Json> records;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      records.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw InputError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return records;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace kdqat
