// SPDX-License-Identifier: Apache-2.0
#include "kdqat/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace kdqat {

namespace {

template <typename T>
T swap_bytes(T value) {
  char b[sizeof(T)];
  std::memcpy(b, &value, sizeof(T));
  std::reverse(b, b + sizeof(T));
  std::memcpy(&value, b, sizeof(T));
  return value;
}

template <typename T>
void put(std::vector<char>& out, T value) {
  if constexpr (std::endian::native == std::endian::big) value = swap_bytes(value);
  const auto* p = reinterpret_cast<const char*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) value = swap_bytes(value);
    return value;
  }

  std::string string(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw InputError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<char> serialize(const Checkpoint& ckpt) {
  std::vector<char> out{'K', 'D', 'Q', 'T'};
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (static_cast<Index>(t.values.size()) != shape_numel(t.shape)) {
      throw DimensionError("checkpoint tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                           " values for shape " + shape_string(t.shape));
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (Index e : t.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    for (float v : t.values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

Checkpoint deserialize(const std::vector<char>& bytes) {
  Reader in(bytes);
  if (in.string(4) != "KDQT") throw InputError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = in.string(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(static_cast<Index>(in.get<std::uint64_t>()));
    const auto numel = static_cast<std::size_t>(shape_numel(t.shape));
    if (numel > in.remaining() / sizeof(float)) {
      throw InputError("checkpoint tensor '" + t.name + "' declares more values than the file holds");
    }
    t.values.reserve(numel);
    for (std::size_t k = 0; k < numel; ++k) t.values.push_back(std::bit_cast<float>(in.get<std::uint32_t>()));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw InputError("checkpoint has trailing bytes after the declared tensors");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling file first so a crash never leaves a half-written checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

NamedTensor named_matrix(const std::string& name, const RowMatrix<float>& m, const Shape& shape) {
  return {name, shape, std::vector<float>(m.data(), m.data() + m.size())};
}

RowMatrix<float> matrix_of(const NamedTensor& t) {
  const auto [rows, cols] = storage_extents(t.shape);
  RowMatrix<float> m(rows, cols);
  std::copy(t.values.begin(), t.values.end(), m.data());
  return m;
}

}  // namespace kdqat
