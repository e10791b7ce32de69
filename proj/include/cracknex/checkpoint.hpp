#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cracknex/config.hpp"
#include "cracknex/engine.hpp"

namespace cracknex {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'A', 'C', 'K', 'N', 'E', 'X'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian):
//   "CRACKNEX" | u32 version | u32 scalar bytes | u64 iteration
//   | u64 len, config text | u32 count, parameter records
//   | u32 count, momentum records | u64 FNV-1a of everything before it
// Record: u32 name length, name, i32 c, i32 h, i32 w, raw scalars.
namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(const V& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint64_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}
  template <typename V>
  V get() {
    V v;
    get_bytes(&v, sizeof(V));
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    if (n > size_ - pos_) throw CheckpointError("checkpoint is truncated or corrupt");
    std::memcpy(dst, data_ + pos_, n);
    pos_ += n;
  }
  std::string get_string(std::size_t limit) {
    const auto n = get<std::uint64_t>();
    if (n > limit) throw CheckpointError("checkpoint is corrupt: implausible string length");
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001B3ull;
  }
  return h;
}

template <typename T>
void put_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.put(static_cast<std::uint32_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put(static_cast<std::int32_t>(t.channels()));
  w.put(static_cast<std::int32_t>(t.height()));
  w.put(static_cast<std::int32_t>(t.width()));
  w.put_bytes(t.data(), t.size() * sizeof(T));
}

template <typename T>
Tensor<T> get_tensor(ByteReader& r, const std::string& expected_name) {
  const auto len = r.get<std::uint32_t>();
  if (len > 4096) throw CheckpointError("checkpoint is corrupt: implausible name length");
  std::string name(len, '\0');
  r.get_bytes(name.data(), len);
  if (name != expected_name) {
    throw CheckpointError("checkpoint parameter '" + name + "' where '" + expected_name +
                          "' was expected");
  }
  const auto c = r.get<std::int32_t>();
  const auto h = r.get<std::int32_t>();
  const auto w = r.get<std::int32_t>();
  if (c < 0 || h < 0 || w < 0 ||
      static_cast<std::uint64_t>(c) * h * w * sizeof(T) > r.remaining()) {
    throw CheckpointError("checkpoint is truncated or corrupt");
  }
  Tensor<T> t(c, h, w);
  r.get_bytes(t.data(), t.size() * sizeof(T));
  return t;
}

}  // namespace detail

template <typename T>
std::vector<char> serialize_checkpoint(const Checkpoint<T>& cp) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(sizeof(T)));
  w.put(static_cast<std::uint64_t>(cp.iteration));
  w.put_string(to_config_text(cp.config));
  const auto named = cp.params.named();
  w.put(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, v] : named) detail::put_tensor(w, name, v.value());
  w.put(static_cast<std::uint32_t>(cp.momentum.size()));
  for (std::size_t i = 0; i < cp.momentum.size(); ++i)
    detail::put_tensor(w, named[i].first, cp.momentum[i]);
  const auto hash = detail::fnv1a(w.bytes().data(), w.bytes().size());
  w.put(hash);
  return std::move(w.bytes());
}

template <typename T>
Checkpoint<T> deserialize_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored_hash;
  std::memcpy(&stored_hash, bytes.data() + body, sizeof(stored_hash));

  detail::ByteReader r(bytes.data(), body);
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint format_version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  if (detail::fnv1a(bytes.data(), body) != stored_hash) {
    throw CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)");
  }
  const auto scalar = r.get<std::uint32_t>();
  if (scalar != sizeof(T)) {
    throw CheckpointError("checkpoint stores " + std::to_string(scalar * 8) +
                          "-bit parameters, reader expects " + std::to_string(sizeof(T) * 8));
  }
  Checkpoint<T> cp;
  cp.iteration = r.get<std::uint64_t>();
  try {
    cp.config = parse_config(r.get_string(1 << 20));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  cp.params = ModelParams<T>::init(cp.config.channels, 0);
  auto named = cp.params.named();
  const auto count = r.get<std::uint32_t>();
  if (count != named.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(count) + " parameters, expected " +
                          std::to_string(named.size()));
  }
  for (auto& [name, v] : named) {
    auto t = detail::get_tensor<T>(r, name);
    if (!t.same_shape(v.value())) {
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " + t.shape_string() +
                            ", expected " + v.value().shape_string());
    }
    v.mutable_value() = std::move(t);
  }
  const auto momentum_count = r.get<std::uint32_t>();
  if (momentum_count != 0 && momentum_count != named.size()) {
    throw CheckpointError("checkpoint momentum table has the wrong size");
  }
  for (std::uint32_t i = 0; i < momentum_count; ++i) {
    cp.momentum.push_back(detail::get_tensor<T>(r, named[i].first));
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return cp;
}

template <typename T>
void save_checkpoint(const Checkpoint<T>& cp, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(cp);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing '" + path.string() + "'");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes);
}

}  // namespace cracknex
