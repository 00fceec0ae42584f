#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rff/core/io.hpp"
#include "rff/nn/tensor.hpp"

namespace rff::nn {

// Checkpoint container: magic "FTCK", u32 version, then one record per
// tensor until EOF:
//   u32 name length, name bytes (utf-8),
//   u8 dtype (0 = f32, 1 = f64),
//   u32 rank, u64 dims...,
//   raw little-endian values.

inline constexpr uint32_t kCheckpointVersion = 1;

template <typename S>
constexpr uint8_t dtype_tag() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? 0 : 1;
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, Tensor<S>>>& named) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os.write("FTCK", 4);
  write_pod<uint32_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : named) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    write_bytes(os, name.data(), name.size());
    write_pod<uint8_t>(os, dtype_tag<S>());
    write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
    write_bytes(os, t.data(), static_cast<size_t>(t.size()) * sizeof(S));
  }
  if (!os) throw DataError("checkpoint write failed: " + path.string());
}

/// Loads every record; tensor dtype must match S.
template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FTCK", 4) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path.string());
  auto version = read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  std::vector<std::pair<std::string, Tensor<S>>> out;
  while (true) {
    uint32_t name_len;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) throw DataError("truncated checkpoint: " + path.string());
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    auto tag = read_pod<uint8_t>(is);
    if (tag != dtype_tag<S>())
      throw DataError("checkpoint tensor '" + name + "' has dtype tag " + std::to_string(tag) +
                      ", expected " + std::to_string(dtype_tag<S>()));
    auto rank = read_pod<uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_pod<uint64_t>(is));
    Tensor<S> t = Tensor<S>::zeros(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(S)));
    if (!is) throw DataError("truncated checkpoint tensor '" + name + "'");
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace rff::nn
