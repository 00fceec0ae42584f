#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rff/core/errors.hpp"

namespace rff {

// All on-disk binary formats are little-endian. The helpers below assume a
// little-endian host (checked at startup by the CLI and tests via
// static_assert on std::endian).

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("unexpected end of stream while reading binary field");
  return v;
}

inline void write_f32_file(const std::filesystem::path& path, const float* data, size_t n) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  write_bytes(os, data, n * sizeof(float));
  if (!os) throw DataError("write failed: " + path.string());
}

inline std::vector<float> read_f32_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw DataError("cannot open: " + path.string());
  auto bytes = static_cast<size_t>(is.tellg());
  if (bytes % sizeof(float) != 0)
    throw DataError("file size not a multiple of 4 bytes: " + path.string());
  std::vector<float> out(bytes / sizeof(float));
  is.seekg(0);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw DataError("read failed: " + path.string());
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw DataError("write failed: " + path.string());
}

}  // namespace rff
