#include "vsrd/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "vsrd/rng.hpp"

namespace vsrd {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

void write_f64_blob(const std::filesystem::path& path, const double* data, std::size_t count) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<double> read_f64_blob(const std::filesystem::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected_count * sizeof(double))
    throw IoError(path.string() + ": expected " + std::to_string(expected_count) + " values, file holds " +
                  std::to_string(bytes / sizeof(double)));
  std::vector<double> v(expected_count);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("short read from " + path.string());
  return v;
}

std::string hex_digest(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = hash_name(bytes);
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return s;
}

}  // namespace vsrd
