#pragma once

// Flat little-endian float64 arrays on disk. Shared by dataset export and
// checkpoints; the accompanying manifest records shapes.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace vsrd {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_f64_blob(const std::filesystem::path& path, const double* data, std::size_t count);
std::vector<double> read_f64_blob(const std::filesystem::path& path, std::size_t expected_count);

/// FNV-1a over a byte string, rendered as 16 hex digits.
std::string hex_digest(const std::string& bytes);

}  // namespace vsrd
