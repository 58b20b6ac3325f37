#pragma once

// Pieces shared by the training stages: batches, conditions, loss/gradient
// pairs, CSV logs and progress hooks.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vsrd/denoiser.hpp"
#include "vsrd/flowcore.hpp"
#include "vsrd/optim.hpp"
#include "vsrd/rng.hpp"
#include "vsrd/synthdata.hpp"

namespace vsrd {

struct LossGrad {
  double loss = 0.0;
  ParamSet grads;
};

/// Conditional bundle of a dataset item: its degraded clip and degradation class.
flow::ConditionBundle condition_of(const data::VideoPair& item);

/// `batch` training indices drawn with replacement.
std::vector<Index> draw_batch(const data::Dataset& ds, Rng& rng, int batch);

/// Generator for everything random inside one iteration of one stage.
inline Rng iteration_rng(std::uint64_t seed, std::string_view stage, long iteration) {
  return Rng(derive_seed(seed, {hash_name(stage), static_cast<std::uint64_t>(iteration)}));
}

/// Adds `g` into `acc` (same keys), scaled by `s`.
void accumulate(ParamSet& acc, const ParamSet& g, double s = 1.0);

/// Row-oriented CSV table kept in memory and optionally mirrored to a file.
class CsvLog {
 public:
  CsvLog() = default;
  explicit CsvLog(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add(const std::vector<std::string>& row);
  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }
  std::vector<double> column(const std::string& name) const;
  std::string str() const;
  void write(const std::filesystem::path& path) const;
  /// Drops rows whose first column (an iteration counter) is >= `iteration`.
  void truncate_from(long iteration);
  static CsvLog read(const std::filesystem::path& path);

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

std::string fmt(double v);

/// Called after every completed iteration with the number of iterations done.
/// Returning false stops the loop early (the state stays resumable).
using ProgressHook = std::function<bool(long done)>;

}  // namespace vsrd
