#include "vsrd/training.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "vsrd/blob.hpp"

namespace vsrd {

flow::ConditionBundle condition_of(const data::VideoPair& item) {
  return flow::ConditionBundle{item.lr_up, item.draw.cond_class, false};
}

std::vector<Index> draw_batch(const data::Dataset& ds, Rng& rng, int batch) {
  if (ds.n_train < 1) throw ContractViolation("training needs at least one training item");
  if (batch < 1) throw ContractViolation("batch size must be >= 1");
  std::vector<Index> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = rng.integer(0, static_cast<int>(ds.n_train) - 1);
  return idx;
}

void accumulate(ParamSet& acc, const ParamSet& g, double s) {
  if (acc.empty()) {
    for (const auto& [k, m] : g) acc.emplace(k, s * m);
    return;
  }
  for (const auto& [k, m] : g) {
    auto it = acc.find(k);
    if (it == acc.end()) throw ContractViolation("accumulate: unknown parameter '" + k + "'");
    it->second += s * m;
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void CsvLog::add(const std::vector<std::string>& row) {
  if (row.size() != columns_.size()) throw ContractViolation("csv: row width does not match header");
  rows_.push_back(row);
}

std::vector<double> CsvLog::column(const std::string& name) const {
  std::size_t c = 0;
  while (c < columns_.size() && columns_[c] != name) ++c;
  if (c == columns_.size()) throw ContractViolation("csv: no column '" + name + "'");
  std::vector<double> out;
  for (const auto& r : rows_) {
    if (r[c].empty()) continue;
    out.push_back(std::stod(r[c]));
  }
  return out;
}

std::string CsvLog::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < columns_.size(); ++i) os << (i ? "," : "") << columns_[i];
  os << "\n";
  for (const auto& r : rows_) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << "\n";
  }
  return os.str();
}

void CsvLog::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << str();
}

void CsvLog::truncate_from(long iteration) {
  std::erase_if(rows_, [&](const std::vector<std::string>& r) { return std::stol(r.front()) >= iteration; });
}

CsvLog CsvLog::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty csv");
  CsvLog log(split(line));
  while (std::getline(in, line))
    if (!line.empty()) log.add(split(line));
  return log;
}

}  // namespace vsrd
