#include "vsrd/flowcore.hpp"

#include <sstream>

namespace vsrd {

std::string to_string(const VideoShape& s) {
  std::ostringstream os;
  os << "(" << s.frames << "," << s.height << "," << s.width << "," << s.channels << ")";
  return os.str();
}

namespace flow {

std::vector<double> uniform_schedule(int steps) {
  if (steps < 1) throw ContractViolation("uniform_schedule: steps must be >= 1");
  std::vector<double> s(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) s[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) / steps;
  s.back() = 0.0;
  return s;
}

void validate_schedule(std::span<const double> schedule) {
  if (schedule.size() < 2) throw ContractViolation("schedule needs at least two timesteps");
  if (schedule.front() != 1.0 || schedule.back() != 0.0)
    throw ContractViolation("schedule must start at 1 and end at 0");
  for (std::size_t i = 1; i < schedule.size(); ++i)
    if (!(schedule[i] < schedule[i - 1])) throw ContractViolation("schedule must be strictly decreasing");
}

}  // namespace flow
}  // namespace vsrd
