#include "splitmeanflow/sampler.hpp"

namespace splitmeanflow {

std::vector<double> uniform_time_grid(int k) {
  if (k < 1) throw Error(ErrorCategory::invalid_argument, "time grid needs k >= 1");
  std::vector<double> grid(static_cast<std::size_t>(k) + 1);
  for (int i = 0; i <= k; ++i) grid[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) / k;
  grid.back() = 0.0;
  return grid;
}

void check_time_grid(std::span<const double> grid) {
  if (grid.size() < 2 || grid.front() != 1.0 || grid.back() != 0.0) {
    throw Error(ErrorCategory::invalid_argument, "time grid must start at 1 and end at 0");
  }
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] < grid[i - 1])) throw Error(ErrorCategory::invalid_argument, "time grid must be strictly decreasing");
  }
}

}  // namespace splitmeanflow
