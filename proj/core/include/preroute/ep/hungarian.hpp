#pragma once

#include <cstdint>
#include <vector>

namespace preroute::ep {

// Minimum-cost perfect matching on a square cost matrix (row-major n x n).
// Returns column_of[row].
std::vector<std::size_t> hungarian_min(const std::vector<double>& cost, std::size_t n);

}  // namespace preroute::ep
