// SPDX-License-Identifier: Apache-2.0
//
// Rectangular Kuhn-Munkres (shortest augmenting path with potentials).
// Assigns every row (ground-truth segment) to a distinct column (query) so
// that the total cost is minimal. Requires rows <= cols.
#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "transunet/errors.hpp"

namespace transunet {

struct MatchAssignment {
  std::vector<std::size_t> query_of_segment;  // segment g -> query index
  std::vector<long> segment_of_query;         // query q -> segment, -1 = no-object
  double total_cost = 0.0;
};

// `cost` is row-major [rows x cols].
inline MatchAssignment hungarian(const std::vector<double>& cost, std::size_t rows, std::size_t cols) {
  if (cost.size() != rows * cols)
    throw DimensionError("hungarian: cost buffer of " + std::to_string(cost.size()) + " for " + std::to_string(rows) +
                         "x" + std::to_string(cols));
  if (rows > cols)
    throw InputError("hungarian: " + std::to_string(rows) + " segments cannot be matched injectively to " +
                     std::to_string(cols) + " queries");
  for (double c : cost)
    if (!std::isfinite(c)) throw InputError("hungarian: cost matrix contains a non-finite entry");

  MatchAssignment out;
  out.segment_of_query.assign(cols, -1);
  if (rows == 0) return out;

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual source.
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        // strict < keeps the lowest column index among ties
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  out.query_of_segment.assign(rows, 0);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (p[j] == 0) continue;
    out.query_of_segment[p[j] - 1] = j - 1;
    out.segment_of_query[j - 1] = static_cast<long>(p[j] - 1);
  }
  for (std::size_t g = 0; g < rows; ++g) out.total_cost += cost[g * cols + out.query_of_segment[g]];
  return out;
}

}  // namespace transunet
