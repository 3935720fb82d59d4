#pragma once

#include "nextlocmoe/data_model.hpp"
#include "nextlocmoe/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

// Independent reference implementations used as test oracles. They share no
// code with the library.
namespace nextlocmoe::oracles {

/// tanh-form GELU, as used throughout the model.
inline double gelu(double v) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
}

/// Indices ordered by repeated argmax (lowest index wins ties).
inline std::vector<int> rank_by_argmax(const RowVector& p) {
  const int n = static_cast<int>(p.size());
  std::vector<int> ranked;
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  for (int r = 0; r < n; ++r) {
    int best = -1;
    for (int i = 0; i < n; ++i) {
      if (!taken[static_cast<std::size_t>(i)] && (best < 0 || p(i) > p(best))) best = i;
    }
    taken[static_cast<std::size_t>(best)] = true;
    ranked.push_back(best);
  }
  return ranked;
}

/// Exhaustive threshold selection: the smallest subset size whose best subset
/// reaches tau, then that many experts in rank order.
inline std::vector<int> threshold_selection(const RowVector& p, double tau) {
  const int n = static_cast<int>(p.size());
  const auto ranked = rank_by_argmax(p);
  int min_size = n;
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    double s = 0.0;
    int size = 0;
    for (int r = 0; r < n; ++r) {
      const int i = ranked[static_cast<std::size_t>(r)];
      if (mask & (1u << i)) {
        s += p(i);
        ++size;
      }
    }
    if (s >= tau) min_size = std::min(min_size, size);
  }
  return {ranked.begin(), ranked.begin() + min_size};
}

/// Linear scan: every location sorted by (squared distance, id).
inline std::vector<std::int64_t> nearest_by_scan(const std::vector<Location>& locs, double x, double y, int k) {
  std::vector<std::pair<double, std::int64_t>> d;
  for (const auto& l : locs) d.emplace_back((l.x - x) * (l.x - x) + (l.y - y) * (l.y - y), l.id);
  std::sort(d.begin(), d.end());
  std::vector<std::int64_t> out;
  for (int i = 0; i < k && i < static_cast<int>(d.size()); ++i) out.push_back(d[static_cast<std::size_t>(i)].second);
  return out;
}

}  // namespace nextlocmoe::oracles
