#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "cdformer/error.hpp"

namespace cdformer {

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, gt), ascending query
  std::vector<std::size_t> unmatched_queries;
  std::vector<std::size_t> unmatched_gts;  // non-empty only when G > M
  double total_cost = 0.0;
  bool truncated = false;  // G > M: only M ground truths could be matched
};

namespace detail {

// Shortest-augmenting-path Hungarian method with potentials for an n x m
// cost (n <= m), row-major. Returns the column assigned to each row.
inline std::vector<std::size_t> assign_rows(const std::vector<double>& cost, std::size_t n,
                                            std::size_t m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
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
  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

// Minimum-cost assignment between M queries (rows) and G ground truths
// (columns) of a row-major cost matrix. When G > M, the M ground truths that
// admit the cheapest assignment are matched and `truncated` is set.
inline MatchResult hungarian_match(const std::vector<double>& cost, std::size_t queries,
                                   std::size_t gts) {
  if (cost.size() != queries * gts) {
    throw ShapeError("hungarian_match: cost holds " + std::to_string(cost.size()) +
                     " entries for " + std::to_string(queries) + "x" + std::to_string(gts));
  }
  for (double c : cost) {
    if (!std::isfinite(c)) throw NumericError("hungarian_match: non-finite cost entry");
  }
  MatchResult r;
  if (gts == 0 || queries == 0) {
    for (std::size_t q = 0; q < queries; ++q) r.unmatched_queries.push_back(q);
    for (std::size_t g = 0; g < gts; ++g) r.unmatched_gts.push_back(g);
    r.truncated = gts > 0;
    return r;
  }
  if (gts <= queries) {
    std::vector<double> t(gts * queries);
    for (std::size_t q = 0; q < queries; ++q)
      for (std::size_t g = 0; g < gts; ++g) t[g * queries + q] = cost[q * gts + g];
    const auto gt_to_query = detail::assign_rows(t, gts, queries);
    for (std::size_t g = 0; g < gts; ++g) r.pairs.emplace_back(gt_to_query[g], g);
  } else {
    r.truncated = true;
    const auto query_to_gt = detail::assign_rows(cost, queries, gts);
    for (std::size_t q = 0; q < queries; ++q) r.pairs.emplace_back(q, query_to_gt[q]);
  }
  std::sort(r.pairs.begin(), r.pairs.end());
  std::vector<char> q_used(queries, 0), g_used(gts, 0);
  for (auto [q, g] : r.pairs) {
    q_used[q] = 1;
    g_used[g] = 1;
    r.total_cost += cost[q * gts + g];
  }
  for (std::size_t q = 0; q < queries; ++q)
    if (!q_used[q]) r.unmatched_queries.push_back(q);
  for (std::size_t g = 0; g < gts; ++g)
    if (!g_used[g]) r.unmatched_gts.push_back(g);
  return r;
}

}  // namespace cdformer
