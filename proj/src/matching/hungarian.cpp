#include "lndetr/matching/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace lndetr::matching {

CostMatrix::CostMatrix(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), values_(std::size_t(rows) * std::size_t(cols), fill) {
  if (rows < 0 || cols < 0) throw std::invalid_argument("CostMatrix: negative extent");
}

int MatchAssignment::query_for(int gt) const {
  for (const auto& [i, k] : pairs)
    if (i == gt) return k;
  return -1;
}

CostMatrix match_cost(std::span<const QueryPrediction> preds,
                      std::span<const geometry::LabeledBox> gts, const CostWeights& weights) {
  const int m = int(gts.size()), k = int(preds.size());
  if (m > k)
    throw std::invalid_argument("match_cost: " + std::to_string(m) + " ground truths exceed " +
                                std::to_string(k) + " queries");
  CostMatrix cost(m, k);
  for (int i = 0; i < m; ++i) {
    const auto& gt = gts[std::size_t(i)];
    const auto gt_corners = geometry::to_corners(gt.box);
    for (int q = 0; q < k; ++q) {
      const auto& p = preds[std::size_t(q)];
      if (gt.label < 0 || gt.label >= int(p.class_probs.size()))
        throw std::invalid_argument("match_cost: label out of range");
      const double l1 = std::abs(p.box.cx - gt.box.cx) + std::abs(p.box.cy - gt.box.cy) +
                        std::abs(p.box.w - gt.box.w) + std::abs(p.box.h - gt.box.h);
      const double g = geometry::giou_2d(geometry::to_corners(p.box), gt_corners);
      cost.at(i, q) = -weights.cls * p.class_probs[std::size_t(gt.label)] + weights.l1 * l1 -
                      weights.giou * g;
    }
  }
  return cost;
}

namespace {

struct SubResult {
  double cost = 0;
  std::vector<int> col_of_row;  // indexes into the given column list
};

// Shortest-augmenting-path assignment with potentials over the submatrix
// selected by `rows` x `cols` (rows.size() <= cols.size()).
SubResult solve(const CostMatrix& c, const std::vector<int>& rows, const std::vector<int>& cols) {
  const int n = int(rows.size()), m = int(cols.size());
  SubResult out;
  out.col_of_row.assign(std::size_t(n), -1);
  if (n == 0) return out;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(std::size_t(n) + 1, 0.0), v(std::size_t(m) + 1, 0.0);
  std::vector<int> p(std::size_t(m) + 1, 0), way(std::size_t(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(std::size_t(m) + 1, inf);
    std::vector<char> used(std::size_t(m) + 1, 0);
    do {
      used[std::size_t(j0)] = 1;
      const int i0 = p[std::size_t(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[std::size_t(j)]) continue;
        const double cur = c.at(rows[std::size_t(i0 - 1)], cols[std::size_t(j - 1)]) -
                           u[std::size_t(i0)] - v[std::size_t(j)];
        if (cur < minv[std::size_t(j)]) {
          minv[std::size_t(j)] = cur;
          way[std::size_t(j)] = j0;
        }
        if (minv[std::size_t(j)] < delta) {
          delta = minv[std::size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[std::size_t(j)]) {
          u[std::size_t(p[std::size_t(j)])] += delta;
          v[std::size_t(j)] -= delta;
        } else {
          minv[std::size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[std::size_t(j0)] != 0);
    do {
      const int j1 = way[std::size_t(j0)];
      p[std::size_t(j0)] = p[std::size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  for (int j = 1; j <= m; ++j)
    if (p[std::size_t(j)]) out.col_of_row[std::size_t(p[std::size_t(j)] - 1)] = j - 1;
  for (int i = 0; i < n; ++i)
    out.cost += c.at(rows[std::size_t(i)], cols[std::size_t(out.col_of_row[std::size_t(i)])]);
  return out;
}

}  // namespace

MatchAssignment hungarian(const CostMatrix& cost) {
  const int m = cost.rows(), k = cost.cols();
  if (m > k)
    throw std::invalid_argument("hungarian: " + std::to_string(m) + " rows exceed " +
                                std::to_string(k) + " columns");
  double scale = 0;
  for (int i = 0; i < m; ++i)
    for (int q = 0; q < k; ++q) {
      if (!std::isfinite(cost.at(i, q)))
        throw std::invalid_argument("hungarian: non-finite entry at (" + std::to_string(i) + "," +
                                    std::to_string(q) + ")");
      scale = std::max(scale, std::abs(cost.at(i, q)));
    }
  MatchAssignment result;
  if (m == 0) return result;

  std::vector<int> all_rows(static_cast<std::size_t>(m)), all_cols(static_cast<std::size_t>(k));
  for (int i = 0; i < m; ++i) all_rows[std::size_t(i)] = i;
  for (int q = 0; q < k; ++q) all_cols[std::size_t(q)] = q;
  const auto best = solve(cost, all_rows, all_cols);
  const double optimum = best.cost;
  const double tol = 1e-10 * (1.0 + scale * m);

  // Lexicographic refinement: fix rows in order to the smallest column that
  // still admits an optimal completion.
  std::vector<int> current = best.col_of_row;
  std::vector<char> taken(std::size_t(k), 0);
  double fixed_cost = 0;
  for (int i = 0; i < m; ++i) {
    std::vector<int> rest_rows;
    for (int r = i + 1; r < m; ++r) rest_rows.push_back(r);
    double rest_bound = 0;
    for (int r : rest_rows) {
      double lo = std::numeric_limits<double>::infinity();
      for (int q = 0; q < k; ++q)
        if (!taken[std::size_t(q)]) lo = std::min(lo, cost.at(r, q));
      rest_bound += lo;
    }
    int chosen = -1;
    for (int q = 0; q < k && chosen < 0; ++q) {
      if (taken[std::size_t(q)]) continue;
      if (q == current[std::size_t(i)]) {
        chosen = q;
        break;
      }
      if (fixed_cost + cost.at(i, q) + rest_bound > optimum + tol) continue;
      std::vector<int> rest_cols;
      for (int c = 0; c < k; ++c)
        if (!taken[std::size_t(c)] && c != q) rest_cols.push_back(c);
      const auto sub = solve(cost, rest_rows, rest_cols);
      if (fixed_cost + cost.at(i, q) + sub.cost <= optimum + tol) {
        chosen = q;
        for (std::size_t r = 0; r < rest_rows.size(); ++r)
          current[std::size_t(rest_rows[r])] = rest_cols[std::size_t(sub.col_of_row[r])];
      }
    }
    taken[std::size_t(chosen)] = 1;
    fixed_cost += cost.at(i, chosen);
    result.pairs.emplace_back(i, chosen);
  }
  result.total_cost = fixed_cost;
  return result;
}

}  // namespace lndetr::matching
