#pragma once

#include <span>
#include <utility>
#include <vector>

#include "lndetr/geometry/boxes.hpp"

namespace lndetr::matching {

// rows = ground truths, cols = queries.
class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(int rows, int cols, double fill = 0.0);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  double& at(int i, int k) { return values_[std::size_t(i) * cols_ + k]; }
  double at(int i, int k) const { return values_[std::size_t(i) * cols_ + k]; }

 private:
  int rows_ = 0, cols_ = 0;
  std::vector<double> values_;
};

struct MatchAssignment {
  std::vector<std::pair<int, int>> pairs;  // (gt, query), ascending gt
  double total_cost = 0;

  // Query matched to each GT, or -1.
  int query_for(int gt) const;
};

struct CostWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

// Query predictions as plain values: per-class probabilities and a
// normalized center box.
struct QueryPrediction {
  std::vector<double> class_probs;
  geometry::CenterBox box;
};

CostMatrix match_cost(std::span<const QueryPrediction> preds,
                      std::span<const geometry::LabeledBox> gts, const CostWeights& weights = {});

// Minimum-cost assignment of every row to a distinct column. Among optimal
// assignments the one whose column sequence (by ascending row) is
// lexicographically smallest is returned.
MatchAssignment hungarian(const CostMatrix& cost);

}  // namespace lndetr::matching
