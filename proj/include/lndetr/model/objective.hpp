#pragma once

#include <vector>

#include "lndetr/denoising/denoising.hpp"
#include "lndetr/losses/losses.hpp"
#include "lndetr/matching/hungarian.hpp"
#include "lndetr/model/network.hpp"

namespace lndetr::model {

struct ObjectiveConfig {
  losses::LossWeights weights;
  losses::ClassificationParams cls;
  losses::BoxParams box;
  losses::MaskParams mask;
  matching::CostWeights cost;
  double temperature = 0.05;
  bool mean_contrastive = false;
};

template <typename T>
struct SampleTargets {
  std::vector<geometry::LabeledBox> boxes;
  std::vector<std::vector<T>> masks;  // one mask_size^2 map per box, values in [0,1]
};

template <typename T>
struct SampleObjective {
  losses::LossComponents<T> components;
  // Last decoder layer, matched matching-branch queries: predicted IoU score
  // and the true IoU of the query's box with its GT.
  std::vector<double> predicted_iou, true_iou;
};

// Hungarian assignment of GTs to the rows [first, first + count) of a
// layer's predictions; query indices are relative to `first`. Throws
// NumericalError on non-finite predictions.
template <typename T>
matching::MatchAssignment match_rows(const Tensor<T>& cls_logits, const Tensor<T>& boxes, int first, int count,
                                     const std::vector<geometry::LabeledBox>& gts,
                                     const matching::CostWeights& weights);

// Training objective of one sample: encoder proposals and every decoder
// layer are matched and supervised (cls, box, IoU, and masks for decoder
// layers), dn queries reconstruct their GTs at every layer, and the
// contrastive term uses the last layer. Components with a zero weight are
// skipped.
template <typename T>
SampleObjective<T> sample_objective(const LnDetr<T>& model, const EncoderOutput<T>& enc, const QueryBatch<T>& q,
                                    const denoising::DnGroupSet& dn, const SampleTargets<T>& targets,
                                    const ObjectiveConfig& config);

}  // namespace lndetr::model
