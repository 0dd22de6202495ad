#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "lndetr/geometry/boxes.hpp"
#include "lndetr/matching/hungarian.hpp"
#include "lndetr/numcore/ops.hpp"

// Training objectives. All losses are built from the numcore op suite, so
// their gradients come from the tape.
namespace lndetr::losses {

using numcore::Tensor;
using Warnings = std::vector<std::string>;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double cls = 4.0;
  double box = 1.0;
  double mask = 1.0;
  double iou = 10.0;
  double contrastive = 1.0;
};

struct ClassificationParams {
  bool focal = true;  // false: plain sigmoid cross-entropy
  double alpha = 0.25;
  double gamma = 2.0;
};

struct BoxParams {
  double l1 = 5.0;
  double giou = 2.0;
};

struct MaskParams {
  double dice = 5.0;
  double bce = 5.0;
};

// Sigmoid focal loss over logits [K,C]. targets[k] is the class of query k
// or -1 for background. The sum over all queries and classes is divided by
// `normalizer` (the GT count, floored at 1 by the caller).
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<int>& targets,
                              double normalizer, const ClassificationParams& params = {},
                              Warnings* warnings = nullptr);

// Per-pair GIoU between rows of two [M,4] cxcywh tensors -> [M,1].
template <typename T>
Tensor<T> giou_rows(const Tensor<T>& a, const Tensor<T>& b);

// Mean over matches of l1 * L1(cxcywh) + giou * (1 - GIoU). boxes is [K,4].
template <typename T>
Tensor<T> box_loss(const Tensor<T>& boxes, const std::vector<geometry::CenterBox>& gts,
                   const matching::MatchAssignment& matches, const BoxParams& params = {});

// Per-row dice loss and per-pixel-mean BCE over logits [P,HW] against
// targets [P,HW], each averaged over rows.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& targets);
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& targets);

// Mean over matches of dice * dice_loss + bce * bce_loss. mask_logits is
// [K,HW]; gt_masks[i] holds HW values in {0,1} for GT i.
template <typename T>
Tensor<T> mask_loss(const Tensor<T>& mask_logits, const std::vector<std::vector<T>>& gt_masks,
                    const matching::MatchAssignment& matches, const MaskParams& params = {});

// Mean over rows of (score[query] - target)^2. scores holds K IoU
// predictions in (0,1); targets are constants.
template <typename T>
Tensor<T> squared_iou_error(const Tensor<T>& scores, const std::vector<std::int64_t>& queries,
                            const std::vector<double>& targets);

// IoU-prediction loss on matched queries only. The targets are the true IoU
// between each matched query's predicted box (values of `boxes`, [K,4]) and
// its GT; they carry no gradient.
template <typename T>
Tensor<T> iou_pred_loss(const Tensor<T>& scores, const Tensor<T>& boxes,
                        const std::vector<geometry::CenterBox>& gts,
                        const matching::MatchAssignment& matches);

template <typename T>
struct ContrastiveHead {
  Tensor<T> weight;  // [d,d]
  Tensor<T> bias;    // [d]
  double temperature = 0.05;
};

// InfoNCE between anchors [P,d] and queries [K,d]: row p's positive is
// query positives[p], every other query is a negative. Summed over rows
// unless `mean` is set.
template <typename T>
Tensor<T> infonce_loss(const Tensor<T>& queries, const Tensor<T>& anchors,
                       const std::vector<std::int64_t>& positives, const ContrastiveHead<T>& head,
                       bool mean = false);

// Undefined members count as zero.
template <typename T>
struct LossComponents {
  Tensor<T> cls, box, mask, iou, contrastive;
};

// Weighted sum. Throws NumericalError naming the first non-finite component.
template <typename T>
Tensor<T> total_loss(const LossComponents<T>& components, const LossWeights& weights);

}  // namespace lndetr::losses
