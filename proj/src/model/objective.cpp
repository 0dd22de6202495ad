#include "lndetr/model/objective.hpp"

#include <algorithm>
#include <cmath>

namespace lndetr::model {

using namespace numcore;

namespace {

template <typename T>
void accumulate(Tensor<T>& acc, const Tensor<T>& value) {
  acc = acc.defined() ? add(acc, value) : value;
}

}  // namespace

template <typename T>
matching::MatchAssignment match_rows(const Tensor<T>& cls_logits, const Tensor<T>& boxes, int first, int count,
                                     const std::vector<geometry::LabeledBox>& gts,
                                     const matching::CostWeights& weights) {
  if (gts.empty()) return {};
  const auto classes = int(cls_logits.dim(1));
  const auto logits = cls_logits.data();
  const auto b = boxes.data();
  std::vector<matching::QueryPrediction> preds(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const auto row = std::size_t(first + k);
    auto& p = preds[std::size_t(k)];
    for (int c = 0; c < classes; ++c)
      p.class_probs.push_back(1.0 / (1.0 + std::exp(-double(logits[row * std::size_t(classes) + std::size_t(c)]))));
    p.box = {double(b[row * 4]), double(b[row * 4 + 1]), double(b[row * 4 + 2]), double(b[row * 4 + 3])};
    for (double v : p.class_probs)
      if (!std::isfinite(v)) throw losses::NumericalError("match_rows: non-finite class score");
    for (double v : {p.box.cx, p.box.cy, p.box.w, p.box.h})
      if (!std::isfinite(v)) throw losses::NumericalError("match_rows: non-finite box");
  }
  return matching::hungarian(matching::match_cost(preds, gts, weights));
}

template <typename T>
SampleObjective<T> sample_objective(const LnDetr<T>& model, const EncoderOutput<T>& enc, const QueryBatch<T>& q,
                                    const denoising::DnGroupSet& dn, const SampleTargets<T>& targets,
                                    const ObjectiveConfig& config) {
  const auto& gts = targets.boxes;
  if (targets.masks.size() != gts.size() && config.weights.mask > 0)
    throw std::invalid_argument("sample_objective: one mask per ground-truth box required");
  const double normalizer = std::max<double>(1.0, double(gts.size()));
  std::vector<geometry::CenterBox> gt_boxes;
  for (const auto& g : gts) gt_boxes.push_back(g.box);
  const bool with_iou = config.weights.iou > 0, with_mask = config.weights.mask > 0;

  SampleObjective<T> out;
  auto& c = out.components;
  auto supervise = [&](const Tensor<T>& logits, const Tensor<T>& boxes, const Tensor<T>& iou,
                       const matching::MatchAssignment& match) {
    std::vector<int> labels(std::size_t(logits.dim(0)), -1);
    for (auto [i, k] : match.pairs) labels[std::size_t(k)] = gts[std::size_t(i)].label;
    accumulate(c.cls, losses::classification_loss(logits, labels, normalizer, config.cls));
    if (gts.empty()) return;
    accumulate(c.box, losses::box_loss(boxes, gt_boxes, match, config.box));
    if (with_iou) accumulate(c.iou, losses::iou_pred_loss(iou, boxes, gt_boxes, match));
  };

  const auto tokens = int(enc.cls_logits.dim(0));
  supervise(enc.cls_logits, enc.boxes, enc.iou_scores,
            match_rows(enc.cls_logits, enc.boxes, 0, tokens, gts, config.cost));

  const int nd = q.num_dn, k = q.num_matching;
  for (std::size_t l = 0; l < q.layers.size(); ++l) {
    const auto& layer = q.layers[l];
    const auto match = match_rows(layer.cls_logits, layer.boxes, nd, k, gts, config.cost);
    const auto boxes = nd ? slice(layer.boxes, 0, nd, k) : layer.boxes;
    const auto iou = nd ? slice(layer.iou_scores, 0, nd, k) : layer.iou_scores;
    supervise(nd ? slice(layer.cls_logits, 0, nd, k) : layer.cls_logits, boxes, iou, match);
    if (with_mask && !gts.empty() && layer.mask_logits.defined())
      accumulate(c.mask, losses::mask_loss(layer.mask_logits, targets.masks, match, config.mask));
    if (nd > 0) {
      const auto dl = denoising::dn_losses(slice(layer.cls_logits, 0, 0, nd), slice(layer.boxes, 0, 0, nd), dn, gts,
                                           config.cls, config.box);
      accumulate(c.cls, dl.cls);
      accumulate(c.box, dl.box);
    }
    if (l + 1 != q.layers.size()) continue;

    const auto b = boxes.data();
    for (auto [i, kq] : match.pairs) {
      const auto r = std::size_t(kq) * 4;
      const geometry::CenterBox pred{double(b[r]), double(b[r + 1]), double(b[r + 2]), double(b[r + 3])};
      out.predicted_iou.push_back(double(iou.data()[std::size_t(kq)]));
      out.true_iou.push_back(
          geometry::iou_2d(geometry::to_corners(pred), geometry::to_corners(gt_boxes[std::size_t(i)])));
    }
    if (config.weights.contrastive > 0 && nd > 0) {
      const auto pairs = denoising::contrastive_pairs(match, dn, k);
      const losses::ContrastiveHead<T> head{model.contrastive_weight(), model.contrastive_bias(), config.temperature};
      c.contrastive = losses::infonce_loss(slice(layer.queries, 0, nd, k), embedding(layer.queries, pairs.anchors),
                                           pairs.positives, head, config.mean_contrastive);
    }
  }
  return out;
}

#define LNDETR_INSTANTIATE_OBJECTIVE(T)                                                                       \
  template matching::MatchAssignment match_rows(const Tensor<T>&, const Tensor<T>&, int, int,                  \
                                                const std::vector<geometry::LabeledBox>&,                      \
                                                const matching::CostWeights&);                                 \
  template SampleObjective<T> sample_objective(const LnDetr<T>&, const EncoderOutput<T>&, const QueryBatch<T>&, \
                                               const denoising::DnGroupSet&, const SampleTargets<T>&,          \
                                               const ObjectiveConfig&);

LNDETR_INSTANTIATE_OBJECTIVE(float)
LNDETR_INSTANTIATE_OBJECTIVE(double)

}  // namespace lndetr::model
