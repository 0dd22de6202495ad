#include "lndetr/losses/losses.hpp"

#include <array>
#include <cmath>

#include "lndetr/numcore/functional.hpp"

namespace lndetr::losses {

using namespace numcore;

namespace {

template <typename T>
Tensor<T> zero() {
  return Tensor<T>::scalar(T(0));
}

template <typename T>
Tensor<T> constant_boxes(const std::vector<geometry::CenterBox>& boxes) {
  std::vector<T> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes) {
    v.push_back(T(b.cx));
    v.push_back(T(b.cy));
    v.push_back(T(b.w));
    v.push_back(T(b.h));
  }
  return Tensor<T>::from({std::int64_t(boxes.size()), 4}, std::move(v));
}

template <typename T>
Tensor<T> column(const Tensor<T>& x, int c) {
  return slice(x, 1, c, 1);
}

}  // namespace

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<int>& targets,
                              double normalizer, const ClassificationParams& params,
                              Warnings* warnings) {
  if (logits.rank() != 2) throw ShapeError("classification_loss: logits must be [K,C], got " + to_string(logits.shape()));
  const auto k = logits.dim(0), c = logits.dim(1);
  if (std::int64_t(targets.size()) != k)
    throw ShapeError("classification_loss: " + std::to_string(targets.size()) + " targets for logits " +
                     to_string(logits.shape()));
  if (k == 0) {
    if (warnings) warnings->push_back("classification_loss: no queries");
    return zero<T>();
  }
  std::vector<T> sign(std::size_t(k * c), T(-1)), alpha(std::size_t(k * c), T(1 - params.alpha));
  for (std::int64_t q = 0; q < k; ++q) {
    const int t = targets[std::size_t(q)];
    if (t < -1 || t >= c) throw std::invalid_argument("classification_loss: target out of range");
    if (t >= 0) {
      sign[std::size_t(q * c + t)] = T(1);
      alpha[std::size_t(q * c + t)] = T(params.alpha);
    }
  }
  // With z = +/-x, the target-side probability is sigmoid(z).
  const auto z = mul(logits, Tensor<T>::from(logits.shape(), std::move(sign)));
  const auto log_pt = log_sigmoid(z);
  Tensor<T> per;
  if (params.focal) {
    const auto modulator = exp(mul(log_sigmoid(neg(z)), T(params.gamma)));
    per = mul(mul(modulator, log_pt), Tensor<T>::from(logits.shape(), std::move(alpha)));
  } else {
    per = log_pt;
  }
  return mul(sum(per), T(-1.0 / normalizer));
}

template <typename T>
Tensor<T> giou_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() || a.rank() != 2 || a.dim(1) != 4) throw_shape_error("giou_rows", a.shape(), b.shape());
  auto corners = [](const Tensor<T>& x) {
    const auto cx = column(x, 0), cy = column(x, 1), hw = mul(column(x, 2), T(0.5)),
               hh = mul(column(x, 3), T(0.5));
    return std::array<Tensor<T>, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  const auto p = corners(a), g = corners(b);
  const auto iw = relu(sub(minimum(p[2], g[2]), maximum(p[0], g[0])));
  const auto ih = relu(sub(minimum(p[3], g[3]), maximum(p[1], g[1])));
  const auto inter = mul(iw, ih);
  const auto area_a = mul(column(a, 2), column(a, 3));
  const auto area_b = mul(column(b, 2), column(b, 3));
  const auto uni = sub(add(area_a, area_b), inter);
  const auto hull = mul(sub(maximum(p[2], g[2]), minimum(p[0], g[0])),
                        sub(maximum(p[3], g[3]), minimum(p[1], g[1])));
  const auto iou = div_positive(inter, uni);
  return sub(iou, div_positive(sub(hull, uni), hull));
}

template <typename T>
Tensor<T> box_loss(const Tensor<T>& boxes, const std::vector<geometry::CenterBox>& gts,
                   const matching::MatchAssignment& matches, const BoxParams& params) {
  if (matches.pairs.empty()) return zero<T>();
  std::vector<std::int64_t> rows;
  std::vector<geometry::CenterBox> targets;
  for (auto [i, k] : matches.pairs) {
    rows.push_back(k);
    targets.push_back(gts.at(std::size_t(i)));
  }
  const auto pred = embedding(boxes, rows);
  const auto gt = constant_boxes<T>(targets);
  const auto l1 = sum_last(abs(sub(pred, gt)));                          // [M]
  const auto giou = reshape(giou_rows(pred, gt), {std::int64_t(rows.size())});  // [M]
  const auto per = add(mul(l1, T(params.l1)), mul(add(neg(giou), T(1)), T(params.giou)));
  return mean(per);
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape() || logits.rank() != 2) throw_shape_error("dice_loss", logits.shape(), targets.shape());
  const auto p = sigmoid(logits);
  const auto num = add(mul(sum_last(mul(p, targets)), T(2)), T(1));
  const auto den = add(add(sum_last(p), sum_last(targets)), T(1));
  return mean(add(neg(div_positive(num, den)), T(1)));
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape() || logits.rank() != 2) throw_shape_error("bce_loss", logits.shape(), targets.shape());
  const auto pos = mul(log_sigmoid(logits), targets);
  const auto negs = mul(log_sigmoid(neg(logits)), add(neg(targets), T(1)));
  return neg(mean(add(pos, negs)));
}

template <typename T>
Tensor<T> mask_loss(const Tensor<T>& mask_logits, const std::vector<std::vector<T>>& gt_masks,
                    const matching::MatchAssignment& matches, const MaskParams& params) {
  if (matches.pairs.empty() || gt_masks.empty()) return zero<T>();
  const auto hw = mask_logits.dim(1);
  std::vector<std::int64_t> rows;
  std::vector<T> target;
  for (auto [i, k] : matches.pairs) {
    const auto& m = gt_masks.at(std::size_t(i));
    if (std::int64_t(m.size()) != hw) throw ShapeError("mask_loss: GT mask size does not match " + to_string(mask_logits.shape()));
    rows.push_back(k);
    target.insert(target.end(), m.begin(), m.end());
  }
  const auto pred = embedding(mask_logits, rows);
  const auto gt = Tensor<T>::from({std::int64_t(rows.size()), hw}, std::move(target));
  return add(mul(dice_loss(pred, gt), T(params.dice)), mul(bce_loss(pred, gt), T(params.bce)));
}

template <typename T>
Tensor<T> squared_iou_error(const Tensor<T>& scores, const std::vector<std::int64_t>& queries,
                            const std::vector<double>& targets) {
  if (queries.size() != targets.size()) throw std::invalid_argument("squared_iou_error: size mismatch");
  if (queries.empty()) return zero<T>();
  const auto column_scores = reshape(scores, {scores.numel(), 1});
  const auto picked = embedding(column_scores, queries);
  const auto n = std::int64_t(targets.size());
  const auto target = Tensor<T>::from({n, 1}, std::vector<T>(targets.begin(), targets.end()));
  return mean(square(sub(picked, target)));
}

template <typename T>
Tensor<T> iou_pred_loss(const Tensor<T>& scores, const Tensor<T>& boxes,
                        const std::vector<geometry::CenterBox>& gts,
                        const matching::MatchAssignment& matches) {
  std::vector<std::int64_t> queries;
  std::vector<double> targets;
  const auto b = boxes.data();
  for (auto [i, k] : matches.pairs) {
    const geometry::CenterBox pred{double(b[std::size_t(k * 4)]), double(b[std::size_t(k * 4 + 1)]),
                                   double(b[std::size_t(k * 4 + 2)]), double(b[std::size_t(k * 4 + 3)])};
    queries.push_back(k);
    targets.push_back(geometry::iou_2d(geometry::to_corners(pred), geometry::to_corners(gts.at(std::size_t(i)))));
  }
  return squared_iou_error(scores, queries, targets);
}

template <typename T>
Tensor<T> infonce_loss(const Tensor<T>& queries, const Tensor<T>& anchors,
                       const std::vector<std::int64_t>& positives, const ContrastiveHead<T>& head,
                       bool mean_reduction) {
  if (head.temperature <= 0) throw std::invalid_argument("infonce_loss: temperature must be positive");
  const auto p = anchors.defined() && anchors.rank() == 2 ? anchors.dim(0) : 0;
  if (std::int64_t(positives.size()) != p) throw std::invalid_argument("infonce_loss: one positive per anchor required");
  if (p == 0 || queries.dim(0) == 0) return zero<T>();
  const auto k = queries.dim(0);
  const auto zq = linear(queries, head.weight, head.bias);
  const auto za = linear(anchors, head.weight, head.bias);
  const auto logits = mul(cosine_similarity(za, zq), T(1.0 / head.temperature));  // [P,K]
  const auto log_prob = reshape(log(softmax(logits)), {p * k, 1});
  std::vector<std::int64_t> picks;
  for (std::int64_t r = 0; r < p; ++r) {
    const auto pos = positives[std::size_t(r)];
    if (pos < 0 || pos >= k) throw std::invalid_argument("infonce_loss: positive index out of range");
    picks.push_back(r * k + pos);
  }
  const auto total = neg(sum(embedding(log_prob, picks)));
  return mean_reduction ? mul(total, T(1.0 / double(p))) : total;
}

template <typename T>
Tensor<T> total_loss(const LossComponents<T>& c, const LossWeights& w) {
  const std::pair<const char*, std::pair<const Tensor<T>*, double>> parts[] = {
      {"cls", {&c.cls, w.cls}},   {"box", {&c.box, w.box}}, {"mask", {&c.mask, w.mask}},
      {"iou", {&c.iou, w.iou}},   {"contrastive", {&c.contrastive, w.contrastive}}};
  Tensor<T> total = zero<T>();
  for (const auto& [name, part] : parts) {
    const auto& [tensor, weight] = part;
    if (!tensor->defined()) continue;
    const T v = tensor->item();
    if (!std::isfinite(double(v))) throw NumericalError(std::string("total_loss: non-finite ") + name + " component");
    if (weight == 0) continue;
    total = add(total, mul(*tensor, T(weight)));
  }
  return total;
}

#define LNDETR_INSTANTIATE_LOSSES(T)                                                                \
  template Tensor<T> classification_loss(const Tensor<T>&, const std::vector<int>&, double,         \
                                         const ClassificationParams&, Warnings*);                   \
  template Tensor<T> giou_rows(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> box_loss(const Tensor<T>&, const std::vector<geometry::CenterBox>&,            \
                              const matching::MatchAssignment&, const BoxParams&);                  \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> bce_loss(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mask_loss(const Tensor<T>&, const std::vector<std::vector<T>>&,                \
                               const matching::MatchAssignment&, const MaskParams&);                \
  template Tensor<T> squared_iou_error(const Tensor<T>&, const std::vector<std::int64_t>&,          \
                                       const std::vector<double>&);                                 \
  template Tensor<T> iou_pred_loss(const Tensor<T>&, const Tensor<T>&,                              \
                                   const std::vector<geometry::CenterBox>&,                         \
                                   const matching::MatchAssignment&);                               \
  template Tensor<T> infonce_loss(const Tensor<T>&, const Tensor<T>&,                               \
                                  const std::vector<std::int64_t>&, const ContrastiveHead<T>&, bool); \
  template Tensor<T> total_loss(const LossComponents<T>&, const LossWeights&);

LNDETR_INSTANTIATE_LOSSES(float)
LNDETR_INSTANTIATE_LOSSES(double)

}  // namespace lndetr::losses
