#pragma once

#include <vector>

#include "lndetr/losses/losses.hpp"
#include "op_cases.hpp"

// One gradcheck case per loss. Matches and targets are fixed per case so
// the finite-difference side sees the same discrete decisions.
namespace lndetr::testing {

inline Tensor<double> random_boxes(std::int64_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.2, 0.8), size(0.1, 0.4);
  std::vector<double> v;
  for (std::int64_t i = 0; i < k; ++i) {
    v.push_back(pos(rng));
    v.push_back(pos(rng));
    v.push_back(size(rng));
    v.push_back(size(rng));
  }
  return Tensor<double>::from({k, 4}, std::move(v));
}

inline std::vector<OpCase> loss_cases() {
  namespace ls = losses;
  namespace nc = numcore;
  using V = std::vector<Tensor<double>>;
  std::vector<OpCase> cases;

  const std::vector<geometry::CenterBox> gts{{0.45, 0.5, 0.3, 0.25}, {0.6, 0.4, 0.2, 0.3}};
  matching::MatchAssignment matches;
  matches.pairs = {{0, 2}, {1, 0}};
  // IoU targets depend on box values, so the IoU cases use fixed boxes.
  const auto fixed_boxes = Tensor<double>::from(
      {4, 4}, {0.6, 0.4, 0.25, 0.2, 0.3, 0.3, 0.1, 0.1, 0.5, 0.45, 0.2, 0.3, 0.7, 0.7, 0.2, 0.2});

  cases.push_back({"classification_focal",
                   [](auto& r) { return V{random_tensor({5, 2}, r, -3, 3)}; },
                   [](const V& in) { return ls::classification_loss(in[0], {1, -1, 0, -1, 1}, 3.0); }});
  cases.push_back({"classification_ce",
                   [](auto& r) { return V{random_tensor({4, 3}, r, -3, 3)}; },
                   [](const V& in) {
                     ls::ClassificationParams p;
                     p.focal = false;
                     return ls::classification_loss(in[0], {2, -1, 0, -1}, 2.0, p);
                   }});
  cases.push_back({"box", [](auto& r) { return V{random_boxes(4, r)}; },
                   [gts, matches](const V& in) { return ls::box_loss(in[0], gts, matches); }});
  cases.push_back({"mask",
                   [](auto& r) { return V{random_tensor({4, 6}, r, -2, 2)}; },
                   [matches](const V& in) {
                     const std::vector<std::vector<double>> m{{1, 1, 0, 0, 1, 0}, {0, 1, 1, 1, 0, 0}};
                     return ls::mask_loss(in[0], m, matches);
                   }});
  cases.push_back({"iou_prediction",
                   [](auto& r) { return V{random_tensor({4, 1}, r, -2, 2)}; },
                   [gts, matches, fixed_boxes](const V& in) {
                     return ls::iou_pred_loss(nc::sigmoid(in[0]), fixed_boxes, gts, matches);
                   }});
  cases.push_back({"infonce",
                   [](auto& r) {
                     return V{random_tensor({5, 4}, r), random_tensor({3, 4}, r), random_tensor({4, 4}, r),
                              random_tensor({4}, r)};
                   },
                   [](const V& in) {
                     ls::ContrastiveHead<double> head{in[2], in[3], 0.5};
                     return ls::infonce_loss(in[0], in[1], {2, 0, 2}, head);
                   }});
  cases.push_back({"total",
                   [](auto& r) {
                     return V{random_tensor({4, 1}, r, -3, 3), random_boxes(4, r), random_tensor({4, 6}, r),
                              random_tensor({4, 1}, r), random_tensor({4, 4}, r), random_tensor({2, 4}, r)};
                   },
                   [gts, matches, fixed_boxes](const V& in) {
                     ls::LossComponents<double> c;
                     c.cls = ls::classification_loss(in[0], {0, -1, 0, -1}, 2.0);
                     c.box = ls::box_loss(in[1], gts, matches);
                     const std::vector<std::vector<double>> m{{1, 1, 0, 0, 1, 0}, {0, 1, 1, 1, 0, 0}};
                     c.mask = ls::mask_loss(in[2], m, matches);
                     c.iou = ls::iou_pred_loss(nc::sigmoid(in[3]), fixed_boxes, gts, matches);
                     auto eye = Tensor<double>::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
                     ls::ContrastiveHead<double> head{eye, Tensor<double>::zeros({4}), 0.2};
                     c.contrastive = ls::infonce_loss(in[4], in[5], {2, 0}, head);
                     return ls::total_loss(c, ls::LossWeights{});
                   }});
  return cases;
}

}  // namespace lndetr::testing
