#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/loss_cases.hpp"

using namespace lndetr::losses;
using lndetr::geometry::CenterBox;
using lndetr::matching::MatchAssignment;
using lndetr::numcore::Tensor;

namespace {

MatchAssignment single_match(int gt, int query) {
  MatchAssignment m;
  m.pairs = {{gt, query}};
  return m;
}

Tensor<double> identity(int d) {
  std::vector<double> v(std::size_t(d * d), 0.0);
  for (int i = 0; i < d; ++i) v[std::size_t(i * d + i)] = 1;
  return Tensor<double>::from({d, d}, v);
}

ContrastiveHead<double> identity_head(int d, double tau) {
  return {identity(d), Tensor<double>::zeros({d}), tau};
}

// Straightforward loop version of the sigmoid focal loss.
double focal_reference(const std::vector<double>& logits, int classes, const std::vector<int>& targets,
                       double normalizer) {
  double total = 0;
  for (std::size_t q = 0; q < targets.size(); ++q)
    for (int c = 0; c < classes; ++c) {
      const double p = 1 / (1 + std::exp(-logits[q * std::size_t(classes) + std::size_t(c)]));
      if (targets[q] == c)
        total += -0.25 * (1 - p) * (1 - p) * std::log(p);
      else
        total += -0.75 * p * p * std::log(1 - p);
    }
  return total / normalizer;
}

}  // namespace

TEST_CASE("focal loss at p = 0.5") {
  auto l = classification_loss(Tensor<double>::from({1, 1}, {0.0}), {0}, 1.0);
  CHECK(l.item() == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(l.item() == doctest::Approx(0.043322).epsilon(1e-5));
}

TEST_CASE("focal loss vanishes for confident correct logits") {
  auto l = classification_loss(Tensor<double>::from({2, 2}, {30, -30, -30, -30}), {0, -1}, 1.0);
  CHECK(l.item() < 1e-12);
}

TEST_CASE("focal loss matches a loop implementation") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-4, 4);
  std::uniform_int_distribution<int> t(-1, 2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> logits(7 * 3);
    for (auto& v : logits) v = u(rng);
    std::vector<int> targets(7);
    for (auto& v : targets) v = t(rng);
    const auto l = classification_loss(Tensor<double>::from({7, 3}, logits), targets, 2.5);
    CHECK(l.item() == doctest::Approx(focal_reference(logits, 3, targets, 2.5)).epsilon(1e-12));
  }
}

TEST_CASE("no queries yields zero and a warning") {
  Warnings w;
  auto l = classification_loss(Tensor<double>::zeros({0, 1}), {}, 1.0, {}, &w);
  CHECK(l.item() == 0.0);
  CHECK(w.size() == 1);
}

TEST_CASE("box loss examples") {
  const std::vector<CenterBox> gts{{0.5, 0.5, 0.5, 0.5}};
  auto exact = Tensor<double>::from({1, 4}, {0.5, 0.5, 0.5, 0.5});
  CHECK(box_loss(exact, gts, single_match(0, 0)).item() == doctest::Approx(0.0));
  // L1 gap 0.1, nested boxes with GIoU = IoU = 0.8.
  auto pred = Tensor<double>::from({2, 4}, {0.1, 0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 0.4});
  CHECK(box_loss(pred, gts, single_match(0, 1)).item() == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(box_loss(pred, gts, MatchAssignment{}).item() == 0.0);
}

TEST_CASE("giou rows agree with the geometry module") {
  std::mt19937_64 rng(8);
  auto a = lndetr::testing::random_boxes(30, rng), b = lndetr::testing::random_boxes(30, rng);
  auto g = giou_rows(a, b);
  for (int i = 0; i < 30; ++i) {
    auto box = [](const Tensor<double>& t, int r) {
      return lndetr::geometry::to_corners({t.at(r * 4), t.at(r * 4 + 1), t.at(r * 4 + 2), t.at(r * 4 + 3)});
    };
    CHECK(g.at(i) == doctest::Approx(lndetr::geometry::giou_2d(box(a, i), box(b, i))).epsilon(1e-12));
  }
}

TEST_CASE("mask loss components") {
  auto hard = Tensor<double>::from({1, 4}, {40, -40, 40, -40});
  auto target = Tensor<double>::from({1, 4}, {1, 0, 1, 0});
  CHECK(dice_loss(hard, target).item() < 1e-12);
  auto half = Tensor<double>::zeros({1, 4});
  CHECK(bce_loss(half, target).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto logits = Tensor<double>::from({2, 3}, {0.3, -1.2, 2.0, 9, 9, 9});
  const std::vector<std::vector<double>> gt{{1, 0, 1}};
  const double p[3] = {1 / (1 + std::exp(-0.3)), 1 / (1 + std::exp(1.2)), 1 / (1 + std::exp(-2.0))};
  const double dice = 1 - (2 * (p[0] + p[2]) + 1) / (p[0] + p[1] + p[2] + 2 + 1);
  const double bce = -(std::log(p[0]) + std::log(1 - p[1]) + std::log(p[2])) / 3;
  CHECK(mask_loss(logits, gt, single_match(0, 0)).item() == doctest::Approx(5 * dice + 5 * bce).epsilon(1e-12));
}

TEST_CASE("iou prediction loss") {
  auto scores = Tensor<double>::from({2}, {0.7, 0.1});
  CHECK(std::abs(squared_iou_error(scores, {0}, {0.5}).item() - 0.04) < 1e-12);
  CHECK(squared_iou_error(Tensor<double>::from({1}, {0.5}), {0}, {0.5}).item() == 0.0);
}

TEST_CASE("unmatched queries get no iou-head gradient") {
  lndetr::numcore::Graph<double> graph;
  lndetr::numcore::GraphScope<double> scope(graph);
  auto logits = Tensor<double>::from({3, 1}, {0.2, -0.4, 1.0}, true);
  auto boxes = Tensor<double>::from({3, 4}, {0.5, 0.5, 0.2, 0.2, 0.4, 0.4, 0.3, 0.3, 0.1, 0.1, 0.1, 0.1});
  auto l = iou_pred_loss(lndetr::numcore::sigmoid(logits), boxes, {{0.45, 0.45, 0.3, 0.3}}, single_match(0, 1));
  graph.backward(l);
  CHECK(logits.grad()[0] == 0.0);
  CHECK(logits.grad()[1] != 0.0);
  CHECK(logits.grad()[2] == 0.0);
}

TEST_CASE("infonce analytic cases") {
  // All projections coincide: every term is ln K.
  auto same = Tensor<double>::from({4, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
  auto anchor = Tensor<double>::from({1, 2}, {1, 1});
  CHECK(std::abs(infonce_loss(same, anchor, {0}, identity_head(2, 0.05)).item() - std::log(4.0)) < 1e-9);
  auto anchors = Tensor<double>::from({3, 2}, {1, 1, 2, 2, 3, 3});
  CHECK(std::abs(infonce_loss(same, anchors, {0, 3, 1}, identity_head(2, 0.05)).item() - 3 * std::log(4.0)) < 1e-9);

  // Saturated: positive cosine 1, negatives -1.
  auto sat = Tensor<double>::from({3, 2}, {-1, 0, 1, 0, -1, 0});
  CHECK(infonce_loss(sat, Tensor<double>::from({1, 2}, {1, 0}), {1}, identity_head(2, 0.05)).item() < 1e-12);

  // Cosines 0.8 (positive), 0.2, 0.1 against anchor e1, tau = 1.
  auto q = Tensor<double>::from({3, 2}, {0.8, 0.6, 0.2, std::sqrt(1 - 0.04), 0.1, std::sqrt(1 - 0.01)});
  const double expected = -std::log(std::exp(0.8) / (std::exp(0.8) + std::exp(0.2) + std::exp(0.1)));
  const double v = infonce_loss(q, Tensor<double>::from({1, 2}, {1, 0}), {0}, identity_head(2, 1.0)).item();
  CHECK(v == doctest::Approx(expected).epsilon(1e-12));
  CHECK(std::abs(v - 0.7155918732927512) < 1e-12);

  CHECK(infonce_loss(q, Tensor<double>::zeros({0, 2}), {}, identity_head(2, 1.0)).item() == 0.0);
}

TEST_CASE("infonce properties") {
  std::mt19937_64 rng(12);
  auto q = lndetr::testing::random_tensor({5, 3}, rng);
  auto a = lndetr::testing::random_tensor({2, 3}, rng);
  auto w = lndetr::testing::random_tensor({3, 3}, rng);
  ContrastiveHead<double> head{w, Tensor<double>::zeros({3}), 0.05};
  const double base = infonce_loss(q, a, {1, 3}, head).item();
  CHECK(base >= 0);
  // Rescaling one query's embedding leaves cosines and the loss unchanged.
  auto scaled = q.clone();
  for (int c = 0; c < 3; ++c) scaled.mutable_data()[std::size_t(3 + c)] *= 7.5;
  CHECK(infonce_loss(scaled, a, {1, 3}, head).item() == doctest::Approx(base).epsilon(1e-10));
  // Mean reduction divides by the anchor count.
  CHECK(infonce_loss(q, a, {1, 3}, head, true).item() == doctest::Approx(base / 2).epsilon(1e-12));
  // Raising the positive similarity lowers the loss.
  auto eye_head = identity_head(2, 0.5);
  auto anchor = Tensor<double>::from({1, 2}, {1, 0});
  double previous = 1e9;
  for (double angle : {1.2, 0.9, 0.6, 0.3, 0.0}) {
    auto qs = Tensor<double>::from({3, 2}, {std::cos(angle), std::sin(angle), 0.1, 1.0, -0.3, 1.0});
    const double l = infonce_loss(qs, anchor, {0}, eye_head).item();
    CHECK(l < previous);
    previous = l;
  }
}

TEST_CASE("total loss is the weighted sum") {
  LossComponents<double> c{Tensor<double>::scalar(1), Tensor<double>::scalar(1), Tensor<double>::scalar(1),
                           Tensor<double>::scalar(1), Tensor<double>::scalar(1)};
  CHECK(total_loss(c, LossWeights{}).item() == doctest::Approx(4 + 1 + 1 + 10 + 1));
  LossComponents<double> z{Tensor<double>::scalar(0), Tensor<double>::scalar(0), {}, {}, {}};
  CHECK(total_loss(z, LossWeights{}).item() == 0.0);
  LossComponents<double> lin{Tensor<double>::scalar(0.3), Tensor<double>::scalar(2), {}, Tensor<double>::scalar(0.5), {}};
  LossWeights w{2, 3, 5, 7, 11};
  CHECK(total_loss(lin, w).item() == doctest::Approx(0.6 + 6 + 3.5));
  LossComponents<double> bad{Tensor<double>::scalar(std::nan("")), {}, {}, {}, {}};
  CHECK_THROWS_AS(total_loss(bad, LossWeights{}), NumericalError);
}

TEST_CASE("every loss passes gradcheck") {
  std::mt19937_64 rng(21);
  for (const auto& c : lndetr::testing::loss_cases()) {
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial)
      worst = std::max(worst, lndetr::testing::gradcheck(c.fn, c.make_inputs(rng), rng));
    INFO(c.name << " worst " << worst);
    CHECK(worst < 1e-4);
  }
}
