#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "../support/evald_fixtures.hpp"

using namespace lndetr::evald;
using namespace lndetr::testing;
using lndetr::geometry::Box2D;
using lndetr::geometry::Detection3D;

TEST_CASE("single detection inside an 8 mm node is a hit") {
  GtVolume gt{"v", kSpacing, {gt_box(box3(0, 0, 0, 10, 20, 3), 8.0)}};
  auto m = match_detections({{box3(2, 2, 1, 8, 8, 2), 0.9}}, gt);
  REQUIRE(m.outcomes.size() == 1);
  CHECK(m.outcomes[0] == Outcome::TruePositive);
  auto r = froc({m});
  for (double v : r.recalls) CHECK(v == 1.0);
}

TEST_CASE("detections on small nodes are ignored") {
  GtVolume gt{"v", kSpacing, {gt_box(box3(0, 0, 0, 5, 5, 3), 4.0), gt_box(box3(30, 30, 0, 45, 45, 3), 12.0)}};
  auto m = match_detections({{box3(1, 1, 1, 4, 4, 2), 0.9}}, gt);
  CHECK(m.outcomes[0] == Outcome::Ignored);
  CHECK(m.eligible_count() == 1);
  auto r = froc({m});
  CHECK(r.points.back().fps == 0.0);
  CHECK(r.recalls[3] == 0.0);
}

TEST_CASE("a second detection on a hit node is a false positive") {
  GtVolume gt{"v", kSpacing, {gt_box(box3(0, 0, 0, 10, 10, 3), 8.0)}};
  auto m = match_detections({{box3(1, 1, 0, 9, 9, 3), 0.6}, {box3(0, 0, 0, 10, 10, 3), 0.8}}, gt);
  CHECK(m.scores[0] == 0.8);
  CHECK(m.outcomes[0] == Outcome::TruePositive);
  CHECK(m.outcomes[1] == Outcome::FalsePositive);
}

TEST_CASE("a detection claims the unhit node with the highest iobb") {
  GtVolume gt{"v", kSpacing, {gt_box(box3(0, 0, 0, 10, 10, 3), 8.0), gt_box(box3(0, 0, 0, 20, 20, 3), 16.0)}};
  auto m = match_detections({{box3(2, 2, 0, 14, 14, 3), 0.9}}, gt);
  CHECK(m.matched_gt[0] == 1);
  CHECK_THROWS_AS(match_detections({{{0, 0, 0, 1, 1, 1, {1, 1, 1}}, 0.5}}, gt), EvalError);
}

TEST_CASE("crafted two-volume fixture") {
  const auto f = crafted_two_volume();
  auto r = evaluate(f.preds, f.gts);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.recalls[i] == kCraftedRecalls[i]);
  REQUIRE(r.ap.has_value());
  CHECK(*r.ap == doctest::Approx(kCraftedAp).epsilon(1e-15));
  const auto matches = match_all(f.preds, f.gts);
  for (std::size_t i = 0; i < 4; ++i) CHECK(brute_force_recall(matches, kFpRates[i]) == r.recalls[i]);
}

TEST_CASE("duplicating every volume leaves the curve unchanged") {
  auto f = crafted_two_volume();
  auto base = evaluate(f.preds, f.gts, {}, false);
  auto g = f;
  for (auto v : f.gts) {
    v.id += "_copy";
    g.gts.push_back(v);
  }
  for (auto p : f.preds) {
    p.id += "_copy";
    g.preds.push_back(p);
  }
  auto doubled = evaluate(g.preds, g.gts, {}, false);
  CHECK(doubled.recalls == base.recalls);
  REQUIRE(doubled.points.size() == base.points.size());
  for (std::size_t i = 0; i < base.points.size(); ++i) {
    CHECK(doubled.points[i].fps == base.points[i].fps);
    CHECK(doubled.points[i].recall == base.points[i].recall);
  }
}

TEST_CASE("froc rejects missing eligible ground truth") {
  GtVolume gt{"v", kSpacing, {gt_box(box3(0, 0, 0, 5, 5, 3), 4.0)}};
  CHECK_THROWS_AS(froc({match_detections({}, gt)}), EvalError);
  CHECK_THROWS_AS(evaluate({{"other", {}}}, {GtVolume{"v", kSpacing, {gt_box(box3(0, 0, 0, 9, 9, 3), 7.2)}}}),
                  EvalError);
}

TEST_CASE("ap of perfect and empty detectors") {
  const auto f = crafted_two_volume();
  std::vector<PredVolume> perfect;
  for (const auto& g : f.gts) {
    PredVolume p{g.id, {}};
    for (const auto& b : g.boxes) p.detections.push_back({b.box, 0.9});
    perfect.push_back(p);
  }
  CHECK(ap_3d(perfect, f.gts) == 1.0);
  CHECK(ap_3d({}, f.gts) == 0.0);
}

TEST_CASE("subgroup rules on a mixed case") {
  GtVolume gt{"v", kSpacing,
              {gt_box(box3(0, 0, 0, 15, 15, 3), 12.0), gt_box(box3(20, 0, 0, 30, 10, 3), 8.0),
               gt_box(box3(40, 0, 0, 47.5, 7.5, 3), 6.0), gt_box(box3(0, 40, 0, 5, 45, 3), 4.0)}};
  // Hits on the 12, 8 and 4 mm nodes, plus one FP; the 6 mm node is missed.
  PredVolume p{"v",
               {{box3(1, 1, 0, 14, 14, 3), 0.9},
                {box3(21, 1, 0, 29, 9, 3), 0.8},
                {box3(1, 41, 0, 4, 44, 3), 0.7},
                {box3(55, 55, 0, 60, 60, 3), 0.6}}};
  auto r5 = subgroup_froc({p}, {gt}, 5);
  CHECK(r5.eligible_gts == 3);
  CHECK(r5.recalls[1] == 2.0 / 3);  // 1 FP per volume is not below 1
  CHECK(r5.recalls[2] == 2.0 / 3);
  auto r7 = subgroup_froc({p}, {gt}, 7);
  CHECK(r7.eligible_gts == 2);
  CHECK(r7.recalls[2] == 1.0);
  auto r10 = subgroup_froc({p}, {gt}, 10);
  CHECK(r10.eligible_gts == 1);
  CHECK(r10.recalls[0] == 1.0);
  const auto m10 = match_all({p}, {gt}, MatchParams{0.3, 10});
  CHECK(m10[0].outcomes[1] == Outcome::Ignored);
  // All GTs above threshold: subgroup equals the plain curve.
  auto f = crafted_two_volume();
  CHECK(subgroup_froc(f.preds, f.gts, 5).recalls == evaluate(f.preds, f.gts).recalls);
}

TEST_CASE("per-image mode") {
  GtImage img{"s0", kSpacing, {Box2D{7.1, 0, 20, 20}}};
  PredImage miss{"s0", {{Box2D{0, 0, 10, 10}, 0.9, 0.9, 1.0, 0}}};
  auto r = froc_per_image({miss}, {img});
  CHECK(r.recalls[3] == 0.0);
  CHECK(r.points[0].fps == 1.0);
  // Mirror of the crafted volume fixture on three images.
  std::vector<GtImage> gts{{"i0", kSpacing, {Box2D{10, 10, 22, 22}, Box2D{40, 40, 52, 52}}},
                           {"i1", kSpacing, {Box2D{20, 30, 34, 44}}}};
  std::vector<PredImage> preds{{"i0",
                                {{Box2D{10, 10, 22, 22}, 0.9, 0, 1, 0},
                                 {Box2D{0, 50, 6, 58}, 0.8, 0, 1, 0},
                                 {Box2D{55, 0, 60, 5}, 0.5, 0, 1, 0}}},
                               {"i1", {{Box2D{20, 30, 34, 44}, 0.7, 0, 1, 0}, {Box2D{50, 2, 58, 9}, 0.6, 0, 1, 0}}}};
  auto p = froc_per_image(preds, gts);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.recalls[i] == kCraftedRecalls[i]);
}

TEST_CASE("random scenarios agree with the brute-force sweep") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> pos(0, 50), size(4, 14), score(0, 1);
  std::uniform_int_distribution<int> count(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<GtVolume> gts;
    std::vector<PredVolume> preds;
    for (int v = 0; v < 3; ++v) {
      GtVolume g{"v" + std::to_string(v), kSpacing, {}};
      PredVolume p{g.id, {}};
      const int n = count(rng) + (v == 0);
      for (int i = 0; i < n; ++i) {
        const double x = pos(rng), y = pos(rng), s = size(rng);
        g.boxes.push_back(gt_box(box3(x, y, 2, x + s, y + s, 6), s * 0.8));
        if (score(rng) < 0.7) {
          const double j = size(rng) / 4;
          p.detections.push_back({box3(x + j, y, 2, x + s + j, y + s, 6), 0.1 + std::round(score(rng) * 9) / 10});
        }
      }
      for (int i = count(rng); i > 0; --i) {
        const double x = pos(rng), y = pos(rng);
        p.detections.push_back({box3(x, y, 0, x + size(rng), y + size(rng), 3), 0.1 + std::round(score(rng) * 9) / 10});
      }
      gts.push_back(g);
      preds.push_back(p);
    }
    const auto matches = match_all(preds, gts);
    int eligible = 0;
    for (const auto& m : matches) eligible += m.eligible_count();
    if (eligible == 0) continue;
    const auto r = froc(matches);
    double previous = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(r.recalls[i] == brute_force_recall(matches, kFpRates[i]));
      CHECK(r.recalls[i] >= previous);
      previous = r.recalls[i];
    }
    // A zero-score detection never changes recalls.
    auto extra = preds;
    extra[0].detections.push_back({box3(60, 60, 0, 63, 63, 1), 0.0});
    CHECK(froc(match_all(extra, gts)).recalls == r.recalls);
  }
}

TEST_CASE("text formats round trip") {
  const auto f = crafted_two_volume();
  const auto dir = std::filesystem::temp_directory_path() / "lndetr_evald_io";
  std::filesystem::create_directories(dir);
  const auto gt_path = (dir / "gt.txt").string(), pred_path = (dir / "pred.txt").string();
  auto gts = f.gts;
  gts.push_back({"empty", kSpacing, {}});
  write_ground_truth(gt_path, gts);
  write_predictions(pred_path, f.preds);
  const auto gts2 = read_ground_truth(gt_path);
  const auto preds2 = attach_spacing(read_predictions(pred_path), gts2);
  REQUIRE(gts2.size() == 3);
  CHECK(gts2[2].boxes.empty());
  CHECK(gts2[0].boxes[1].box == gts[0].boxes[1].box);
  CHECK(preds2[1].detections[1].box == f.preds[1].detections[1].box);
  CHECK(evaluate(preds2, gts2).recalls == evaluate(f.preds, gts).recalls);
  {
    std::ofstream bad(pred_path);
    bad << "# lndetr-pred v1\ndet a 1 2 3\n";
  }
  CHECK_THROWS_AS(read_predictions(pred_path), EvalError);
  CHECK_THROWS_AS(read_ground_truth((dir / "missing.txt").string()), EvalError);
  std::filesystem::remove_all(dir);
}
