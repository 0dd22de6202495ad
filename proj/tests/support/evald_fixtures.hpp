#pragma once

#include <algorithm>
#include <array>
#include <vector>

#include "lndetr/evald/evald.hpp"

namespace lndetr::testing {

inline const geometry::Spacing kSpacing{0.8, 0.8, 2.0};

inline geometry::Box3D box3(double x0, double y0, double z0, double x1, double y1, double z1) {
  return {x0, y0, z0, x1, y1, z1, kSpacing};
}

inline evald::GtBox gt_box(const geometry::Box3D& b, double short_axis_mm) {
  return {b, short_axis_mm, 0};
}

// Two volumes, three GTs (two in "a", one in "b"). Ranked detections:
// .9 TP, .8 FP, .7 TP, .6 FP, .5 FP. The second GT of "a" is never found.
struct CraftedFixture {
  std::vector<evald::GtVolume> gts;
  std::vector<evald::PredVolume> preds;
};

inline CraftedFixture crafted_two_volume() {
  CraftedFixture f;
  const auto a0 = box3(10, 10, 4, 22, 22, 8), a1 = box3(40, 40, 10, 52, 52, 14);
  const auto b0 = box3(20, 30, 6, 34, 44, 9);
  f.gts = {{"a", kSpacing, {gt_box(a0, 9.6), gt_box(a1, 9.6)}}, {"b", kSpacing, {gt_box(b0, 11.2)}}};
  f.preds = {{"a", {{a0, 0.9}, {box3(0, 50, 0, 6, 58, 2), 0.8}, {box3(55, 0, 20, 60, 5, 22), 0.5}}},
             {"b", {{b0, 0.7}, {box3(50, 2, 1, 58, 9, 3), 0.6}}}};
  return f;
}

inline const std::array<double, 4> kCraftedRecalls{1.0 / 3, 2.0 / 3, 2.0 / 3, 2.0 / 3};
// TP, FP, TP, FP, FP over 3 GTs: 1/3 * 1 + 1/3 * 2/3.
inline const double kCraftedAp = 5.0 / 9;

// Threshold sweep done from scratch at every candidate threshold.
inline double brute_force_recall(const std::vector<evald::VolumeMatch>& volumes, double fp_rate) {
  std::vector<double> thresholds;
  int eligible = 0;
  for (const auto& v : volumes) {
    thresholds.insert(thresholds.end(), v.scores.begin(), v.scores.end());
    eligible += v.eligible_count();
  }
  double best = 0;
  for (double t : thresholds) {
    int tp = 0, fp = 0;
    for (const auto& v : volumes)
      for (std::size_t d = 0; d < v.scores.size(); ++d) {
        if (v.scores[d] < t) continue;
        tp += v.outcomes[d] == evald::Outcome::TruePositive;
        fp += v.outcomes[d] == evald::Outcome::FalsePositive;
      }
    if (double(fp) / double(volumes.size()) < fp_rate) best = std::max(best, double(tp) / eligible);
  }
  return best;
}

}  // namespace lndetr::testing
