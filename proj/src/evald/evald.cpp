#include "lndetr/evald/evald.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

namespace lndetr::evald {

using geometry::Detection3D;

int VolumeMatch::eligible_count() const {
  return int(std::count(gt_eligible.begin(), gt_eligible.end(), true));
}

namespace {

// Greedy matching shared by every mode. Detections are already in rank
// order; overlap(d, g) is the hit measure.
VolumeMatch match_core(const std::vector<double>& scores, int num_gts,
                       const std::function<double(int, int)>& overlap,
                       const std::vector<bool>& eligible, double threshold) {
  VolumeMatch m;
  m.scores = scores;
  m.gt_hit.assign(std::size_t(num_gts), false);
  m.gt_eligible = eligible;
  for (int d = 0; d < int(scores.size()); ++d) {
    int best = -1;
    double best_overlap = -1;
    bool touches_ignored = false;
    for (int g = 0; g < num_gts; ++g) {
      const double o = overlap(d, g);
      if (o < threshold) continue;
      if (!eligible[std::size_t(g)]) {
        touches_ignored = true;
        continue;
      }
      if (m.gt_hit[std::size_t(g)]) continue;
      if (o > best_overlap) {
        best_overlap = o;
        best = g;
      }
    }
    if (best >= 0) {
      m.gt_hit[std::size_t(best)] = true;
      m.outcomes.push_back(Outcome::TruePositive);
      m.matched_gt.push_back(best);
    } else {
      m.outcomes.push_back(touches_ignored ? Outcome::Ignored : Outcome::FalsePositive);
      m.matched_gt.push_back(-1);
    }
  }
  return m;
}

std::vector<Detection3D> ranked(std::vector<Detection3D> dets) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection3D& a, const Detection3D& b) { return a.score > b.score; });
  return dets;
}

std::vector<bool> eligibility(const GtVolume& gt, double min_size_mm) {
  std::vector<bool> e;
  for (const auto& b : gt.boxes) e.push_back(b.short_axis_mm >= min_size_mm);
  return e;
}

void check_spacing(const std::vector<Detection3D>& dets, const GtVolume& gt) {
  for (const auto& d : dets)
    if (!(d.box.spacing == gt.spacing)) throw EvalError("match_detections: spacing mismatch in volume " + gt.id);
  for (const auto& b : gt.boxes)
    if (!(b.box.spacing == gt.spacing)) throw EvalError("match_detections: GT spacing mismatch in volume " + gt.id);
}

}  // namespace

VolumeMatch match_detections(std::vector<Detection3D> detections, const GtVolume& gt,
                             const MatchParams& params) {
  check_spacing(detections, gt);
  const auto dets = ranked(std::move(detections));
  std::vector<double> scores;
  for (const auto& d : dets) scores.push_back(d.score);
  return match_core(
      scores, int(gt.boxes.size()),
      [&](int d, int g) { return geometry::iobb_3d(dets[std::size_t(d)].box, gt.boxes[std::size_t(g)].box); },
      eligibility(gt, params.min_size_mm), params.iobb_threshold);
}

std::vector<PredVolume> attach_spacing(std::vector<PredVolume> preds, const std::vector<GtVolume>& gts) {
  std::map<std::string, geometry::Spacing> spacing;
  for (const auto& g : gts) spacing[g.id] = g.spacing;
  for (auto& p : preds) {
    auto it = spacing.find(p.id);
    if (it == spacing.end()) continue;
    for (auto& d : p.detections) d.box.spacing = it->second;
  }
  return preds;
}

double recall_at(const std::vector<OperatingPoint>& points, double fp_rate) {
  double r = 0;
  for (const auto& p : points)
    if (p.fps < fp_rate) r = std::max(r, p.recall);
  return r;
}

FrocResult froc(const std::vector<VolumeMatch>& volumes) {
  FrocResult result;
  result.volumes = int(volumes.size());
  for (const auto& v : volumes) result.eligible_gts += v.eligible_count();
  if (result.volumes == 0 || result.eligible_gts == 0)
    throw EvalError("froc: no eligible ground-truth boxes to measure recall against");
  struct Entry {
    double score;
    Outcome outcome;
  };
  std::vector<Entry> all;
  for (const auto& v : volumes)
    for (std::size_t d = 0; d < v.scores.size(); ++d) all.push_back({v.scores[d], v.outcomes[d]});
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double t = all[i].score;
    for (; i < all.size() && all[i].score == t; ++i) {
      tp += all[i].outcome == Outcome::TruePositive;
      fp += all[i].outcome == Outcome::FalsePositive;
    }
    result.points.push_back({t, double(fp) / result.volumes, double(tp) / result.eligible_gts});
  }
  double total = 0;
  for (std::size_t i = 0; i < kFpRates.size(); ++i) {
    result.recalls[i] = recall_at(result.points, kFpRates[i]);
    total += result.recalls[i];
  }
  result.average_recall = total / double(kFpRates.size());
  return result;
}

std::vector<VolumeMatch> match_all(const std::vector<PredVolume>& preds, const std::vector<GtVolume>& gts,
                                   const MatchParams& params) {
  std::map<std::string, const PredVolume*> by_id;
  for (const auto& p : preds) {
    if (by_id.count(p.id)) throw EvalError("duplicate prediction volume id " + p.id);
    by_id[p.id] = &p;
  }
  std::vector<VolumeMatch> out;
  std::size_t used = 0;
  for (const auto& g : gts) {
    auto it = by_id.find(g.id);
    if (it == by_id.end()) {
      out.push_back(match_detections({}, g, params));
    } else {
      ++used;
      out.push_back(match_detections(it->second->detections, g, params));
    }
  }
  if (used != by_id.size()) throw EvalError("predictions reference volumes absent from the ground truth");
  return out;
}

FrocResult evaluate(const std::vector<PredVolume>& preds, const std::vector<GtVolume>& gts,
                    const MatchParams& params, bool with_ap) {
  auto result = froc(match_all(preds, gts, params));
  if (with_ap) result.ap = ap_3d(preds, gts, 0.1, params.min_size_mm);
  return result;
}

FrocResult subgroup_froc(const std::vector<PredVolume>& preds, const std::vector<GtVolume>& gts,
                         double min_axis_mm, double iobb_threshold) {
  return froc(match_all(preds, gts, MatchParams{iobb_threshold, min_axis_mm}));
}

double ap_3d(const std::vector<PredVolume>& preds, const std::vector<GtVolume>& gts, double iou_threshold,
             double min_size_mm) {
  std::map<std::string, const PredVolume*> by_id;
  for (const auto& p : preds) by_id[p.id] = &p;
  struct Entry {
    double score;
    Outcome outcome;
  };
  std::vector<Entry> all;
  int eligible = 0;
  for (const auto& g : gts) {
    const auto elig = eligibility(g, min_size_mm);
    eligible += int(std::count(elig.begin(), elig.end(), true));
    auto it = by_id.find(g.id);
    if (it == by_id.end()) continue;
    check_spacing(it->second->detections, g);
    const auto dets = ranked(it->second->detections);
    std::vector<double> scores;
    for (const auto& d : dets) scores.push_back(d.score);
    const auto m = match_core(
        scores, int(g.boxes.size()),
        [&](int d, int b) { return geometry::iou_3d(dets[std::size_t(d)].box, g.boxes[std::size_t(b)].box); },
        elig, iou_threshold);
    for (std::size_t d = 0; d < scores.size(); ++d) all.push_back({scores[d], m.outcomes[d]});
  }
  if (eligible == 0) throw EvalError("ap_3d: no eligible ground-truth boxes");
  std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const auto& e : all) {
    if (e.outcome == Outcome::Ignored) continue;
    tp += e.outcome == Outcome::TruePositive;
    fp += e.outcome == Outcome::FalsePositive;
    precision.push_back(double(tp) / (tp + fp));
    recall.push_back(double(tp) / eligible);
  }
  for (int i = int(precision.size()) - 2; i >= 0; --i)
    precision[std::size_t(i)] = std::max(precision[std::size_t(i)], precision[std::size_t(i) + 1]);
  double ap = 0, previous = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - previous) * precision[i];
    previous = recall[i];
  }
  return ap;
}

FrocResult froc_per_image(const std::vector<PredImage>& preds, const std::vector<GtImage>& gts,
                          const MatchParams& params) {
  std::map<std::string, const PredImage*> by_id;
  for (const auto& p : preds) by_id[p.id] = &p;
  std::vector<VolumeMatch> matches;
  for (const auto& g : gts) {
    std::vector<geometry::Detection2D> dets;
    if (auto it = by_id.find(g.id); it != by_id.end()) dets = it->second->detections;
    std::stable_sort(dets.begin(), dets.end(),
                     [](const geometry::Detection2D& a, const geometry::Detection2D& b) { return a.score > b.score; });
    std::vector<double> scores;
    for (const auto& d : dets) scores.push_back(d.score);
    std::vector<bool> elig;
    for (const auto& b : g.boxes)
      elig.push_back(std::min(b.width() * g.spacing.x, b.height() * g.spacing.y) >= params.min_size_mm);
    matches.push_back(match_core(
        scores, int(g.boxes.size()),
        [&](int d, int b) { return geometry::iobb_2d(dets[std::size_t(d)].box, g.boxes[std::size_t(b)]); }, elig,
        params.iobb_threshold));
  }
  return froc(matches);
}

std::string format_result(const FrocResult& r) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  for (std::size_t i = 0; i < kFpRates.size(); ++i)
    os << "recall@" << kFpRates[i] << "FP=" << r.recalls[i] << ' ';
  os << "avg=" << r.average_recall;
  if (r.ap) os << " AP@0.1=" << *r.ap;
  os << " volumes=" << r.volumes << " gts=" << r.eligible_gts;
  return os.str();
}

}  // namespace lndetr::evald
