#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lndetr/geometry/boxes.hpp"

// Detection evaluation: volume-level FROC with the IoBB hit criterion and
// small-node ignore rule, 3D AP, size subgroups and a per-image mode.
namespace lndetr::evald {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GtBox {
  geometry::Box3D box;
  double short_axis_mm = 0;
  int cls = 0;
};

struct GtVolume {
  std::string id;
  geometry::Spacing spacing;
  std::vector<GtBox> boxes;
};

struct PredVolume {
  std::string id;
  std::vector<geometry::Detection3D> detections;
};

enum class Outcome { TruePositive, FalsePositive, Ignored };

// Per-volume result of greedy matching, detections in descending score.
struct VolumeMatch {
  std::vector<double> scores;
  std::vector<Outcome> outcomes;
  std::vector<int> matched_gt;  // -1 unless TruePositive
  std::vector<bool> gt_hit;
  std::vector<bool> gt_eligible;

  int eligible_count() const;
};

struct MatchParams {
  double iobb_threshold = 0.3;
  double min_size_mm = 5.0;
};

// Detections are ranked by descending score (stable for ties) before
// matching. Throws EvalError on spacing mismatch.
VolumeMatch match_detections(std::vector<geometry::Detection3D> detections, const GtVolume& gt,
                             const MatchParams& params = {});

struct OperatingPoint {
  double threshold = 0;
  double fps = 0;
  double recall = 0;
};

inline constexpr std::array<double, 4> kFpRates{0.5, 1.0, 2.0, 4.0};

struct FrocResult {
  std::vector<OperatingPoint> points;  // ascending FP rate
  std::array<double, 4> recalls{};     // at kFpRates
  double average_recall = 0;
  std::optional<double> ap;
  int volumes = 0;
  int eligible_gts = 0;
};

// Threshold sweep over every distinct score. Recall at FP rate f is read
// from the last operating point whose FPs per volume is strictly below f.
FrocResult froc(const std::vector<VolumeMatch>& volumes);

// Recall at rate f on an already computed curve (0 if no point qualifies).
double recall_at(const std::vector<OperatingPoint>& points, double fp_rate);

// Pairs predictions with GT volumes by id; volumes without predictions count
// as empty. Throws EvalError on unknown prediction ids.
std::vector<VolumeMatch> match_all(const std::vector<PredVolume>& preds,
                                   const std::vector<GtVolume>& gts, const MatchParams& params = {});

// Prediction files carry no spacing; this copies each GT volume's spacing
// onto the detections with the same id.
std::vector<PredVolume> attach_spacing(std::vector<PredVolume> preds, const std::vector<GtVolume>& gts);

FrocResult evaluate(const std::vector<PredVolume>& preds, const std::vector<GtVolume>& gts,
                    const MatchParams& params = {}, bool with_ap = true);

// GTs below min_axis_mm become ignore regions.
FrocResult subgroup_froc(const std::vector<PredVolume>& preds, const std::vector<GtVolume>& gts,
                         double min_axis_mm, double iobb_threshold = 0.3);

// All-point interpolated AP with greedy matching on symmetric 3D IoU; GTs
// below min_size_mm are ignore regions.
double ap_3d(const std::vector<PredVolume>& preds, const std::vector<GtVolume>& gts,
             double iou_threshold = 0.1, double min_size_mm = 5.0);

// Per-image mode: one entry per image, 2D boxes, FPs normalized per image.
struct GtImage {
  std::string id;
  geometry::Spacing spacing;
  std::vector<geometry::Box2D> boxes;
};

struct PredImage {
  std::string id;
  std::vector<geometry::Detection2D> detections;
};

FrocResult froc_per_image(const std::vector<PredImage>& preds, const std::vector<GtImage>& gts,
                          const MatchParams& params = {});

// Text formats. Prediction files start with "# lndetr-pred v1" and hold
// lines "det <id> x0 y0 z0 x1 y1 z1 score". GT files start with
// "# lndetr-gt v1" and hold "volume <id> sx sy sz" declarations followed by
// "box <id> x0 y0 z0 x1 y1 z1 short_axis_mm class" lines.
std::vector<PredVolume> read_predictions(const std::string& path);
void write_predictions(const std::string& path, const std::vector<PredVolume>& preds);
std::vector<GtVolume> read_ground_truth(const std::string& path);
void write_ground_truth(const std::string& path, const std::vector<GtVolume>& gts);

std::string format_result(const FrocResult& r);

}  // namespace lndetr::evald
