#include "lndetr/geometry/boxes.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>
#include <tuple>

namespace lndetr::geometry {

Box2D to_corners(const CenterBox& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

CenterBox to_center(const Box2D& b) {
  return {(b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2, b.x1 - b.x0, b.y1 - b.y0};
}

Box2D to_pixels(const CenterBox& b, double image_width, double image_height) {
  const auto c = to_corners(b);
  return {c.x0 * image_width, c.y0 * image_height, c.x1 * image_width, c.y1 * image_height};
}

CenterBox to_normalized(const Box2D& pixels, double image_width, double image_height) {
  return to_center({pixels.x0 / image_width, pixels.y0 / image_height, pixels.x1 / image_width,
                    pixels.y1 / image_height});
}

CenterBox clamp_unit(const CenterBox& b, double min_size) {
  auto c = to_corners(b);
  c.x0 = std::clamp(c.x0, 0.0, 1.0);
  c.y0 = std::clamp(c.y0, 0.0, 1.0);
  c.x1 = std::clamp(c.x1, 0.0, 1.0);
  c.y1 = std::clamp(c.y1, 0.0, 1.0);
  if (c.x1 - c.x0 < min_size) {
    c.x1 = std::min(1.0, c.x0 + min_size);
    c.x0 = c.x1 - min_size;
  }
  if (c.y1 - c.y0 < min_size) {
    c.y1 = std::min(1.0, c.y0 + min_size);
    c.y0 = c.y1 - min_size;
  }
  return to_center(c);
}

double Box3D::volume() const {
  if (!valid()) return 0.0;
  return (x1 - x0) * (y1 - y0) * (z1 - z0);
}

namespace {

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

double intersection_area(const Box2D& a, const Box2D& b) {
  return overlap(a.x0, a.x1, b.x0, b.x1) * overlap(a.y0, a.y1, b.y0, b.y1);
}

double intersection_volume(const Box3D& a, const Box3D& b) {
  return overlap(a.x0, a.x1, b.x0, b.x1) * overlap(a.y0, a.y1, b.y0, b.y1) *
         overlap(a.z0, a.z1, b.z0, b.z1);
}

}  // namespace

double iou_2d(const Box2D& a, const Box2D& b) {
  if (!a.valid() || !b.valid()) return 0.0;
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double giou_2d(const Box2D& a, const Box2D& b) {
  if (!a.valid() || !b.valid()) return 0.0;
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) *
                      (std::max(a.y1, b.y1) - std::min(a.y0, b.y0));
  return inter / uni - (hull - uni) / hull;
}

double iobb_2d(const Box2D& det, const Box2D& gt) {
  if (!det.valid()) return 0.0;
  return intersection_area(det, gt) / det.area();
}

double iobb_3d(const Box3D& det, const Box3D& gt) {
  if (!(det.spacing == gt.spacing)) throw std::invalid_argument("iobb_3d: spacing mismatch");
  if (!det.valid()) return 0.0;
  return intersection_volume(det, gt) / det.volume();
}

double iou_3d(const Box3D& a, const Box3D& b) {
  if (!(a.spacing == b.spacing)) throw std::invalid_argument("iou_3d: spacing mismatch");
  if (!a.valid() || !b.valid()) return 0.0;
  const double inter = intersection_volume(a, b);
  return inter / (a.volume() + b.volume() - inter);
}

std::vector<Detection3D> merge_2d_to_3d(const std::vector<Detection2D>& detections, double link_iou,
                                        const Spacing& spacing) {
  // Canonical per-slice order, so the result does not depend on input order.
  std::map<int, std::vector<Detection2D>> by_slice;
  for (const auto& d : detections) by_slice[d.slice_index].push_back(d);
  for (auto& [slice, dets] : by_slice)
    std::sort(dets.begin(), dets.end(), [](const Detection2D& a, const Detection2D& b) {
      return std::tie(b.score, a.box.x0, a.box.y0, a.box.x1, a.box.y1) <
             std::tie(a.score, b.box.x0, b.box.y0, b.box.x1, b.box.y1);
    });

  struct Chain {
    Box2D last;
    int first_slice = 0;
    int last_slice = 0;
    Box2D hull;
    double score = 0;
  };
  std::vector<Chain> chains;

  for (const auto& [slice, dets] : by_slice) {
    struct Link {
      double iou;
      std::size_t chain;
      std::size_t det;
    };
    std::vector<Link> links;
    for (std::size_t c = 0; c < chains.size(); ++c) {
      if (chains[c].last_slice != slice - 1) continue;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        const double v = iou_2d(chains[c].last, dets[i].box);
        if (v >= link_iou) links.push_back({v, c, i});
      }
    }
    std::sort(links.begin(), links.end(), [](const Link& a, const Link& b) {
      if (a.iou != b.iou) return a.iou > b.iou;
      if (a.chain != b.chain) return a.chain < b.chain;
      return a.det < b.det;
    });
    std::vector<bool> chain_taken(chains.size(), false), det_taken(dets.size(), false);
    for (const auto& l : links) {
      if (chain_taken[l.chain] || det_taken[l.det]) continue;
      chain_taken[l.chain] = det_taken[l.det] = true;
      auto& ch = chains[l.chain];
      const auto& b = dets[l.det].box;
      ch.last = b;
      ch.last_slice = slice;
      ch.hull = {std::min(ch.hull.x0, b.x0), std::min(ch.hull.y0, b.y0), std::max(ch.hull.x1, b.x1),
                 std::max(ch.hull.y1, b.y1)};
      ch.score = std::max(ch.score, dets[l.det].score);
    }
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (!det_taken[i]) chains.push_back({dets[i].box, slice, slice, dets[i].box, dets[i].score});
  }

  std::vector<Detection3D> out;
  out.reserve(chains.size());
  for (const auto& ch : chains)
    out.push_back({{ch.hull.x0, ch.hull.y0, double(ch.first_slice), ch.hull.x1, ch.hull.y1,
                    double(ch.last_slice + 1), spacing},
                   ch.score});
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection3D& a, const Detection3D& b) { return a.score > b.score; });
  return out;
}

double short_axis_mm(const Box3D& b) {
  return std::min((b.x1 - b.x0) * b.spacing.x, (b.y1 - b.y0) * b.spacing.y);
}

}  // namespace lndetr::geometry
