#pragma once

#include <algorithm>

#include "lndetr/geometry/boxes.hpp"

// Midpoint-grid rasterization of IoU and GIoU. Counts sample points inside
// each box; shares no code with the analytic formulas.
namespace lndetr::testing {

struct RasterOverlap {
  double iou = 0;
  double giou = 0;
};

inline RasterOverlap raster_overlap(const geometry::Box2D& a, const geometry::Box2D& b,
                                    int samples_per_axis = 800) {
  const double x0 = std::min(a.x0, b.x0), x1 = std::max(a.x1, b.x1);
  const double y0 = std::min(a.y0, b.y0), y1 = std::max(a.y1, b.y1);
  const double dx = (x1 - x0) / samples_per_axis, dy = (y1 - y0) / samples_per_axis;
  auto inside = [](const geometry::Box2D& r, double x, double y) {
    return x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1;
  };
  long in_a = 0, in_b = 0, both = 0;
  for (int j = 0; j < samples_per_axis; ++j) {
    const double y = y0 + (j + 0.5) * dy;
    for (int i = 0; i < samples_per_axis; ++i) {
      const double x = x0 + (i + 0.5) * dx;
      const bool pa = inside(a, x, y), pb = inside(b, x, y);
      in_a += pa;
      in_b += pb;
      both += pa && pb;
    }
  }
  const double total = double(samples_per_axis) * samples_per_axis;
  const double uni = double(in_a + in_b - both);
  RasterOverlap r;
  r.iou = uni > 0 ? both / uni : 0.0;
  r.giou = r.iou - (total - uni) / total;
  return r;
}

}  // namespace lndetr::testing
