#pragma once

#include <vector>

// Box algebra shared by training, inference and evaluation.
namespace lndetr::geometry {

// Axis-aligned 2D box as corners. Used both for pixel space and for
// normalized coordinates; the value carries no scale.
struct Box2D {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x1 > x0 && y1 > y0; }
  bool operator==(const Box2D&) const = default;
};

// Center/size parameterization, normalized to [0,1] image coordinates.
struct CenterBox {
  double cx = 0, cy = 0, w = 0, h = 0;
  bool operator==(const CenterBox&) const = default;
};

// Ground-truth box with its class index.
struct LabeledBox {
  CenterBox box;
  int label = 0;
};

Box2D to_corners(const CenterBox& b);
CenterBox to_center(const Box2D& b);
// Normalized center box -> pixel corners for an image of the given size.
Box2D to_pixels(const CenterBox& b, double image_width, double image_height);
CenterBox to_normalized(const Box2D& pixels, double image_width, double image_height);
CenterBox clamp_unit(const CenterBox& b, double min_size = 1e-4);

struct Spacing {
  double x = 1, y = 1, z = 1;  // mm per voxel
  bool operator==(const Spacing&) const = default;
};

// Continuous voxel-index extents: voxel i covers [i, i+1).
struct Box3D {
  double x0 = 0, y0 = 0, z0 = 0, x1 = 0, y1 = 0, z1 = 0;
  Spacing spacing;

  double volume() const;
  bool valid() const { return x1 > x0 && y1 > y0 && z1 > z0; }
  bool operator==(const Box3D&) const = default;
};

struct Detection2D {
  Box2D box;  // pixel corners
  double score = 0;
  double cls_score = 0;
  double iou_score = 1;
  int slice_index = 0;
};

struct Detection3D {
  Box3D box;
  double score = 0;
};

// Degenerate (zero-area) boxes give 0.
double iou_2d(const Box2D& a, const Box2D& b);
double giou_2d(const Box2D& a, const Box2D& b);
// Intersection over the detected box's own area/volume; not symmetric.
double iobb_2d(const Box2D& det, const Box2D& gt);
double iobb_3d(const Box3D& det, const Box3D& gt);
double iou_3d(const Box3D& a, const Box3D& b);

// Chains 2D detections on consecutive slices into 3D boxes. A detection links
// to a chain whose box on the previous slice overlaps it with IoU >=
// link_iou; links are one-to-one, assigned greedily by descending IoU. The
// merged box spans the union of member xy extents and member slices, scored
// by the best member. Output is sorted by descending score.
std::vector<Detection3D> merge_2d_to_3d(const std::vector<Detection2D>& detections, double link_iou,
                                        const Spacing& spacing);

// Smaller in-plane physical extent in mm.
double short_axis_mm(const Box3D& b);

}  // namespace lndetr::geometry
