#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lndetr/evald/evald.hpp"
#include "lndetr/geometry/boxes.hpp"

// Synthetic volumes with ellipsoid targets among vessel-like tubes and
// elongated blobs of the same intensity.
namespace lndetr::synthgen {

using Warnings = std::vector<std::string>;

struct SynthConfig {
  int width = 64, height = 64, depth = 32;
  geometry::Spacing spacing{0.8, 0.8, 2.0};
  int min_targets = 1, max_targets = 4;
  double min_short_axis_mm = 6.0, max_short_axis_mm = 14.0;
  int tubes = 2;
  int blobs = 1;
  double contrast = 1.0;  // target and confuser intensity above background
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

SynthConfig easy_config();
SynthConfig default_config();
// "easy" or "default".
SynthConfig config_for(const std::string& difficulty);

// Voxels and instance labels are stored z-major: index (z*height + y)*width + x.
struct VolumeSample {
  std::string id;
  int width = 0, height = 0, depth = 0;
  geometry::Spacing spacing;
  std::vector<float> voxels;
  std::vector<std::uint16_t> labels;  // 0 background, k for target k
  std::vector<evald::GtBox> boxes;     // boxes[k-1] bounds label k
  std::uint64_t seed = 0;

  std::size_t index(int x, int y, int z) const {
    return (std::size_t(z) * std::size_t(height) + std::size_t(y)) * std::size_t(width) + std::size_t(x);
  }
  evald::GtVolume ground_truth() const;
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

VolumeSample generate_volume(const SynthConfig& cfg, std::uint64_t seed, const std::string& id,
                             Warnings* warnings = nullptr);
// count volumes with seeds derive_seed(cfg.seed, i) and ids prefix + i.
std::vector<VolumeSample> generate(const SynthConfig& cfg, int count, const std::string& prefix = "vol",
                                   Warnings* warnings = nullptr);

// Tight boxes of every label present, recomputed from the label map. Labels
// that vanished are dropped and the rest renumbered in ascending order.
void recompute_boxes(VolumeSample& sample);

// Trilinear resampling of voxels (nearest for labels) to target spacing;
// boxes scale by the spacing ratio.
VolumeSample normalize_spacing(const VolumeSample& sample, const geometry::Spacing& target);

struct AugmentParams {
  double flip_prob = 0.5;
  double min_crop = 0.8;
  double min_scale = 0.8, max_scale = 1.2;
  double noise_sigma = 0.05;
  int crop_retries = 5;
};

// One in-plane transform applied to every slice: optional horizontal flip,
// then a crop window (fraction crop of each side, at offset) resized to the
// full extent, then isotropic zoom by scale about the center.
struct AugmentDraw {
  bool flip = false;
  double crop = 1.0;
  double offset_x = 0, offset_y = 0;
  double scale = 1.0;
  double noise_sigma = 0;
  std::uint64_t noise_seed = 0;
};

VolumeSample apply_augment(const VolumeSample& sample, const AugmentDraw& draw);
VolumeSample augment(const VolumeSample& sample, const AugmentParams& params, std::uint64_t seed);

// Per-slice training targets: the in-plane bounding box of each label on
// slice z, keeping those at least min_pixels wide and high.
struct SliceTarget {
  geometry::Box2D box;
  int label = 0;
};
std::vector<SliceTarget> slice_targets(const VolumeSample& sample, int z, int min_pixels = 3);

// Dataset on disk: manifest.json, volumes/<id>.f32 and <id>.u16 (little
// endian), and gt_<split>.txt in the evaluation text format.
struct Dataset {
  std::string root;
  std::vector<VolumeSample> train, val, test;
};

void write_dataset(const std::string& dir, const SynthConfig& cfg, const std::vector<VolumeSample>& train,
                   const std::vector<VolumeSample>& val, const std::vector<VolumeSample>& test);
Dataset read_dataset(const std::string& dir);

}  // namespace lndetr::synthgen
