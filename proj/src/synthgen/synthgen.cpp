#include "lndetr/synthgen/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>

namespace lndetr::synthgen {

void SynthConfig::validate() const {
  if (width <= 0 || height <= 0 || depth <= 0) throw std::invalid_argument("SynthConfig: volume shape must be positive");
  if (spacing.x <= 0 || spacing.y <= 0 || spacing.z <= 0) throw std::invalid_argument("SynthConfig: spacing must be positive");
  if (min_targets < 0 || max_targets < min_targets) throw std::invalid_argument("SynthConfig: bad target count range");
  if (min_short_axis_mm < 3 || max_short_axis_mm > 25 || max_short_axis_mm < min_short_axis_mm)
    throw std::invalid_argument("SynthConfig: short-axis range must lie within 3-25 mm");
  if (tubes < 0 || blobs < 0 || noise_sigma < 0) throw std::invalid_argument("SynthConfig: negative density or noise");
}

SynthConfig easy_config() { return SynthConfig{}; }

SynthConfig default_config() {
  SynthConfig c;
  c.min_short_axis_mm = 4.0;
  c.tubes = 4;
  c.blobs = 3;
  c.contrast = 0.6;
  c.noise_sigma = 0.2;
  return c;
}

SynthConfig config_for(const std::string& difficulty) {
  if (difficulty == "easy") return easy_config();
  if (difficulty == "default") return default_config();
  throw std::invalid_argument("unknown difficulty '" + difficulty + "'");
}

evald::GtVolume VolumeSample::ground_truth() const { return {id, spacing, boxes}; }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Marks voxels whose centers fall inside an ellipsoid rotated by `angle` in
// plane. Semi-axes in mm.
template <typename Fn>
void for_ellipsoid(const VolumeSample& s, double cx, double cy, double cz, double ax, double ay, double az,
                   double angle, Fn&& fn) {
  const double c = std::cos(angle), sn = std::sin(angle);
  const double reach = std::max(ax, ay);
  const int x0 = std::max(0, int(std::floor(cx - reach / s.spacing.x)) - 1);
  const int x1 = std::min(s.width - 1, int(std::ceil(cx + reach / s.spacing.x)) + 1);
  const int y0 = std::max(0, int(std::floor(cy - reach / s.spacing.y)) - 1);
  const int y1 = std::min(s.height - 1, int(std::ceil(cy + reach / s.spacing.y)) + 1);
  const int z0 = std::max(0, int(std::floor(cz - az / s.spacing.z)) - 1);
  const int z1 = std::min(s.depth - 1, int(std::ceil(cz + az / s.spacing.z)) + 1);
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5 - cx) * s.spacing.x, dy = (y + 0.5 - cy) * s.spacing.y,
                     dz = (z + 0.5 - cz) * s.spacing.z;
        const double u = c * dx + sn * dy, v = -sn * dx + c * dy;
        if ((u / ax) * (u / ax) + (v / ay) * (v / ay) + (dz / az) * (dz / az) <= 1.0) fn(x, y, z);
      }
}

}  // namespace

void recompute_boxes(VolumeSample& s) {
  struct Extent {
    int x0 = 1 << 30, y0 = 1 << 30, z0 = 1 << 30, x1 = -1, y1 = -1, z1 = -1;
  };
  std::map<int, Extent> ext;
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const int l = s.labels[s.index(x, y, z)];
        if (!l) continue;
        auto& e = ext[l];
        e.x0 = std::min(e.x0, x);
        e.y0 = std::min(e.y0, y);
        e.z0 = std::min(e.z0, z);
        e.x1 = std::max(e.x1, x);
        e.y1 = std::max(e.y1, y);
        e.z1 = std::max(e.z1, z);
      }
  std::map<int, int> renumber;
  s.boxes.clear();
  for (const auto& [l, e] : ext) {
    renumber[l] = int(renumber.size()) + 1;
    geometry::Box3D b{double(e.x0), double(e.y0), double(e.z0), double(e.x1 + 1), double(e.y1 + 1), double(e.z1 + 1),
                      s.spacing};
    s.boxes.push_back({b, geometry::short_axis_mm(b), 0});
  }
  for (auto& l : s.labels)
    if (l) l = std::uint16_t(renumber[l]);
}

VolumeSample generate_volume(const SynthConfig& cfg, std::uint64_t seed, const std::string& id, Warnings* warnings) {
  cfg.validate();
  Rng rng(seed);
  VolumeSample s;
  s.id = id;
  s.width = cfg.width;
  s.height = cfg.height;
  s.depth = cfg.depth;
  s.spacing = cfg.spacing;
  s.seed = seed;
  const std::size_t n = std::size_t(cfg.width) * std::size_t(cfg.height) * std::size_t(cfg.depth);
  s.voxels.assign(n, 0.0f);
  s.labels.assign(n, 0);
  std::vector<char> occupied(n, 0);

  // Smooth background variation.
  for (int bump = 0; bump < 3; ++bump) {
    const double bx = uniform(rng, 0, cfg.width), by = uniform(rng, 0, cfg.height), bz = uniform(rng, 0, cfg.depth);
    const double amp = uniform(rng, -0.15, 0.15), radius = uniform(rng, 10, 25);
    for (int z = 0; z < cfg.depth; ++z)
      for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x) {
          const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by) + (z - bz) * (z - bz) * 4;
          s.voxels[s.index(x, y, z)] += float(amp * std::exp(-d2 / (2 * radius * radius)));
        }
  }

  const float level = float(cfg.contrast);
  auto paint_confuser = [&](int x, int y, int z) {
    s.voxels[s.index(x, y, z)] = level;
    occupied[s.index(x, y, z)] = 1;
  };

  // Vessel-like tubes drifting across slices.
  for (int t = 0; t < cfg.tubes; ++t) {
    const double x0 = uniform(rng, 8, cfg.width - 8), y0 = uniform(rng, 8, cfg.height - 8);
    const double heading = uniform(rng, 0, 2 * std::numbers::pi), drift = uniform(rng, 0.5, 2.0);
    const double vx = drift * std::cos(heading), vy = drift * std::sin(heading);
    const double radius = uniform(rng, 2.5, 5.0);
    const double zc = uniform(rng, 0, cfg.depth);
    for (int z = 0; z < cfg.depth; ++z) {
      const double cx = x0 + vx * (z - zc), cy = y0 + vy * (z - zc);
      for (int y = 0; y < cfg.height; ++y)
        for (int x = 0; x < cfg.width; ++x) {
          const double dx = (x + 0.5 - cx) * cfg.spacing.x, dy = (y + 0.5 - cy) * cfg.spacing.y;
          if (dx * dx + dy * dy <= radius * radius) paint_confuser(x, y, z);
        }
    }
  }

  // Elongated blobs.
  for (int b = 0; b < cfg.blobs; ++b) {
    const double a = uniform(rng, 1.5, 3.0), len = a * uniform(rng, 3.0, 5.0), az = uniform(rng, 4.0, 12.0);
    const double cx = uniform(rng, 4, cfg.width - 4), cy = uniform(rng, 4, cfg.height - 4),
                 cz = uniform(rng, 0, cfg.depth);
    for_ellipsoid(s, cx, cy, cz, len, a, az, uniform(rng, 0, std::numbers::pi), paint_confuser);
  }

  // Targets, placed clear of confusers and of each other.
  const int wanted = std::uniform_int_distribution<int>(cfg.min_targets, cfg.max_targets)(rng);
  int placed = 0;
  for (int k = 0; k < wanted; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      const double short_axis = uniform(rng, cfg.min_short_axis_mm, cfg.max_short_axis_mm);
      const double a = short_axis / 2, b = a * uniform(rng, 1.0, 1.4), c = uniform(rng, 4.0, 10.0);
      const bool swap = uniform(rng, 0, 1) < 0.5;
      const double ax = swap ? b : a, ay = swap ? a : b;
      const double mx = ax / cfg.spacing.x + 1, my = ay / cfg.spacing.y + 1, mz = c / cfg.spacing.z;
      if (2 * mx >= cfg.width || 2 * my >= cfg.height) continue;
      const double cx = uniform(rng, mx, cfg.width - mx), cy = uniform(rng, my, cfg.height - my);
      const double cz = uniform(rng, std::min(mz, cfg.depth / 2.0), std::max(cfg.depth - mz, cfg.depth / 2.0));
      std::vector<std::size_t> cells;
      bool clear = true;
      // A one-voxel margin (in mm) keeps targets from touching anything else.
      for_ellipsoid(s, cx, cy, cz, ax + cfg.spacing.x, ay + cfg.spacing.y, c + cfg.spacing.z,
                    0.0, [&](int x, int y, int z) {
                      if (occupied[s.index(x, y, z)]) clear = false;
                    });
      if (!clear) continue;
      for_ellipsoid(s, cx, cy, cz, ax, ay, c, 0.0, [&](int x, int y, int z) { cells.push_back(s.index(x, y, z)); });
      if (cells.empty()) continue;
      ++placed;
      for (auto i : cells) {
        s.voxels[i] = level;
        s.labels[i] = std::uint16_t(placed);
        occupied[i] = 1;
      }
      ok = true;
    }
  }
  if (placed < wanted && warnings)
    warnings->push_back(id + ": placed " + std::to_string(placed) + " of " + std::to_string(wanted) + " targets");

  std::normal_distribution<float> noise(0.0f, float(cfg.noise_sigma));
  if (cfg.noise_sigma > 0)
    for (auto& v : s.voxels) v += noise(rng);
  recompute_boxes(s);
  return s;
}

std::vector<VolumeSample> generate(const SynthConfig& cfg, int count, const std::string& prefix, Warnings* warnings) {
  std::vector<VolumeSample> out;
  for (int i = 0; i < count; ++i)
    out.push_back(generate_volume(cfg, derive_seed(cfg.seed, std::uint64_t(i)), prefix + std::to_string(i), warnings));
  return out;
}

namespace {

float sample_trilinear(const VolumeSample& s, double x, double y, double z) {
  auto clampi = [](int v, int hi) { return std::clamp(v, 0, hi - 1); };
  x = std::clamp(x, 0.0, double(s.width - 1));
  y = std::clamp(y, 0.0, double(s.height - 1));
  z = std::clamp(z, 0.0, double(s.depth - 1));
  const int x0 = int(std::floor(x)), y0 = int(std::floor(y)), z0 = int(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  double acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        if (w == 0) continue;
        acc += w * s.voxels[s.index(clampi(x0 + dx, s.width), clampi(y0 + dy, s.height), clampi(z0 + dz, s.depth))];
      }
  return float(acc);
}

}  // namespace

VolumeSample normalize_spacing(const VolumeSample& in, const geometry::Spacing& target) {
  if (target.x <= 0 || target.y <= 0 || target.z <= 0 || in.spacing.x <= 0 || in.spacing.y <= 0 || in.spacing.z <= 0)
    throw std::invalid_argument("normalize_spacing: spacings must be positive");
  if (in.spacing == target) return in;
  const double rx = in.spacing.x / target.x, ry = in.spacing.y / target.y, rz = in.spacing.z / target.z;
  VolumeSample out;
  out.id = in.id;
  out.seed = in.seed;
  out.spacing = target;
  out.width = int(std::lround(in.width * rx));
  out.height = int(std::lround(in.height * ry));
  out.depth = int(std::lround(in.depth * rz));
  if (out.width < 1 || out.height < 1 || out.depth < 1) throw std::invalid_argument("normalize_spacing: degenerate axis");
  const std::size_t n = std::size_t(out.width) * std::size_t(out.height) * std::size_t(out.depth);
  out.voxels.resize(n);
  out.labels.resize(n);
  for (int z = 0; z < out.depth; ++z)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) {
        const double sx = (x + 0.5) / rx, sy = (y + 0.5) / ry, sz = (z + 0.5) / rz;
        out.voxels[out.index(x, y, z)] = sample_trilinear(in, sx - 0.5, sy - 0.5, sz - 0.5);
        const int nx = std::min(in.width - 1, int(sx)), ny = std::min(in.height - 1, int(sy)),
                  nz = std::min(in.depth - 1, int(sz));
        out.labels[out.index(x, y, z)] = in.labels[in.index(nx, ny, nz)];
      }
  for (auto b : in.boxes) {
    b.box = {b.box.x0 * rx, b.box.y0 * ry, b.box.z0 * rz, b.box.x1 * rx, b.box.y1 * ry, b.box.z1 * rz, target};
    b.short_axis_mm = geometry::short_axis_mm(b.box);
    out.boxes.push_back(b);
  }
  return out;
}

VolumeSample apply_augment(const VolumeSample& in, const AugmentDraw& d) {
  VolumeSample out = in;
  const double cx = in.width / 2.0, cy = in.height / 2.0;
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      const double px = cx + (x + 0.5 - cx) / d.scale, py = cy + (y + 0.5 - cy) / d.scale;
      double qx = d.offset_x + px * d.crop;
      const double qy = d.offset_y + py * d.crop;
      if (d.flip) qx = in.width - qx;
      const bool inside = qx >= 0 && qx < in.width && qy >= 0 && qy < in.height;
      const double fx = qx - 0.5, fy = qy - 0.5;
      const int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
      const double wx = fx - x0, wy = fy - y0;
      for (int z = 0; z < in.depth; ++z) {
        const auto o = out.index(x, y, z);
        if (!inside) {
          out.voxels[o] = 0.0f;
          out.labels[o] = 0;
          continue;
        }
        double acc = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const double w = (dx ? wx : 1 - wx) * (dy ? wy : 1 - wy);
            if (w == 0) continue;
            const int sx = std::clamp(x0 + dx, 0, in.width - 1), sy = std::clamp(y0 + dy, 0, in.height - 1);
            acc += w * in.voxels[in.index(sx, sy, z)];
          }
        out.voxels[o] = float(acc);
        out.labels[o] = in.labels[in.index(std::min(in.width - 1, int(qx)), std::min(in.height - 1, int(qy)), z)];
      }
    }
  if (d.noise_sigma > 0) {
    Rng rng(d.noise_seed);
    std::normal_distribution<float> noise(0.0f, float(d.noise_sigma));
    for (auto& v : out.voxels) v += noise(rng);
  }
  recompute_boxes(out);
  return out;
}

VolumeSample augment(const VolumeSample& in, const AugmentParams& p, std::uint64_t seed) {
  Rng rng(seed);
  AugmentDraw d;
  d.flip = uniform(rng, 0, 1) < p.flip_prob;
  d.noise_sigma = p.noise_sigma;
  d.noise_seed = rng();
  for (int attempt = 0; attempt <= p.crop_retries; ++attempt) {
    d.crop = uniform(rng, p.min_crop, 1.0);
    d.offset_x = uniform(rng, 0, (1 - d.crop) * in.width);
    d.offset_y = uniform(rng, 0, (1 - d.crop) * in.height);
    d.scale = uniform(rng, p.min_scale, p.max_scale);
    auto out = apply_augment(in, d);
    if (in.boxes.empty() || !out.boxes.empty()) return out;
  }
  d.crop = 1.0;
  d.offset_x = d.offset_y = 0;
  d.scale = 1.0;
  return apply_augment(in, d);
}

std::vector<SliceTarget> slice_targets(const VolumeSample& s, int z, int min_pixels) {
  std::map<int, geometry::Box2D> ext;
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const int l = s.labels[s.index(x, y, z)];
      if (!l) continue;
      auto [it, fresh] = ext.try_emplace(l, geometry::Box2D{double(x), double(y), double(x + 1), double(y + 1)});
      auto& b = it->second;
      b.x0 = std::min(b.x0, double(x));
      b.y0 = std::min(b.y0, double(y));
      b.x1 = std::max(b.x1, double(x + 1));
      b.y1 = std::max(b.y1, double(y + 1));
    }
  std::vector<SliceTarget> out;
  for (const auto& [l, b] : ext)
    if (b.width() >= min_pixels && b.height() >= min_pixels) out.push_back({b, l});
  return out;
}

}  // namespace lndetr::synthgen
