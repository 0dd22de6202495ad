#include "lndetr/denoising/denoising.hpp"

#include <random>
#include <stdexcept>

namespace lndetr::denoising {

namespace {

// Keeps the box inside the unit square without touching boxes that already
// are, so zero noise reproduces the GT bit for bit.
geometry::CenterBox keep_inside(const geometry::CenterBox& b) {
  constexpr double min_size = 1e-3;
  const auto c = geometry::to_corners(b);
  if (c.x0 >= 0 && c.y0 >= 0 && c.x1 <= 1 && c.y1 <= 1 && b.w >= min_size && b.h >= min_size) return b;
  return geometry::clamp_unit(b, min_size);
}

}  // namespace

DnGroupSet build_dn_groups(std::span<const geometry::LabeledBox> gts, int budget,
                           const NoiseParams& noise, int num_labels, std::uint64_t seed) {
  if (budget < 0) throw std::invalid_argument("build_dn_groups: negative budget");
  DnGroupSet dn;
  dn.noise = noise;
  dn.num_gts = int(gts.size());
  if (dn.num_gts == 0) return dn;
  dn.num_groups = std::max(1, budget / dn.num_gts);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0), coin(0.0, 1.0);
  for (int j = 0; j < dn.num_groups; ++j)
    for (const auto& gt : gts) {
      auto b = gt.box;
      const double sx = unit(rng), sy = unit(rng), sw = unit(rng), sh = unit(rng);
      b.cx += sx * noise.center_shift * gt.box.w;
      b.cy += sy * noise.center_shift * gt.box.h;
      b.w *= 1.0 + sw * noise.size_scale;
      b.h *= 1.0 + sh * noise.size_scale;
      dn.boxes.push_back(keep_inside(b));
      int label = gt.label;
      const double flip = coin(rng);
      if (num_labels > 1 && flip < noise.label_flip) {
        std::uniform_int_distribution<int> other(0, num_labels - 2);
        label = other(rng);
        if (label >= gt.label) ++label;
      }
      dn.labels.push_back(label);
    }
  return dn;
}

template <typename T>
Tensor<T> dn_attention_mask(int num_gts, int num_groups, int num_queries) {
  if (num_gts < 0 || num_groups < 0 || num_queries < 0)
    throw std::invalid_argument("dn_attention_mask: negative count");
  const int dn = num_gts * num_groups, total = dn + num_queries;
  std::vector<T> mask(std::size_t(total) * std::size_t(total), T(0));
  for (int r = 0; r < total; ++r)
    for (int c = 0; c < total; ++c) {
      const bool r_dn = r < dn, c_dn = c < dn;
      bool blocked = r_dn != c_dn;
      if (r_dn && c_dn) blocked = r / num_gts != c / num_gts;
      if (blocked) mask[std::size_t(r) * std::size_t(total) + std::size_t(c)] = numcore::kBlocked<T>;
    }
  return Tensor<T>::from({total, total}, std::move(mask));
}

template <typename T>
losses::LossComponents<T> dn_losses(const Tensor<T>& logits, const Tensor<T>& boxes,
                                    const DnGroupSet& dn,
                                    std::span<const geometry::LabeledBox> gts,
                                    const losses::ClassificationParams& cls,
                                    const losses::BoxParams& box) {
  losses::LossComponents<T> out;
  if (dn.size() == 0) {
    out.cls = Tensor<T>::scalar(T(0));
    out.box = Tensor<T>::scalar(T(0));
    return out;
  }
  if (int(gts.size()) != dn.num_gts) throw std::invalid_argument("dn_losses: GT count differs from the group set");
  std::vector<int> targets;
  matching::MatchAssignment own;
  std::vector<geometry::CenterBox> clean;
  for (const auto& g : gts) clean.push_back(g.box);
  for (int q = 0; q < dn.size(); ++q) {
    targets.push_back(gts[std::size_t(dn.gt_of(q))].label);
    own.pairs.emplace_back(dn.gt_of(q), q);
  }
  out.cls = losses::classification_loss(logits, targets, double(dn.size()), cls);
  out.box = losses::box_loss(boxes, clean, own, box);
  return out;
}

std::vector<std::int64_t> ContrastivePairs::negatives(std::size_t pair) const {
  std::vector<std::int64_t> out;
  for (int k = 0; k < num_queries; ++k)
    if (k != positives.at(pair)) out.push_back(k);
  return out;
}

ContrastivePairs contrastive_pairs(const matching::MatchAssignment& assignment,
                                   const DnGroupSet& dn, int num_queries) {
  ContrastivePairs pairs;
  pairs.num_queries = num_queries;
  for (int j = 0; j < dn.num_groups; ++j)
    for (int i = 0; i < dn.num_gts; ++i) {
      const int k = assignment.query_for(i);
      if (k < 0) throw std::invalid_argument("contrastive_pairs: GT " + std::to_string(i) + " is unmatched");
      if (k >= num_queries) throw std::invalid_argument("contrastive_pairs: matched query out of range");
      pairs.anchors.push_back(dn.index(i, j));
      pairs.positives.push_back(k);
    }
  return pairs;
}

template Tensor<float> dn_attention_mask<float>(int, int, int);
template Tensor<double> dn_attention_mask<double>(int, int, int);
template losses::LossComponents<float> dn_losses(const Tensor<float>&, const Tensor<float>&, const DnGroupSet&,
                                                 std::span<const geometry::LabeledBox>,
                                                 const losses::ClassificationParams&, const losses::BoxParams&);
template losses::LossComponents<double> dn_losses(const Tensor<double>&, const Tensor<double>&, const DnGroupSet&,
                                                  std::span<const geometry::LabeledBox>,
                                                  const losses::ClassificationParams&, const losses::BoxParams&);

}  // namespace lndetr::denoising
