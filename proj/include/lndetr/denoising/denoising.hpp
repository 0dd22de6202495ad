#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lndetr/geometry/boxes.hpp"
#include "lndetr/losses/losses.hpp"
#include "lndetr/matching/hungarian.hpp"

// Noised ground-truth anchor queries and their bookkeeping.
namespace lndetr::denoising {

using numcore::Tensor;

struct NoiseParams {
  double center_shift = 0.4;  // center moves within +/- shift * (w, h)
  double size_scale = 0.4;    // w, h scaled within [1 - s, 1 + s]
  double label_flip = 0.5;
};

// M GTs x N groups of noised queries, stored group-major: query q belongs to
// group q / M and reconstructs GT q % M.
struct DnGroupSet {
  int num_gts = 0;
  int num_groups = 0;
  std::vector<geometry::CenterBox> boxes;
  std::vector<int> labels;
  NoiseParams noise;

  int size() const { return num_gts * num_groups; }
  int gt_of(int q) const { return q % num_gts; }
  int group_of(int q) const { return q / num_gts; }
  int index(int gt, int group) const { return group * num_gts + gt; }
};

// `num_labels` is the label vocabulary a flip may draw from (every label
// except the true one).
DnGroupSet build_dn_groups(std::span<const geometry::LabeledBox> gts, int budget,
                           const NoiseParams& noise, int num_labels, std::uint64_t seed);

// Additive [(M*N+K), (M*N+K)] mask over dn queries followed by K matching
// queries: 0 where row may attend to column, kBlocked otherwise.
template <typename T>
Tensor<T> dn_attention_mask(int num_gts, int num_groups, int num_queries);

// Reconstruction losses for the dn queries of one decoder layer. logits is
// [M*N,C], boxes [M*N,4]. The classification sum is normalized by M*N.
template <typename T>
losses::LossComponents<T> dn_losses(const Tensor<T>& logits, const Tensor<T>& boxes,
                                    const DnGroupSet& dn,
                                    std::span<const geometry::LabeledBox> gts,
                                    const losses::ClassificationParams& cls = {},
                                    const losses::BoxParams& box = {});

struct ContrastivePairs {
  int num_queries = 0;
  std::vector<std::int64_t> anchors;    // dn query index of each pair
  std::vector<std::int64_t> positives;  // matched matching-branch query

  std::size_t size() const { return anchors.size(); }
  std::vector<std::int64_t> negatives(std::size_t pair) const;
};

ContrastivePairs contrastive_pairs(const matching::MatchAssignment& assignment,
                                   const DnGroupSet& dn, int num_queries);

}  // namespace lndetr::denoising
