#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "lndetr/geometry/boxes.hpp"

namespace lndetr::model {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int slab_size = 3;  // slices per sample, odd; 1 disables fusion
  int image_size = 64;
  std::vector<int> channels{16, 32, 64, 64};  // one entry per conv block
  int hidden_dim = 64;
  int heads = 4;
  int ffn_dim = 128;
  int encoder_layers = 2;
  int decoder_layers = 3;
  int num_queries = 50;     // proposals kept by query selection
  int num_detections = 20;  // per-slice detections reported at inference
  int dn_budget = 24;       // total denoising queries per slice
  int num_classes = 1;
  int max_tokens = 1536;
  double anchor_size = 0.1;        // encoder anchor w/h at the finest encoder level
  bool debiased_selection = true;  // rank by cls * iou; false ranks by cls alone

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
  int blocks() const { return static_cast<int>(channels.size()); }
  // Side length of the feature map leaving block b.
  int map_size(int block) const;
  // Encoder tokens: the maps of the last three blocks, flattened.
  int token_count() const;
  int mask_size() const { return map_size(0); }
};

struct EncoderProposal {
  int token = 0;
  double cls_score = 0;
  double iou_score = 1;
  geometry::CenterBox box;
};

// Token indices of the top k proposals by cls * iou (or cls alone), best
// first. Ties go to the higher cls score, then the lower token index.
std::vector<std::int64_t> debiased_select(std::span<const EncoderProposal> proposals, int k,
                                          bool use_iou = true);

}  // namespace lndetr::model
