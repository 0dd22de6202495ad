#include "lndetr/model/config.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace lndetr::model {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError("model config: " + message);
}

}  // namespace

void ModelConfig::validate() const {
  require(slab_size > 0 && slab_size % 2 == 1, "slab_size must be a positive odd number, got " +
                                                   std::to_string(slab_size));
  require(channels.size() == 4, "exactly four backbone blocks are supported");
  for (int c : channels) require(c > 0, "backbone channels must be positive");
  require(image_size > 0 && image_size % 32 == 0, "image_size must be a positive multiple of 32");
  require(hidden_dim > 0 && heads > 0 && hidden_dim % heads == 0, "hidden_dim must be divisible by heads");
  require(hidden_dim % 4 == 0, "hidden_dim must be divisible by 4");
  require(ffn_dim > 0, "ffn_dim must be positive");
  require(encoder_layers >= 0 && decoder_layers > 0, "need at least one decoder layer");
  require(num_classes > 0, "num_classes must be positive");
  require(num_queries > 0 && num_detections > 0, "query counts must be positive");
  require(num_detections <= num_queries, "num_detections must not exceed num_queries");
  require(num_queries <= token_count(), "num_queries exceeds the encoder token count");
  require(dn_budget >= 0, "dn_budget must be non-negative");
  require(token_count() <= max_tokens, "encoder token count " + std::to_string(token_count()) +
                                           " exceeds max_tokens " + std::to_string(max_tokens));
  require(anchor_size > 0 && anchor_size < 1, "anchor_size must lie in (0,1)");
}

int ModelConfig::map_size(int block) const {
  // The first block halves twice, every later block once.
  return image_size >> (block + 2);
}

int ModelConfig::token_count() const {
  int n = 0;
  for (int b = 1; b < 4; ++b) n += map_size(b) * map_size(b);
  return n;
}

std::vector<std::int64_t> debiased_select(std::span<const EncoderProposal> proposals, int k,
                                          bool use_iou) {
  if (k < 0 || std::size_t(k) > proposals.size())
    throw std::invalid_argument("debiased_select: k=" + std::to_string(k) + " for " +
                                std::to_string(proposals.size()) + " proposals");
  std::vector<std::size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto score = [&](std::size_t i) {
    const auto& p = proposals[i];
    return use_iou ? p.cls_score * p.iou_score : p.cls_score;
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = score(a), sb = score(b);
    if (sa != sb) return sa > sb;
    if (proposals[a].cls_score != proposals[b].cls_score) return proposals[a].cls_score > proposals[b].cls_score;
    return proposals[a].token < proposals[b].token;
  });
  std::vector<std::int64_t> out;
  out.reserve(std::size_t(k));
  for (int i = 0; i < k; ++i) out.push_back(proposals[order[std::size_t(i)]].token);
  return out;
}

}  // namespace lndetr::model
