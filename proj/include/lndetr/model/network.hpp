#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "lndetr/denoising/denoising.hpp"
#include "lndetr/geometry/boxes.hpp"
#include "lndetr/model/config.hpp"
#include "lndetr/model/parameters.hpp"

namespace lndetr::model {

// Per-sample encoder results. L = token count.
template <typename T>
struct EncoderOutput {
  Tensor<T> memory;      // [L,d]
  Tensor<T> pos;         // [L,d] positional + level embedding
  Tensor<T> features;    // [L,d] normalized projection of memory
  Tensor<T> cls_logits;  // [L,C]
  Tensor<T> iou_scores;  // [L,1] in (0,1)
  Tensor<T> boxes;       // [L,4] cxcywh in [0,1]
  std::vector<EncoderProposal> proposals;
};

template <typename T>
struct LayerOutput {
  Tensor<T> queries;      // [Q,d] layer output
  Tensor<T> cls_logits;   // [Q,C]
  Tensor<T> deltas;       // [Q,4] refinement in inverse-sigmoid space
  Tensor<T> boxes;        // [Q,4] refined boxes
  Tensor<T> iou_scores;   // [Q,1]
  Tensor<T> mask_logits;  // [K,HW], matching queries only
};

// Decoder queries are ordered dn first (num_dn rows) then the K matching
// queries.
template <typename T>
struct QueryBatch {
  int num_dn = 0;
  int num_matching = 0;
  std::vector<std::int64_t> selected;                // token index per matching query
  std::vector<geometry::CenterBox> references;       // initial reference box per query
  std::vector<LayerOutput<T>> layers;
  std::vector<T> self_attention;                     // last layer, [heads,Q,Q]

  int size() const { return num_dn + num_matching; }
};

struct DecodeOptions {
  bool keep_attention = false;
  bool masks = true;
};

struct SlicePrediction {
  std::vector<geometry::Detection2D> detections;  // pixel boxes, best first
};

struct VolumePrediction {
  std::vector<geometry::Detection2D> slices;   // all per-slice detections
  std::vector<geometry::Detection3D> volume;   // merged and size-filtered
};

struct PredictOptions {
  double link_iou = 0.5;
  double min_short_axis_mm = 5.0;
  double min_score = 0.0;  // per-slice detections scoring below are dropped
};

template <typename T>
class LnDetr {
 public:
  LnDetr(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  // slabs [B*T,1,H,W], the T slices of each sample contiguous -> one fused
  // map per block, [B,C_b,h_b,w_b]. Only each sample's center slice is fused;
  // neighbors run the plain per-slice chain.
  std::vector<Tensor<T>> backbone(const Tensor<T>& slabs) const;
  // Fused maps for every slice of a volume [D,1,H,W] taken as a slab center,
  // with replicated edge slices. Equals backbone() on the explicit slabs but
  // runs each plain chain once.
  std::vector<Tensor<T>> volume_features(const Tensor<T>& slices) const;

  EncoderOutput<T> encode(const std::vector<Tensor<T>>& maps, int sample) const;
  // Per-pixel embedding [d,HW] of `sample` for mask prediction.
  Tensor<T> pixel_embedding(const std::vector<Tensor<T>>& maps, int sample) const;
  std::vector<std::int64_t> select(const EncoderOutput<T>& enc) const;
  // dn may be null or empty; its queries then are absent.
  QueryBatch<T> decode(const EncoderOutput<T>& enc, const Tensor<T>& pixels,
                       const std::vector<std::int64_t>& selected, const denoising::DnGroupSet* dn,
                       const DecodeOptions& options = {}) const;

  // Final ranking score of every matching query of the last layer.
  std::vector<double> final_scores(const QueryBatch<T>& q) const;
  // Top num_detections matching queries of the last layer as pixel boxes.
  SlicePrediction detect(const QueryBatch<T>& q, int slice_index) const;
  // voxels are z-major [depth][height][width].
  VolumePrediction predict(std::span<const float> voxels, int width, int height, int depth,
                           const geometry::Spacing& spacing, const PredictOptions& options = {}) const;

  Tensor<T> contrastive_weight() const { return contrastive_w_; }
  Tensor<T> contrastive_bias() const { return contrastive_b_; }

 private:
  struct Linear {
    Tensor<T> w, b;
  };
  struct Norm {
    Tensor<T> gamma, beta;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct Block {
    Tensor<T> conv_a, bias_a, conv_b, bias_b;
    Tensor<T> fuse_w, fuse_b;  // undefined when slab_size == 1
  };
  struct EncoderLayer {
    Attention attn;
    Norm norm1, norm2;
    Linear ffn1, ffn2;
  };
  struct DecoderLayer {
    Attention self_attn, cross_attn;
    Norm norm1, norm2, norm3;
    Linear ffn1, ffn2;
  };

  Linear make_linear(std::mt19937_64& rng, const std::string& name, int in, int out);
  Norm make_norm(const std::string& name, int d);
  Attention make_attention(std::mt19937_64& rng, const std::string& name, int d);
  std::vector<Linear> make_mlp(std::mt19937_64& rng, const std::string& name, int in, int hidden, int out,
                               int layers);

  Tensor<T> apply(const Linear& l, const Tensor<T>& x) const;
  Tensor<T> apply(const Norm& n, const Tensor<T>& x) const;
  Tensor<T> apply_mlp(const std::vector<Linear>& mlp, const Tensor<T>& x) const;
  Tensor<T> attend(const Attention& a, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                   const Tensor<T>& mask, std::vector<T>* weights) const;
  Tensor<T> block_chain(int b, const Tensor<T>& x) const;
  Tensor<T> fuse(int b, const Tensor<T>& stacked) const;

  ModelConfig config_;
  ParameterSet<T> params_;
  std::vector<Block> blocks_;
  std::vector<Linear> input_proj_;  // per encoder level
  Tensor<T> level_embed_;           // [3,d]
  std::vector<EncoderLayer> encoder_;
  Linear enc_out_;
  Norm enc_norm_;
  Linear enc_cls_, enc_iou_;
  std::vector<Linear> enc_box_;
  Tensor<T> label_embed_;  // [num_classes+1,d]
  std::vector<Linear> query_pos_;
  std::vector<DecoderLayer> decoder_;
  Linear cls_head_, iou_head_;
  std::vector<Linear> box_head_, mask_head_;
  Tensor<T> contrastive_w_, contrastive_b_;
  Tensor<T> pixel_w_, pixel_b_;  // 1x1 conv over the first block's map
  Tensor<T> anchor_logits_;      // [L,4] token anchors in inverse-sigmoid space
  Tensor<T> sine_pos_;           // [L,d]
  std::vector<std::int64_t> token_level_;
};

// Standard transformer sine embedding of normalized coordinates: each
// coordinate contributes `dims` features (sin/cos pairs over frequencies).
std::vector<double> sine_embedding(std::span<const double> coords, int dims);

double inverse_sigmoid(double p);

}  // namespace lndetr::model
