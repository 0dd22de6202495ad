#include "lndetr/model/network.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "lndetr/numcore/functional.hpp"

namespace lndetr::model {

using namespace numcore;

std::vector<double> sine_embedding(std::span<const double> coords, int dims) {
  std::vector<double> out;
  out.reserve(coords.size() * std::size_t(dims));
  for (double c : coords) {
    const double v = c * 2.0 * std::numbers::pi;
    for (int k = 0; k < dims / 2; ++k) {
      const double freq = std::pow(10000.0, 2.0 * k / dims);
      out.push_back(std::sin(v / freq));
      out.push_back(std::cos(v / freq));
    }
  }
  return out;
}

double inverse_sigmoid(double p) {
  p = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(p / (1.0 - p));
}

namespace {

template <typename T>
Tensor<T> uniform(std::mt19937_64& rng, Shape shape, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(std::size_t(numel(shape)));
  for (auto& x : v) x = T(u(rng));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> normal(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<T> v(std::size_t(numel(shape)));
  for (auto& x : v) x = T(n(rng));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> constant(Shape shape, const std::vector<double>& values) {
  return Tensor<T>::from(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

// Box rows of a [Q,4] tensor as cxcywh values.
template <typename T>
std::vector<double> box_values(const Tensor<T>& boxes) {
  return std::vector<double>(boxes.data().begin(), boxes.data().end());
}

template <typename T>
double sigmoid_of(T x) {
  return 1.0 / (1.0 + std::exp(-double(x)));
}

}  // namespace

template <typename T>
LnDetr<T>::LnDetr(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.hidden_dim, slab = config_.slab_size;

  int in = 1;
  for (int b = 0; b < 4; ++b) {
    const int c = config_.channels[std::size_t(b)];
    const std::string name = "backbone.block" + std::to_string(b);
    Block blk;
    blk.conv_a = params_.add(name + ".conv_a.weight", uniform<T>(rng, {c, in, 3, 3}, std::sqrt(6.0 / (in * 9))));
    blk.bias_a = params_.add(name + ".conv_a.bias", Tensor<T>::zeros({c}));
    blk.conv_b = params_.add(name + ".conv_b.weight", uniform<T>(rng, {c, c, 3, 3}, std::sqrt(6.0 / (c * 9))));
    blk.bias_b = params_.add(name + ".conv_b.bias", Tensor<T>::zeros({c}));
    if (slab > 1) {
      // Starts as a pass-through of the center slice.
      auto w = Tensor<T>::zeros({c, slab * c, 1, 1});
      for (int o = 0; o < c; ++o) w.mutable_data()[std::size_t(o * slab * c + (slab / 2) * c + o)] = T(1);
      blk.fuse_w = params_.add(name + ".fuse.weight", w);
      blk.fuse_b = params_.add(name + ".fuse.bias", Tensor<T>::zeros({c}));
    }
    blocks_.push_back(blk);
    in = c;
  }

  for (int l = 0; l < 3; ++l)
    input_proj_.push_back(
        make_linear(rng, "encoder.input_proj" + std::to_string(l), config_.channels[std::size_t(l + 1)], d));
  level_embed_ = params_.add("encoder.level_embed", normal<T>(rng, {3, d}, 1.0));
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string name = "encoder.layer" + std::to_string(l);
    EncoderLayer layer;
    layer.attn = make_attention(rng, name + ".attn", d);
    layer.norm1 = make_norm(name + ".norm1", d);
    layer.ffn1 = make_linear(rng, name + ".ffn1", d, config_.ffn_dim);
    layer.ffn2 = make_linear(rng, name + ".ffn2", config_.ffn_dim, d);
    layer.norm2 = make_norm(name + ".norm2", d);
    encoder_.push_back(layer);
  }
  enc_out_ = make_linear(rng, "encoder.output", d, d);
  enc_norm_ = make_norm("encoder.output_norm", d);
  const double prior = -std::log((1.0 - 0.01) / 0.01);
  enc_cls_ = make_linear(rng, "encoder.cls_head", d, config_.num_classes);
  std::fill(enc_cls_.b.mutable_data().begin(), enc_cls_.b.mutable_data().end(), T(prior));
  enc_iou_ = make_linear(rng, "encoder.iou_head", d, 1);
  enc_box_ = make_mlp(rng, "encoder.box_head", d, d, 4, 3);

  const int c0 = config_.channels[0];
  pixel_w_ = params_.add("mask.pixel_proj.weight", uniform<T>(rng, {d, c0, 1, 1}, std::sqrt(6.0 / (c0 + d))));
  pixel_b_ = params_.add("mask.pixel_proj.bias", Tensor<T>::zeros({d}));

  label_embed_ = params_.add("decoder.label_embed", normal<T>(rng, {config_.num_classes + 1, d}, 1.0));
  query_pos_ = make_mlp(rng, "decoder.query_pos", 2 * d, d, d, 2);
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string name = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = make_attention(rng, name + ".self_attn", d);
    layer.norm1 = make_norm(name + ".norm1", d);
    layer.cross_attn = make_attention(rng, name + ".cross_attn", d);
    layer.norm2 = make_norm(name + ".norm2", d);
    layer.ffn1 = make_linear(rng, name + ".ffn1", d, config_.ffn_dim);
    layer.ffn2 = make_linear(rng, name + ".ffn2", config_.ffn_dim, d);
    layer.norm3 = make_norm(name + ".norm3", d);
    decoder_.push_back(layer);
  }
  cls_head_ = make_linear(rng, "decoder.cls_head", d, config_.num_classes);
  std::fill(cls_head_.b.mutable_data().begin(), cls_head_.b.mutable_data().end(), T(prior));
  iou_head_ = make_linear(rng, "decoder.iou_head", d, 1);
  box_head_ = make_mlp(rng, "decoder.box_head", d, d, 4, 3);
  mask_head_ = make_mlp(rng, "decoder.mask_head", d, d, d, 3);
  contrastive_w_ = params_.add("contrastive.weight", uniform<T>(rng, {d, d}, std::sqrt(3.0 / d)));
  contrastive_b_ = params_.add("contrastive.bias", Tensor<T>::zeros({d}));

  // Refinement heads start at zero so initial boxes equal their anchors.
  for (auto* mlp : {&enc_box_, &box_head_}) {
    auto& last = mlp->back();
    std::fill(last.w.mutable_data().begin(), last.w.mutable_data().end(), T(0));
  }

  std::vector<double> anchors, pos;
  for (int l = 0; l < 3; ++l) {
    const int side = config_.map_size(l + 1);
    const double size = config_.anchor_size * std::pow(2.0, l);
    for (int i = 0; i < side; ++i)
      for (int j = 0; j < side; ++j) {
        const double cx = (j + 0.5) / side, cy = (i + 0.5) / side;
        for (double v : {cx, cy, size, size}) anchors.push_back(inverse_sigmoid(v));
        const double xy[2] = {cx, cy};
        const auto e = sine_embedding(xy, d / 2);
        pos.insert(pos.end(), e.begin(), e.end());
        token_level_.push_back(l);
      }
  }
  const auto tokens = std::int64_t(token_level_.size());
  anchor_logits_ = constant<T>({tokens, 4}, anchors);
  sine_pos_ = constant<T>({tokens, d}, pos);
}

template <typename T>
typename LnDetr<T>::Linear LnDetr<T>::make_linear(std::mt19937_64& rng, const std::string& name, int in,
                                                  int out) {
  Linear l;
  l.w = params_.add(name + ".weight", uniform<T>(rng, {in, out}, std::sqrt(6.0 / (in + out))));
  l.b = params_.add(name + ".bias", Tensor<T>::zeros({out}));
  return l;
}

template <typename T>
typename LnDetr<T>::Norm LnDetr<T>::make_norm(const std::string& name, int d) {
  return {params_.add(name + ".gamma", Tensor<T>::full({d}, T(1))),
          params_.add(name + ".beta", Tensor<T>::zeros({d}))};
}

template <typename T>
typename LnDetr<T>::Attention LnDetr<T>::make_attention(std::mt19937_64& rng, const std::string& name, int d) {
  return {make_linear(rng, name + ".q", d, d), make_linear(rng, name + ".k", d, d),
          make_linear(rng, name + ".v", d, d), make_linear(rng, name + ".o", d, d)};
}

template <typename T>
std::vector<typename LnDetr<T>::Linear> LnDetr<T>::make_mlp(std::mt19937_64& rng, const std::string& name, int in,
                                                            int hidden, int out, int layers) {
  std::vector<Linear> mlp;
  for (int l = 0; l < layers; ++l)
    mlp.push_back(make_linear(rng, name + "." + std::to_string(l), l == 0 ? in : hidden,
                              l + 1 == layers ? out : hidden));
  return mlp;
}

template <typename T>
Tensor<T> LnDetr<T>::apply(const Linear& l, const Tensor<T>& x) const {
  return linear(x, l.w, l.b);
}

template <typename T>
Tensor<T> LnDetr<T>::apply(const Norm& n, const Tensor<T>& x) const {
  return layer_norm(x, n.gamma, n.beta);
}

template <typename T>
Tensor<T> LnDetr<T>::apply_mlp(const std::vector<Linear>& mlp, const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < mlp.size(); ++i) {
    h = apply(mlp[i], h);
    if (i + 1 < mlp.size()) h = relu(h);
  }
  return h;
}

template <typename T>
Tensor<T> LnDetr<T>::attend(const Attention& a, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const Tensor<T>& mask, std::vector<T>* weights) const {
  const auto o = multi_head_attention(apply(a.q, q), apply(a.k, k), apply(a.v, v), config_.heads, mask, weights);
  return apply(a.o, o);
}

template <typename T>
Tensor<T> LnDetr<T>::block_chain(int b, const Tensor<T>& x) const {
  const auto& blk = blocks_[std::size_t(b)];
  const auto y = relu(conv2d(x, blk.conv_a, blk.bias_a, 2, 1));
  return relu(conv2d(y, blk.conv_b, blk.bias_b, b == 0 ? 2 : 1, 1));
}

template <typename T>
Tensor<T> LnDetr<T>::fuse(int b, const Tensor<T>& stacked) const {
  const auto& blk = blocks_[std::size_t(b)];
  return conv2d(stacked, blk.fuse_w, blk.fuse_b, 1, 0);
}

template <typename T>
std::vector<Tensor<T>> LnDetr<T>::backbone(const Tensor<T>& slabs) const {
  const int slab = config_.slab_size, r = slab / 2;
  const Shape expected{slabs.rank() == 4 ? slabs.dim(0) : 0, 1, config_.image_size, config_.image_size};
  if (slabs.rank() != 4 || slabs.shape() != expected || slabs.dim(0) % slab != 0 || slabs.dim(0) == 0)
    throw_shape_error("backbone", expected, slabs.shape());
  const auto batch = slabs.dim(0) / slab;
  std::vector<Tensor<T>> maps;
  Tensor<T> x = slabs;
  for (int b = 0; b < 4; ++b) {
    const auto y = block_chain(b, x);
    if (slab == 1) {
      maps.push_back(y);
      x = y;
      continue;
    }
    const auto c = y.dim(1), h = y.dim(2), w = y.dim(3);
    const auto fused = fuse(b, reshape(y, {batch, slab * c, h, w}));
    maps.push_back(fused);
    if (b == 3) break;
    const auto rows = reshape(y, {batch, slab, c * h * w});
    x = reshape(concat<T>({slice(rows, 1, 0, r), reshape(fused, {batch, 1, c * h * w}), slice(rows, 1, r + 1, r)}, 1),
                {batch * slab, c, h, w});
  }
  return maps;
}

template <typename T>
std::vector<Tensor<T>> LnDetr<T>::volume_features(const Tensor<T>& slices) const {
  const int slab = config_.slab_size, r = slab / 2;
  const Shape expected{slices.rank() == 4 ? slices.dim(0) : 0, 1, config_.image_size, config_.image_size};
  if (slices.rank() != 4 || slices.shape() != expected || slices.dim(0) == 0)
    throw_shape_error("volume_features", expected, slices.shape());
  const auto depth = slices.dim(0);
  std::vector<Tensor<T>> maps;
  Tensor<T> plain = slices, center = slices;
  for (int b = 0; b < 4; ++b) {
    const auto next = block_chain(b, plain);
    if (slab == 1) {
      maps.push_back(next);
      plain = next;
      continue;
    }
    const auto y = b == 0 ? next : block_chain(b, center);
    const auto c = y.dim(1), h = y.dim(2), w = y.dim(3);
    // Rows 0..D-1 hold plain features, rows D..2D-1 the center chain's.
    const auto table = concat<T>({reshape(next, {depth, c * h * w}), reshape(y, {depth, c * h * w})}, 0);
    std::vector<std::int64_t> rows;
    for (std::int64_t s = 0; s < depth; ++s)
      for (int t = 0; t < slab; ++t)
        rows.push_back(t == r ? depth + s : std::clamp<std::int64_t>(s + t - r, 0, depth - 1));
    const auto fused = fuse(b, reshape(embedding(table, rows), {depth, slab * c, h, w}));
    maps.push_back(fused);
    plain = next;
    center = fused;
  }
  return maps;
}

template <typename T>
EncoderOutput<T> LnDetr<T>::encode(const std::vector<Tensor<T>>& maps, int sample) const {
  if (maps.size() != 4) throw std::invalid_argument("encode: expected four feature maps");
  EncoderOutput<T> out;
  std::vector<Tensor<T>> tokens;
  for (int l = 0; l < 3; ++l) {
    const auto& m = maps[std::size_t(l + 1)];
    const auto c = m.dim(1), hw = m.dim(2) * m.dim(3);
    const auto x = reshape(slice(m, 0, sample, 1), {c, hw});
    const auto& proj = input_proj_[std::size_t(l)];
    tokens.push_back(add(matmul(x, proj.w, true, false), proj.b));
  }
  Tensor<T> src = concat(tokens, 0);
  out.pos = add(sine_pos_, embedding(level_embed_, token_level_));
  for (const auto& layer : encoder_) {
    const auto q = add(src, out.pos);
    src = apply(layer.norm1, add(src, attend(layer.attn, q, q, src, {}, nullptr)));
    src = apply(layer.norm2, add(src, apply(layer.ffn2, relu(apply(layer.ffn1, src)))));
  }
  out.memory = src;
  out.features = apply(enc_norm_, apply(enc_out_, src));
  out.cls_logits = apply(enc_cls_, out.features);
  out.iou_scores = sigmoid(apply(enc_iou_, out.features));
  out.boxes = sigmoid(add(apply_mlp(enc_box_, out.features), anchor_logits_));

  const auto tokens_n = int(out.memory.dim(0));
  const int classes = config_.num_classes;
  const auto logits = out.cls_logits.data();
  const auto iou = out.iou_scores.data();
  const auto boxes = out.boxes.data();
  out.proposals.resize(std::size_t(tokens_n));
  for (int i = 0; i < tokens_n; ++i) {
    auto& p = out.proposals[std::size_t(i)];
    p.token = i;
    T best = logits[std::size_t(i * classes)];
    for (int c = 1; c < classes; ++c) best = std::max(best, logits[std::size_t(i * classes + c)]);
    p.cls_score = sigmoid_of(best);
    p.iou_score = double(iou[std::size_t(i)]);
    const auto* b = boxes.data() + i * 4;
    p.box = {double(b[0]), double(b[1]), double(b[2]), double(b[3])};
  }
  return out;
}

template <typename T>
Tensor<T> LnDetr<T>::pixel_embedding(const std::vector<Tensor<T>>& maps, int sample) const {
  const auto x = slice(maps.at(0), 0, sample, 1);
  const auto e = conv2d(x, pixel_w_, pixel_b_, 1, 0);
  return reshape(e, {e.dim(1), e.dim(2) * e.dim(3)});
}

template <typename T>
std::vector<std::int64_t> LnDetr<T>::select(const EncoderOutput<T>& enc) const {
  return debiased_select(enc.proposals, config_.num_queries, config_.debiased_selection);
}

template <typename T>
QueryBatch<T> LnDetr<T>::decode(const EncoderOutput<T>& enc, const Tensor<T>& pixels,
                                const std::vector<std::int64_t>& selected, const denoising::DnGroupSet* dn,
                                const DecodeOptions& options) const {
  const int d = config_.hidden_dim;
  QueryBatch<T> qb;
  qb.num_dn = dn ? dn->size() : 0;
  qb.num_matching = int(selected.size());
  qb.selected = selected;
  const int total = qb.size();
  if (qb.num_matching == 0) throw std::invalid_argument("decode: no matching queries");

  std::vector<Tensor<T>> content;
  if (qb.num_dn > 0) {
    std::vector<std::int64_t> labels(dn->labels.begin(), dn->labels.end());
    for (auto l : labels)
      if (l < 0 || l > config_.num_classes) throw std::invalid_argument("decode: dn label out of range");
    content.push_back(embedding(label_embed_, labels));
    qb.references = dn->boxes;
  }
  content.push_back(embedding(enc.features.detach(), selected));
  for (auto t : selected) qb.references.push_back(enc.proposals.at(std::size_t(t)).box);
  Tensor<T> x = content.size() == 1 ? content[0] : concat(content, 0);

  Tensor<T> mask;
  if (qb.num_dn > 0) mask = denoising::dn_attention_mask<T>(dn->num_gts, dn->num_groups, qb.num_matching);
  const auto memory_keys = add(enc.memory, enc.pos);

  std::vector<double> refs;
  for (const auto& b : qb.references) refs.insert(refs.end(), {b.cx, b.cy, b.w, b.h});
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto& layer = decoder_[l];
    const bool last = l + 1 == decoder_.size();
    const auto pos = apply_mlp(query_pos_, constant<T>({total, 2 * d}, sine_embedding(refs, d / 2)));
    auto q = add(x, pos);
    auto* weights = options.keep_attention && last ? &qb.self_attention : nullptr;
    x = apply(layer.norm1, add(x, attend(layer.self_attn, q, q, x, mask, weights)));
    x = apply(layer.norm2, add(x, attend(layer.cross_attn, add(x, pos), memory_keys, enc.memory, {}, nullptr)));
    x = apply(layer.norm3, add(x, apply(layer.ffn2, relu(apply(layer.ffn1, x)))));

    LayerOutput<T> out;
    out.queries = x;
    out.cls_logits = apply(cls_head_, x);
    out.iou_scores = sigmoid(apply(iou_head_, x));
    out.deltas = apply_mlp(box_head_, x);
    std::vector<double> ref_logits(refs.size());
    std::transform(refs.begin(), refs.end(), ref_logits.begin(), inverse_sigmoid);
    out.boxes = sigmoid(add(out.deltas, constant<T>({total, 4}, ref_logits)));
    if (options.masks) {
      const auto matching = slice(x, 0, qb.num_dn, qb.num_matching);
      out.mask_logits = matmul(apply_mlp(mask_head_, matching), pixels);
    }
    refs = box_values(out.boxes);
    qb.layers.push_back(std::move(out));
  }
  return qb;
}

template <typename T>
std::vector<double> LnDetr<T>::final_scores(const QueryBatch<T>& q) const {
  const auto& last = q.layers.back();
  const int classes = config_.num_classes;
  const auto logits = last.cls_logits.data();
  const auto iou = last.iou_scores.data();
  std::vector<double> scores;
  for (int k = 0; k < q.num_matching; ++k) {
    const int row = q.num_dn + k;
    T best = logits[std::size_t(row * classes)];
    for (int c = 1; c < classes; ++c) best = std::max(best, logits[std::size_t(row * classes + c)]);
    const double cls = sigmoid_of(best);
    scores.push_back(config_.debiased_selection ? cls * double(iou[std::size_t(row)]) : cls);
  }
  return scores;
}

template <typename T>
SlicePrediction LnDetr<T>::detect(const QueryBatch<T>& q, int slice_index) const {
  const auto scores = final_scores(q);
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  const auto keep = std::min<std::size_t>(std::size_t(config_.num_detections), order.size());
  std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(keep), order.end(), [&](int a, int b) {
    if (scores[std::size_t(a)] != scores[std::size_t(b)]) return scores[std::size_t(a)] > scores[std::size_t(b)];
    return a < b;
  });
  const auto& last = q.layers.back();
  const auto boxes = last.boxes.data();
  const auto logits = last.cls_logits.data();
  const auto iou = last.iou_scores.data();
  const int classes = config_.num_classes;
  const double size = config_.image_size;
  SlicePrediction out;
  for (std::size_t i = 0; i < keep; ++i) {
    const int k = order[i], row = q.num_dn + k;
    const auto* b = boxes.data() + row * 4;
    geometry::Detection2D det;
    det.box = geometry::to_pixels(geometry::clamp_unit({double(b[0]), double(b[1]), double(b[2]), double(b[3])}),
                                  size, size);
    det.score = scores[std::size_t(k)];
    T best = logits[std::size_t(row * classes)];
    for (int c = 1; c < classes; ++c) best = std::max(best, logits[std::size_t(row * classes + c)]);
    det.cls_score = sigmoid_of(best);
    det.iou_score = double(iou[std::size_t(row)]);
    det.slice_index = slice_index;
    out.detections.push_back(det);
  }
  return out;
}

template <typename T>
VolumePrediction LnDetr<T>::predict(std::span<const float> voxels, int width, int height, int depth,
                                    const geometry::Spacing& spacing, const PredictOptions& options) const {
  if (width != config_.image_size || height != config_.image_size)
    throw std::invalid_argument("predict: slices must be " + std::to_string(config_.image_size) + " pixels square");
  if (depth <= 0 || voxels.size() != std::size_t(width) * std::size_t(height) * std::size_t(depth))
    throw std::invalid_argument("predict: voxel count does not match the volume shape");
  NoGradScope<T> no_grad;
  const auto slices = Tensor<T>::from({depth, 1, height, width}, std::vector<T>(voxels.begin(), voxels.end()));
  const auto maps = volume_features(slices);
  VolumePrediction out;
  for (int s = 0; s < depth; ++s) {
    const auto enc = encode(maps, s);
    const auto q = decode(enc, {}, select(enc), nullptr, {false, false});
    for (const auto& det : detect(q, s).detections)
      if (det.score >= options.min_score) out.slices.push_back(det);
  }
  for (const auto& det : geometry::merge_2d_to_3d(out.slices, options.link_iou, spacing))
    if (geometry::short_axis_mm(det.box) >= options.min_short_axis_mm) out.volume.push_back(det);
  return out;
}

template class LnDetr<float>;
template class LnDetr<double>;

}  // namespace lndetr::model
