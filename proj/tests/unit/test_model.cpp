#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "support/gradcheck.hpp"
#include "lndetr/model/objective.hpp"

using namespace lndetr::model;
using lndetr::geometry::CenterBox;
using lndetr::geometry::LabeledBox;
using lndetr::numcore::Shape;
using lndetr::numcore::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 32;
  c.channels = {2, 3, 3, 3};
  c.hidden_dim = 8;
  c.heads = 2;
  c.ffn_dim = 8;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.num_queries = 5;
  c.num_detections = 3;
  c.dn_budget = 4;
  return c;
}

template <typename T>
Tensor<T> random_input(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<T> v(std::size_t(lndetr::numcore::numel(shape)));
  for (auto& x : v) x = T(u(rng));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
void perturb(LnDetr<T>& model, const std::string& prefix, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto [name, t] : model.parameters().entries())
    if (name.rfind(prefix, 0) == 0)
      for (auto& v : t.mutable_data()) v += T(n(rng));
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return std::vector<T>(t.data().begin(), t.data().end());
}

const std::vector<LabeledBox> kGts{{CenterBox{0.4, 0.45, 0.25, 0.2}, 0}, {CenterBox{0.7, 0.3, 0.15, 0.2}, 0}};

template <typename T>
SampleTargets<T> targets_for(const ModelConfig& c) {
  SampleTargets<T> t;
  t.boxes = kGts;
  const int s = c.mask_size();
  for (const auto& g : kGts) {
    std::vector<T> m(std::size_t(s * s), T(0));
    const auto px = lndetr::geometry::to_pixels(g.box, s, s);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        if (x + 0.5 > px.x0 && x + 0.5 < px.x1 && y + 0.5 > px.y0 && y + 0.5 < px.y1) m[std::size_t(y * s + x)] = 1;
    t.masks.push_back(m);
  }
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.token_count() == 64 + 16 + 4);
  CHECK(c.mask_size() == 16);
  c.slab_size = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.num_detections = c.num_queries + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.max_tokens = 80;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.hidden_dim = 30;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("debiased selection examples") {
  const std::vector<EncoderProposal> p{{0, 0.9, 0.5, {}}, {1, 0.6, 0.9, {}}};
  CHECK(debiased_select(p, 1) == std::vector<std::int64_t>{1});
  CHECK(debiased_select(p, 1, false) == std::vector<std::int64_t>{0});
  CHECK_THROWS(debiased_select(p, 3));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<EncoderProposal> props;
    for (int i = 0; i < 30; ++i) props.push_back({i, u(rng), u(rng), {}});
    const auto base = debiased_select(props, 10);
    // Equal IoU scores reduce to classification ranking.
    auto flat = props;
    for (auto& q : flat) q.iou_score = 0.7;
    CHECK(debiased_select(flat, 10) == debiased_select(props, 10, false));
    // Positive rescaling of the IoU scores.
    auto half = props;
    for (auto& q : half) q.iou_score *= 0.5;
    CHECK(debiased_select(half, 10) == base);
    // A strictly monotone map of the product score (cube root).
    auto mapped = props;
    for (auto& q : mapped) q.iou_score = std::cbrt(q.cls_score * q.iou_score) / q.cls_score;
    CHECK(debiased_select(mapped, 10) == base);
  }
  // Ties: higher cls first, then lower token.
  const std::vector<EncoderProposal> tied{{0, 0.5, 0.8, {}}, {1, 0.8, 0.5, {}}, {2, 0.8, 0.5, {}}};
  CHECK(debiased_select(tied, 3) == std::vector<std::int64_t>{1, 2, 0});
}

TEST_CASE("backbone shapes and the zero input") {
  LnDetr<float> model(ModelConfig{}, 1);
  const auto maps = model.backbone(random_input<float>({6, 1, 64, 64}, 2));
  REQUIRE(maps.size() == 4);
  CHECK(maps[0].shape() == Shape{2, 16, 16, 16});
  CHECK(maps[1].shape() == Shape{2, 32, 8, 8});
  CHECK(maps[2].shape() == Shape{2, 64, 4, 4});
  CHECK(maps[3].shape() == Shape{2, 64, 2, 2});
  const auto zero = model.backbone(Tensor<float>::zeros({3, 1, 64, 64}));
  for (const auto& m : zero)
    for (float v : m.data()) REQUIRE(v == 0.0f);
  CHECK_THROWS(model.backbone(Tensor<float>::zeros({4, 1, 64, 64})));
}

TEST_CASE("a single-slice model and the initial fusion pass the center through") {
  auto c1 = tiny_config();
  c1.slab_size = 1;
  auto c3 = tiny_config();
  LnDetr<double> one(c1, 7), three(c3, 7);
  const auto slab = random_input<double>({3, 1, 32, 32}, 4);
  const auto center = lndetr::numcore::slice(slab, 0, 1, 1);
  const auto a = one.backbone(center), b = three.backbone(slab);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(a[std::size_t(i)].shape() == b[std::size_t(i)].shape());
    for (std::int64_t k = 0; k < a[std::size_t(i)].numel(); ++k)
      REQUIRE(a[std::size_t(i)].at(k) == doctest::Approx(b[std::size_t(i)].at(k)).epsilon(1e-12));
  }
}

TEST_CASE("volume features equal explicit replicate-padded slabs") {
  for (int slab_size : {1, 3, 5}) {
    auto c = tiny_config();
    c.slab_size = slab_size;
    LnDetr<double> model(c, 3);
    perturb(model, "backbone", 11);
    const int depth = 4, r = slab_size / 2, px = 32 * 32;
    const auto volume = random_input<double>({depth, 1, 32, 32}, 8);
    std::vector<double> slabs;
    for (int s = 0; s < depth; ++s)
      for (int t = -r; t <= r; ++t) {
        const int z = std::clamp(s + t, 0, depth - 1);
        slabs.insert(slabs.end(), volume.data().begin() + z * px, volume.data().begin() + (z + 1) * px);
      }
    const auto a = model.volume_features(volume);
    const auto b = model.backbone(Tensor<double>::from({depth * slab_size, 1, 32, 32}, slabs));
    for (int i = 0; i < 4; ++i) {
      REQUIRE(a[std::size_t(i)].shape() == b[std::size_t(i)].shape());
      double worst = 0;
      for (std::int64_t k = 0; k < a[std::size_t(i)].numel(); ++k)
        worst = std::max(worst, std::abs(a[std::size_t(i)].at(k) - b[std::size_t(i)].at(k)));
      CHECK(worst < 1e-12);
    }
  }
}

TEST_CASE("encoder outputs") {
  LnDetr<float> model(ModelConfig{}, 2);
  const auto maps = model.backbone(random_input<float>({3, 1, 64, 64}, 1));
  const auto enc = model.encode(maps, 0);
  CHECK(enc.memory.shape() == Shape{84, 64});
  CHECK(enc.proposals.size() == 84);
  for (const auto& p : enc.proposals) {
    CHECK(p.cls_score > 0);
    CHECK(p.cls_score < 1);
    for (double v : {p.box.cx, p.box.cy, p.box.w, p.box.h}) {
      CHECK(v >= 0);
      CHECK(v <= 1);
    }
  }
  // Swapping two level embeddings changes the memory.
  LnDetr<float> swapped(ModelConfig{}, 2);
  auto table = swapped.parameters().get("encoder.level_embed");
  auto data = table.mutable_data();
  std::swap_ranges(data.begin(), data.begin() + 64, data.begin() + 64);
  const auto other = swapped.encode(maps, 0);
  CHECK(values(other.memory) != values(enc.memory));
}

TEST_CASE("zero refinement keeps the reference boxes") {
  LnDetr<double> model(tiny_config(), 4);
  const auto maps = model.backbone(random_input<double>({3, 1, 32, 32}, 6));
  const auto enc = model.encode(maps, 0);
  const auto q = model.decode(enc, model.pixel_embedding(maps, 0), model.select(enc), nullptr);
  CHECK(q.size() == tiny_config().num_queries);
  for (const auto& layer : q.layers) {
    CHECK(layer.boxes.shape() == Shape{5, 4});
    CHECK(layer.mask_logits.shape() == Shape{5, 64});
    for (int k = 0; k < q.size(); ++k) {
      const auto& ref = q.references[std::size_t(k)];
      const double r[4] = {ref.cx, ref.cy, ref.w, ref.h};
      for (int i = 0; i < 4; ++i) CHECK(layer.boxes.at(k * 4 + i) == doctest::Approx(r[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("dn queries and matching queries are isolated") {
  LnDetr<float> model(ModelConfig{}, 9);
  perturb(model, "decoder", 2, 0.1);
  const auto maps = model.backbone(random_input<float>({3, 1, 64, 64}, 3));
  const auto enc = model.encode(maps, 0);
  const auto pixels = model.pixel_embedding(maps, 0);
  const auto sel = model.select(enc);
  const auto dn_a = lndetr::denoising::build_dn_groups(kGts, 24, {}, 2, 1);
  auto dn_b = lndetr::denoising::build_dn_groups(kGts, 24, {}, 2, 99);
  for (auto& b : dn_b.boxes) b = CenterBox{0.5, 0.5, 0.01, 0.01};
  const auto qa = model.decode(enc, pixels, sel, &dn_a, {true, true});
  const auto qb = model.decode(enc, pixels, sel, &dn_b, {true, true});
  REQUIRE(qa.num_dn == 24);
  const int nd = qa.num_dn, k = qa.num_matching, n = qa.size();
  for (std::size_t l = 0; l < qa.layers.size(); ++l) {
    const auto& a = qa.layers[l];
    const auto& b = qb.layers[l];
    CHECK(values(lndetr::numcore::slice(a.queries, 0, nd, k)) == values(lndetr::numcore::slice(b.queries, 0, nd, k)));
    CHECK(values(lndetr::numcore::slice(a.boxes, 0, nd, k)) == values(lndetr::numcore::slice(b.boxes, 0, nd, k)));
    CHECK(values(a.mask_logits) == values(b.mask_logits));
  }
  // Attention weights across the partition are exactly zero.
  REQUIRE(qa.self_attention.size() == std::size_t(4 * n * n));
  int crossing = 0;
  for (int h = 0; h < 4; ++h)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const bool blocked = (i < nd) != (j < nd) || (i < nd && j < nd && i / 2 != j / 2);
        if (!blocked) continue;
        ++crossing;
        REQUIRE(qa.self_attention[std::size_t((h * n + i) * n + j)] == 0.0f);
      }
  CHECK(crossing > 0);
}

TEST_CASE("objective sends gradient to every backbone parameter") {
  LnDetr<float> model(ModelConfig{}, 12);
  lndetr::numcore::Graph<float> graph;
  lndetr::numcore::GraphScope<float> scope(graph);
  const auto maps = model.backbone(random_input<float>({3, 1, 64, 64}, 5));
  const auto enc = model.encode(maps, 0);
  const auto dn = lndetr::denoising::build_dn_groups(kGts, 24, {}, 2, 4);
  const auto q = model.decode(enc, model.pixel_embedding(maps, 0), model.select(enc), &dn);
  const auto obj = sample_objective(model, enc, q, dn, targets_for<float>(model.config()), ObjectiveConfig{});
  CHECK(obj.predicted_iou.size() == kGts.size());
  const auto total = lndetr::losses::total_loss(obj.components, {});
  CHECK(std::isfinite(total.item()));
  graph.backward(total);
  int backbone = 0;
  for (const auto& [name, t] : model.parameters().entries()) {
    if (name.rfind("backbone", 0) != 0 && name.rfind("contrastive", 0) != 0 && name != "decoder.label_embed")
      continue;
    double norm = 0;
    for (float g : t.grad()) norm += double(g) * g;
    INFO(name);
    CHECK(norm > 0);
    backbone += name.rfind("backbone", 0) == 0;
  }
  CHECK(backbone == 4 * 6);
}

TEST_CASE("unmatched queries give the shared iou head no gradient") {
  LnDetr<float> model(ModelConfig{}, 13);
  lndetr::numcore::Graph<float> graph;
  lndetr::numcore::GraphScope<float> scope(graph);
  const auto maps = model.backbone(random_input<float>({3, 1, 64, 64}, 5));
  const auto enc = model.encode(maps, 0);
  const auto q = model.decode(enc, model.pixel_embedding(maps, 0), model.select(enc), nullptr);
  auto cfg = ObjectiveConfig{};
  const auto obj = sample_objective(model, enc, q, {}, targets_for<float>(model.config()), cfg);
  graph.backward(obj.components.iou);
  // The iou loss reaches the decoder iou head through matched rows only; a
  // layer output row's gradient is non-zero exactly for matched queries.
  const auto& last = q.layers.back();
  REQUIRE(last.iou_scores.has_grad());
  const auto match = match_rows(last.cls_logits, last.boxes, 0, q.num_matching, kGts, cfg.cost);
  for (int k = 0; k < q.num_matching; ++k) {
    bool matched = false;
    for (auto [i, kq] : match.pairs) matched |= kq == k;
    CHECK((last.iou_scores.grad()[std::size_t(k)] != 0.0f) == matched);
  }
}

// Refs between decoder layers, the encoder features feeding the queries, and
// the IoU-prediction targets are detached, so finite differences only agree
// with backprop on paths without a stop-gradient. Parameters that move boxes
// are checked with the IoU term off; the IoU head with every term on.
const lndetr::losses::LossWeights kNoIouTerm{4.0, 1.0, 1.0, 0.0, 1.0};

TEST_CASE("decoder objective passes gradcheck on a tiny double model") {
  auto c = tiny_config();
  c.decoder_layers = 1;
  LnDetr<double> model(c, 21);
  perturb(model, "decoder.box_head", 3, 0.2);
  const auto slab = random_input<double>({3, 1, 32, 32}, 10);
  const auto dn = lndetr::denoising::build_dn_groups(kGts, c.dn_budget, {}, 2, 2);
  const auto targets = targets_for<double>(c);
  auto loss_with = [&](const lndetr::losses::LossWeights& w) -> lndetr::testing::Fn {
    return [&, w](const std::vector<Tensor<double>>&) {
      ObjectiveConfig cfg;
      cfg.weights = w;
      const auto maps = model.backbone(slab);
      const auto enc = model.encode(maps, 0);
      const auto q = model.decode(enc, model.pixel_embedding(maps, 0), model.select(enc), &dn);
      return lndetr::losses::total_loss(sample_objective(model, enc, q, dn, targets, cfg).components, w);
    };
  };
  std::vector<Tensor<double>> params;
  for (const auto& name : {"decoder.layer0.self_attn.q.weight", "decoder.layer0.cross_attn.v.weight",
                           "decoder.query_pos.0.weight", "decoder.box_head.2.weight", "decoder.mask_head.0.weight",
                           "mask.pixel_proj.weight", "contrastive.weight", "decoder.label_embed"})
    params.push_back(model.parameters().get(name));
  std::mt19937_64 rng(1);
  CHECK(lndetr::testing::gradcheck(loss_with(kNoIouTerm), params, rng, 1e-6) < 1e-4);
  CHECK(lndetr::testing::gradcheck(loss_with({}), {model.parameters().get("decoder.iou_head.weight")}, rng, 1e-6) <
        1e-4);
}

TEST_CASE("encoder losses pass gradcheck through the backbone and fusion") {
  const auto c = tiny_config();
  LnDetr<double> model(c, 22);
  perturb(model, "backbone", 5, 0.1);
  perturb(model, "encoder.box_head", 4, 0.2);
  const auto slab = random_input<double>({3, 1, 32, 32}, 11);
  const ObjectiveConfig cfg;
  std::vector<CenterBox> boxes;
  for (const auto& g : kGts) boxes.push_back(g.box);
  lndetr::matching::MatchAssignment match;
  {
    lndetr::numcore::NoGradScope<double> off;
    const auto enc = model.encode(model.backbone(slab), 0);
    match = match_rows(enc.cls_logits, enc.boxes, 0, int(enc.cls_logits.dim(0)), kGts, cfg.cost);
  }
  auto loss_with = [&](const lndetr::losses::LossWeights& w) -> lndetr::testing::Fn {
    return [&, w](const std::vector<Tensor<double>>&) {
      const auto enc = model.encode(model.backbone(slab), 0);
      std::vector<int> labels(std::size_t(enc.cls_logits.dim(0)), -1);
      for (auto [i, k] : match.pairs) labels[std::size_t(k)] = 0;
      lndetr::losses::LossComponents<double> parts;
      parts.cls = lndetr::losses::classification_loss(enc.cls_logits, labels, 2.0, cfg.cls);
      parts.box = lndetr::losses::box_loss(enc.boxes, boxes, match, cfg.box);
      parts.iou = lndetr::losses::iou_pred_loss(enc.iou_scores, enc.boxes, boxes, match);
      return lndetr::losses::total_loss(parts, w);
    };
  };
  std::vector<Tensor<double>> params;
  for (const auto& name : {"backbone.block0.conv_a.weight", "backbone.block2.conv_b.bias", "backbone.block1.fuse.weight",
                           "backbone.block3.fuse.weight", "encoder.level_embed", "encoder.layer0.attn.k.weight",
                           "encoder.input_proj1.weight", "encoder.box_head.2.weight"})
    params.push_back(model.parameters().get(name));
  std::mt19937_64 rng(2);
  CHECK(lndetr::testing::gradcheck(loss_with(kNoIouTerm), params, rng, 1e-6) < 1e-4);
  CHECK(lndetr::testing::gradcheck(loss_with({}), {model.parameters().get("encoder.iou_head.weight")}, rng, 1e-6) <
        1e-4);
}

TEST_CASE("forward passes and construction are deterministic") {
  LnDetr<float> a(ModelConfig{}, 5), b(ModelConfig{}, 5);
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    CHECK(values(a.parameters().entries()[i].second) == values(b.parameters().entries()[i].second));
  const auto input = random_input<float>({3, 1, 64, 64}, 6);
  auto run = [&](const LnDetr<float>& m) {
    const auto maps = m.backbone(input);
    const auto enc = m.encode(maps, 0);
    return values(m.decode(enc, m.pixel_embedding(maps, 0), m.select(enc), nullptr).layers.back().boxes);
  };
  CHECK(run(a) == run(a));
  CHECK(run(a) == run(b));
}

TEST_CASE("checkpoint round trip is bit exact") {
  LnDetr<float> model(ModelConfig{}, 8);
  perturb(model, "", 6, 0.01);
  const auto path = (std::filesystem::temp_directory_path() / "lndetr_model_test.ckpt").string();
  write_checkpoint(path, "{\"echo\":1}", model.parameters());
  const auto ck = read_checkpoint(path);
  CHECK(ck.config == "{\"echo\":1}");
  LnDetr<float> other(ModelConfig{}, 99);
  load_parameters(other.parameters(), ck);
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    REQUIRE(values(model.parameters().entries()[i].second) == values(other.parameters().entries()[i].second));

  auto c1 = ModelConfig{};
  c1.slab_size = 1;
  LnDetr<float> wrong(c1, 1);
  CHECK_THROWS_AS(load_parameters(wrong.parameters(), ck), CheckpointError);
  {
    std::ofstream bad(path, std::ios::binary);
    bad << "NOTACKPT";
  }
  CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("volume prediction contracts") {
  LnDetr<float> model(ModelConfig{}, 3);
  perturb(model, "decoder", 8, 0.05);
  const int depth = 4;
  const auto volume = random_input<float>({depth, 1, 64, 64}, 12);
  const std::vector<float> voxels(volume.data().begin(), volume.data().end());
  const lndetr::geometry::Spacing sp{0.8, 0.8, 2.0};
  const auto pred = model.predict(voxels, 64, 64, depth, sp);
  std::vector<int> per_slice(depth, 0);
  for (const auto& d : pred.slices) {
    ++per_slice[std::size_t(d.slice_index)];
    CHECK(d.score == doctest::Approx(d.cls_score * d.iou_score));
    CHECK(d.box.x0 >= 0);
    CHECK(d.box.x1 <= 64);
  }
  for (int n : per_slice) CHECK(n == model.config().num_detections);
  for (const auto& d : pred.volume) CHECK(lndetr::geometry::short_axis_mm(d.box) >= 5.0);

  // Thinner than a slab: edge replication still yields every slice.
  const std::vector<float> one(voxels.begin(), voxels.begin() + 64 * 64);
  CHECK(model.predict(one, 64, 64, 1, sp).slices.size() == std::size_t(model.config().num_detections));

  // A model whose classifier rejects everything reports nothing.
  auto bias = model.parameters().get("decoder.cls_head.bias");
  bias.mutable_data()[0] = -60.0f;
  PredictOptions opt;
  opt.min_score = 1e-6;
  const auto none = model.predict(voxels, 64, 64, depth, sp, opt);
  CHECK(none.slices.empty());
  CHECK(none.volume.empty());
  CHECK_THROWS(model.predict(voxels, 32, 32, depth, sp));
}
