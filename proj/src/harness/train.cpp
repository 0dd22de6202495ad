#include "lndetr/harness/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

namespace lndetr::harness {

using nlohmann::json;
using numcore::Tensor;
using synthgen::VolumeSample;

namespace {

constexpr std::uint64_t kModelStream = 1, kOrderStream = 2, kSampleStream = 3, kDnStream = 4;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return synthgen::derive_seed(synthgen::derive_seed(seed, stream), index);
}

// T slices centered on z with replicated edges, boxes recomputed.
VolumeSample extract_slab(const VolumeSample& v, int z, int slab) {
  VolumeSample s;
  s.id = v.id;
  s.width = v.width;
  s.height = v.height;
  s.depth = slab;
  s.spacing = v.spacing;
  s.seed = v.seed;
  const auto plane = std::size_t(v.width) * std::size_t(v.height);
  for (int t = 0; t < slab; ++t) {
    const auto src = std::size_t(std::clamp(z + t - slab / 2, 0, v.depth - 1)) * plane;
    s.voxels.insert(s.voxels.end(), v.voxels.begin() + std::ptrdiff_t(src),
                    v.voxels.begin() + std::ptrdiff_t(src + plane));
    s.labels.insert(s.labels.end(), v.labels.begin() + std::ptrdiff_t(src),
                    v.labels.begin() + std::ptrdiff_t(src + plane));
  }
  synthgen::recompute_boxes(s);
  return s;
}

model::SampleTargets<float> center_targets(const VolumeSample& s, int mask_size, int min_pixels) {
  const int z = s.depth / 2;
  const int cell = s.width / mask_size;
  model::SampleTargets<float> t;
  for (const auto& st : synthgen::slice_targets(s, z, min_pixels)) {
    const int cls = s.boxes.empty() ? 0 : s.boxes[std::size_t(st.label - 1)].cls;
    t.boxes.push_back({geometry::to_normalized(st.box, s.width, s.height), cls});
    std::vector<float> m(std::size_t(mask_size * mask_size), 0.0f);
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        if (s.labels[s.index(x, y, z)] == st.label) m[std::size_t((y / cell) * mask_size + x / cell)] += 1.0f;
    for (auto& v : m) v /= float(cell * cell);
    t.masks.push_back(std::move(m));
  }
  return t;
}

void check_volume(const VolumeSample& v, const model::ModelConfig& m) {
  if (v.width != m.image_size || v.height != m.image_size)
    throw std::runtime_error("volume " + v.id + " is " + std::to_string(v.width) + "x" + std::to_string(v.height) +
                             ", the model expects " + std::to_string(m.image_size) + "x" +
                             std::to_string(m.image_size) + " slices");
}

double value_of(const Tensor<float>& t) { return t.defined() ? double(t.item()) : 0.0; }

json point_json(const evald::FrocResult& r) {
  json recalls = json::object();
  for (std::size_t i = 0; i < evald::kFpRates.size(); ++i) recalls[std::to_string(evald::kFpRates[i])] = r.recalls[i];
  return recalls;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

TrainingSample make_sample(const VolumeSample& volume, int z, const TrainConfig& cfg,
                           const synthgen::AugmentParams* augment, std::uint64_t seed) {
  const auto m = cfg.effective_model();
  auto slab = extract_slab(volume, z, m.slab_size);
  if (augment) slab = synthgen::augment(slab, *augment, seed);
  TrainingSample s;
  s.targets = center_targets(slab, m.mask_size(), cfg.min_target_pixels);
  s.slab = std::move(slab.voxels);
  return s;
}

Trainer::Trainer(const TrainConfig& cfg, int total_steps)
    : cfg_(cfg),
      total_steps_(total_steps),
      model_(cfg.effective_model(), stream_seed(cfg.seed, kModelStream, 0)),
      optimizer_(model_.parameters(), {0.9, 0.999, 1e-8, cfg.weight_decay}) {
  objective_.weights = cfg.effective_weights();
}

StepRecord Trainer::step(const std::vector<TrainingSample>& batch) {
  const auto& m = model_.config();
  const int B = int(batch.size()), T = m.slab_size, H = m.image_size;
  const auto plane = std::size_t(H) * std::size_t(H);
  std::vector<float> input;
  input.reserve(std::size_t(B * T) * plane);
  for (const auto& s : batch) {
    if (s.slab.size() != std::size_t(T) * plane) throw std::invalid_argument("Trainer::step: slab size mismatch");
    input.insert(input.end(), s.slab.begin(), s.slab.end());
  }
  const auto& w = objective_.weights;
  const bool masks = w.mask > 0;

  StepRecord rec;
  rec.step = step_;
  rec.lr = learning_rate(cfg_, step_, total_steps_);
  auto& params = model_.parameters();
  params.zero_grad();
  {
    numcore::Graph<float> graph;
    numcore::GraphScope<float> scope(graph);
    const auto maps = model_.backbone(Tensor<float>::from({B * T, 1, H, H}, std::move(input)));
    Tensor<float> total;
    for (int b = 0; b < B; ++b) {
      const auto& targets = batch[std::size_t(b)].targets;
      const auto enc = model_.encode(maps, b);
      const auto pixels = masks ? model_.pixel_embedding(maps, b) : Tensor<float>{};
      const auto dn = denoising::build_dn_groups(targets.boxes, m.dn_budget, {}, m.num_classes + 1,
                                                 stream_seed(cfg_.seed, kDnStream, std::uint64_t(step_ * B + b)));
      const auto q = model_.decode(enc, pixels, model_.select(enc), &dn, {false, masks});
      const auto parts = model::sample_objective(model_, enc, q, dn, targets, objective_).components;
      const auto loss = losses::total_loss(parts, w);
      rec.cls += w.cls * value_of(parts.cls) / B;
      rec.box += w.box * value_of(parts.box) / B;
      rec.mask += w.mask * value_of(parts.mask) / B;
      rec.iou += w.iou * value_of(parts.iou) / B;
      rec.contrastive += w.contrastive * value_of(parts.contrastive) / B;
      total = total.defined() ? numcore::add(total, loss) : loss;
    }
    const auto mean = numcore::mul(total, 1.0f / float(B));
    rec.total = double(mean.item());
    if (!std::isfinite(rec.total)) throw NumericalError("non-finite total loss at step " + std::to_string(step_));
    graph.backward(mean);
  }
  rec.grad_norm = clip_grad_norm(params, cfg_.grad_clip);
  if (!std::isfinite(rec.grad_norm)) {
    params.zero_grad();
    throw NumericalError("non-finite gradient at step " + std::to_string(step_));
  }
  optimizer_.step(rec.lr);
  params.zero_grad();
  ++step_;
  return rec;
}

json to_json(const evald::FrocResult& r) {
  json j{{"recalls", point_json(r)},
         {"average_recall", r.average_recall},
         {"volumes", r.volumes},
         {"eligible_gts", r.eligible_gts}};
  j["ap"] = r.ap ? json(*r.ap) : json(nullptr);
  return j;
}

json steps_json(const RunRecord& r) {
  json steps = json::array();
  for (const auto& s : r.steps)
    steps.push_back({{"step", s.step},
                     {"lr", s.lr},
                     {"cls", s.cls},
                     {"box", s.box},
                     {"mask", s.mask},
                     {"iou", s.iou},
                     {"contrastive", s.contrastive},
                     {"total", s.total},
                     {"grad_norm", s.grad_norm}});
  return steps;
}

json to_json(const RunRecord& r) {
  json evals = json::array();
  for (const auto& e : r.evals) evals.push_back({{"epoch", e.epoch}, {"step", e.step}, {"val", to_json(e.froc)}});
  return {{"config", r.config},
          {"status", r.status},
          {"steps", steps_json(r)},
          {"evals", evals},
          {"best_epoch", r.best_epoch},
          {"final", to_json(r.final_result)},
          {"iou_pearson", r.iou_pearson},
          {"iou_pairs", r.iou_pairs},
          {"wall_time_s", r.wall_time_s}};
}

synthgen::Dataset generate_dataset(const synthgen::SynthConfig& cfg, const SplitSizes& sizes) {
  synthgen::Dataset d;
  auto split = [&](int index, int count, const std::string& prefix) {
    auto c = cfg;
    c.seed = synthgen::derive_seed(cfg.seed, std::uint64_t(index));
    return synthgen::generate(c, count, prefix);
  };
  d.train = split(0, sizes.train, "train_");
  d.val = split(1, sizes.val, "val_");
  d.test = split(2, sizes.test, "test_");
  return d;
}

void save_checkpoint(const std::string& path, const TrainConfig& cfg, const model::LnDetr<float>& model) {
  model::write_checkpoint(path, to_json(cfg).dump(), model.parameters());
}

LoadedModel load_checkpoint(const std::string& path) {
  const auto ck = model::read_checkpoint(path);
  json j;
  try {
    j = json::parse(ck.config);
  } catch (const json::parse_error& e) {
    throw model::CheckpointError(path + ": malformed configuration echo");
  }
  LoadedModel out;
  out.config = config_from_json(j);
  out.model = std::make_unique<model::LnDetr<float>>(out.config.effective_model(), 0);
  model::load_parameters(out.model->parameters(), ck);
  return out;
}

EvalResult evaluate_model(const model::LnDetr<float>& model, const std::vector<VolumeSample>& volumes,
                          const model::PredictOptions& options) {
  EvalResult out;
  std::vector<evald::GtVolume> gts;
  for (const auto& v : volumes) {
    check_volume(v, model.config());
    const auto p = model.predict(v.voxels, v.width, v.height, v.depth, v.spacing, options);
    out.predictions.push_back({v.id, p.volume});
    gts.push_back(v.ground_truth());
  }
  out.froc = evald::evaluate(out.predictions, gts);
  return out;
}

IouPairs matched_iou_pairs(const model::LnDetr<float>& model, const std::vector<VolumeSample>& volumes,
                           int min_target_pixels) {
  numcore::NoGradScope<float> no_grad;
  const auto& m = model.config();
  const int H = m.image_size;
  IouPairs out;
  for (const auto& v : volumes) {
    check_volume(v, m);
    for (int z = 0; z < v.depth; ++z) {
      if (synthgen::slice_targets(v, z, min_target_pixels).empty()) continue;
      const auto slab = extract_slab(v, z, m.slab_size);
      const auto targets = center_targets(slab, m.mask_size(), min_target_pixels);
      if (targets.boxes.empty()) continue;
      const auto maps = model.backbone(Tensor<float>::from({m.slab_size, 1, H, H}, slab.voxels));
      const auto enc = model.encode(maps, 0);
      const auto q = model.decode(enc, {}, model.select(enc), nullptr, {false, false});
      const auto& last = q.layers.back();
      const auto match = model::match_rows(last.cls_logits, last.boxes, 0, q.num_matching, targets.boxes, {});
      const auto b = last.boxes.data();
      for (auto [i, k] : match.pairs) {
        const auto r = std::size_t(k) * 4;
        const geometry::CenterBox pred{double(b[r]), double(b[r + 1]), double(b[r + 2]), double(b[r + 3])};
        out.predicted.push_back(double(last.iou_scores.data()[std::size_t(k)]));
        out.truth.push_back(geometry::iou_2d(geometry::to_corners(pred),
                                             geometry::to_corners(targets.boxes[std::size_t(i)].box)));
      }
    }
  }
  return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return 0.0;
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

RunRecord train(const TrainConfig& cfg, const synthgen::Dataset& data, const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  cfg.validate();
  const auto mcfg = cfg.effective_model();
  if (data.train.empty()) throw std::runtime_error("dataset has no training volumes");
  for (const auto* split : {&data.train, &data.val, &data.test})
    for (const auto& v : *split) check_volume(v, mcfg);
  const int n = int(data.train.size());
  const int per_epoch = cfg.steps_per_epoch(n), total = cfg.total_steps(n);
  if (total > 0 && cfg.warmup_steps > total)
    throw ConfigError("warmup_steps (" + std::to_string(cfg.warmup_steps) + ") exceeds the " + std::to_string(total) +
                      " training steps");

  namespace fs = std::filesystem;
  const bool write = !options.out_dir.empty();
  const fs::path out(options.out_dir);
  if (write) fs::create_directories(out);
  auto log = [&](const std::string& line) {
    if (options.log) *options.log << line << std::endl;
  };

  Trainer trainer(cfg, total);
  auto& model = trainer.model();
  RunRecord rec;
  rec.config = to_json(cfg);
  if (write) {
    save_checkpoint((out / "init.ckpt").string(), cfg, model);
    save_checkpoint((out / "best.ckpt").string(), cfg, model);
  }
  auto snapshot = [&] {
    std::vector<std::vector<float>> values;
    for (const auto& [name, t] : model.parameters().entries()) values.emplace_back(t.data().begin(), t.data().end());
    return values;
  };
  auto best = snapshot();
  double best_recall = -1;

  // Slices with and without targets, per training volume.
  std::vector<std::vector<int>> positive(static_cast<std::size_t>(n)), negative(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& v = data.train[std::size_t(i)];
    for (int z = 0; z < v.depth; ++z)
      (synthgen::slice_targets(v, z, cfg.min_target_pixels).empty() ? negative : positive)[std::size_t(i)].push_back(z);
  }
  const synthgen::AugmentParams augment;

  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<int> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 shuffle_rng(stream_seed(cfg.seed, kOrderStream, std::uint64_t(epoch)));
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (int s = 0; s < per_epoch; ++s) {
        std::vector<TrainingSample> batch;
        for (int p = s * cfg.batch_size; p < std::min(n, (s + 1) * cfg.batch_size); ++p) {
          const int i = order[std::size_t(p)];
          std::mt19937_64 rng(stream_seed(cfg.seed, kSampleStream, std::uint64_t(epoch) * std::uint64_t(n) + p));
          const auto& pos = positive[std::size_t(i)];
          const auto& neg = negative[std::size_t(i)];
          const bool empty = std::uniform_real_distribution<double>(0, 1)(rng) < cfg.zero_gt_prob;
          const auto& pool = (empty && !neg.empty()) || pos.empty() ? neg : pos;
          const int z = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
          batch.push_back(make_sample(data.train[std::size_t(i)], z, cfg, cfg.augment ? &augment : nullptr, rng()));
        }
        rec.steps.push_back(trainer.step(batch));
        const auto& last = rec.steps.back();
        if (last.step % 50 == 0)
          log("step " + std::to_string(last.step) + "/" + std::to_string(total) + " loss " +
              std::to_string(last.total) + " lr " + std::to_string(last.lr));
      }
      if ((epoch + 1) % cfg.eval_every != 0 && epoch + 1 != cfg.epochs) continue;
      if (data.val.empty()) {
        best = snapshot();
        rec.best_epoch = epoch + 1;
        if (write) save_checkpoint((out / "best.ckpt").string(), cfg, model);
      } else {
        const auto val = evaluate_model(model, data.val).froc;
        rec.evals.push_back({epoch + 1, trainer.steps_done(), val});
        log("epoch " + std::to_string(epoch + 1) + " val " + evald::format_result(val));
        if (val.average_recall > best_recall) {
          best_recall = val.average_recall;
          best = snapshot();
          rec.best_epoch = epoch + 1;
          if (write) save_checkpoint((out / "best.ckpt").string(), cfg, model);
        }
      }
      if (write) save_checkpoint((out / "last.ckpt").string(), cfg, model);
    }
  } catch (const NumericalError& e) {
    rec.status = std::string("numerical failure: ") + e.what();
    rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (write) write_json(out / "run.json", to_json(rec));
    throw;
  }

  for (std::size_t i = 0; i < best.size(); ++i) {
    auto t = model.parameters().entries()[i].second;
    std::copy(best[i].begin(), best[i].end(), t.mutable_data().begin());
  }
  if (options.evaluate_test && !data.test.empty()) {
    rec.final_result = evaluate_model(model, data.test).froc;
    log("test " + evald::format_result(rec.final_result));
  }
  if (!data.val.empty()) {
    const auto pairs = matched_iou_pairs(model, data.val, cfg.min_target_pixels);
    rec.iou_pairs = pairs.predicted.size();
    rec.iou_pearson = pearson(pairs.predicted, pairs.truth);
  }
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (write) write_json(out / "run.json", to_json(rec));
  return rec;
}

}  // namespace lndetr::harness
