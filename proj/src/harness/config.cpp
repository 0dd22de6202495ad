#include "lndetr/harness/config.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace lndetr::harness {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(lr > 0) || !(lr_end >= 0)) throw ConfigError("learning rates must be positive");
  if (lr_end > lr) throw ConfigError("lr_end must not exceed lr");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (grad_clip < 0) throw ConfigError("grad_clip must be non-negative");
  if (zero_gt_prob < 0 || zero_gt_prob > 1) throw ConfigError("zero_gt_prob must lie in [0,1]");
  if (eval_every < 1) throw ConfigError("eval_every must be positive");
  if (min_target_pixels < 1) throw ConfigError("min_target_pixels must be positive");
  for (double w : {weights.cls, weights.box, weights.mask, weights.iou, weights.contrastive})
    if (!(w >= 0)) throw ConfigError("loss weights must be non-negative");
  effective_model().validate();
}

int TrainConfig::steps_per_epoch(int train_volumes) const {
  if (train_volumes < 1) throw ConfigError("no training volumes");
  return (train_volumes + batch_size - 1) / batch_size;
}

model::ModelConfig TrainConfig::effective_model() const {
  auto m = model;
  if (!ablation.use_25d) m.slab_size = 1;
  m.debiased_selection = ablation.use_dqs;
  return m;
}

losses::LossWeights TrainConfig::effective_weights() const {
  auto w = weights;
  if (!ablation.use_dqs) w.iou = 0;
  if (!ablation.use_cl) w.contrastive = 0;
  return w;
}

double learning_rate(int step, int total_steps, int warmup_steps, double base, double end) {
  if (step < warmup_steps) return base * double(step) / double(warmup_steps);
  const int span = total_steps - 1 - warmup_steps;
  if (span <= 0) return step >= total_steps - 1 ? end : base;
  const double t = std::min(1.0, double(step - warmup_steps) / double(span));
  return end + 0.5 * (base - end) * (1.0 + std::cos(std::numbers::pi * t));
}

double learning_rate(const TrainConfig& cfg, int step, int total_steps) {
  return learning_rate(step, total_steps, cfg.warmup_steps, cfg.lr, cfg.lr_end);
}

json to_json(const model::ModelConfig& c) {
  return {{"slab_size", c.slab_size},         {"image_size", c.image_size},
          {"channels", c.channels},           {"hidden_dim", c.hidden_dim},
          {"heads", c.heads},                 {"ffn_dim", c.ffn_dim},
          {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
          {"num_queries", c.num_queries},     {"num_detections", c.num_detections},
          {"dn_budget", c.dn_budget},         {"num_classes", c.num_classes},
          {"max_tokens", c.max_tokens},       {"anchor_size", c.anchor_size},
          {"debiased_selection", c.debiased_selection}};
}

json to_json(const losses::LossWeights& w) {
  return {{"cls", w.cls}, {"box", w.box}, {"mask", w.mask}, {"iou", w.iou}, {"contrastive", w.contrastive}};
}

json to_json(const TrainConfig& c) {
  return {{"version", kConfigVersion},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lr_end", c.lr_end},
          {"warmup_steps", c.warmup_steps},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"grad_clip", c.grad_clip},
          {"zero_gt_prob", c.zero_gt_prob},
          {"eval_every", c.eval_every},
          {"augment", c.augment},
          {"min_target_pixels", c.min_target_pixels},
          {"data_dir", c.data_dir},
          {"weights", to_json(c.weights)},
          {"model", to_json(c.model)},
          {"ablation", {{"use_25d", c.ablation.use_25d}, {"use_dqs", c.ablation.use_dqs}, {"use_cl", c.ablation.use_cl}}}};
}

namespace {

// Reads every key of `j` through `fields`, rejecting keys it does not know.
template <typename F>
void read_object(const json& j, const std::string& where, const std::set<std::string>& known, F&& fields) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  try {
    fields();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

template <typename V>
void get_if(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

model::ModelConfig model_from_json(const json& j) {
  model::ModelConfig c;
  read_object(j, "model",
              {"slab_size", "image_size", "channels", "hidden_dim", "heads", "ffn_dim", "encoder_layers",
               "decoder_layers", "num_queries", "num_detections", "dn_budget", "num_classes", "max_tokens",
               "anchor_size", "debiased_selection"},
              [&] {
                get_if(j, "slab_size", c.slab_size);
                get_if(j, "image_size", c.image_size);
                get_if(j, "channels", c.channels);
                get_if(j, "hidden_dim", c.hidden_dim);
                get_if(j, "heads", c.heads);
                get_if(j, "ffn_dim", c.ffn_dim);
                get_if(j, "encoder_layers", c.encoder_layers);
                get_if(j, "decoder_layers", c.decoder_layers);
                get_if(j, "num_queries", c.num_queries);
                get_if(j, "num_detections", c.num_detections);
                get_if(j, "dn_budget", c.dn_budget);
                get_if(j, "num_classes", c.num_classes);
                get_if(j, "max_tokens", c.max_tokens);
                get_if(j, "anchor_size", c.anchor_size);
                get_if(j, "debiased_selection", c.debiased_selection);
              });
  return c;
}

}  // namespace

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  read_object(j, "config",
              {"version", "batch_size", "lr", "lr_end", "warmup_steps", "weight_decay", "epochs", "seed", "grad_clip",
               "zero_gt_prob", "eval_every", "augment", "min_target_pixels", "data_dir", "weights", "model",
               "ablation"},
              [&] {
                if (j.contains("version") && j.at("version").get<int>() != kConfigVersion)
                  throw ConfigError("config: unsupported version " + j.at("version").dump());
                get_if(j, "batch_size", c.batch_size);
                get_if(j, "lr", c.lr);
                get_if(j, "lr_end", c.lr_end);
                get_if(j, "warmup_steps", c.warmup_steps);
                get_if(j, "weight_decay", c.weight_decay);
                get_if(j, "epochs", c.epochs);
                get_if(j, "seed", c.seed);
                get_if(j, "grad_clip", c.grad_clip);
                get_if(j, "zero_gt_prob", c.zero_gt_prob);
                get_if(j, "eval_every", c.eval_every);
                get_if(j, "augment", c.augment);
                get_if(j, "min_target_pixels", c.min_target_pixels);
                get_if(j, "data_dir", c.data_dir);
              });
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    read_object(w, "weights", {"cls", "box", "mask", "iou", "contrastive"}, [&] {
      get_if(w, "cls", c.weights.cls);
      get_if(w, "box", c.weights.box);
      get_if(w, "mask", c.weights.mask);
      get_if(w, "iou", c.weights.iou);
      get_if(w, "contrastive", c.weights.contrastive);
    });
  }
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    read_object(a, "ablation", {"use_25d", "use_dqs", "use_cl"}, [&] {
      get_if(a, "use_25d", c.ablation.use_25d);
      get_if(a, "use_dqs", c.ablation.use_dqs);
      get_if(a, "use_cl", c.ablation.use_cl);
    });
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::string& path, const TrainConfig& c) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << to_json(c).dump(2) << '\n';
}

void apply_ablation(Ablation& a, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("ablation override must be KEY=BOOL: " + assignment);
  const auto key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  bool flag;
  if (value == "true" || value == "1")
    flag = true;
  else if (value == "false" || value == "0")
    flag = false;
  else
    throw ConfigError("ablation value must be true or false: " + assignment);
  if (key == "use_25d")
    a.use_25d = flag;
  else if (key == "use_dqs")
    a.use_dqs = flag;
  else if (key == "use_cl")
    a.use_cl = flag;
  else
    throw ConfigError("unknown ablation flag: " + key);
}

}  // namespace lndetr::harness
