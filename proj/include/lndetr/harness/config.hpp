#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "lndetr/losses/losses.hpp"
#include "lndetr/model/config.hpp"

namespace lndetr::harness {

using model::ConfigError;

struct Ablation {
  bool use_25d = true;
  bool use_dqs = true;
  bool use_cl = true;

  bool operator==(const Ablation&) const = default;
};

inline constexpr int kConfigVersion = 1;

struct TrainConfig {
  int batch_size = 4;
  double lr = 2e-4;
  double lr_end = 1e-5;
  int warmup_steps = 50;
  double weight_decay = 1e-4;
  int epochs = 30;
  std::uint64_t seed = 0;
  double grad_clip = 0.1;     // global gradient norm; 0 disables
  double zero_gt_prob = 0.3;  // chance a training sample is a slice without targets
  int eval_every = 5;         // epochs between validation passes
  bool augment = true;
  int min_target_pixels = 3;  // slice targets narrower or shorter are dropped
  std::string data_dir;
  losses::LossWeights weights;
  model::ModelConfig model;
  Ablation ablation;

  // Throws ConfigError. Step-count invariants need the dataset size, see
  // steps_per_epoch().
  void validate() const;
  int steps_per_epoch(int train_volumes) const;
  int total_steps(int train_volumes) const { return epochs * steps_per_epoch(train_volumes); }

  // Model and loss weights with the ablation flags applied: no 2.5D means
  // single-slice input, no debiased selection ranks by cls alone and drops
  // the IoU term, no contrastive learning drops the contrastive term.
  model::ModelConfig effective_model() const;
  losses::LossWeights effective_weights() const;
};

// Linear warmup from 0 to base, then cosine decay reaching end at the last
// step (total_steps - 1).
double learning_rate(int step, int total_steps, int warmup_steps, double base, double end);
double learning_rate(const TrainConfig& cfg, int step, int total_steps);

nlohmann::json to_json(const model::ModelConfig& c);
nlohmann::json to_json(const losses::LossWeights& w);
nlohmann::json to_json(const TrainConfig& c);

// Missing keys keep their defaults; unknown keys, wrong types and a wrong
// version throw ConfigError.
TrainConfig config_from_json(const nlohmann::json& j);
TrainConfig load_config(const std::string& path);
void save_config(const std::string& path, const TrainConfig& c);

// "use_25d=false" style override.
void apply_ablation(Ablation& a, const std::string& assignment);

}  // namespace lndetr::harness
