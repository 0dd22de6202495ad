#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "lndetr/evald/evald.hpp"
#include "lndetr/harness/config.hpp"
#include "lndetr/harness/optimizer.hpp"
#include "lndetr/model/objective.hpp"
#include "lndetr/synthgen/synthgen.hpp"

namespace lndetr::harness {

using losses::NumericalError;

// One slab (slab_size slices centered on the target slice, edges replicated)
// with the center slice's targets in normalized coordinates.
struct TrainingSample {
  std::vector<float> slab;  // [T][H][W]
  model::SampleTargets<float> targets;
};

// Soft masks are the fraction of each mask cell covered by the target.
TrainingSample make_sample(const synthgen::VolumeSample& volume, int z, const TrainConfig& cfg,
                           const synthgen::AugmentParams* augment, std::uint64_t seed);

struct StepRecord {
  int step = 0;
  double lr = 0;
  double cls = 0, box = 0, mask = 0, iou = 0, contrastive = 0;  // weighted, batch mean
  double total = 0;
  double grad_norm = 0;
};

// Owns the model and optimizer state of one run.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, int total_steps);

  // Forward, batch-mean total loss, backward, clip, AdamW update at the
  // scheduled lr. Throws NumericalError (parameters untouched) on a
  // non-finite loss or gradient.
  StepRecord step(const std::vector<TrainingSample>& batch);

  model::LnDetr<float>& model() { return model_; }
  const model::LnDetr<float>& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int steps_done() const { return step_; }

 private:
  TrainConfig cfg_;
  model::ObjectiveConfig objective_;
  int total_steps_;
  model::LnDetr<float> model_;
  AdamW optimizer_;
  int step_ = 0;
};

struct EvalSnapshot {
  int epoch = 0;
  int step = 0;
  evald::FrocResult froc;
};

struct RunRecord {
  nlohmann::json config;
  std::vector<StepRecord> steps;
  std::vector<EvalSnapshot> evals;  // validation
  int best_epoch = 0;
  evald::FrocResult final_result;  // test split, best checkpoint
  double iou_pearson = 0;          // validation, best checkpoint
  std::size_t iou_pairs = 0;
  double wall_time_s = 0;
  std::string status = "ok";
};

nlohmann::json to_json(const evald::FrocResult& r);
nlohmann::json to_json(const RunRecord& r);
// The loss trajectory alone, for reproducibility comparisons.
nlohmann::json steps_json(const RunRecord& r);

struct TrainOptions {
  std::string out_dir;         // checkpoints and run.json; empty writes nothing
  std::ostream* log = nullptr;
  bool evaluate_test = true;
};

// Writes init.ckpt before the first step, best.ckpt whenever validation
// average recall improves (ties keep the earlier one), last.ckpt after each
// validation, and run.json at the end. On a numerical failure run.json
// records the failure, the checkpoints on disk stay the last good ones, and
// NumericalError is rethrown.
RunRecord train(const TrainConfig& cfg, const synthgen::Dataset& data, const TrainOptions& options = {});

struct EvalResult {
  std::vector<evald::PredVolume> predictions;
  evald::FrocResult froc;
};

EvalResult evaluate_model(const model::LnDetr<float>& model, const std::vector<synthgen::VolumeSample>& volumes,
                          const model::PredictOptions& options = {});

// Predicted vs true IoU of the last decoder layer's Hungarian-matched
// queries on every slice with targets.
struct IouPairs {
  std::vector<double> predicted, truth;
};
IouPairs matched_iou_pairs(const model::LnDetr<float>& model, const std::vector<synthgen::VolumeSample>& volumes,
                           int min_target_pixels = 3);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct SplitSizes {
  int train = 200, val = 40, test = 40;
};
// Each split draws from its own seed stream of cfg.seed.
synthgen::Dataset generate_dataset(const synthgen::SynthConfig& cfg, const SplitSizes& sizes = {});

void save_checkpoint(const std::string& path, const TrainConfig& cfg, const model::LnDetr<float>& model);

struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<model::LnDetr<float>> model;
};
// Rebuilds the model from the configuration echoed in the checkpoint.
LoadedModel load_checkpoint(const std::string& path);

}  // namespace lndetr::harness
