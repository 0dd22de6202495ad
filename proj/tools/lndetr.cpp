#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lndetr/harness/ablation.hpp"

namespace fs = std::filesystem;
using namespace lndetr;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Options {
  std::string config, out, data, checkpoint, split = "test", pred, gt, difficulty = "easy";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> ablation;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int epochs = -1;
  int train = 200, val = 40, test = 40;
};

harness::TrainConfig resolve_config(const Options& o) {
  auto cfg = o.config.empty() ? harness::TrainConfig{} : harness::load_config(o.config);
  if (o.seed_set) cfg.seed = o.seed;
  if (o.epochs >= 0) cfg.epochs = o.epochs;
  if (!o.data.empty()) cfg.data_dir = o.data;
  for (const auto& a : o.ablation) harness::apply_ablation(cfg.ablation, a);
  cfg.validate();
  if (cfg.data_dir.empty()) throw harness::ConfigError("no dataset: pass --data or set data_dir in the config");
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int gen_data(const Options& o) {
  auto cfg = synthgen::config_for(o.difficulty);
  cfg.seed = o.seed;
  const auto d = harness::generate_dataset(cfg, {o.train, o.val, o.test});
  synthgen::write_dataset(o.out, cfg, d.train, d.val, d.test);
  std::cout << "wrote " << d.train.size() << "/" << d.val.size() << "/" << d.test.size() << " volumes to " << o.out
            << "\n";
  return kOk;
}

int train(const Options& o) {
  const auto cfg = resolve_config(o);
  const auto data = synthgen::read_dataset(cfg.data_dir);
  harness::TrainOptions options;
  options.out_dir = o.out;
  options.log = &std::cout;
  fs::create_directories(o.out);
  harness::save_config((fs::path(o.out) / "config.json").string(), cfg);
  const auto rec = harness::train(cfg, data, options);
  std::cout << "best epoch " << rec.best_epoch << ", iou pearson " << rec.iou_pearson << ", " << rec.wall_time_s
            << " s\n";
  return kOk;
}

int eval(const Options& o) {
  auto loaded = harness::load_checkpoint(o.checkpoint);
  const auto data = synthgen::read_dataset(o.data);
  const auto& volumes = o.split == "val" ? data.val : o.split == "train" ? data.train : data.test;
  const auto result = harness::evaluate_model(*loaded.model, volumes);
  fs::create_directories(o.out);
  evald::write_predictions((fs::path(o.out) / ("predictions_" + o.split + ".txt")).string(), result.predictions);
  write_text(fs::path(o.out) / ("froc_" + o.split + ".json"), harness::to_json(result.froc).dump(2) + "\n");
  std::cout << evald::format_result(result.froc) << "\n";
  return kOk;
}

int froc(const Options& o) {
  const auto gts = evald::read_ground_truth(o.gt);
  const auto preds = evald::attach_spacing(evald::read_predictions(o.pred), gts);
  const auto result = evald::evaluate(preds, gts);
  std::cout << evald::format_result(result) << "\n";
  if (!o.out.empty()) write_text(o.out, harness::to_json(result).dump(2) + "\n");
  return kOk;
}

int ablate(const Options& o) {
  const auto cfg = resolve_config(o);
  const auto data = synthgen::read_dataset(cfg.data_dir);
  const auto results = harness::run_ablation(cfg, data, o.seeds, o.out, &std::cout);
  const auto table = harness::ablation_table(results);
  write_text(fs::path(o.out) / "ablation.md", table);
  write_text(fs::path(o.out) / "ablation.json", harness::to_json(results).dump(2) + "\n");
  std::cout << table;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LN-DETR desk-scale training and evaluation"};
  app.require_subcommand(1);
  Options o;
  auto seed_flag = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>(
        "--seed",
        [&](std::uint64_t s) {
          o.seed = s;
          o.seed_set = true;
        },
        "Random seed");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out", o.out, "Dataset directory")->required();
  seed_flag(gen);
  gen->add_option("--difficulty", o.difficulty, "easy or default")->check(CLI::IsMember({"easy", "default"}));
  gen->add_option("--train", o.train, "Training volumes")->check(CLI::NonNegativeNumber);
  gen->add_option("--val", o.val, "Validation volumes")->check(CLI::NonNegativeNumber);
  gen->add_option("--test", o.test, "Test volumes")->check(CLI::NonNegativeNumber);

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", o.config, "Training configuration (JSON)");
  tr->add_option("--data", o.data, "Dataset directory (overrides data_dir)");
  tr->add_option("--out", o.out, "Run directory")->required();
  tr->add_option("--epochs", o.epochs, "Override the epoch count");
  tr->add_option("--ablation", o.ablation, "KEY=BOOL with KEY in use_25d, use_dqs, use_cl");
  seed_flag(tr);

  auto* ev = app.add_subcommand("eval", "Predict and score a split with a checkpoint");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", o.data, "Dataset directory")->required();
  ev->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--out", o.out, "Output directory")->required();

  auto* fr = app.add_subcommand("froc", "Score a prediction file against ground truth");
  fr->add_option("--pred", o.pred, "Prediction file")->required();
  fr->add_option("--gt", o.gt, "Ground-truth file")->required();
  fr->add_option("--out", o.out, "Write the result as JSON");

  auto* ab = app.add_subcommand("ablate", "Run the ablation grid");
  ab->add_option("--config", o.config, "Base training configuration (JSON)");
  ab->add_option("--data", o.data, "Dataset directory (overrides data_dir)");
  ab->add_option("--out", o.out, "Output directory")->required();
  ab->add_option("--seeds", o.seeds, "Seeds to run")->delimiter(',');
  ab->add_option("--epochs", o.epochs, "Override the epoch count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (gen->parsed()) return gen_data(o);
    if (tr->parsed()) return train(o);
    if (ev->parsed()) return eval(o);
    if (fr->parsed()) return froc(o);
    if (ab->parsed()) return ablate(o);
  } catch (const harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const losses::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
