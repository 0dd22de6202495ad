#include "lndetr/harness/ablation.hpp"

#include <filesystem>
#include <cstdio>
#include <map>
#include <ostream>

namespace lndetr::harness {

std::vector<AblationResult> run_ablation(const TrainConfig& base, const synthgen::Dataset& data,
                                         const std::vector<std::uint64_t>& seeds, const std::string& out_dir,
                                         std::ostream* log) {
  std::vector<AblationResult> results;
  for (const auto seed : seeds)
    for (const auto& row : kAblationGrid) {
      auto cfg = base;
      cfg.seed = seed;
      cfg.ablation = row.flags;
      TrainOptions options;
      if (!out_dir.empty())
        options.out_dir = (std::filesystem::path(out_dir) / (std::string(row.name) + "_seed" + std::to_string(seed)))
                              .string();
      if (log) *log << "== " << row.name << " seed " << seed << std::endl;
      const auto rec = train(cfg, data, options);
      results.push_back({row.name, row.flags, seed, rec.final_result, rec.iou_pearson, rec.wall_time_s});
      if (log) *log << "== " << row.name << " seed " << seed << ": " << evald::format_result(rec.final_result) << std::endl;
    }
  return results;
}

std::string ablation_table(const std::vector<AblationResult>& results) {
  std::string s = "| row | 2.5D | DQS | CL | seed | R@0.5 | R@1 | R@2 | R@4 | avg | IoU r | time s |\n";
  s += "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  auto mark = [](bool f) { return f ? "x" : ""; };
  std::map<std::string, std::pair<double, int>> mean;
  for (const auto& r : results) {
    const auto& t = r.test;
    char line[256];
    std::snprintf(line, sizeof line, "| %s | %s | %s | %s | %llu | %.4f | %.4f | %.4f | %.4f | %.4f | %.3f | %.0f |\n",
                  r.row.c_str(), mark(r.flags.use_25d), mark(r.flags.use_dqs), mark(r.flags.use_cl),
                  static_cast<unsigned long long>(r.seed), t.recalls[0], t.recalls[1], t.recalls[2], t.recalls[3],
                  t.average_recall, r.iou_pearson, r.wall_time_s);
    s += line;
    mean[r.row].first += t.average_recall;
    ++mean[r.row].second;
  }
  s += "\nMean average recall per row:\n\n";
  for (const auto& row : kAblationGrid)
    if (mean.count(row.name)) {
      char line[64];
      std::snprintf(line, sizeof line, "- %s: %.4f\n", row.name, mean[row.name].first / mean[row.name].second);
      s += line;
    }
  return s;
}

nlohmann::json to_json(const std::vector<AblationResult>& results) {
  auto j = nlohmann::json::array();
  for (const auto& r : results)
    j.push_back({{"row", r.row},
                 {"use_25d", r.flags.use_25d},
                 {"use_dqs", r.flags.use_dqs},
                 {"use_cl", r.flags.use_cl},
                 {"seed", r.seed},
                 {"test", to_json(r.test)},
                 {"iou_pearson", r.iou_pearson},
                 {"wall_time_s", r.wall_time_s}});
  return j;
}

}  // namespace lndetr::harness
