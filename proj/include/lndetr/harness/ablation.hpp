#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lndetr/harness/train.hpp"

namespace lndetr::harness {

struct AblationRow {
  const char* name;
  Ablation flags;
};

// 2.5D is on in every row; the rows toggle debiased selection and the
// contrastive term.
inline constexpr std::array<AblationRow, 4> kAblationGrid{{
    {"baseline", {true, false, false}},
    {"+dqs", {true, true, false}},
    {"+cl", {true, false, true}},
    {"full", {true, true, true}},
}};

struct AblationResult {
  std::string row;
  Ablation flags;
  std::uint64_t seed = 0;
  evald::FrocResult test;
  double iou_pearson = 0;
  double wall_time_s = 0;
};

// Trains every grid row for every seed. Each run goes to
// out_dir/<row>_seed<seed>/ when out_dir is set.
std::vector<AblationResult> run_ablation(const TrainConfig& base, const synthgen::Dataset& data,
                                         const std::vector<std::uint64_t>& seeds, const std::string& out_dir = {},
                                         std::ostream* log = nullptr);

// Markdown table, one line per run plus per-row means.
std::string ablation_table(const std::vector<AblationResult>& results);
nlohmann::json to_json(const std::vector<AblationResult>& results);

}  // namespace lndetr::harness
