#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cascade/phantom.hpp"
#include "cascade/volume.hpp"
#include "json.hpp"

namespace cascade {

// Dice evaluation with per-case and pooled-global aggregation, plus the
// four-row ablation report assembled by the harness.

// 2|P intersect G| / (|P| + |G|); 1 when both masks are empty, 0 when exactly
// one is. Throws ShapeError on mismatched shapes.
double dice(const Mask& pred, const Mask& gt);

struct TargetCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;

  double dice() const;  // both-empty convention applies to pooled counts too
};

TargetCounts count_overlap(const Mask& pred, const Mask& gt);

struct CaseScore {
  std::string case_id;
  double dice_liver = 0.0;
  double dice_lesion = 0.0;
  TargetCounts liver;
  TargetCounts lesion;
};

struct CasePrediction {
  Mask liver;
  Mask lesion;
};

// One score per labeled case, in case order. Throws MissingPrediction if a
// case id has no prediction.
std::vector<CaseScore> evaluate_cases(
    const std::vector<LabeledCase>& cases,
    const std::map<std::string, CasePrediction>& preds);

struct Aggregate {
  double mean_dice_liver = 0.0;
  double mean_dice_lesion = 0.0;
  double global_dice_liver = 0.0;   // from pooled TP/FP/FN
  double global_dice_lesion = 0.0;
  double lesion_precision = 0.0;    // pooled TP / (TP + FP); 1 when no positives
};

Aggregate aggregate(const std::vector<CaseScore>& scores);

nlohmann::json scores_to_json(const std::vector<CaseScore>& scores,
                              const Aggregate& agg);

///// Ablation report /////

struct AblationRow {
  std::string config_name;
  Aggregate agg;
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

// CSV: header + one row per config,
// `config,mean_dice_liver,mean_dice_lesion,global_dice_lesion`.
std::string report_to_csv(const AblationReport& report);
std::string report_to_table(const AblationReport& report);  // pretty-printed
nlohmann::json report_to_json(const AblationReport& report);

}  // namespace cascade
