#include "cascade/metrics.hpp"

#include <cstdio>

#include "cascade/errors.hpp"

namespace cascade {

double dice(const Mask& pred, const Mask& gt) {
  if (!(pred.shape == gt.shape))
    throw ShapeError("dice requires masks of identical shape");
  const TargetCounts c = count_overlap(pred, gt);
  return c.dice();
}

double TargetCounts::dice() const {
  const std::uint64_t denom = 2 * tp + fp + fn;
  if (denom == 0) return 1.0;  // both empty
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

TargetCounts count_overlap(const Mask& pred, const Mask& gt) {
  if (!(pred.shape == gt.shape))
    throw ShapeError("overlap counts require masks of identical shape");
  TargetCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0.0f;
    const bool g = gt.data[i] != 0.0f;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

std::vector<CaseScore> evaluate_cases(
    const std::vector<LabeledCase>& cases,
    const std::map<std::string, CasePrediction>& preds) {
  std::vector<CaseScore> scores;
  scores.reserve(cases.size());
  for (const LabeledCase& c : cases) {
    const auto it = preds.find(c.case_id);
    if (it == preds.end())
      throw MissingPrediction("no prediction for case " + c.case_id);
    CaseScore s;
    s.case_id = c.case_id;
    s.liver = count_overlap(it->second.liver, c.liver);
    s.lesion = count_overlap(it->second.lesion, c.lesion);
    s.dice_liver = s.liver.dice();
    s.dice_lesion = s.lesion.dice();
    scores.push_back(s);
  }
  return scores;
}

Aggregate aggregate(const std::vector<CaseScore>& scores) {
  Aggregate a;
  if (scores.empty()) return a;
  TargetCounts liver, lesion;
  for (const CaseScore& s : scores) {
    a.mean_dice_liver += s.dice_liver;
    a.mean_dice_lesion += s.dice_lesion;
    liver.tp += s.liver.tp;
    liver.fp += s.liver.fp;
    liver.fn += s.liver.fn;
    lesion.tp += s.lesion.tp;
    lesion.fp += s.lesion.fp;
    lesion.fn += s.lesion.fn;
  }
  a.mean_dice_liver /= static_cast<double>(scores.size());
  a.mean_dice_lesion /= static_cast<double>(scores.size());
  a.global_dice_liver = liver.dice();
  a.global_dice_lesion = lesion.dice();
  const std::uint64_t pos = lesion.tp + lesion.fp;
  a.lesion_precision =
      pos == 0 ? 1.0
               : static_cast<double>(lesion.tp) / static_cast<double>(pos);
  return a;
}

namespace {

nlohmann::json counts_json(const TargetCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
}

nlohmann::json agg_json(const Aggregate& a) {
  return {{"mean_dice_liver", a.mean_dice_liver},
          {"mean_dice_lesion", a.mean_dice_lesion},
          {"global_dice_liver", a.global_dice_liver},
          {"global_dice_lesion", a.global_dice_lesion},
          {"lesion_precision", a.lesion_precision}};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

nlohmann::json scores_to_json(const std::vector<CaseScore>& scores,
                              const Aggregate& agg) {
  nlohmann::json cases = nlohmann::json::array();
  for (const CaseScore& s : scores)
    cases.push_back({{"case_id", s.case_id},
                     {"dice_liver", s.dice_liver},
                     {"dice_lesion", s.dice_lesion},
                     {"liver", counts_json(s.liver)},
                     {"lesion", counts_json(s.lesion)}});
  return {{"cases", cases}, {"aggregate", agg_json(agg)}};
}

std::string report_to_csv(const AblationReport& report) {
  std::string csv = "config,mean_dice_liver,mean_dice_lesion,global_dice_lesion\n";
  for (const AblationRow& r : report.rows)
    csv += r.config_name + "," + fmt(r.agg.mean_dice_liver) + "," +
           fmt(r.agg.mean_dice_lesion) + "," + fmt(r.agg.global_dice_lesion) +
           "\n";
  return csv;
}

std::string report_to_table(const AblationReport& report) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-44s %10s %10s %10s %10s\n", "config",
                "liver", "lesion", "global", "precision");
  out += line;
  for (const AblationRow& r : report.rows) {
    std::snprintf(line, sizeof line, "%-44s %10.4f %10.4f %10.4f %10.4f\n",
                  r.config_name.c_str(), r.agg.mean_dice_liver,
                  r.agg.mean_dice_lesion, r.agg.global_dice_lesion,
                  r.agg.lesion_precision);
    out += line;
  }
  return out;
}

nlohmann::json report_to_json(const AblationReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const AblationRow& r : report.rows)
    rows.push_back({{"config", r.config_name}, {"aggregate", agg_json(r.agg)}});
  return {{"rows", rows}};
}

}  // namespace cascade
