#pragma once

#include <string>

#include "cascade/config.hpp"
#include "cascade/metrics.hpp"
#include "json.hpp"

namespace cascade {

// One function per CLI subcommand. Every workflow takes the validated run
// config plus the resolved directory layout, reads its inputs from earlier
// stages' directories, and writes its artifacts plus the exact config that
// produced them. Wall-clock timings go to separate *_timing.json sidecars so
// everything else is byte-reproducible across reruns and thread counts.

struct WorkflowPaths {
  std::string root, data, models, predictions, reports, overlays;
};

WorkflowPaths resolve_paths(const nlohmann::json& cfg,
                            const std::string& out_root);

// Checkpoint basenames under `models` (each is a .json/.bin pair).
inline constexpr const char* kLiverCkpt = "liver";
inline constexpr const char* kLesionCkpt = "lesion";
inline constexpr const char* kLesionBaselineCkpt = "lesion_baseline";
inline constexpr const char* kDetectorCkpt = "detector";

void run_gen_data(const nlohmann::json& cfg, const WorkflowPaths& paths);
void run_train_liver(const nlohmann::json& cfg, const WorkflowPaths& paths);
void run_train_lesion(const nlohmann::json& cfg, const WorkflowPaths& paths);
void run_train_detector(const nlohmann::json& cfg, const WorkflowPaths& paths);
void run_predict(const nlohmann::json& cfg, const WorkflowPaths& paths);
void run_refine_crf(const nlohmann::json& cfg, const WorkflowPaths& paths);
Aggregate run_evaluate(const nlohmann::json& cfg, const WorkflowPaths& paths);
AblationReport run_ablate(const nlohmann::json& cfg,
                          const WorkflowPaths& paths);
void run_overlay(const nlohmann::json& cfg, const WorkflowPaths& paths);

}  // namespace cascade
