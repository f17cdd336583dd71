#pragma once

#include <string>

#include "cascade/crf.hpp"
#include "cascade/detector.hpp"
#include "cascade/phantom.hpp"
#include "cascade/pipeline.hpp"
#include "cascade/segnet.hpp"
#include "json.hpp"

namespace cascade {

// Run configuration is one JSON document: a fixed tree of defaults, a config
// file merged over it, then dotted-path CLI overrides. Unknown keys and type
// mismatches are rejected so typos can't silently fall back to defaults, and
// the resolved document is written next to every artifact it produced.

nlohmann::json default_run_config();

// Parses `path` and merges it over the defaults. Missing file -> IoError;
// bad JSON, unknown key, or type mismatch -> ConfigError.
nlohmann::json load_run_config(const std::string& path);

// Applies one "a.b.c=value" assignment. The path must already exist and the
// parsed value must keep its JSON type (numbers may switch int/float).
void apply_override(nlohmann::json& cfg, const std::string& assignment);

// Structural and range checks over the whole document. Throws ConfigError.
void validate_run_config(const nlohmann::json& cfg);

void write_run_config(const nlohmann::json& cfg, const std::string& path);

///// Typed views /////

PhantomParams phantom_params_from(const nlohmann::json& cfg);
SplitFractions split_fractions_from(const nlohmann::json& cfg);
SegNetConfig segnet_config_from(const nlohmann::json& net_block);
DetectorConfig detector_config_from(const nlohmann::json& cfg);
PatchGrid patch_grid_from(const nlohmann::json& cfg);
PipelineConfig pipeline_config_from(const nlohmann::json& cfg);
CrfParams crf_params_from(const nlohmann::json& cfg);

}  // namespace cascade
