#include "cascade/config.hpp"

#include <fstream>
#include <string>
#include <vector>

#include "cascade/errors.hpp"

namespace cascade {

///// Defaults /////

nlohmann::json default_run_config() {
  nlohmann::json j;
  j["seed"] = 271828;
  j["rng_algorithm"] = "mt19937_64-boxmuller";

  j["paths"] = {{"data", "data"},
                {"models", "models"},
                {"predictions", "predictions"},
                {"reports", "reports"},
                {"overlays", "overlays"}};

  const PhantomParams pp;
  j["data"] = {
      {"cases", 40},
      {"shape", {pp.shape.nz, pp.shape.ny, pp.shape.nx}},
      {"spacing", {1.0, 1.0, 1.0}},
      {"split", {{"train", 0.5}, {"val", 0.25}}},
      {"phantom",
       {{"liver_radius_lo", pp.liver_radius_lo},
        {"liver_radius_hi", pp.liver_radius_hi},
        {"lesion_count_lo", pp.lesion_count_lo},
        {"lesion_count_hi", pp.lesion_count_hi},
        {"lesion_radius_lo", pp.lesion_radius_lo},
        {"lesion_radius_hi", pp.lesion_radius_hi},
        {"intensity_background", pp.intensity_background},
        {"intensity_liver", pp.intensity_liver},
        {"intensity_lesion", pp.intensity_lesion},
        {"noise_sigma", pp.noise_sigma}}}};

  const nlohmann::json seg_defaults = {
      {"stage_channels", {8, 16, 32, 64}},
      {"convs_per_stage", 2},
      {"side_output_channels", 4},
      {"epochs", 6},
      {"lr", 0.1},
      {"momentum", 0.9}};
  j["liver_net"] = seg_defaults;
  j["lesion_net"] = seg_defaults;
  j["lesion_net"]["variant"] = "full";

  const PatchGrid g;
  j["detector"] = {{"stage_channels", {8, 16, 32}},
                   {"grid",
                    {{"window", g.window},
                     {"stride", g.stride},
                     {"margin", g.margin},
                     {"min_liver_overlap", g.min_liver_overlap},
                     {"min_lesion_pixels", g.min_lesion_pixels}}},
                   {"steps", 150},
                   {"lr", 0.05},
                   {"momentum", 0.9}};

  const PipelineConfig pc;
  to_json(j["pipeline"], pc);

  const CrfParams cp;
  to_json(j["crf"], cp);

  j["predict"] = {{"split", "test"}};
  j["evaluate"] = {{"split", "test"}};
  j["refine"] = {{"prob", ""}, {"image", ""}, {"output", "refined"}};
  j["overlay"] = {{"split", "test"}, {"case_id", ""}};
  return j;
}

///// Merge and overrides /////

namespace {

bool types_compatible(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_into(nlohmann::json& base, const nlohmann::json& overlay,
                const std::string& prefix) {
  for (const auto& [key, value] : overlay.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key))
      throw ConfigError("unknown config key: " + path);
    nlohmann::json& slot = base[key];
    if (slot.is_object() && value.is_object()) {
      merge_into(slot, value, path);
      continue;
    }
    if (!types_compatible(slot, value))
      throw ConfigError("config key " + path + " expects " +
                        std::string(slot.type_name()) + ", got " +
                        std::string(value.type_name()));
    slot = value;
  }
}

std::vector<std::string> split_path(const std::string& dotted) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    if (dot == std::string::npos) {
      parts.push_back(dotted.substr(start));
      break;
    }
    parts.push_back(dotted.substr(start, dot - start));
    start = dot + 1;
  }
  return parts;
}

const nlohmann::json& require(const nlohmann::json& cfg,
                              const std::string& key) {
  if (!cfg.contains(key)) throw ConfigError("missing config key: " + key);
  return cfg.at(key);
}

}  // namespace

nlohmann::json load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json file = nlohmann::json::parse(in, nullptr, false);
  if (file.is_discarded())
    throw ConfigError("config file is not valid JSON: " + path);
  if (!file.is_object())
    throw ConfigError("config file must hold a JSON object: " + path);
  nlohmann::json cfg = default_run_config();
  merge_into(cfg, file, "");
  return cfg;
}

void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("--set expects key=value, got: " + assignment);
  const std::string dotted = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // unquoted strings come through raw

  nlohmann::json* slot = &cfg;
  for (const std::string& part : split_path(dotted)) {
    if (!slot->is_object() || !slot->contains(part))
      throw ConfigError("unknown config key: " + dotted);
    slot = &(*slot)[part];
  }
  if (slot->is_object())
    throw ConfigError("config key " + dotted + " is an object; set its leaves");
  if (!types_compatible(*slot, value))
    throw ConfigError("config key " + dotted + " expects " +
                      std::string(slot->type_name()) + ", got " +
                      std::string(value.type_name()));
  *slot = value;
}

///// Validation /////

namespace {

void check_positive_int(const nlohmann::json& v, const std::string& what) {
  if (!v.is_number_integer() || v.get<long long>() <= 0)
    throw ConfigError(what + " must be a positive integer");
}

void check_unit_open(double v, const std::string& what) {
  if (!(v > 0.0 && v < 1.0)) throw ConfigError(what + " must lie in (0, 1)");
}

void check_net_block(const nlohmann::json& net, const std::string& name) {
  const auto& chans = require(net, "stage_channels");
  if (!chans.is_array() || chans.empty())
    throw ConfigError(name + ".stage_channels must be a nonempty array");
  for (const auto& c : chans) check_positive_int(c, name + ".stage_channels");
  check_positive_int(require(net, "convs_per_stage"),
                     name + ".convs_per_stage");
  check_positive_int(require(net, "side_output_channels"),
                     name + ".side_output_channels");
  check_positive_int(require(net, "epochs"), name + ".epochs");
  if (require(net, "lr").get<double>() <= 0.0)
    throw ConfigError(name + ".lr must be positive");
  const double mom = require(net, "momentum").get<double>();
  if (mom < 0.0 || mom >= 1.0)
    throw ConfigError(name + ".momentum must lie in [0, 1)");
}

}  // namespace

void validate_run_config(const nlohmann::json& cfg) {
  if (require(cfg, "rng_algorithm").get<std::string>() !=
      "mt19937_64-boxmuller")
    throw ConfigError("rng_algorithm: only mt19937_64-boxmuller is provided");

  for (const auto& [key, value] : require(cfg, "paths").items())
    if (!value.is_string() || value.get<std::string>().empty())
      throw ConfigError("paths." + key + " must be a nonempty string");

  const auto& data = require(cfg, "data");
  check_positive_int(require(data, "cases"), "data.cases");
  const auto& shape = require(data, "shape");
  if (!shape.is_array() || shape.size() != 3)
    throw ConfigError("data.shape must be [nz, ny, nx]");
  for (const auto& d : shape) check_positive_int(d, "data.shape");
  const auto& spacing = require(data, "spacing");
  if (!spacing.is_array() || spacing.size() != 3)
    throw ConfigError("data.spacing must be [sz, sy, sx]");
  for (const auto& s : spacing)
    if (s.get<double>() <= 0.0)
      throw ConfigError("data.spacing entries must be positive");
  const double tr = require(require(data, "split"), "train").get<double>();
  const double va = require(data.at("split"), "val").get<double>();
  check_unit_open(tr, "data.split.train");
  if (va < 0.0 || tr + va >= 1.0)
    throw ConfigError("data.split must leave a nonempty test fraction");

  check_net_block(require(cfg, "liver_net"), "liver_net");
  // The liver net consumes whole slices, so the in-plane dims must survive
  // its pooling chain (lesion crops are padded to their divisor instead).
  const std::size_t liver_div =
      std::size_t{1} << (cfg.at("liver_net").at("stage_channels").size() - 1);
  if (shape[1].get<std::size_t>() % liver_div != 0 ||
      shape[2].get<std::size_t>() % liver_div != 0)
    throw ConfigError("data.shape in-plane dims must be divisible by " +
                      std::to_string(liver_div) +
                      " (the liver net's pooling factor)");
  const auto& lesion = require(cfg, "lesion_net");
  check_net_block(lesion, "lesion_net");
  const std::string variant = require(lesion, "variant").get<std::string>();
  if (variant != "full" && variant != "baseline")
    throw ConfigError("lesion_net.variant must be \"full\" or \"baseline\"");

  const auto& det = require(cfg, "detector");
  const auto& chans = require(det, "stage_channels");
  if (!chans.is_array() || chans.empty())
    throw ConfigError("detector.stage_channels must be a nonempty array");
  for (const auto& c : chans) check_positive_int(c, "detector.stage_channels");
  const PatchGrid grid = patch_grid_from(cfg);
  if (grid.window == 0 || grid.stride == 0)
    throw ConfigError("detector.grid window and stride must be positive");
  if (grid.min_liver_overlap < 0.0 || grid.min_liver_overlap > 1.0)
    throw ConfigError("detector.grid.min_liver_overlap must lie in [0, 1]");
  const std::size_t det_div = std::size_t{1} << chans.size();
  if (grid.padded() % det_div != 0)
    throw ConfigError("detector.grid padded window (" +
                      std::to_string(grid.padded()) +
                      ") must be divisible by 2^stages (" +
                      std::to_string(det_div) + ")");
  check_positive_int(require(det, "steps"), "detector.steps");
  if (require(det, "lr").get<double>() <= 0.0)
    throw ConfigError("detector.lr must be positive");

  const auto& pipe = require(cfg, "pipeline");
  check_unit_open(require(pipe, "liver_threshold").get<double>(),
                  "pipeline.liver_threshold");
  check_unit_open(require(pipe, "lesion_threshold").get<double>(),
                  "pipeline.lesion_threshold");
  check_unit_open(require(pipe, "detector_threshold").get<double>(),
                  "pipeline.detector_threshold");

  try {
    validate_params(crf_params_from(cfg));
  } catch (const ParamError& e) {
    throw ConfigError(std::string("crf: ") + e.what());
  }

  for (const char* block : {"predict", "evaluate", "overlay"}) {
    const std::string split =
        require(require(cfg, block), "split").get<std::string>();
    if (split != "train" && split != "val" && split != "test")
      throw ConfigError(std::string(block) +
                        ".split must be train, val, or test");
  }
}

void write_run_config(const nlohmann::json& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config: " + path);
  out << cfg.dump(2) << "\n";
  if (!out) throw IoError("short write: " + path);
}

///// Typed views /////

PhantomParams phantom_params_from(const nlohmann::json& cfg) {
  const auto& data = require(cfg, "data");
  const auto& p = require(data, "phantom");
  PhantomParams pp;
  pp.shape = {data.at("shape")[0].get<std::size_t>(),
              data.at("shape")[1].get<std::size_t>(),
              data.at("shape")[2].get<std::size_t>()};
  pp.liver_radius_lo = p.at("liver_radius_lo").get<double>();
  pp.liver_radius_hi = p.at("liver_radius_hi").get<double>();
  pp.lesion_count_lo = p.at("lesion_count_lo").get<int>();
  pp.lesion_count_hi = p.at("lesion_count_hi").get<int>();
  pp.lesion_radius_lo = p.at("lesion_radius_lo").get<double>();
  pp.lesion_radius_hi = p.at("lesion_radius_hi").get<double>();
  pp.intensity_background = p.at("intensity_background").get<double>();
  pp.intensity_liver = p.at("intensity_liver").get<double>();
  pp.intensity_lesion = p.at("intensity_lesion").get<double>();
  pp.noise_sigma = p.at("noise_sigma").get<double>();
  pp.seed = require(cfg, "seed").get<std::uint64_t>();
  return pp;
}

SplitFractions split_fractions_from(const nlohmann::json& cfg) {
  const auto& split = require(require(cfg, "data"), "split");
  return {split.at("train").get<double>(), split.at("val").get<double>()};
}

SegNetConfig segnet_config_from(const nlohmann::json& net_block) {
  SegNetConfig sc;
  sc.stage_channels =
      net_block.at("stage_channels").get<std::vector<std::size_t>>();
  sc.convs_per_stage = net_block.at("convs_per_stage").get<std::size_t>();
  sc.side_output_channels =
      net_block.at("side_output_channels").get<std::size_t>();
  return sc;
}

DetectorConfig detector_config_from(const nlohmann::json& cfg) {
  DetectorConfig dc;
  dc.stage_channels = require(cfg, "detector")
                          .at("stage_channels")
                          .get<std::vector<std::size_t>>();
  return dc;
}

PatchGrid patch_grid_from(const nlohmann::json& cfg) {
  const auto& g = require(require(cfg, "detector"), "grid");
  PatchGrid grid;
  grid.window = g.at("window").get<std::size_t>();
  grid.stride = g.at("stride").get<std::size_t>();
  grid.margin = g.at("margin").get<std::size_t>();
  grid.min_liver_overlap = g.at("min_liver_overlap").get<double>();
  grid.min_lesion_pixels = g.at("min_lesion_pixels").get<std::size_t>();
  return grid;
}

PipelineConfig pipeline_config_from(const nlohmann::json& cfg) {
  PipelineConfig pc;
  from_json(require(cfg, "pipeline"), pc);
  return pc;
}

CrfParams crf_params_from(const nlohmann::json& cfg) {
  CrfParams cp;
  from_json(require(cfg, "crf"), cp);
  return cp;
}

}  // namespace cascade
