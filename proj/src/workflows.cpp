#include "cascade/workflows.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"

namespace cascade {

namespace fs = std::filesystem;

///// Layout /////

WorkflowPaths resolve_paths(const nlohmann::json& cfg,
                            const std::string& out_root) {
  const auto& p = cfg.at("paths");
  const fs::path root = out_root.empty() ? fs::path(".") : fs::path(out_root);
  WorkflowPaths w;
  w.root = root.string();
  w.data = (root / p.at("data").get<std::string>()).string();
  w.models = (root / p.at("models").get<std::string>()).string();
  w.predictions = (root / p.at("predictions").get<std::string>()).string();
  w.reports = (root / p.at("reports").get<std::string>()).string();
  w.overlays = (root / p.at("overlays").get<std::string>()).string();
  return w;
}

namespace {

// Independent child streams per consumer; epoch seeds chain off the base.
constexpr std::uint64_t kSeedLiverInit = 11, kSeedLiverShuffle = 12;
constexpr std::uint64_t kSeedLesionInit = 21, kSeedLesionShuffle = 22;
constexpr std::uint64_t kSeedLesionBaseInit = 31, kSeedLesionBaseShuffle = 32;
constexpr std::uint64_t kSeedDetectorInit = 41, kSeedDetectorTrain = 42;

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("short write: " + path);
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw FormatError("invalid JSON in " + path);
  return j;
}

const std::vector<std::string>& split_ids(const Dataset& ds,
                                          const std::string& split) {
  if (split == "train") return ds.train_ids;
  if (split == "val") return ds.val_ids;
  return ds.test_ids;
}

std::vector<LabeledCase> select_cases(const Dataset& ds,
                                      const std::vector<std::string>& ids) {
  std::map<std::string, const LabeledCase*> by_id;
  for (const auto& c : ds.cases) by_id[c.case_id] = &c;
  std::vector<LabeledCase> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw IoError("dataset has no case " + id);
    out.push_back(*it->second);
  }
  return out;
}

void require_checkpoint(const std::string& base) {
  if (!fs::exists(base + ".json"))
    throw ConfigError("missing checkpoint " + base + ".json; train it first");
}

///// Segmentation training /////

struct SlabRef {
  std::size_t case_idx = 0, z = 0;
};

std::vector<SlabRef> all_slabs(const std::vector<Volume>& vols) {
  std::vector<SlabRef> slabs;
  for (std::size_t ci = 0; ci < vols.size(); ++ci)
    for (std::size_t z = 0; z < vols[ci].shape.nz; ++z)
      slabs.push_back({ci, z});
  return slabs;
}

SegNet train_liver_net(const nlohmann::json& cfg,
                       const std::vector<LabeledCase>& train) {
  const auto& block = cfg.at("liver_net");
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  SegNet net = build_segnet(segnet_config_from(block),
                            Rng::derive_seed(seed, kSeedLiverInit));
  const ClassWeights w = compute_class_weights(train, SegTarget::Liver, false);
  const auto epochs = block.at("epochs").get<std::size_t>();
  const auto lr = block.at("lr").get<double>();
  const auto momentum = block.at("momentum").get<double>();

  std::vector<Volume> imgs;
  imgs.reserve(train.size());
  for (const auto& c : train) imgs.push_back(preprocess(c.image));
  std::vector<SlabRef> slabs = all_slabs(imgs);

  const std::uint64_t shuffle_base = Rng::derive_seed(seed, kSeedLiverShuffle);
  for (std::size_t e = 0; e < epochs; ++e) {
    Rng rng(Rng::derive_seed(shuffle_base, e));
    rng.shuffle(slabs);
    double loss = 0.0;
    for (const auto& s : slabs) {
      const Tensor4 input =
          make_input_tensor(imgs[s.case_idx], s.z, SliceMode::Context3);
      const Tensor4 target =
          make_input_tensor(train[s.case_idx].liver, s.z, SliceMode::Context3);
      loss += train_step(net, input, target, w, nullptr, lr, momentum);
    }
    std::printf("[train-liver] epoch %zu/%zu  mean loss %.5f\n", e + 1, epochs,
                loss / static_cast<double>(slabs.size()));
    std::fflush(stdout);
  }
  return net;
}

enum class LesionVariant { Full, Baseline };

struct CropSet {
  Volume img;
  Mask liver;
  Mask lesion;
};

// Training crops around the ground-truth liver box (inference uses the
// predicted one); images are preprocessed before cropping so normalization
// statistics match the full-volume inference path.
std::vector<CropSet> make_training_crops(const std::vector<LabeledCase>& train,
                                         std::size_t margin,
                                         std::size_t mult) {
  std::vector<CropSet> out;
  out.reserve(train.size());
  for (const auto& c : train) {
    const Volume prep = preprocess(c.image);
    const Bbox3 box = liver_bbox_3d(c.liver, margin);
    out.push_back({crop(prep, box, mult), crop(c.liver, box, mult),
                   crop(c.lesion, box, mult)});
  }
  return out;
}

bool all_zero(const Tensor4& t) {
  return std::all_of(t.v.begin(), t.v.end(),
                     [](float v) { return v == 0.0f; });
}

SegNet train_lesion_net(const nlohmann::json& cfg,
                        const std::vector<LabeledCase>& train,
                        LesionVariant variant) {
  const auto& block = cfg.at("lesion_net");
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const bool full = variant == LesionVariant::Full;
  const char* tag = full ? "full" : "baseline";
  SegNet net = build_segnet(
      segnet_config_from(block),
      Rng::derive_seed(seed, full ? kSeedLesionInit : kSeedLesionBaseInit));
  const auto epochs = block.at("epochs").get<std::size_t>();
  const auto lr = block.at("lr").get<double>();
  const auto momentum = block.at("momentum").get<double>();
  const auto margin = cfg.at("pipeline").at("bbox_margin").get<std::size_t>();

  const auto crops = make_training_crops(train, margin, net.pool_divisor());
  std::vector<Volume> imgs;
  for (const auto& c : crops) imgs.push_back(c.img);
  std::vector<SlabRef> slabs = all_slabs(imgs);

  // Full variant: one slice-filtered weight over liver voxels. Baseline: the
  // per-volume positive proportion, one weight per training case.
  ClassWeights shared{0.5};
  std::vector<ClassWeights> per_case(train.size());
  if (full) {
    shared = compute_class_weights(train, SegTarget::Lesion, true);
  } else {
    for (std::size_t i = 0; i < train.size(); ++i) {
      double fg = 0.0;
      for (float v : train[i].lesion.data) fg += (v != 0.0f);
      const double w = fg / static_cast<double>(train[i].lesion.data.size());
      per_case[i].w = std::min(1.0 - 1e-6, std::max(1e-6, w));
    }
  }

  const std::uint64_t shuffle_base = Rng::derive_seed(
      seed, full ? kSeedLesionShuffle : kSeedLesionBaseShuffle);
  for (std::size_t e = 0; e < epochs; ++e) {
    Rng rng(Rng::derive_seed(shuffle_base, e));
    rng.shuffle(slabs);
    double loss = 0.0;
    std::size_t steps = 0;
    for (const auto& s : slabs) {
      if (full) {
        const Tensor4 mask =
            make_input_tensor(crops[s.case_idx].liver, s.z, SliceMode::Context3);
        if (all_zero(mask)) continue;  // nothing to learn outside the liver
        const Tensor4 input =
            make_input_tensor(imgs[s.case_idx], s.z, SliceMode::Context3);
        const Tensor4 target = make_input_tensor(crops[s.case_idx].lesion, s.z,
                                                 SliceMode::Context3);
        loss += train_step(net, input, target, shared, &mask, lr, momentum);
      } else {
        const Tensor4 input = make_input_tensor(imgs[s.case_idx], s.z,
                                                SliceMode::ReplicateCenter);
        const Tensor4 target = make_input_tensor(
            crops[s.case_idx].lesion, s.z, SliceMode::ReplicateCenter);
        loss += train_step(net, input, target, per_case[s.case_idx], nullptr,
                           lr, momentum);
      }
      ++steps;
    }
    std::printf("[train-lesion %s] epoch %zu/%zu  mean loss %.5f\n", tag,
                e + 1, epochs, loss / static_cast<double>(steps));
    std::fflush(stdout);
  }
  return net;
}

DetectorNet train_detector_net(const nlohmann::json& cfg,
                               const std::vector<LabeledCase>& train) {
  const auto& block = cfg.at("detector");
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const PatchGrid grid = patch_grid_from(cfg);
  const auto margin = cfg.at("pipeline").at("bbox_margin").get<std::size_t>();
  const std::size_t lesion_div =
      std::size_t{1} << (cfg.at("lesion_net").at("stage_channels").size() - 1);

  // Windows are enumerated on the same padded crops the pipeline hands the
  // detector at inference time.
  PatchDataset data;
  data.grid = grid;
  const auto crops = make_training_crops(train, margin, lesion_div);
  for (const auto& c : crops) {
    for (std::size_t z = 0; z < c.img.shape.nz; ++z) {
      const Plane img = slice_of(c.img, z);
      const Plane liver = slice_of(c.liver, z);
      const Plane lesion = slice_of(c.lesion, z);
      auto recs =
          enumerate_patches(liver, lesion, grid, data.image_planes.size());
      data.image_planes.push_back(img);
      data.records.insert(data.records.end(), recs.begin(), recs.end());
    }
  }
  std::size_t pos = 0;
  for (const auto& r : data.records) pos += (r.label == PatchLabel::Positive);
  std::printf("[train-detector] %zu windows (%zu positive) from %zu planes\n",
              data.records.size(), pos, data.image_planes.size());

  DetectorNet net = build_detector(detector_config_from(cfg),
                                   Rng::derive_seed(seed, kSeedDetectorInit));
  DetectorTrainConfig tc;
  tc.steps = block.at("steps").get<std::size_t>();
  tc.lr = block.at("lr").get<double>();
  tc.momentum = block.at("momentum").get<double>();
  tc.seed = Rng::derive_seed(seed, kSeedDetectorTrain);
  const double final_loss = train_detector(net, data, tc);
  std::printf("[train-detector] %zu steps  final loss %.5f\n", tc.steps,
              final_loss);
  std::fflush(stdout);
  return net;
}

SliceMode lesion_mode_of(const std::string& ckpt_base) {
  const nlohmann::json hp = read_checkpoint_hyperparams(ckpt_base);
  return hp.value("mode", "context3") == "replicate_center"
             ? SliceMode::ReplicateCenter
             : SliceMode::Context3;
}

nlohmann::json box_to_json(const Bbox3& b) {
  return {{"z0", b.z0}, {"z1", b.z1}, {"y0", b.y0},
          {"y1", b.y1}, {"x0", b.x0}, {"x1", b.x1}};
}

///// Prediction plumbing /////

void write_prediction(const WorkflowPaths& paths, const std::string& id,
                      const PipelineResult& r) {
  write_mask(r.liver_mask, join(paths.predictions, id + "_liverpred"));
  write_volume(r.lesion_prob, join(paths.predictions, id + "_lesionprob"));
  write_mask(r.lesion_mask, join(paths.predictions, id + "_lesionpred"));
  if (r.has_detections)
    write_detections_json(r.detections,
                          join(paths.predictions, id + "_detections.json"));
  nlohmann::json run;
  run["case_id"] = id;
  run["status"] = r.status == PipelineStatus::Ok ? "ok" : "empty_liver";
  run["box"] = r.status == PipelineStatus::Ok ? box_to_json(r.box)
                                              : nlohmann::json();
  write_json_file(run, join(paths.predictions, id + "_run.json"));
  // Wall-clock lives apart so every other artifact is byte-reproducible.
  write_json_file({{"stage_ms", r.stage_ms}},
                  join(paths.predictions, id + "_timing.json"));
}

}  // namespace

///// Subcommands /////

void run_gen_data(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const PhantomParams base = phantom_params_from(cfg);
  const auto cases = cfg.at("data").at("cases").get<std::size_t>();
  Dataset ds = generate_dataset(make_param_list(base, cases),
                                split_fractions_from(cfg));
  const auto& sp = cfg.at("data").at("spacing");
  const Spacing3 spacing{sp[0].get<double>(), sp[1].get<double>(),
                         sp[2].get<double>()};
  for (auto& c : ds.cases) {
    c.image.spacing = spacing;
    c.liver.spacing = spacing;
    c.lesion.spacing = spacing;
  }
  ensure_dir(paths.data);
  write_dataset(ds, paths.data);
  write_run_config(cfg, join(paths.data, "config.json"));
  std::printf("[gen-data] %zu cases (%zu train / %zu val / %zu test) -> %s\n",
              ds.cases.size(), ds.train_ids.size(), ds.val_ids.size(),
              ds.test_ids.size(), paths.data.c_str());
}

void run_train_liver(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const Dataset ds = read_dataset(paths.data);
  const auto train = select_cases(ds, ds.train_ids);
  SegNet net = train_liver_net(cfg, train);
  ensure_dir(paths.models);
  save_segnet(net, join(paths.models, kLiverCkpt),
              {{"target", "liver"},
               {"mode", "context3"},
               {"train", cfg.at("liver_net")},
               {"seed", cfg.at("seed")}});
  write_run_config(cfg, join(paths.models, "config.json"));
}

void run_train_lesion(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const Dataset ds = read_dataset(paths.data);
  const auto train = select_cases(ds, ds.train_ids);
  const std::string variant =
      cfg.at("lesion_net").at("variant").get<std::string>();
  const bool full = variant == "full";
  SegNet net = train_lesion_net(
      cfg, train, full ? LesionVariant::Full : LesionVariant::Baseline);
  ensure_dir(paths.models);
  save_segnet(net, join(paths.models, kLesionCkpt),
              {{"target", "lesion"},
               {"variant", variant},
               {"mode", full ? "context3" : "replicate_center"},
               {"train", cfg.at("lesion_net")},
               {"seed", cfg.at("seed")}});
  write_run_config(cfg, join(paths.models, "config.json"));
}

void run_train_detector(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const Dataset ds = read_dataset(paths.data);
  const auto train = select_cases(ds, ds.train_ids);
  DetectorNet net = train_detector_net(cfg, train);
  ensure_dir(paths.models);
  save_detector(net, join(paths.models, kDetectorCkpt),
                {{"grid", cfg.at("detector").at("grid")},
                 {"train", cfg.at("detector")},
                 {"seed", cfg.at("seed")}});
  write_run_config(cfg, join(paths.models, "config.json"));
}

void run_predict(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const PipelineConfig pcfg = pipeline_config_from(cfg);
  const std::string liver_base = join(paths.models, kLiverCkpt);
  const std::string lesion_base = join(paths.models, kLesionCkpt);
  require_checkpoint(liver_base);
  require_checkpoint(lesion_base);
  const SegNet liver_net = load_segnet(liver_base);
  const SegNet lesion_net = load_segnet(lesion_base);
  const SliceMode mode = lesion_mode_of(lesion_base);

  DetectorNet detector;
  if (pcfg.stages.detector) {
    const std::string det_base = join(paths.models, kDetectorCkpt);
    require_checkpoint(det_base);
    detector = load_detector(det_base);
  }
  const PatchGrid grid = patch_grid_from(cfg);
  const CrfParams crf = crf_params_from(cfg);

  const Dataset ds = read_dataset(paths.data);
  const auto& ids = split_ids(ds, cfg.at("predict").at("split").get<std::string>());
  const auto cases = select_cases(ds, ids);
  ensure_dir(paths.predictions);
  for (const auto& c : cases) {
    const auto t0 = Clock::now();
    const PipelineResult r = run_pipeline(
        c.image, liver_net, lesion_net,
        pcfg.stages.detector ? &detector : nullptr, grid, crf, pcfg, mode);
    write_prediction(paths, c.case_id, r);
    std::printf("[predict] %s  %s  %.0f ms\n", c.case_id.c_str(),
                r.status == PipelineStatus::Ok ? "ok" : "empty-liver",
                ms_since(t0));
    std::fflush(stdout);
  }
  write_run_config(cfg, join(paths.predictions, "config.json"));
}

void run_refine_crf(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const auto& block = cfg.at("refine");
  const std::string prob_path = block.at("prob").get<std::string>();
  const std::string image_path = block.at("image").get<std::string>();
  if (prob_path.empty() || image_path.empty())
    throw ConfigError("refine.prob and refine.image must name RVOL inputs");
  const Volume prob = read_volume(prob_path);
  const Volume image = read_volume(image_path);
  const Volume refined = refine(prob, image, crf_params_from(cfg));
  ensure_dir(paths.predictions);
  const std::string out =
      join(paths.predictions, block.at("output").get<std::string>());
  write_volume(refined, out);
  write_run_config(cfg, join(paths.predictions, "config.json"));
  std::printf("[refine-crf] %s -> %s\n", prob_path.c_str(), out.c_str());
}

Aggregate run_evaluate(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const Dataset ds = read_dataset(paths.data);
  const auto& ids =
      split_ids(ds, cfg.at("evaluate").at("split").get<std::string>());
  const auto cases = select_cases(ds, ids);
  std::map<std::string, CasePrediction> preds;
  for (const auto& id : ids) {
    const std::string base = join(paths.predictions, id);
    if (!fs::exists(base + "_liverpred.json"))
      throw MissingPrediction("no prediction for " + id + " under " +
                              paths.predictions);
    preds[id] = {read_mask(base + "_liverpred"), read_mask(base + "_lesionpred")};
  }
  const auto scores = evaluate_cases(cases, preds);
  const Aggregate agg = aggregate(scores);
  ensure_dir(paths.reports);
  write_json_file(scores_to_json(scores, agg), join(paths.reports, "scores.json"));
  write_run_config(cfg, join(paths.reports, "config.json"));
  std::printf(
      "[evaluate] %zu cases  liver dice %.4f  lesion dice %.4f "
      "(global %.4f)  lesion precision %.4f\n",
      scores.size(), agg.mean_dice_liver, agg.mean_dice_lesion,
      agg.global_dice_lesion, agg.lesion_precision);
  return agg;
}

AblationReport run_ablate(const nlohmann::json& cfg,
                          const WorkflowPaths& paths) {
  const Dataset ds = read_dataset(paths.data);
  const auto train = select_cases(ds, ds.train_ids);
  const auto test = select_cases(ds, ds.test_ids);
  const auto seed_j = cfg.at("seed");

  nlohmann::json timing;
  auto t0 = Clock::now();
  SegNet liver_net = train_liver_net(cfg, train);
  timing["train_liver_ms"] = ms_since(t0);

  t0 = Clock::now();
  SegNet lesion_full = train_lesion_net(cfg, train, LesionVariant::Full);
  timing["train_lesion_ms"] = ms_since(t0);

  t0 = Clock::now();
  SegNet lesion_base = train_lesion_net(cfg, train, LesionVariant::Baseline);
  timing["train_lesion_baseline_ms"] = ms_since(t0);

  t0 = Clock::now();
  DetectorNet detector = train_detector_net(cfg, train);
  timing["train_detector_ms"] = ms_since(t0);

  ensure_dir(paths.models);
  save_segnet(liver_net, join(paths.models, kLiverCkpt),
              {{"target", "liver"}, {"mode", "context3"},
               {"train", cfg.at("liver_net")}, {"seed", seed_j}});
  save_segnet(lesion_full, join(paths.models, kLesionCkpt),
              {{"target", "lesion"}, {"variant", "full"},
               {"mode", "context3"}, {"train", cfg.at("lesion_net")},
               {"seed", seed_j}});
  save_segnet(lesion_base, join(paths.models, kLesionBaselineCkpt),
              {{"target", "lesion"}, {"variant", "baseline"},
               {"mode", "replicate_center"}, {"train", cfg.at("lesion_net")},
               {"seed", seed_j}});
  save_detector(detector, join(paths.models, kDetectorCkpt),
                {{"grid", cfg.at("detector").at("grid")},
                 {"train", cfg.at("detector")}, {"seed", seed_j}});
  write_run_config(cfg, join(paths.models, "config.json"));

  struct Row {
    const char* name;
    const SegNet* net;
    SliceMode mode;
    PipelineStages stages;
  };
  const Row rows[] = {
      {"Segmentation-only baseline", &lesion_base,
       SliceMode::ReplicateCenter, {false, false}},
      {"Segmentation-only 3-i/o + BP in liver", &lesion_full,
       SliceMode::Context3, {false, false}},
      {"Segmentation-only 3-i/o + BP in liver + Detector", &lesion_full,
       SliceMode::Context3, {true, false}},
      {"Segmentation-only 3-i/o + BP in liver + Detector + 3D-CRF",
       &lesion_full, SliceMode::Context3, {true, true}},
  };

  const PatchGrid grid = patch_grid_from(cfg);
  const CrfParams crf = crf_params_from(cfg);
  ensure_dir(paths.reports);

  AblationReport report;
  for (std::size_t ri = 0; ri < 4; ++ri) {
    const Row& row = rows[ri];
    PipelineConfig pcfg = pipeline_config_from(cfg);
    pcfg.stages = row.stages;
    t0 = Clock::now();
    std::map<std::string, CasePrediction> preds;
    for (const auto& c : test) {
      const PipelineResult r = run_pipeline(
          c.image, liver_net, *row.net,
          row.stages.detector ? &detector : nullptr, grid, crf, pcfg,
          row.mode);
      preds[c.case_id] = {r.liver_mask, r.lesion_mask};
    }
    const auto scores = evaluate_cases(test, preds);
    const Aggregate agg = aggregate(scores);
    report.rows.push_back({row.name, agg});
    timing["row" + std::to_string(ri + 1) + "_ms"] = ms_since(t0);
    write_json_file(scores_to_json(scores, agg),
                    join(paths.reports,
                         "scores_row" + std::to_string(ri + 1) + ".json"));
    std::printf("[ablate] %-58s lesion dice %.4f  precision %.4f\n", row.name,
                agg.mean_dice_lesion, agg.lesion_precision);
    std::fflush(stdout);
  }

  std::ofstream csv(join(paths.reports, "report.csv"), std::ios::binary);
  if (!csv) throw IoError("cannot write ablation CSV");
  csv << report_to_csv(report);
  write_json_file(report_to_json(report), join(paths.reports, "report.json"));
  write_json_file(timing, join(paths.reports, "ablate_timing.json"));
  write_run_config(cfg, join(paths.reports, "config.json"));
  std::printf("%s", report_to_table(report).c_str());
  return report;
}

///// Overlay rendering /////

namespace {

using Pixel = std::array<unsigned char, 3>;

constexpr Pixel kLiverGt = {40, 90, 255};     // blue
constexpr Pixel kLesionGt = {255, 60, 40};    // red
constexpr Pixel kLiverPred = {255, 220, 40};  // yellow
constexpr Pixel kLesionPred = {60, 220, 60};  // green
constexpr Pixel kDetection = {120, 210, 255}; // light blue

void write_ppm(const std::string& path, std::size_t ny, std::size_t nx,
               const std::vector<Pixel>& px) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << nx << " " << ny << "\n255\n";
  f.write(reinterpret_cast<const char*>(px.data()),
          static_cast<std::streamsize>(px.size() * 3));
  if (!f) throw IoError("short write: " + path);
}

// Foreground pixels bordering background (or the volume edge) on this slice.
void draw_contour(std::vector<Pixel>& px, const Mask& m, std::size_t z,
                  Pixel color) {
  const std::size_t ny = m.shape.ny, nx = m.shape.nx;
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x) {
      if (m.at(z, y, x) == 0.0f) continue;
      const bool edge = y == 0 || y + 1 == ny || x == 0 || x + 1 == nx ||
                        m.at(z, y - 1, x) == 0.0f ||
                        m.at(z, y + 1, x) == 0.0f ||
                        m.at(z, y, x - 1) == 0.0f ||
                        m.at(z, y, x + 1) == 0.0f;
      if (edge) px[y * nx + x] = color;
    }
}

void draw_rect(std::vector<Pixel>& px, std::size_t ny, std::size_t nx,
               long y0, long x0, long side, Pixel color) {
  const auto plot = [&](long y, long x) {
    if (y >= 0 && x >= 0 && y < static_cast<long>(ny) &&
        x < static_cast<long>(nx))
      px[static_cast<std::size_t>(y) * nx + static_cast<std::size_t>(x)] =
          color;
  };
  for (long d = 0; d < side; ++d) {
    plot(y0, x0 + d);
    plot(y0 + side - 1, x0 + d);
    plot(y0 + d, x0);
    plot(y0 + d, x0 + side - 1);
  }
}

}  // namespace

void run_overlay(const nlohmann::json& cfg, const WorkflowPaths& paths) {
  const auto& block = cfg.at("overlay");
  const Dataset ds = read_dataset(paths.data);
  std::vector<std::string> ids;
  const std::string one = block.at("case_id").get<std::string>();
  if (one.empty()) {
    ids = split_ids(ds, block.at("split").get<std::string>());
  } else {
    ids = {one};
  }
  const auto cases = select_cases(ds, ids);
  ensure_dir(paths.overlays);

  for (const auto& c : cases) {
    const std::string base = join(paths.predictions, c.case_id);
    if (!fs::exists(base + "_liverpred.json"))
      throw MissingPrediction("no prediction for " + c.case_id + " under " +
                              paths.predictions);
    const Mask liver_pred = read_mask(base + "_liverpred");
    const Mask lesion_pred = read_mask(base + "_lesionpred");

    // Detector windows (crop coordinates) plus the crop origin to place them.
    long box_z0 = 0, box_y0 = 0, box_x0 = 0;
    nlohmann::json det;
    if (fs::exists(base + "_detections.json") &&
        fs::exists(base + "_run.json")) {
      det = read_json_file(base + "_detections.json");
      const nlohmann::json run = read_json_file(base + "_run.json");
      if (run.at("box").is_object()) {
        box_z0 = run["box"]["z0"].get<long>();
        box_y0 = run["box"]["y0"].get<long>();
        box_x0 = run["box"]["x0"].get<long>();
      }
    }

    const Volume prep = preprocess(c.image);
    const auto [nz, ny, nx] = prep.shape;
    for (std::size_t z = 0; z < nz; ++z) {
      std::vector<Pixel> px(ny * nx);
      for (std::size_t i = 0; i < ny * nx; ++i) {
        const float v = prep.data[z * ny * nx + i];
        const auto g = static_cast<unsigned char>(
            std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
        px[i] = {g, g, g};
      }
      draw_contour(px, c.liver, z, kLiverGt);
      draw_contour(px, c.lesion, z, kLesionGt);
      draw_contour(px, liver_pred, z, kLiverPred);
      draw_contour(px, lesion_pred, z, kLesionPred);
      if (det.is_object()) {
        const long side = det["grid"]["window"].get<long>();
        for (const auto& slice : det["slices"]) {
          if (slice["slice"].get<long>() + box_z0 != static_cast<long>(z))
            continue;
          for (const auto& pos : slice["positives"])
            draw_rect(px, ny, nx, pos[0].get<long>() + box_y0,
                      pos[1].get<long>() + box_x0, side, kDetection);
        }
      }
      char name[64];
      std::snprintf(name, sizeof name, "%s_z%03zu.ppm", c.case_id.c_str(), z);
      write_ppm(join(paths.overlays, name), ny, nx, px);
    }
    std::printf("[overlay] %s -> %zu slices\n", c.case_id.c_str(), nz);
  }
  write_run_config(cfg, join(paths.overlays, "config.json"));
}

}  // namespace cascade
