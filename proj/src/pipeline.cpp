#include "cascade/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <string>

#include "cascade/errors.hpp"

namespace cascade {

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

///// Geometry /////

void validate_box(const Bbox3& b, const Shape3& s) {
  if (!(b.z0 < b.z1 && b.y0 < b.y1 && b.x0 < b.x1))
    throw BoundsError("bounding box is empty or inverted");
  if (b.z1 > s.nz || b.y1 > s.ny || b.x1 > s.nx)
    throw BoundsError("bounding box exceeds the volume bounds");
}

Mask threshold_mask(const Volume& prob, double t) {
  if (!(t > 0.0 && t < 1.0))
    throw RangeError("threshold must lie strictly inside (0, 1)");
  Mask m;
  m.shape = prob.shape;
  m.spacing = prob.spacing;
  m.data.resize(prob.data.size());
  const float tf = static_cast<float>(t);
  for (std::size_t i = 0; i < prob.data.size(); ++i)
    m.data[i] = prob.data[i] >= tf ? 1.0f : 0.0f;
  return m;
}

Bbox3 liver_bbox_3d(const Mask& liver, std::size_t margin) {
  const auto& s = liver.shape;
  Bbox3 b{s.nz, 0, s.ny, 0, s.nx, 0};
  bool any = false;
  for (std::size_t z = 0; z < s.nz; ++z)
    for (std::size_t y = 0; y < s.ny; ++y)
      for (std::size_t x = 0; x < s.nx; ++x) {
        if (liver.at(z, y, x) == 0.0f) continue;
        any = true;
        b.z0 = std::min(b.z0, z);
        b.z1 = std::max(b.z1, z + 1);
        b.y0 = std::min(b.y0, y);
        b.y1 = std::max(b.y1, y + 1);
        b.x0 = std::min(b.x0, x);
        b.x1 = std::max(b.x1, x + 1);
      }
  if (!any) throw EmptyMask("cannot place a bounding box around an empty mask");
  b.z0 = b.z0 > margin ? b.z0 - margin : 0;
  b.y0 = b.y0 > margin ? b.y0 - margin : 0;
  b.x0 = b.x0 > margin ? b.x0 - margin : 0;
  b.z1 = std::min(b.z1 + margin, s.nz);
  b.y1 = std::min(b.y1 + margin, s.ny);
  b.x1 = std::min(b.x1 + margin, s.nx);
  return b;
}

namespace {

std::size_t round_up(std::size_t n, std::size_t m) {
  return (n + m - 1) / m * m;
}

}  // namespace

Volume crop(const Volume& vol, const Bbox3& box, std::size_t pad_multiple) {
  validate_box(box, vol.shape);
  if (pad_multiple == 0) throw ParamError("pad_multiple must be positive");
  const std::size_t ny = round_up(box.ny(), pad_multiple);
  const std::size_t nx = round_up(box.nx(), pad_multiple);
  Volume out({box.nz(), ny, nx}, vol.spacing);
  for (std::size_t z = 0; z < box.nz(); ++z)
    for (std::size_t y = 0; y < ny; ++y) {
      const std::size_t sy = box.y0 + std::min(y, box.ny() - 1);
      for (std::size_t x = 0; x < nx; ++x) {
        const std::size_t sx = box.x0 + std::min(x, box.nx() - 1);
        out.at(z, y, x) = vol.at(box.z0 + z, sy, sx);
      }
    }
  return out;
}

Volume uncrop(const Volume& cropped, const Bbox3& box, const Shape3& full,
              float fill) {
  validate_box(box, full);
  if (cropped.shape.nz != box.nz() || cropped.shape.ny < box.ny() ||
      cropped.shape.nx < box.nx())
    throw ShapeError("cropped volume does not cover the bounding box");
  Volume out(full, cropped.spacing, fill);
  for (std::size_t z = 0; z < box.nz(); ++z)
    for (std::size_t y = 0; y < box.ny(); ++y)
      for (std::size_t x = 0; x < box.nx(); ++x)
        out.at(box.z0 + z, box.y0 + y, box.x0 + x) = cropped.at(z, y, x);
  return out;
}

///// Preprocessing /////

Volume preprocess(const Volume& raw) {
  return min_max_normalize(clip_intensities(raw, kClipLo, kClipHi));
}

///// Config /////

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = nlohmann::json{{"liver_threshold", c.liver_threshold},
                     {"bbox_margin", c.bbox_margin},
                     {"lesion_threshold", c.lesion_threshold},
                     {"detector_threshold", c.detector_threshold},
                     {"detector_enabled", c.stages.detector},
                     {"crf_enabled", c.stages.crf}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c.liver_threshold = j.value("liver_threshold", c.liver_threshold);
  c.bbox_margin = j.value("bbox_margin", c.bbox_margin);
  c.lesion_threshold = j.value("lesion_threshold", c.lesion_threshold);
  c.detector_threshold = j.value("detector_threshold", c.detector_threshold);
  c.stages.detector = j.value("detector_enabled", c.stages.detector);
  c.stages.crf = j.value("crf_enabled", c.stages.crf);
}

///// Pipeline /////

PipelineResult run_pipeline(const Volume& vol, const SegNet& liver_net,
                            const SegNet& lesion_net,
                            const DetectorNet* detector, const PatchGrid& grid,
                            const CrfParams& crf_params,
                            const PipelineConfig& cfg, SliceMode lesion_mode) {
  if (cfg.stages.detector && detector == nullptr)
    throw ConfigError("detector stage enabled but no detector given");

  PipelineResult r;
  r.stage_ms = nlohmann::json::object();
  auto t0 = std::chrono::steady_clock::now();
  const Volume prep = preprocess(vol);
  r.stage_ms["preprocess"] = ms_since(t0);

  t0 = std::chrono::steady_clock::now();
  const Volume liver_prob = predict_volume(liver_net, prep, nullptr);
  r.stage_ms["liver_net"] = ms_since(t0);
  r.liver_mask = threshold_mask(liver_prob, cfg.liver_threshold);

  const bool empty =
      std::all_of(r.liver_mask.data.begin(), r.liver_mask.data.end(),
                  [](float v) { return v == 0.0f; });
  if (empty) {
    r.status = PipelineStatus::EmptyLiver;
    r.lesion_prob = Volume(vol.shape, vol.spacing, 0.0f);
    r.lesion_mask = Mask(vol.shape, vol.spacing, 0.0f);
    return r;
  }

  r.box = liver_bbox_3d(r.liver_mask, cfg.bbox_margin);
  const std::size_t mult = lesion_net.pool_divisor();
  const Volume crop_img = crop(prep, r.box, mult);
  const Mask crop_liver = crop(r.liver_mask, r.box, mult);

  t0 = std::chrono::steady_clock::now();
  Volume prob = predict_volume(lesion_net, crop_img, &crop_liver, lesion_mode);
  r.stage_ms["lesion_net"] = ms_since(t0);

  if (cfg.stages.detector) {
    t0 = std::chrono::steady_clock::now();
    r.detections =
        detect(crop_img, crop_liver, *detector, grid, cfg.detector_threshold);
    r.has_detections = true;
    prob = mask_segmentation(prob, r.detections);
    r.stage_ms["detector"] = ms_since(t0);
  }

  if (cfg.stages.crf) {
    t0 = std::chrono::steady_clock::now();
    prob = refine(prob, crop_img, crf_params);
    // Refinement sees the whole crop, so re-impose the liver support before
    // thresholding; this is what guarantees lesion_mask within liver_mask.
    for (std::size_t i = 0; i < prob.data.size(); ++i)
      if (crop_liver.data[i] == 0.0f) prob.data[i] = 0.0f;
    r.stage_ms["crf"] = ms_since(t0);
  }

  const Mask lesion_crop_mask = threshold_mask(prob, cfg.lesion_threshold);
  r.lesion_prob = uncrop(prob, r.box, vol.shape, 0.0f);
  r.lesion_mask = uncrop(lesion_crop_mask, r.box, vol.shape, 0.0f);
  return r;
}

}  // namespace cascade
