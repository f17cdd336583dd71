#pragma once

#include <cstddef>

#include "cascade/crf.hpp"
#include "cascade/detector.hpp"
#include "cascade/segnet.hpp"
#include "cascade/volume.hpp"
#include "json.hpp"

namespace cascade {

// Cascade orchestration: liver segmentation -> threshold -> 3D bounding box
// -> cropped lesion segmentation (masked to liver) -> optional detector
// masking -> optional dense-CRF refinement -> threshold -> uncrop.

///// Geometry /////

// Inclusive-exclusive voxel bounds; nonempty by construction.
struct Bbox3 {
  std::size_t z0 = 0, z1 = 0, y0 = 0, y1 = 0, x0 = 0, x1 = 0;

  std::size_t nz() const { return z1 - z0; }
  std::size_t ny() const { return y1 - y0; }
  std::size_t nx() const { return x1 - x0; }
  bool operator==(const Bbox3&) const = default;
};

void validate_box(const Bbox3& b, const Shape3& s);  // throws BoundsError

// voxel = 1 iff prob >= t. Throws RangeError unless t in (0, 1).
Mask threshold_mask(const Volume& prob, double t);

// Tightest box containing every nonzero voxel, grown by margin per axis and
// clamped to the volume bounds. Throws EmptyMask on an all-zero mask.
Bbox3 liver_bbox_3d(const Mask& liver, std::size_t margin);

// Cropped copy of the boxed region. The in-plane dims are padded up to the
// next multiple of pad_multiple by edge replication (the segmentation nets
// need ny, nx divisible by their pooling factor); z is never padded because
// slices are processed independently.
Volume crop(const Volume& vol, const Bbox3& box, std::size_t pad_multiple = 1);

// Writes the box region of `cropped` back into a full-size volume, dropping
// any replication padding and filling everything outside the box.
Volume uncrop(const Volume& cropped, const Bbox3& box, const Shape3& full,
              float fill = 0.0f);

///// Preprocessing /////

// Intensity window covering the phantom's soft-tissue range.
constexpr float kClipLo = -150.0f;
constexpr float kClipHi = 250.0f;

// Clip to the window, then min-max normalize per volume. Every training and
// inference path must see volumes through this same transform.
Volume preprocess(const Volume& raw);

///// Pipeline /////

struct PipelineStages {
  bool detector = true;
  bool crf = true;
};

struct PipelineConfig {
  double liver_threshold = 0.5;
  std::size_t bbox_margin = 4;
  double lesion_threshold = 0.5;
  double detector_threshold = 0.5;  // sigmoid cut on the window logit
  PipelineStages stages;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

enum class PipelineStatus { Ok, EmptyLiver };

struct PipelineResult {
  PipelineStatus status = PipelineStatus::Ok;
  Mask liver_mask;     // full volume shape
  Volume lesion_prob;  // full volume shape, zero outside the crop
  Mask lesion_mask;    // full volume shape; subset of liver_mask
  Bbox3 box;           // valid only when status == Ok
  DetectionMask detections;  // crop coordinates; meaningful iff has_detections
  bool has_detections = false;
  nlohmann::json stage_ms;  // wall-clock per stage, for the run sidecar
};

// `vol` is raw (preprocessing happens inside). `detector` may be null when
// cfg.stages.detector is false; `lesion_mode` selects the lesion net's input
// protocol (the ablation baseline feeds the center slice on all channels).
// An empty thresholded liver degrades to an empty lesion mask with
// status EmptyLiver instead of failing.
PipelineResult run_pipeline(const Volume& vol, const SegNet& liver_net,
                            const SegNet& lesion_net,
                            const DetectorNet* detector, const PatchGrid& grid,
                            const CrfParams& crf_params,
                            const PipelineConfig& cfg,
                            SliceMode lesion_mode = SliceMode::Context3);

}  // namespace cascade
