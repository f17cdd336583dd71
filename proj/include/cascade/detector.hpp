#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cascade/checkpoint.hpp"
#include "cascade/nn.hpp"
#include "cascade/volume.hpp"

namespace cascade {

// 2D plane view used by the patch machinery (one z slice of a crop).
struct Plane {
  std::size_t ny = 0, nx = 0;
  std::vector<float> v;

  float at(std::size_t y, std::size_t x) const { return v[y * nx + x]; }
  float& at(std::size_t y, std::size_t x) { return v[y * nx + x]; }
};

Plane slice_of(const Volume& vol, std::size_t z);

struct PatchGrid {
  std::size_t window = 50;          // core side length
  std::size_t stride = 50;
  std::size_t margin = 15;          // padded side = window + 2*margin = 80
  double min_liver_overlap = 0.25;  // inclusion rule on the core
  std::size_t min_lesion_pixels = 50;
  std::size_t padded() const { return window + 2 * margin; }
};

enum class PatchLabel { Positive, Negative, Excluded };

struct PatchRecord {
  std::size_t slice_index = 0;
  std::size_t y0 = 0, x0 = 0;  // core origin in crop coordinates
  long py0 = 0, px0 = 0;       // padded origin (may fall outside the plane)
  PatchLabel label = PatchLabel::Excluded;
  double liver_overlap = 0.0;
  std::size_t lesion_pixel_count = 0;
};

// Grid windows anchored at (0,0) with the given stride; windows extending
// past the plane are dropped, windows under the liver-overlap threshold are
// omitted from the result, and retained windows are labeled positive iff the
// core holds at least min_lesion_pixels lesion pixels.
std::vector<PatchRecord> enumerate_patches(const Plane& liver,
                                           const Plane& lesion,
                                           const PatchGrid& grid,
                                           std::size_t slice_index);

// 80x80 patch around the core; margin pixels outside the plane are filled by
// edge replication. Throws BoundsError if the core itself exceeds the plane.
Tensor4 extract_padded_window(const Plane& image, const PatchRecord& rec,
                              const PatchGrid& grid);

// Dihedral orbit of a square patch: rotations of 0/90/180/270 degrees, each
// optionally followed by a horizontal flip. Element 0 is the identity.
std::vector<Tensor4> augment8(const Tensor4& patch);
Tensor4 apply_dihedral(const Tensor4& patch, std::size_t k);  // k in [0, 8)

///// Detector network /////

struct DetectorConfig {
  std::vector<std::size_t> stage_channels = {8, 16, 32};
};

// Plain small CNN: per stage 3x3 conv + ReLU + 2x2 max-pool, then global
// average pooling and an affine map to a single logit.
struct DetectorNet {
  DetectorConfig cfg;
  std::vector<Conv2d> convs;
  Affine head;

  std::vector<Param*> params();
  std::vector<TensorRef> tensor_refs();
};

DetectorNet build_detector(const DetectorConfig& cfg, std::uint64_t seed);
void save_detector(const DetectorNet& net, const std::string& path,
                   const nlohmann::json& extra_hyperparams =
                       nlohmann::json::object());
DetectorNet load_detector(const std::string& path);

Tensor4 detector_forward(const DetectorNet& net, const Tensor4& batch);

struct DetectorTrainConfig {
  std::size_t steps = 150;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

// One training example: a patch source plane index + record; patches are
// extracted (and augmented) lazily during batch assembly.
struct PatchDataset {
  std::vector<Plane> image_planes;          // one per (case, slice) pair
  std::vector<PatchRecord> records;         // record.slice_index indexes planes
  PatchGrid grid;
};

// A 64-patch batch: rows [0,32) are positives, rows [32,64) negatives, each
// drawn with replacement from its class pool and dihedrally augmented.
struct BalancedBatch {
  Tensor4 patches;
  Tensor4 targets;
};

// Throws ClassMissing unless both classes are present in `data`.
BalancedBatch sample_balanced_batch(const PatchDataset& data, Rng& rng);

// Balanced-batch training: every batch holds exactly 32 positive and 32
// negative patches sampled with replacement, each with a uniformly drawn
// dihedral augmentation; loss is unweighted BCE on the single logit.
// Returns the mean loss of the final step.
double train_detector(DetectorNet& net, const PatchDataset& data,
                      const DetectorTrainConfig& cfg);

///// Detection and masking /////

struct DetectionMask {
  std::size_t nz = 0, ny = 0, nx = 0;  // crop dims
  PatchGrid grid;
  // per slice: core origins (y0, x0) of positively classified windows
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> positives;

  Mask to_mask() const;  // binary union of positive cores
};

// Classifies every included window of every slice; windows with
// sigmoid(logit) >= threshold enter the detection mask.
DetectionMask detect(const Volume& crop_image, const Mask& crop_liver,
                     const DetectorNet& net, const PatchGrid& grid,
                     double threshold = 0.5);

// Keeps probabilities only inside the union of positive cores per slice.
Volume mask_segmentation(const Volume& lesion_prob,
                         const DetectionMask& detections);

void write_detections_json(const DetectionMask& det, const std::string& path);

}  // namespace cascade
