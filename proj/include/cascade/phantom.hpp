#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cascade/volume.hpp"

namespace cascade {

// Parameters for one synthetic case. Radii are given as a fraction of the
// smallest volume dimension (liver) or in voxels (lesions). Defaults are
// tuned so the liver's in-plane extent comfortably exceeds one detector
// window and lesion cross-sections clear the positive-label pixel count.
struct PhantomParams {
  Shape3 shape{24, 64, 64};
  double liver_radius_lo = 0.92, liver_radius_hi = 0.95;   // fraction of min dim
  int lesion_count_lo = 1, lesion_count_hi = 3;
  double lesion_radius_lo = 4.5, lesion_radius_hi = 5.5;   // voxels
  double intensity_background = 20.0;
  double intensity_liver = 120.0;
  double intensity_lesion = 60.0;
  double noise_sigma = 20.0;
  std::uint64_t seed = 0;
};

struct LabeledCase {
  std::string case_id;
  Volume image;
  Mask liver;
  Mask lesion;
};

struct SplitFractions {
  double train = 0.5;
  double val = 0.25;
};

struct Dataset {
  std::vector<LabeledCase> cases;
  std::vector<std::string> train_ids, val_ids, test_ids;
};

void validate_params(const PhantomParams& p);

LabeledCase generate_phantom(const PhantomParams& params);

// Generates every case in params_list (case_id = "case_%04d" by list index)
// and deterministically shuffles ids into train/val/test by the fractions.
Dataset generate_dataset(const std::vector<PhantomParams>& params_list,
                         SplitFractions split);

// Derives the per-case parameter list for an n-case dataset from one base
// parameter set: case i uses seed derive_seed(base.seed, i).
std::vector<PhantomParams> make_param_list(const PhantomParams& base,
                                           std::size_t n);

// On-disk layout: <dir>/<id>_img, <id>_liver, <id>_lesion RVOL pairs plus
// <dir>/dataset.json listing case ids per split.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);          // full load + checks
LabeledCase read_case(const std::string& dir, const std::string& id);
void read_manifest(const std::string& dir, std::vector<std::string>& train,
                   std::vector<std::string>& val, std::vector<std::string>& test);

}  // namespace cascade
