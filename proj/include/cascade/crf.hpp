#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cascade/volume.hpp"
#include "json.hpp"

namespace cascade {

// Fully connected binary CRF over a probability volume: Gaussian appearance
// (bilateral) + smoothness kernels with Potts compatibility, solved by
// parallel mean-field updates. Pairwise terms are evaluated exactly over all
// voxel pairs, so volumes are kept desk-scale (see max_voxels) and larger
// stacks are refined in overlapping z-blocks.

struct CrfParams {
  double w_app = 3.0;               // appearance (bilateral) kernel weight
  double w_smooth = 1.0;            // smoothness kernel weight
  double theta_spatial_app = 3.0;   // mm
  double theta_intensity = 0.1;     // normalized intensity units
  double theta_spatial_smooth = 1.5;  // mm
  std::size_t iterations = 5;
  std::size_t max_voxels = 20000;   // dense-computation cap per block
  std::size_t block_depth = 8;      // z-block decomposition for refine()
  std::size_t block_overlap = 2;
};

void validate_params(const CrfParams& p);  // throws ParamError

void to_json(nlohmann::json& j, const CrfParams& p);
void from_json(const nlohmann::json& j, CrfParams& p);

// Unary potentials are negative log-probabilities of {background, lesion};
// features are voxel positions in mm (index * spacing) plus the intensity
// value as given (the pipeline hands in the normalized image).
struct CrfModel {
  Shape3 shape;
  Spacing3 spacing;
  CrfParams params;
  std::vector<float> unary_bg, unary_fg;
  std::vector<float> intensity;
};

struct MarginalField {
  std::vector<double> q_bg, q_fg;  // q_bg[i] + q_fg[i] = 1 per voxel
};

CrfModel build_crf(const Volume& prob, const Volume& image,
                   const CrfParams& params);

// k(i, j): appearance + smoothness Gaussian kernel between two voxels.
double pair_potential(const CrfModel& model, std::size_t i, std::size_t j);

// E(l) = sum_i unary_i(l_i) + sum_{i<j} [l_i != l_j] k(i, j).
double energy(const CrfModel& model, const Mask& labeling);

// Parallel mean-field: Q init = softmax(-unary); each iteration recomputes
// every voxel from the previous field. Throws SizeError above max_voxels.
MarginalField mean_field_infer(const CrfModel& model);

Mask map_labeling(const CrfModel& model, const MarginalField& q);

// Brute-force minimum-energy labeling over all 2^N assignments; ties go to
// the lowest enumeration index. Throws SizeError for more than 20 voxels.
Mask exhaustive_map(const CrfModel& model);

// Refined lesion probabilities, same shape as the input. Volumes whose
// voxel count exceeds the cap are processed in overlapping z-blocks whose
// depth adapts to the cap; overlap regions average the block outputs.
Volume refine(const Volume& prob, const Volume& image,
              const CrfParams& params);

///// Fast exponential /////

namespace detail {

// exp(x) without libm: ~1e-7 relative accuracy, fully branch-free so the
// O(N^2) message loops auto-vectorize. Precondition: -87.4 <= x <= 0 (the
// message loops bound their arguments by construction).
inline float exp_core(float x) {
  // Branchless floor via truncation fixup.
  const float v = x * 1.44269504088896341f + 0.5f;
  std::int32_t ni = static_cast<std::int32_t>(v);
  ni -= static_cast<std::int32_t>(v < static_cast<float>(ni));
  const float n = static_cast<float>(ni);
  // Cody-Waite two-part ln 2 keeps t = x - n ln 2 accurate for large |x|.
  const float t = (x - n * 0.693145751953125f) - n * 1.42860676533018e-6f;
  // exp(t) Taylor up to degree 6 on |t| <= 0.35 (~1e-7 max error).
  float p = 1.38888888888888889e-3f;
  p = p * t + 8.33333333333333333e-3f;
  p = p * t + 4.16666666666666667e-2f;
  p = p * t + 1.66666666666666667e-1f;
  p = p * t + 5.0e-1f;
  p = p * t + 1.0f;
  p = p * t + 1.0f;
  const auto bits = static_cast<std::uint32_t>((ni + 127) << 23);
  return p * std::bit_cast<float>(bits);
}

}  // namespace detail

// exp(x) for any x <= 0; arguments below -87 clamp (exp is ~1e-38 there,
// negligible against unit-scale marginals).
inline float fast_exp_neg(float x) {
  return detail::exp_core(x < -87.0f ? -87.0f : x);
}

}  // namespace cascade
