#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cascade/checkpoint.hpp"
#include "cascade/nn.hpp"
#include "cascade/phantom.hpp"
#include "cascade/volume.hpp"

namespace cascade {

struct SegNetConfig {
  std::vector<std::size_t> stage_channels = {8, 16, 32, 64};
  std::size_t convs_per_stage = 2;
  std::size_t side_output_channels = 4;
  std::size_t in_channels = 3;
  std::size_t out_channels = 3;  // one map per context slice
};

// Per-stage side head: 3x3 conv to a narrow intermediate + ReLU + 1x1 conv
// to one logit map per output channel, emitted at the stage's resolution.
struct SideHead {
  Conv2d mid;
  Conv2d out;
};

// Fully convolutional net: conv+ReLU stages separated by 2x2 max-pooling,
// one supervised side output per stage, and a learned linear fusion
// (scalar alpha per side output plus a shared bias) over the upsampled
// side-output logits.
struct SegNet {
  SegNetConfig cfg;
  std::vector<std::vector<Conv2d>> stages;
  std::vector<SideHead> heads;
  Param alpha;  // (num stages)
  Param beta;   // (1)

  std::size_t num_stages() const { return stages.size(); }
  std::size_t pool_divisor() const { return std::size_t{1} << (stages.size() - 1); }
  std::vector<Param*> params();
  std::vector<TensorRef> tensor_refs();
};

SegNet build_segnet(const SegNetConfig& cfg, std::uint64_t seed);

void save_segnet(const SegNet& net, const std::string& path,
                 const nlohmann::json& extra_hyperparams);
SegNet load_segnet(const std::string& path);

// Workspace holding every intermediate activation of one forward pass;
// reused across calls and private per thread during parallel inference.
struct SegNetActivations {
  std::vector<std::vector<Tensor4>> conv_in;   // input to conv j of stage k
  std::vector<std::vector<Tensor4>> conv_out;  // pre-ReLU result
  std::vector<Tensor4> stage_out;              // post-ReLU stage output
  std::vector<Tensor4> head_mid;               // side head pre-ReLU
  std::vector<Tensor4> head_mid_relu;
  std::vector<Tensor4> side_logits;
  std::vector<Tensor4> side_up;                // logits at full resolution
  Tensor4 fused_logits;
  Tensor4 fused_prob;
  std::vector<Tensor4> side_probs;
};

// input is (1, in_channels, H, W) with H and W divisible by 2^(stages-1).
void segnet_forward(const SegNet& net, const Tensor4& input,
                    SegNetActivations& acts);

///// Class weights /////

enum class SegTarget { Liver, Lesion };

struct ClassWeights {
  double w = 0.5;  // normalized foreground weight in (0, 1)
};

// Slice-filtered class balance: fg_term sums foreground voxels over only the
// slices that contain foreground, divided by the total voxels of those same
// slices; bg_term symmetrically over background-bearing slices;
// w = fg_term / (fg_term + bg_term). With restrict_to_liver, both counts see
// only voxels inside the liver ground truth (and slice totals likewise).
// Throws EmptyForeground if no slice contains foreground, ClassMissing if no
// slice contains background.
ClassWeights compute_class_weights(const std::vector<LabeledCase>& cases,
                                   SegTarget target, bool restrict_to_liver);

///// Training /////

// Total loss = fused BCE + sum of side-output BCEs against nearest-neighbor
// downsampled targets (same w everywhere); the optional mask restricts every
// term's support, and a side whose downsampled mask is empty contributes
// nothing.
double segnet_loss(const SegNet& net, const Tensor4& input,
                   const Tensor4& target, ClassWeights weights,
                   const Tensor4* mask);

// Runs forward + backward, accumulating into every param's grad buffer, and
// returns the total loss. Caller owns grad lifecycle (sgd_step zeroes them).
double segnet_backward(SegNet& net, const Tensor4& input, const Tensor4& target,
                       ClassWeights weights, const Tensor4* mask);

// One SGD step on a single slab; returns the pre-step total loss.
double train_step(SegNet& net, const Tensor4& input, const Tensor4& target,
                  ClassWeights weights, const Tensor4* mask, double lr,
                  double momentum);

///// Prediction /////

enum class SliceMode {
  Context3,         // channels = slices (i-1, i, i+1), edge-clamped
  ReplicateCenter,  // all three channels carry slice i
};

Tensor4 slab_to_tensor(const ContextSlab& slab);
Tensor4 make_input_tensor(const Volume& vol, std::size_t index, SliceMode mode);

// Runs the net on every slice and keeps channel 1 (the central slice) of the
// fused probabilities. Output matches vol's shape; zero outside liver_mask
// when one is given.
Volume predict_volume(const SegNet& net, const Volume& vol,
                      const Mask* liver_mask,
                      SliceMode mode = SliceMode::Context3);

}  // namespace cascade
