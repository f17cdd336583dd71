#include "cascade/segnet.hpp"

#include <algorithm>
#include <cmath>

#include "cascade/errors.hpp"
#include "cascade/threading.hpp"

namespace cascade {
namespace {

void validate_config(const SegNetConfig& cfg) {
  if (cfg.stage_channels.size() < 2)
    throw ConfigError("segnet needs at least 2 stages");
  for (std::size_t ch : cfg.stage_channels)
    if (ch == 0) throw ConfigError("segnet stage channels must be positive");
  if (cfg.convs_per_stage == 0)
    throw ConfigError("segnet convs_per_stage must be positive");
  if (cfg.side_output_channels == 0)
    throw ConfigError("segnet side_output_channels must be positive");
  if (cfg.in_channels == 0 || cfg.out_channels == 0)
    throw ConfigError("segnet channel counts must be positive");
}

// Nearest-neighbor downsample by integer stride (top-left sample per cell).
Tensor4 nn_downsample(const Tensor4& x, std::size_t factor) {
  if (factor == 1) return x;
  Tensor4 out(x.n, x.c, x.h / factor, x.w / factor);
  for (std::size_t in = 0; in < x.n; ++in)
    for (std::size_t ic = 0; ic < x.c; ++ic)
      for (std::size_t iy = 0; iy < out.h; ++iy)
        for (std::size_t ix = 0; ix < out.w; ++ix)
          out.at(in, ic, iy, ix) = x.at(in, ic, iy * factor, ix * factor);
  return out;
}

bool has_support(const Tensor4& mask) {
  for (float v : mask.v)
    if (v != 0.0f) return true;
  return false;
}

}  // namespace

std::vector<Param*> SegNet::params() {
  std::vector<Param*> ps;
  for (auto& stage : stages)
    for (auto& conv : stage) {
      ps.push_back(&conv.weight);
      ps.push_back(&conv.bias);
    }
  for (auto& head : heads) {
    ps.push_back(&head.mid.weight);
    ps.push_back(&head.mid.bias);
    ps.push_back(&head.out.weight);
    ps.push_back(&head.out.bias);
  }
  ps.push_back(&alpha);
  ps.push_back(&beta);
  return ps;
}

std::vector<TensorRef> SegNet::tensor_refs() {
  std::vector<TensorRef> refs;
  for (Param* p : params()) refs.push_back({p->name, p->shape, &p->w});
  return refs;
}

SegNet build_segnet(const SegNetConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  SegNet net;
  net.cfg = cfg;
  Rng rng(seed);
  const std::size_t S = cfg.stage_channels.size();
  for (std::size_t k = 0; k < S; ++k) {
    std::vector<Conv2d> stage;
    std::size_t in_ch = k == 0 ? cfg.in_channels : cfg.stage_channels[k - 1];
    for (std::size_t j = 0; j < cfg.convs_per_stage; ++j) {
      const std::string name =
          "stage" + std::to_string(k) + ".conv" + std::to_string(j);
      stage.emplace_back(name, in_ch, cfg.stage_channels[k], 3, 1, 1, rng);
      in_ch = cfg.stage_channels[k];
    }
    net.stages.push_back(std::move(stage));
  }
  for (std::size_t k = 0; k < S; ++k) {
    const std::string name = "side" + std::to_string(k);
    SideHead head{
        Conv2d(name + ".mid", cfg.stage_channels[k], cfg.side_output_channels,
               3, 1, 1, rng),
        Conv2d(name + ".out", cfg.side_output_channels, cfg.out_channels, 1, 1,
               0, rng)};
    net.heads.push_back(std::move(head));
  }
  net.alpha = Param("fusion.alpha", {S});
  net.beta = Param("fusion.beta", {1});
  // equal-vote start: every side output weighted 1/S, zero bias
  std::fill(net.alpha.w.begin(), net.alpha.w.end(),
            1.0f / static_cast<float>(S));
  return net;
}

void save_segnet(const SegNet& net, const std::string& path,
                 const nlohmann::json& extra_hyperparams) {
  nlohmann::json hp = extra_hyperparams;
  hp["net"] = {{"kind", "segnet"},
               {"stage_channels", net.cfg.stage_channels},
               {"convs_per_stage", net.cfg.convs_per_stage},
               {"side_output_channels", net.cfg.side_output_channels},
               {"in_channels", net.cfg.in_channels},
               {"out_channels", net.cfg.out_channels}};
  save_checkpoint(path, const_cast<SegNet&>(net).tensor_refs(), hp);
}

SegNet load_segnet(const std::string& path) {
  nlohmann::json hp = read_checkpoint_hyperparams(path);
  if (!hp.contains("net") || hp["net"].value("kind", "") != "segnet")
    throw FormatError("checkpoint " + path + " does not hold a segnet");
  const auto& n = hp["net"];
  SegNetConfig cfg;
  cfg.stage_channels = n.at("stage_channels").get<std::vector<std::size_t>>();
  cfg.convs_per_stage = n.at("convs_per_stage").get<std::size_t>();
  cfg.side_output_channels = n.at("side_output_channels").get<std::size_t>();
  cfg.in_channels = n.at("in_channels").get<std::size_t>();
  cfg.out_channels = n.at("out_channels").get<std::size_t>();
  SegNet net = build_segnet(cfg, 0);
  load_checkpoint(path, net.tensor_refs());
  return net;
}

void segnet_forward(const SegNet& net, const Tensor4& input,
                    SegNetActivations& acts) {
  const std::size_t S = net.num_stages();
  if (input.c != net.cfg.in_channels)
    throw ShapeError("segnet input channel mismatch");
  const std::size_t div = net.pool_divisor();
  if (input.h % div != 0 || input.w % div != 0)
    throw ShapeError("segnet input spatial dims must be divisible by " +
                     std::to_string(div));

  acts.conv_in.assign(S, {});
  acts.conv_out.assign(S, {});
  acts.stage_out.assign(S, {});
  acts.head_mid.assign(S, {});
  acts.head_mid_relu.assign(S, {});
  acts.side_logits.assign(S, {});
  acts.side_up.assign(S, {});
  acts.side_probs.assign(S, {});

  Tensor4 cur = input;
  for (std::size_t k = 0; k < S; ++k) {
    if (k > 0) cur = maxpool2(cur);
    for (std::size_t j = 0; j < net.cfg.convs_per_stage; ++j) {
      acts.conv_in[k].push_back(cur);
      Tensor4 pre = net.stages[k][j].forward(cur);
      acts.conv_out[k].push_back(pre);
      cur = relu(pre);
    }
    acts.stage_out[k] = cur;
  }
  for (std::size_t k = 0; k < S; ++k) {
    acts.head_mid[k] = net.heads[k].mid.forward(acts.stage_out[k]);
    acts.head_mid_relu[k] = relu(acts.head_mid[k]);
    acts.side_logits[k] = net.heads[k].out.forward(acts.head_mid_relu[k]);
    acts.side_up[k] =
        k == 0 ? acts.side_logits[k]
               : bilinear_upsample(acts.side_logits[k], std::size_t{1} << k);
    acts.side_probs[k] = sigmoid(acts.side_logits[k]);
  }
  acts.fused_logits = Tensor4(input.n, net.cfg.out_channels, input.h, input.w);
  for (std::size_t i = 0; i < acts.fused_logits.v.size(); ++i) {
    float acc = net.beta.w[0];
    for (std::size_t k = 0; k < S; ++k)
      acc += net.alpha.w[k] * acts.side_up[k].v[i];
    acts.fused_logits.v[i] = acc;
  }
  acts.fused_prob = sigmoid(acts.fused_logits);
}

///// Class weights /////

ClassWeights compute_class_weights(const std::vector<LabeledCase>& cases,
                                   SegTarget target, bool restrict_to_liver) {
  // 64-bit integer voxel counts; slices filtered per class as described in
  // the header.
  std::uint64_t fg_sum = 0, fg_slice_total = 0;
  std::uint64_t bg_sum = 0, bg_slice_total = 0;
  for (const auto& c : cases) {
    const Mask& tgt = target == SegTarget::Liver ? c.liver : c.lesion;
    const auto [nz, ny, nx] = c.image.shape;
    const std::size_t plane = ny * nx;
    for (std::size_t z = 0; z < nz; ++z) {
      std::uint64_t fg = 0, total = 0;
      for (std::size_t i = z * plane; i < (z + 1) * plane; ++i) {
        if (restrict_to_liver && c.liver.data[i] == 0.0f) continue;
        ++total;
        fg += (tgt.data[i] != 0.0f);
      }
      const std::uint64_t bg = total - fg;
      if (fg > 0) {
        fg_sum += fg;
        fg_slice_total += total;
      }
      if (bg > 0) {
        bg_sum += bg;
        bg_slice_total += total;
      }
    }
  }
  if (fg_sum == 0) throw EmptyForeground("no slice contains foreground");
  if (bg_sum == 0) throw ClassMissing("no slice contains background");
  const double fg_term = static_cast<double>(fg_sum) /
                         static_cast<double>(fg_slice_total);
  const double bg_term = static_cast<double>(bg_sum) /
                         static_cast<double>(bg_slice_total);
  return ClassWeights{fg_term / (fg_term + bg_term)};
}

///// Training /////

double segnet_loss(const SegNet& net, const Tensor4& input,
                   const Tensor4& target, ClassWeights weights,
                   const Tensor4* mask) {
  SegNetActivations acts;
  segnet_forward(net, input, acts);
  double total = weighted_masked_bce(acts.fused_prob, target, weights.w, mask)
                     .loss;
  for (std::size_t k = 0; k < net.num_stages(); ++k) {
    const std::size_t factor = std::size_t{1} << k;
    Tensor4 side_target = nn_downsample(target, factor);
    if (mask) {
      Tensor4 side_mask = nn_downsample(*mask, factor);
      if (!has_support(side_mask)) continue;
      total += weighted_masked_bce(acts.side_probs[k], side_target, weights.w,
                                   &side_mask)
                   .loss;
    } else {
      total += weighted_masked_bce(acts.side_probs[k], side_target, weights.w,
                                   nullptr)
                   .loss;
    }
  }
  return total;
}

double segnet_backward(SegNet& net, const Tensor4& input, const Tensor4& target,
                       ClassWeights weights, const Tensor4* mask) {
  if (target.n != input.n || target.c != net.cfg.out_channels ||
      target.h != input.h || target.w != input.w)
    throw ShapeError("train_step target shape mismatch");
  if (mask && !target.same_shape(*mask))
    throw ShapeError("train_step mask shape mismatch");
  if (mask && !has_support(*mask))
    throw DegenerateMask("training mask is empty on all slices");

  SegNetActivations acts;
  segnet_forward(net, input, acts);
  const std::size_t S = net.num_stages();

  double total_loss = 0.0;
  LossResult fused = weighted_masked_bce(acts.fused_prob, target, weights.w,
                                         mask);
  total_loss += fused.loss;
  Tensor4 g_fused_logits = sigmoid_backward(acts.fused_prob, fused.grad);

  // Fusion backward: dL/dalpha_k = <g, side_up_k>, dL/dbeta = sum(g).
  for (std::size_t k = 0; k < S; ++k) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < g_fused_logits.v.size(); ++i)
      acc += g_fused_logits.v[i] * acts.side_up[k].v[i];
    net.alpha.g[k] += acc;
  }
  {
    float acc = 0.0f;
    for (float g : g_fused_logits.v) acc += g;
    net.beta.g[0] += acc;
  }

  // Per-side supervision and the gradient that reaches each side logit map.
  std::vector<Tensor4> g_side_logits(S);
  for (std::size_t k = 0; k < S; ++k) {
    const std::size_t factor = std::size_t{1} << k;
    Tensor4 g_up(g_fused_logits.n, g_fused_logits.c, g_fused_logits.h,
                 g_fused_logits.w);
    for (std::size_t i = 0; i < g_up.v.size(); ++i)
      g_up.v[i] = net.alpha.w[k] * g_fused_logits.v[i];
    g_side_logits[k] =
        k == 0 ? g_up
               : bilinear_upsample_backward(acts.side_logits[k].h,
                                            acts.side_logits[k].w, factor, g_up);

    Tensor4 side_target = nn_downsample(target, factor);
    if (mask) {
      Tensor4 side_mask = nn_downsample(*mask, factor);
      if (!has_support(side_mask)) continue;  // no supervised voxels here
      LossResult side = weighted_masked_bce(acts.side_probs[k], side_target,
                                            weights.w, &side_mask);
      total_loss += side.loss;
      Tensor4 g = sigmoid_backward(acts.side_probs[k], side.grad);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        g_side_logits[k].v[i] += g.v[i];
    } else {
      LossResult side = weighted_masked_bce(acts.side_probs[k], side_target,
                                            weights.w, nullptr);
      total_loss += side.loss;
      Tensor4 g = sigmoid_backward(acts.side_probs[k], side.grad);
      for (std::size_t i = 0; i < g.v.size(); ++i)
        g_side_logits[k].v[i] += g.v[i];
    }
  }

  // Side heads back to their stages.
  std::vector<Tensor4> g_stage_out(S);
  for (std::size_t k = 0; k < S; ++k) {
    Tensor4 g_mid_relu =
        net.heads[k].out.backward(acts.head_mid_relu[k], g_side_logits[k]);
    Tensor4 g_mid = relu_backward(acts.head_mid[k], g_mid_relu);
    g_stage_out[k] = net.heads[k].mid.backward(acts.stage_out[k], g_mid);
  }

  // Stages from deepest to shallowest; pooling routes grads across stages.
  for (std::size_t k = S; k-- > 0;) {
    Tensor4 gcur = g_stage_out[k];
    for (std::size_t j = net.cfg.convs_per_stage; j-- > 0;) {
      Tensor4 gpre = relu_backward(acts.conv_out[k][j], gcur);
      gcur = net.stages[k][j].backward(acts.conv_in[k][j], gpre);
    }
    if (k > 0) {
      Tensor4 gprev = maxpool2_backward(acts.stage_out[k - 1], gcur);
      for (std::size_t i = 0; i < gprev.v.size(); ++i)
        g_stage_out[k - 1].v[i] += gprev.v[i];
    }
  }
  return total_loss;
}

double train_step(SegNet& net, const Tensor4& input, const Tensor4& target,
                  ClassWeights weights, const Tensor4* mask, double lr,
                  double momentum) {
  const double loss = segnet_backward(net, input, target, weights, mask);
  for (Param* p : net.params()) sgd_step(*p, lr, momentum);
  return loss;
}

///// Prediction /////

Tensor4 slab_to_tensor(const ContextSlab& slab) {
  Tensor4 t(1, 3, slab.ny, slab.nx);
  for (int k = 0; k < 3; ++k)
    std::copy(slab.channels[k].begin(), slab.channels[k].end(),
              t.v.begin() + static_cast<long>(k * slab.ny * slab.nx));
  return t;
}

Tensor4 make_input_tensor(const Volume& vol, std::size_t index,
                          SliceMode mode) {
  if (mode == SliceMode::Context3)
    return slab_to_tensor(stack_context_slices(vol, index));
  const auto [nz, ny, nx] = vol.shape;
  if (index >= nz) throw IndexError("slice index out of range");
  Tensor4 t(1, 3, ny, nx);
  const std::size_t plane = ny * nx;
  for (int k = 0; k < 3; ++k)
    std::copy(vol.data.begin() + static_cast<long>(index * plane),
              vol.data.begin() + static_cast<long>((index + 1) * plane),
              t.v.begin() + static_cast<long>(k * plane));
  return t;
}

Volume predict_volume(const SegNet& net, const Volume& vol,
                      const Mask* liver_mask, SliceMode mode) {
  const auto [nz, ny, nx] = vol.shape;
  if (liver_mask && !(liver_mask->shape == vol.shape))
    throw ShapeError("liver mask shape mismatch");
  Volume out(vol.shape, vol.spacing);
  const std::size_t plane = ny * nx;
  // Read-only net: slices are independent jobs, one workspace per range.
  parallel_for_ranges(nz, [&](std::size_t lo, std::size_t hi) {
    SegNetActivations acts;
    for (std::size_t z = lo; z < hi; ++z) {
      Tensor4 input = make_input_tensor(vol, z, mode);
      segnet_forward(net, input, acts);
      // keep only the central slice (channel 1) of the fused output
      const float* central = &acts.fused_prob.v[plane];
      std::copy(central, central + plane, out.data.begin() + z * plane);
    }
  });
  if (liver_mask) {
    for (std::size_t i = 0; i < out.data.size(); ++i)
      if (liver_mask->data[i] == 0.0f) out.data[i] = 0.0f;
  }
  return out;
}

}  // namespace cascade
