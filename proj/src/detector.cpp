#include "cascade/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cascade/errors.hpp"
#include "cascade/threading.hpp"

namespace cascade {

Plane slice_of(const Volume& vol, std::size_t z) {
  const auto [nz, ny, nx] = vol.shape;
  if (z >= nz) throw IndexError("slice index out of range");
  Plane p;
  p.ny = ny;
  p.nx = nx;
  p.v.assign(vol.data.begin() + static_cast<long>(z * ny * nx),
             vol.data.begin() + static_cast<long>((z + 1) * ny * nx));
  return p;
}

std::vector<PatchRecord> enumerate_patches(const Plane& liver,
                                           const Plane& lesion,
                                           const PatchGrid& grid,
                                           std::size_t slice_index) {
  if (liver.ny != lesion.ny || liver.nx != lesion.nx)
    throw ShapeError("liver/lesion plane shape mismatch");
  std::vector<PatchRecord> out;
  const std::size_t win = grid.window;
  const double area = static_cast<double>(win * win);
  for (std::size_t y0 = 0; y0 + win <= liver.ny; y0 += grid.stride)
    for (std::size_t x0 = 0; x0 + win <= liver.nx; x0 += grid.stride) {
      std::size_t liver_px = 0, lesion_px = 0;
      for (std::size_t y = y0; y < y0 + win; ++y)
        for (std::size_t x = x0; x < x0 + win; ++x) {
          liver_px += (liver.at(y, x) != 0.0f);
          lesion_px += (lesion.at(y, x) != 0.0f);
        }
      const double overlap = static_cast<double>(liver_px) / area;
      if (overlap < grid.min_liver_overlap) continue;  // excluded -> omitted
      PatchRecord rec;
      rec.slice_index = slice_index;
      rec.y0 = y0;
      rec.x0 = x0;
      rec.py0 = static_cast<long>(y0) - static_cast<long>(grid.margin);
      rec.px0 = static_cast<long>(x0) - static_cast<long>(grid.margin);
      rec.liver_overlap = overlap;
      rec.lesion_pixel_count = lesion_px;
      rec.label = lesion_px >= grid.min_lesion_pixels ? PatchLabel::Positive
                                                      : PatchLabel::Negative;
      out.push_back(rec);
    }
  return out;
}

Tensor4 extract_padded_window(const Plane& image, const PatchRecord& rec,
                              const PatchGrid& grid) {
  if (rec.y0 + grid.window > image.ny || rec.x0 + grid.window > image.nx)
    throw BoundsError("patch core exceeds the plane");
  const std::size_t side = grid.padded();
  Tensor4 patch(1, 1, side, side);
  for (std::size_t oy = 0; oy < side; ++oy) {
    long sy = rec.py0 + static_cast<long>(oy);
    sy = std::clamp(sy, 0L, static_cast<long>(image.ny) - 1);
    for (std::size_t ox = 0; ox < side; ++ox) {
      long sx = rec.px0 + static_cast<long>(ox);
      sx = std::clamp(sx, 0L, static_cast<long>(image.nx) - 1);
      patch.v[oy * side + ox] = image.at(static_cast<std::size_t>(sy),
                                         static_cast<std::size_t>(sx));
    }
  }
  return patch;
}

Tensor4 apply_dihedral(const Tensor4& patch, std::size_t k) {
  if (patch.h != patch.w) throw ShapeError("dihedral transform needs a square");
  if (k >= 8) throw ParamError("dihedral index must be < 8");
  const std::size_t n = patch.h;
  const std::size_t rot = k % 4;
  const bool flip = k >= 4;
  Tensor4 out(patch.n, patch.c, n, n);
  for (std::size_t in = 0; in < patch.n; ++in)
    for (std::size_t ic = 0; ic < patch.c; ++ic)
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          std::size_t sy = y, sx = x;
          switch (rot) {  // inverse rotation of the output coordinate
            case 1: sy = n - 1 - x; sx = y; break;
            case 2: sy = n - 1 - y; sx = n - 1 - x; break;
            case 3: sy = x; sx = n - 1 - y; break;
            default: break;
          }
          const std::size_t tx = flip ? n - 1 - x : x;
          out.at(in, ic, y, tx) = patch.at(in, ic, sy, sx);
        }
  return out;
}

std::vector<Tensor4> augment8(const Tensor4& patch) {
  std::vector<Tensor4> out;
  out.reserve(8);
  for (std::size_t k = 0; k < 8; ++k) out.push_back(apply_dihedral(patch, k));
  return out;
}

///// Detector network /////

std::vector<Param*> DetectorNet::params() {
  std::vector<Param*> ps;
  for (auto& c : convs) {
    ps.push_back(&c.weight);
    ps.push_back(&c.bias);
  }
  ps.push_back(&head.weight);
  ps.push_back(&head.bias);
  return ps;
}

std::vector<TensorRef> DetectorNet::tensor_refs() {
  std::vector<TensorRef> refs;
  for (Param* p : params()) refs.push_back({p->name, p->shape, &p->w});
  return refs;
}

DetectorNet build_detector(const DetectorConfig& cfg, std::uint64_t seed) {
  if (cfg.stage_channels.empty())
    throw ConfigError("detector needs at least one stage");
  for (std::size_t ch : cfg.stage_channels)
    if (ch == 0) throw ConfigError("detector stage channels must be positive");
  DetectorNet net;
  net.cfg = cfg;
  Rng rng(seed);
  std::size_t in_ch = 1;
  for (std::size_t k = 0; k < cfg.stage_channels.size(); ++k) {
    net.convs.emplace_back("det.stage" + std::to_string(k), in_ch,
                           cfg.stage_channels[k], 3, 1, 1, rng);
    in_ch = cfg.stage_channels[k];
  }
  net.head = Affine("det.head", in_ch, 1, rng);
  return net;
}

void save_detector(const DetectorNet& net, const std::string& path,
                   const nlohmann::json& extra_hyperparams) {
  nlohmann::json hp = extra_hyperparams;
  hp["net"] = {{"kind", "detector"},
               {"stage_channels", net.cfg.stage_channels}};
  save_checkpoint(path, const_cast<DetectorNet&>(net).tensor_refs(), hp);
}

DetectorNet load_detector(const std::string& path) {
  nlohmann::json hp = read_checkpoint_hyperparams(path);
  if (!hp.contains("net") || hp["net"].value("kind", "") != "detector")
    throw FormatError("checkpoint " + path + " does not hold a detector");
  DetectorConfig cfg;
  cfg.stage_channels =
      hp["net"].at("stage_channels").get<std::vector<std::size_t>>();
  DetectorNet net = build_detector(cfg, 0);
  load_checkpoint(path, net.tensor_refs());
  return net;
}

namespace {

struct DetectorActs {
  std::vector<Tensor4> conv_in;   // input to conv k (post-pool of previous)
  std::vector<Tensor4> conv_out;  // pre-ReLU
  std::vector<Tensor4> relu_out;  // input to pool k
  Tensor4 gap_in;                 // final pooled stack
  Tensor4 gap_out;
  Tensor4 logits;
};

void detector_forward_acts(const DetectorNet& net, const Tensor4& batch,
                           DetectorActs& acts) {
  acts.conv_in.clear();
  acts.conv_out.clear();
  acts.relu_out.clear();
  Tensor4 cur = batch;
  for (const auto& conv : net.convs) {
    acts.conv_in.push_back(cur);
    Tensor4 pre = conv.forward(cur);
    acts.conv_out.push_back(pre);
    Tensor4 r = relu(pre);
    acts.relu_out.push_back(r);
    cur = maxpool2(r);
  }
  acts.gap_in = cur;
  acts.gap_out = global_avg_pool(cur);
  acts.logits = net.head.forward(acts.gap_out);
}

}  // namespace

Tensor4 detector_forward(const DetectorNet& net, const Tensor4& batch) {
  DetectorActs acts;
  detector_forward_acts(net, batch, acts);
  return acts.logits;
}

BalancedBatch sample_balanced_batch(const PatchDataset& data, Rng& rng) {
  std::vector<const PatchRecord*> pos, neg;
  for (const auto& rec : data.records) {
    if (rec.label == PatchLabel::Positive) pos.push_back(&rec);
    if (rec.label == PatchLabel::Negative) neg.push_back(&rec);
  }
  if (pos.empty() || neg.empty())
    throw ClassMissing("detector training needs both classes present");

  constexpr std::size_t kHalf = 32;
  const std::size_t side = data.grid.padded();
  BalancedBatch b{Tensor4(2 * kHalf, 1, side, side),
                  Tensor4(2 * kHalf, 1, 1, 1)};
  for (std::size_t i = 0; i < 2 * kHalf; ++i) {
    const bool positive = i < kHalf;
    const auto& pool = positive ? pos : neg;
    const PatchRecord& rec = *pool[rng.uniform_int(pool.size())];
    Tensor4 patch = extract_padded_window(data.image_planes[rec.slice_index],
                                          rec, data.grid);
    Tensor4 aug = apply_dihedral(patch, rng.uniform_int(8));
    std::copy(aug.v.begin(), aug.v.end(),
              b.patches.v.begin() + static_cast<long>(i * side * side));
    b.targets.v[i] = positive ? 1.0f : 0.0f;
  }
  return b;
}

double train_detector(DetectorNet& net, const PatchDataset& data,
                      const DetectorTrainConfig& cfg) {
  constexpr std::size_t kHalf = 32;
  Rng rng(cfg.seed);
  double last_loss = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    BalancedBatch b = sample_balanced_batch(data, rng);
    Tensor4& batch = b.patches;
    Tensor4& targets = b.targets;

    DetectorActs acts;
    detector_forward_acts(net, batch, acts);

    // unweighted BCE on logits, numerically stable form
    double loss = 0.0;
    Tensor4 glogits(2 * kHalf, 1, 1, 1);
    for (std::size_t i = 0; i < 2 * kHalf; ++i) {
      const double z = acts.logits.v[i];
      const double y = targets.v[i];
      loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
      const double p = 1.0 / (1.0 + std::exp(-z));
      glogits.v[i] = static_cast<float>((p - y) / (2.0 * kHalf));
    }
    loss /= 2.0 * kHalf;
    last_loss = loss;

    Tensor4 g = net.head.backward(acts.gap_out, glogits);
    g = global_avg_pool_backward(acts.gap_in.h, acts.gap_in.w, g);
    for (std::size_t k = net.convs.size(); k-- > 0;) {
      g = maxpool2_backward(acts.relu_out[k], g);
      g = relu_backward(acts.conv_out[k], g);
      g = net.convs[k].backward(acts.conv_in[k], g);
    }
    for (Param* p : net.params()) sgd_step(*p, cfg.lr, cfg.momentum);
  }
  return last_loss;
}

///// Detection and masking /////

Mask DetectionMask::to_mask() const {
  Mask m(Shape3{nz, ny, nx}, {1.0, 1.0, 1.0});
  for (std::size_t z = 0; z < nz; ++z)
    for (const auto& [y0, x0] : positives[z])
      for (std::size_t y = y0; y < y0 + grid.window; ++y)
        for (std::size_t x = x0; x < x0 + grid.window; ++x)
          m.at(z, y, x) = 1.0f;
  return m;
}

DetectionMask detect(const Volume& crop_image, const Mask& crop_liver,
                     const DetectorNet& net, const PatchGrid& grid,
                     double threshold) {
  if (!(crop_image.shape == crop_liver.shape))
    throw ShapeError("detect: image/liver shape mismatch");
  const auto [nz, ny, nx] = crop_image.shape;
  DetectionMask det;
  det.nz = nz;
  det.ny = ny;
  det.nx = nx;
  det.grid = grid;
  det.positives.assign(nz, {});
  // slices are independent: one thread fills each slice's positive list
  parallel_for(nz, [&](std::size_t z) {
    Plane liver = slice_of(crop_liver, z);
    Plane image = slice_of(crop_image, z);
    Plane no_lesion;
    no_lesion.ny = liver.ny;
    no_lesion.nx = liver.nx;
    no_lesion.v.assign(liver.v.size(), 0.0f);
    for (const auto& rec : enumerate_patches(liver, no_lesion, grid, z)) {
      Tensor4 patch = extract_padded_window(image, rec, grid);
      Tensor4 logit = detector_forward(net, patch);
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logit.v[0])));
      if (p >= threshold) det.positives[z].emplace_back(rec.y0, rec.x0);
    }
  });
  return det;
}

Volume mask_segmentation(const Volume& lesion_prob,
                         const DetectionMask& detections) {
  const auto [nz, ny, nx] = lesion_prob.shape;
  if (nz != detections.nz || ny != detections.ny || nx != detections.nx)
    throw ShapeError("mask_segmentation shape mismatch");
  Volume out(lesion_prob.shape, lesion_prob.spacing);
  for (std::size_t z = 0; z < nz; ++z)
    for (const auto& [y0, x0] : detections.positives[z])
      for (std::size_t y = y0; y < y0 + detections.grid.window; ++y)
        for (std::size_t x = x0; x < x0 + detections.grid.window; ++x)
          out.at(z, y, x) = lesion_prob.at(z, y, x);
  return out;
}

void write_detections_json(const DetectionMask& det, const std::string& path) {
  nlohmann::json doc;
  doc["grid"] = {{"window", det.grid.window},
                 {"stride", det.grid.stride},
                 {"margin", det.grid.margin}};
  nlohmann::json slices = nlohmann::json::array();
  for (std::size_t z = 0; z < det.nz; ++z) {
    nlohmann::json positives = nlohmann::json::array();
    for (const auto& [y0, x0] : det.positives[z])
      positives.push_back({y0, x0});
    slices.push_back({{"slice", z}, {"positives", positives}});
  }
  doc["slices"] = slices;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << doc.dump(2) << "\n";
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace cascade
