#include "cascade/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cascade/errors.hpp"
#include "cascade/rng.hpp"
#include "cascade/threading.hpp"

namespace cascade {
namespace {

constexpr double kDeformAmplitude = 0.05;
constexpr int kMaxPlacementAttempts = 200;

// Low-frequency angular modulation of the liver radius, bounded to [-1, 1].
double angular_bump(double uz, double uy, double ux, const double a[4]) {
  return (a[0] * ux * uy + a[1] * uy * uz + a[2] * uz * ux +
          a[3] * (ux * ux - uy * uy)) / 2.5;
}

std::string format_case_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", i);
  return buf;
}

}  // namespace

void validate_params(const PhantomParams& p) {
  if (p.shape.nz == 0 || p.shape.ny == 0 || p.shape.nx == 0)
    throw ParamError("phantom shape dimensions must be positive");
  if (!(p.liver_radius_lo > 0.0) || !(p.liver_radius_hi <= 1.0) ||
      p.liver_radius_lo > p.liver_radius_hi)
    throw ParamError("liver radius fractions must satisfy 0 < lo <= hi <= 1");
  if (p.lesion_count_lo < 0 || p.lesion_count_lo > p.lesion_count_hi)
    throw ParamError("lesion count range must satisfy 0 <= lo <= hi");
  if (!(p.lesion_radius_lo > 0.0) || p.lesion_radius_lo > p.lesion_radius_hi)
    throw ParamError("lesion radius range must satisfy 0 < lo <= hi");
  const double min_dim = static_cast<double>(
      std::min({p.shape.nz, p.shape.ny, p.shape.nx}));
  if (p.lesion_radius_hi >= p.liver_radius_lo * min_dim)
    throw ParamError("lesion radii must be strictly smaller than liver radius");
  if (p.intensity_liver == p.intensity_lesion ||
      p.intensity_liver == p.intensity_background ||
      p.intensity_lesion == p.intensity_background)
    throw ParamError("region intensity means must be pairwise distinct");
  if (p.noise_sigma < 0.0) throw ParamError("noise_sigma must be >= 0");
}

LabeledCase generate_phantom(const PhantomParams& params) {
  validate_params(params);
  const auto [nz, ny, nx] = params.shape;
  Rng rng(params.seed);

  // Liver: ellipsoid with per-axis scaling and a smooth angular perturbation.
  // The z semi-axis is flattened and the in-plane axes slightly widened so
  // axial cross-sections stay wide relative to the volume.
  const double min_dim = static_cast<double>(std::min({nz, ny, nx}));
  const double base_r = rng.uniform(params.liver_radius_lo,
                                    params.liver_radius_hi) * min_dim;
  const double az = base_r * rng.uniform(0.36, 0.42);
  const double ay = base_r * rng.uniform(1.02, 1.08);
  const double ax = base_r * rng.uniform(1.02, 1.08);
  double bump[4];
  for (double& b : bump) b = rng.uniform(-1.0, 1.0);
  const double cz = 0.5 * static_cast<double>(nz - 1) + rng.uniform(-1.0, 1.0);
  const double cy = 0.5 * static_cast<double>(ny - 1) + rng.uniform(-2.0, 2.0);
  const double cx = 0.5 * static_cast<double>(nx - 1) + rng.uniform(-2.0, 2.0);

  LabeledCase c;
  c.image = Volume(params.shape, {1.0, 1.0, 1.0});
  c.liver = Mask(params.shape, {1.0, 1.0, 1.0});
  c.lesion = Mask(params.shape, {1.0, 1.0, 1.0});

  std::vector<std::size_t> liver_voxels;
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        const double dz = (static_cast<double>(z) - cz);
        const double dy = (static_cast<double>(y) - cy);
        const double dx = (static_cast<double>(x) - cx);
        const double q = std::sqrt((dz / az) * (dz / az) +
                                   (dy / ay) * (dy / ay) +
                                   (dx / ax) * (dx / ax));
        double limit = 1.0;
        const double norm = std::sqrt(dz * dz + dy * dy + dx * dx);
        if (norm > 1e-12)
          limit += kDeformAmplitude *
                   angular_bump(dz / norm, dy / norm, dx / norm, bump);
        if (q <= limit) {
          c.liver.at(z, y, x) = 1.0f;
          liver_voxels.push_back(c.liver.index(z, y, x));
        }
      }
  if (liver_voxels.empty()) throw PlacementError("liver mask came out empty");

  // Lesions: spheres whose every voxel must fall inside the liver mask,
  // verified exhaustively. Candidate centers are sampled from liver voxels.
  const int n_lesions =
      params.lesion_count_lo +
      static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(
          params.lesion_count_hi - params.lesion_count_lo + 1)));
  for (int li = 0; li < n_lesions; ++li) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      const double r = rng.uniform(params.lesion_radius_lo,
                                   params.lesion_radius_hi);
      const std::size_t pick = liver_voxels[rng.uniform_int(liver_voxels.size())];
      const std::size_t pz = pick / (ny * nx);
      const std::size_t py = (pick / nx) % ny;
      const std::size_t px = pick % nx;
      const int ir = static_cast<int>(std::ceil(r));
      bool fits = true;
      for (int oz = -ir; oz <= ir && fits; ++oz)
        for (int oy = -ir; oy <= ir && fits; ++oy)
          for (int ox = -ir; ox <= ir && fits; ++ox) {
            if (oz * oz + oy * oy + ox * ox > r * r) continue;
            const long vz = static_cast<long>(pz) + oz;
            const long vy = static_cast<long>(py) + oy;
            const long vx = static_cast<long>(px) + ox;
            if (vz < 0 || vy < 0 || vx < 0 || vz >= static_cast<long>(nz) ||
                vy >= static_cast<long>(ny) || vx >= static_cast<long>(nx) ||
                c.liver.at(vz, vy, vx) == 0.0f) {
              fits = false;
            }
          }
      if (!fits) continue;
      for (int oz = -ir; oz <= ir; ++oz)
        for (int oy = -ir; oy <= ir; ++oy)
          for (int ox = -ir; ox <= ir; ++ox) {
            if (oz * oz + oy * oy + ox * ox > r * r) continue;
            c.lesion.at(pz + oz, py + oy, px + ox) = 1.0f;
          }
      placed = true;
    }
    if (!placed)
      throw PlacementError("could not fit a lesion inside the liver after " +
                           std::to_string(kMaxPlacementAttempts) + " attempts");
  }

  // Image: per-region mean plus Gaussian noise, clamped into the CT-like
  // window so the standard clip-then-normalize preprocessing applies as-is.
  for (std::size_t i = 0; i < c.image.data.size(); ++i) {
    double mean = params.intensity_background;
    if (c.lesion.data[i] != 0.0f)
      mean = params.intensity_lesion;
    else if (c.liver.data[i] != 0.0f)
      mean = params.intensity_liver;
    const double v = mean + params.noise_sigma * rng.normal();
    c.image.data[i] = static_cast<float>(std::min(250.0, std::max(-150.0, v)));
  }
  return c;
}

std::vector<PhantomParams> make_param_list(const PhantomParams& base,
                                           std::size_t n) {
  std::vector<PhantomParams> out(n, base);
  for (std::size_t i = 0; i < n; ++i)
    out[i].seed = Rng::derive_seed(base.seed, i);
  return out;
}

Dataset generate_dataset(const std::vector<PhantomParams>& params_list,
                         SplitFractions split) {
  if (!(split.train > 0.0) || !(split.train < 1.0) || !(split.val > 0.0) ||
      !(split.val < 1.0) || !(split.train + split.val < 1.0))
    throw ParamError("split fractions must lie in (0,1) and sum below 1");
  Dataset ds;
  const std::size_t n = params_list.size();
  ds.cases.resize(n);
  // Cases are independent (each has its own seed), so generation parallelizes
  // over case index with each slot written by exactly one thread.
  std::vector<std::string> errors(n);
  parallel_for(n, [&](std::size_t i) {
    try {
      ds.cases[i] = generate_phantom(params_list[i]);
      ds.cases[i].case_id = format_case_id(i);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (const auto& e : errors)
    if (!e.empty()) throw PlacementError(e);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::uint64_t shuffle_seed =
      n > 0 ? Rng::derive_seed(params_list[0].seed, 0xDA7A5E7ull) : 0;
  Rng rng(shuffle_seed);
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(
      std::floor(static_cast<double>(n) * split.train + 1e-9));
  const auto n_val = static_cast<std::size_t>(
      std::floor(static_cast<double>(n) * split.val + 1e-9));
  if (n_train + n_val > n) throw ParamError("split fractions exceed case count");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& id = ds.cases[order[i]].case_id;
    if (i < n_train)
      ds.train_ids.push_back(id);
    else if (i < n_train + n_val)
      ds.val_ids.push_back(id);
    else
      ds.test_ids.push_back(id);
  }
  std::sort(ds.train_ids.begin(), ds.train_ids.end());
  std::sort(ds.val_ids.begin(), ds.val_ids.end());
  std::sort(ds.test_ids.begin(), ds.test_ids.end());
  return ds;
}

///// Dataset I/O /////

void write_dataset(const Dataset& ds, const std::string& dir) {
  for (const auto& c : ds.cases) {
    write_volume(c.image, dir + "/" + c.case_id + "_img");
    write_mask(c.liver, dir + "/" + c.case_id + "_liver");
    write_mask(c.lesion, dir + "/" + c.case_id + "_lesion");
  }
  nlohmann::json manifest = {
      {"splits",
       {{"train", ds.train_ids}, {"val", ds.val_ids}, {"test", ds.test_ids}}},
  };
  std::ofstream f(dir + "/dataset.json", std::ios::trunc);
  if (!f) throw IoError("cannot open " + dir + "/dataset.json for writing");
  f << manifest.dump(2) << "\n";
  if (!f) throw IoError("failed writing " + dir + "/dataset.json");
}

void read_manifest(const std::string& dir, std::vector<std::string>& train,
                   std::vector<std::string>& val,
                   std::vector<std::string>& test) {
  std::ifstream f(dir + "/dataset.json");
  if (!f) throw IoError("cannot open " + dir + "/dataset.json");
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset manifest: ") + e.what());
  }
  if (!manifest.contains("splits"))
    throw FormatError("dataset manifest missing 'splits'");
  const auto& s = manifest["splits"];
  train = s.at("train").get<std::vector<std::string>>();
  val = s.at("val").get<std::vector<std::string>>();
  test = s.at("test").get<std::vector<std::string>>();
}

LabeledCase read_case(const std::string& dir, const std::string& id) {
  LabeledCase c;
  c.case_id = id;
  c.image = read_volume(dir + "/" + id + "_img");
  c.liver = read_mask(dir + "/" + id + "_liver");
  c.lesion = read_mask(dir + "/" + id + "_lesion");
  if (!(c.image.shape == c.liver.shape) || !(c.image.shape == c.lesion.shape))
    throw FormatError("case " + id + " has inconsistent shapes");
  bool liver_nonempty = false;
  for (float v : c.liver.data) liver_nonempty |= (v != 0.0f);
  if (!liver_nonempty) throw FormatError("case " + id + " has an empty liver");
  if (!is_subset(c.lesion, c.liver))
    throw FormatError("case " + id + " violates lesion within liver");
  return c;
}

Dataset read_dataset(const std::string& dir) {
  Dataset ds;
  read_manifest(dir, ds.train_ids, ds.val_ids, ds.test_ids);
  std::vector<std::string> all;
  all.insert(all.end(), ds.train_ids.begin(), ds.train_ids.end());
  all.insert(all.end(), ds.val_ids.begin(), ds.val_ids.end());
  all.insert(all.end(), ds.test_ids.begin(), ds.test_ids.end());
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end())
    throw FormatError("dataset manifest contains duplicate case ids");
  for (const auto& id : all) ds.cases.push_back(read_case(dir, id));
  return ds;
}

}  // namespace cascade
