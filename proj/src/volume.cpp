#include "cascade/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "cascade/errors.hpp"

namespace cascade {

void validate_finite(const Volume& vol, const char* what) {
  for (float v : vol.data) {
    if (!std::isfinite(v))
      throw FormatError(std::string(what) + " contains non-finite values");
  }
}

void validate_binary(const Mask& m, const char* what) {
  for (float v : m.data) {
    if (v != 0.0f && v != 1.0f)
      throw FormatError(std::string(what) + " is not a binary mask");
  }
}

bool is_subset(const Mask& inner, const Mask& outer) {
  if (!(inner.shape == outer.shape)) throw ShapeError("mask shapes differ");
  for (std::size_t i = 0; i < inner.data.size(); ++i) {
    if (inner.data[i] != 0.0f && outer.data[i] == 0.0f) return false;
  }
  return true;
}

Volume clip_intensities(const Volume& vol, float lo, float hi) {
  if (!(lo < hi)) throw RangeError("clip_intensities requires lo < hi");
  Volume out = vol;
  for (float& v : out.data) v = std::min(std::max(v, lo), hi);
  return out;
}

Volume min_max_normalize(const Volume& vol) {
  if (vol.data.empty()) throw DegenerateVolume("empty volume");
  float mn = vol.data[0], mx = vol.data[0];
  for (float v : vol.data) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx == mn) throw DegenerateVolume("constant volume has no intensity range");
  Volume out = vol;
  const float range = mx - mn;
  for (float& v : out.data) v = (v - mn) / range;
  return out;
}

ContextSlab stack_context_slices(const Volume& vol, std::size_t index) {
  const auto [nz, ny, nx] = vol.shape;
  if (index >= nz) throw IndexError("slice index out of range");
  ContextSlab slab;
  slab.ny = ny;
  slab.nx = nx;
  slab.center_index = index;
  const std::size_t plane = ny * nx;
  for (int k = 0; k < 3; ++k) {
    // clamp(index - 1 + k, 0, nz - 1) in unsigned-safe form
    std::size_t z = index;
    if (k == 0) z = index > 0 ? index - 1 : 0;
    if (k == 2) z = index + 1 < nz ? index + 1 : nz - 1;
    slab.channels[k].assign(vol.data.begin() + z * plane,
                            vol.data.begin() + (z + 1) * plane);
  }
  return slab;
}

///// RVOL file format /////

void write_volume(const Volume& vol, const std::string& path) {
  if (vol.shape.count() != vol.data.size())
    throw FormatError("volume data length does not match shape");
  nlohmann::json header = {
      {"shape", {vol.shape.nz, vol.shape.ny, vol.shape.nx}},
      {"spacing", {vol.spacing.sz, vol.spacing.sy, vol.spacing.sx}},
      {"dtype", "f32"},
      {"order", "zyx"},
  };
  {
    std::ofstream jf(path + ".json", std::ios::trunc);
    if (!jf) throw IoError("cannot open " + path + ".json for writing");
    jf << header.dump(2) << "\n";
    if (!jf) throw IoError("failed writing " + path + ".json");
  }
  std::ofstream rf(path + ".raw", std::ios::binary | std::ios::trunc);
  if (!rf) throw IoError("cannot open " + path + ".raw for writing");
  static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);
  rf.write(reinterpret_cast<const char*>(vol.data.data()),
           static_cast<std::streamsize>(vol.data.size() * sizeof(float)));
  if (!rf) throw IoError("failed writing " + path + ".raw");
}

Volume read_volume(const std::string& path) {
  std::ifstream jf(path + ".json");
  if (!jf) throw IoError("cannot open " + path + ".json");
  nlohmann::json header;
  try {
    jf >> header;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad volume header " + path + ".json: " + e.what());
  }
  if (!header.contains("shape") || !header.contains("spacing") ||
      !header.contains("dtype") || !header.contains("order"))
    throw FormatError("volume header missing required fields: " + path);
  if (header["dtype"] != "f32" || header["order"] != "zyx")
    throw FormatError("unsupported dtype/order in " + path + ".json");
  const auto shp = header["shape"];
  const auto spc = header["spacing"];
  if (!shp.is_array() || shp.size() != 3 || !spc.is_array() || spc.size() != 3)
    throw FormatError("shape/spacing must be 3-element arrays: " + path);
  Volume vol;
  for (int i = 0; i < 3; ++i) {
    if (!shp[i].is_number_unsigned() || shp[i].get<std::uint64_t>() == 0)
      throw FormatError("shape entries must be positive integers: " + path);
    if (!spc[i].is_number() || spc[i].get<double>() <= 0.0)
      throw FormatError("spacing entries must be strictly positive: " + path);
  }
  vol.shape = {shp[0].get<std::size_t>(), shp[1].get<std::size_t>(),
               shp[2].get<std::size_t>()};
  vol.spacing = {spc[0].get<double>(), spc[1].get<double>(),
                 spc[2].get<double>()};

  std::ifstream rf(path + ".raw", std::ios::binary | std::ios::ate);
  if (!rf) throw IoError("cannot open " + path + ".raw");
  const auto bytes = static_cast<std::size_t>(rf.tellg());
  const std::size_t expected = vol.shape.count() * sizeof(float);
  if (bytes != expected)
    throw FormatError("payload length mismatch in " + path + ".raw");
  rf.seekg(0);
  vol.data.resize(vol.shape.count());
  rf.read(reinterpret_cast<char*>(vol.data.data()),
          static_cast<std::streamsize>(expected));
  if (!rf) throw IoError("failed reading " + path + ".raw");
  validate_finite(vol, "volume");
  return vol;
}

void write_mask(const Mask& m, const std::string& path) {
  validate_binary(m, "mask");
  write_volume(m, path);
}

Mask read_mask(const std::string& path) {
  Mask m = read_volume(path);
  validate_binary(m, "mask");
  return m;
}

}  // namespace cascade
