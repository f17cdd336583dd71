#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace cascade {

struct Shape3 {
  std::size_t nz = 0, ny = 0, nx = 0;
  std::size_t count() const { return nz * ny * nx; }
  bool operator==(const Shape3&) const = default;
};

struct Spacing3 {
  double sz = 1.0, sy = 1.0, sx = 1.0;
  bool operator==(const Spacing3&) const = default;
};

// 3D scalar grid indexed (z, y, x), z-major in memory. Carries images,
// probability maps, and (with values restricted to {0,1}) masks.
struct Volume {
  Shape3 shape;
  Spacing3 spacing;
  std::vector<float> data;

  Volume() = default;
  Volume(Shape3 s, Spacing3 sp, float fill = 0.0f)
      : shape(s), spacing(sp), data(s.count(), fill) {}

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * shape.ny + y) * shape.nx + x;
  }
  float& at(std::size_t z, std::size_t y, std::size_t x) {
    return data[index(z, y, x)];
  }
  float at(std::size_t z, std::size_t y, std::size_t x) const {
    return data[index(z, y, x)];
  }
};

using Mask = Volume;  // values restricted to {0,1}; enforced at I/O and use sites

// Three consecutive slices (edge-clamped) around center_index, each (ny, nx).
struct ContextSlab {
  std::size_t ny = 0, nx = 0;
  std::size_t center_index = 0;
  std::array<std::vector<float>, 3> channels;
};

Volume clip_intensities(const Volume& vol, float lo, float hi);
Volume min_max_normalize(const Volume& vol);
ContextSlab stack_context_slices(const Volume& vol, std::size_t index);

// RVOL on-disk format: "<path>.json" header + "<path>.raw" little-endian f32
// payload in z-major order. `path` excludes the extension.
void write_volume(const Volume& vol, const std::string& path);
Volume read_volume(const std::string& path);

// Mask variants add binarity validation (every voxel exactly 0.0 or 1.0).
void write_mask(const Mask& m, const std::string& path);
Mask read_mask(const std::string& path);

void validate_finite(const Volume& vol, const char* what);
void validate_binary(const Mask& m, const char* what);
bool is_subset(const Mask& inner, const Mask& outer);

}  // namespace cascade
