#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cascade/nn.hpp"

namespace cascade {

// A named view into one parameter tensor for serialization.
struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float>* values = nullptr;
};

// Checkpoint = "<path>.json" manifest (tensor names/shapes/offsets plus a
// free-form hyperparams object) and "<path>.bin" with the concatenated
// little-endian f32 payloads. Round trips are bit-exact.
void save_checkpoint(const std::string& path,
                     const std::vector<TensorRef>& tensors,
                     const nlohmann::json& hyperparams);

// Reads only the manifest's hyperparams object (to rebuild a net first).
nlohmann::json read_checkpoint_hyperparams(const std::string& path);

// Loads payloads into `tensors`; names, order, and shapes must match the
// manifest exactly.
void load_checkpoint(const std::string& path, std::vector<TensorRef> tensors);

}  // namespace cascade
