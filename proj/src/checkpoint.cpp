#include "cascade/checkpoint.hpp"

#include <fstream>
#include <limits>

#include "cascade/errors.hpp"

namespace cascade {

void save_checkpoint(const std::string& path,
                     const std::vector<TensorRef>& tensors,
                     const nlohmann::json& hyperparams) {
  nlohmann::json manifest;
  manifest["format"] = "ckpt-v1";
  manifest["hyperparams"] = hyperparams;
  nlohmann::json list = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t cnt = 1;
    for (std::size_t s : t.shape) cnt *= s;
    if (cnt != t.values->size())
      throw ShapeError("tensor " + t.name + " shape/value count mismatch");
    list.push_back({{"name", t.name},
                    {"shape", t.shape},
                    {"offset", offset},
                    {"count", cnt}});
    offset += cnt;
  }
  manifest["tensors"] = list;
  {
    std::ofstream jf(path + ".json", std::ios::trunc);
    if (!jf) throw IoError("cannot open " + path + ".json for writing");
    jf << manifest.dump(2) << "\n";
    if (!jf) throw IoError("failed writing " + path + ".json");
  }
  std::ofstream bf(path + ".bin", std::ios::binary | std::ios::trunc);
  if (!bf) throw IoError("cannot open " + path + ".bin for writing");
  static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);
  for (const auto& t : tensors)
    bf.write(reinterpret_cast<const char*>(t.values->data()),
             static_cast<std::streamsize>(t.values->size() * sizeof(float)));
  if (!bf) throw IoError("failed writing " + path + ".bin");
}

namespace {

nlohmann::json read_manifest(const std::string& path) {
  std::ifstream jf(path + ".json");
  if (!jf) throw IoError("cannot open " + path + ".json");
  nlohmann::json manifest;
  try {
    jf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint manifest " + path + ": " + e.what());
  }
  if (manifest.value("format", "") != "ckpt-v1")
    throw FormatError("unsupported checkpoint format in " + path);
  return manifest;
}

}  // namespace

nlohmann::json read_checkpoint_hyperparams(const std::string& path) {
  return read_manifest(path).at("hyperparams");
}

void load_checkpoint(const std::string& path, std::vector<TensorRef> tensors) {
  nlohmann::json manifest = read_manifest(path);
  const auto& list = manifest.at("tensors");
  if (list.size() != tensors.size())
    throw FormatError("checkpoint tensor count mismatch in " + path);
  std::size_t total = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& entry = list[i];
    if (entry.at("name").get<std::string>() != tensors[i].name)
      throw FormatError("checkpoint tensor name mismatch: expected " +
                        tensors[i].name + ", found " +
                        entry.at("name").get<std::string>());
    if (entry.at("shape").get<std::vector<std::size_t>>() != tensors[i].shape)
      throw FormatError("checkpoint shape mismatch for " + tensors[i].name);
    if (entry.at("offset").get<std::size_t>() != total)
      throw FormatError("checkpoint offset mismatch for " + tensors[i].name);
    total += entry.at("count").get<std::size_t>();
  }
  std::ifstream bf(path + ".bin", std::ios::binary | std::ios::ate);
  if (!bf) throw IoError("cannot open " + path + ".bin");
  if (static_cast<std::size_t>(bf.tellg()) != total * sizeof(float))
    throw FormatError("checkpoint payload length mismatch in " + path);
  bf.seekg(0);
  for (auto& t : tensors) {
    std::size_t cnt = 1;
    for (std::size_t s : t.shape) cnt *= s;
    t.values->resize(cnt);
    bf.read(reinterpret_cast<char*>(t.values->data()),
            static_cast<std::streamsize>(cnt * sizeof(float)));
  }
  if (!bf) throw IoError("failed reading " + path + ".bin");
}

}  // namespace cascade
