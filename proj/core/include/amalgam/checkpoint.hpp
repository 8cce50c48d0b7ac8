#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "amalgam/network.hpp"
#include "amalgam/scene.hpp"
#include "amalgam/tensor.hpp"

// Binary formats. Every file is
//   8-byte magic | u64 LE manifest length | JSON manifest | LE blob
// and every blob entry carries a CRC32 in the manifest. Writes go to a
// temporary file that is renamed into place.
namespace amalgam {

inline constexpr int kFormatVersion = 1;

std::string spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& json);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

struct DatasetShard {
  SceneConfig scene;
  std::int64_t first_index = 0;
  std::vector<Sample> samples;
};

void save_dataset(const std::filesystem::path& path, const DatasetShard& shard);
DatasetShard load_dataset(const std::filesystem::path& path);

// Writes `bytes` to path atomically.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

std::uint32_t crc32_of(const void* data, std::size_t len);

}  // namespace amalgam
