#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mope/backbone.hpp"
#include "mope/tensor.hpp"

namespace mope {

inline constexpr const char* kCheckpointFormat = "mope-ckpt-1";

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// A checkpoint is a pair of files sharing a stem: <stem>.json is the
// manifest (format tag, kind, tensor table with shapes and byte offsets,
// plus free-form metadata) and <stem>.bin holds the tensors as raw
// little-endian float32 in manifest order.
std::filesystem::path checkpoint_stem(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path payload_path(const std::filesystem::path& stem);

void write_checkpoint(const std::filesystem::path& stem, const std::string& kind, const nlohmann::json& meta,
                      const NamedTensors& tensors);

struct Checkpoint {
  nlohmann::json manifest;
  NamedTensors tensors;
};
// Throws FormatError on version, kind, size or shape inconsistencies.
Checkpoint read_checkpoint(const std::filesystem::path& stem, const std::string& kind);

struct BackboneCheckpoint {
  BackboneParams params;
  std::vector<std::string> vocab;
};

void save_backbone(const std::filesystem::path& stem, const BackboneParams& params,
                   const std::vector<std::string>& vocab);
BackboneCheckpoint load_backbone(const std::filesystem::path& stem);

}  // namespace mope
