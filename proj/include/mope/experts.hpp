#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mope/backbone.hpp"

namespace mope {

// Which cluster model a pool was trained against.
struct PoolProvenance {
  int k = 1;
  std::uint64_t seed = 0;
  std::string mode = "hidden";
  bool operator==(const PoolProvenance&) const = default;
};

struct ExpertPool {
  BackboneConfig config;
  std::vector<PrefixExpert> experts;
  PoolProvenance provenance;

  int size() const { return static_cast<int>(experts.size()); }
  bool bit_equal(const ExpertPool& other) const;
};

// K experts, each with 2L prefix matrices drawn from N(0, 0.02^2); expert k
// uses its own sub-stream of `seed`.
ExpertPool init_pool(const BackboneConfig& config, int k, std::uint64_t seed);
PrefixExpert init_expert(const BackboneConfig& config, int index, std::uint64_t seed);

const PrefixExpert& select_expert(const ExpertPool& pool, int cluster_index);

// Writes <dir>/pool.json (pool manifest) plus one checkpoint pair per
// expert, <dir>/expert_<k>.{json,bin}.
void save_pool(const std::filesystem::path& dir, const ExpertPool& pool);
ExpertPool load_pool(const std::filesystem::path& dir);

}  // namespace mope
