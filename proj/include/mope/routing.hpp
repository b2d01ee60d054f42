#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mope/backbone.hpp"
#include "mope/corpus.hpp"

namespace mope {

enum class FeatureMode { embedding, hidden };

std::string to_string(FeatureMode mode);
FeatureMode parse_feature_mode(const std::string& s);  // throws ValidationError

struct SlotFeature {
  SlotRef slot;
  std::vector<float> vector;
  FeatureMode mode = FeatureMode::hidden;
};

// Features of the slot text "<domain> <slot-name>".
SlotFeature featurize(const BackboneParams& params, const Vocab& vocab, const SlotRef& slot, FeatureMode mode);
std::vector<SlotFeature> featurize_all(const BackboneParams& params, const Vocab& vocab,
                                       const std::vector<SlotRef>& slots, FeatureMode mode);

struct ClusterModel {
  int k = 1;
  std::vector<std::vector<float>> centroids;
  std::map<SlotRef, int> assignments;
  FeatureMode mode = FeatureMode::hidden;
  std::uint64_t seed = 0;
  // Within-cluster SSE after every Lloyd update (diagnostic, not persisted).
  std::vector<double> sse_trace;
  int iterations = 0;
};

inline constexpr int kKMeansRestarts = 10;

// Lloyd's algorithm from a k-means++ start, repeated kKMeansRestarts times
// on independent sub-streams of `seed`; the run with the lowest final SSE is
// kept. Each run stops when assignments are stable or after 100 iterations.
// An emptied cluster is re-seeded at the point farthest from its centroid
// (at most 10 repairs per run).
ClusterModel fit_kmeans(const std::vector<SlotFeature>& features, int k, std::uint64_t seed);

// Index of the nearest centroid in Euclidean distance; ties go to the lowest index.
int assign_nearest(const ClusterModel& model, std::span<const float> feature);
int assign_nearest(const ClusterModel& model, const SlotFeature& feature);

ClusterModel cluster_slots(const BackboneParams& params, const Vocab& vocab, const std::vector<SlotRef>& slots,
                           FeatureMode mode, int k, std::uint64_t seed);

// Uniform random expert index per slot (the random-routing ablation).
std::map<SlotRef, int> random_assignment(const ClusterModel& model, const std::vector<SlotRef>& slots,
                                         std::uint64_t seed);

double within_cluster_sse(const std::vector<SlotFeature>& features, const std::vector<std::vector<float>>& centroids,
                          const std::vector<int>& labels);

nlohmann::json cluster_model_to_json(const ClusterModel& m);
ClusterModel cluster_model_from_json(const nlohmann::json& j);
void save_cluster_model(const std::filesystem::path& path, const ClusterModel& m);
ClusterModel load_cluster_model(const std::filesystem::path& path);

}  // namespace mope
