#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mope/corpus.hpp"
#include "mope/decode.hpp"
#include "mope/eval.hpp"
#include "mope/experts.hpp"
#include "mope/routing.hpp"
#include "mope/train.hpp"

namespace mope {

// Model and training settings of a run, as read from a config file:
// {"backbone": {...}, "train": {...}}; absent fields keep their defaults.
struct RunConfig {
  BackboneConfig backbone;
  TrainConfig train;
};
RunConfig run_config_from_json(const nlohmann::json& j);  // throws ValidationError
nlohmann::json run_config_to_json(const RunConfig& c);

enum class RoutingMode { specialized, random, single };

std::string to_string(RoutingMode mode);
RoutingMode parse_routing_mode(const std::string& s);  // throws ValidationError

// Expert index per slot. specialized: the slot's cluster when it was
// clustered, else the nearest centroid of its feature. random: uniform per
// slot. single: expert 0 for every slot.
std::map<SlotRef, int> route_slots(const BackboneParams& backbone, const Vocab& vocab, const ClusterModel& model,
                                   const std::vector<SlotRef>& slots, RoutingMode mode, std::uint64_t seed);

// Training examples per cluster: every turn of every kept training dialogue,
// over all schema slots of the dialogue's domains.
std::vector<std::vector<TrainExample>> cluster_examples(const Corpus& train, const Vocab& vocab,
                                                        const ClusterModel& model, int max_context, double fraction,
                                                        std::uint64_t seed);

struct PoolTrainResult {
  ExpertPool pool;
  std::vector<std::vector<double>> epoch_losses;  // per expert
  std::vector<std::size_t> example_counts;
};

// Trains expert k on cluster k's examples, independently of the others.
// With train.threads > 1 experts run on parallel threads; results do not
// depend on the thread count.
PoolTrainResult train_pool(const BackboneParams& backbone, const Vocab& vocab, const Corpus& train,
                           const ClusterModel& model, const TrainConfig& config, std::uint64_t seed);

// Predictions over gold_grid(test, domain) using routes (slot -> expert).
std::vector<PredictionRecord> predict_domain(const BackboneParams& backbone, const Vocab& vocab, const ExpertPool& pool,
                                             const std::map<SlotRef, int>& routes, const Corpus& test,
                                             const std::string& domain);
// Same grid decoded by the frozen backbone with no prefix.
std::vector<PredictionRecord> predict_frozen(const BackboneParams& backbone, const Vocab& vocab, const Corpus& test,
                                             const std::string& domain);

// Exemplars for `slot`: the first `shots` of a seeded shuffle of the
// training (turn, slot) cells whose slot shares the target's cluster (when a
// model is given) or its slot name (otherwise; any slot when none match).
std::vector<IclExemplar> select_exemplars(const Corpus& train, const SlotRef& slot, int shots,
                                          const std::map<SlotRef, int>* train_clusters, int target_cluster,
                                          std::uint64_t seed);

std::vector<PredictionRecord> predict_icl(const BackboneParams& backbone, const Vocab& vocab, const Corpus& train,
                                          const Corpus& test, const std::string& domain, int shots,
                                          const ClusterModel* model, std::uint64_t seed);

ValueGrid records_to_grid(const std::vector<PredictionRecord>& records);

// One row of the cluster-count sweep.
struct SweepRow {
  std::string mode;
  int k = 1;
  std::string domain;
  AcsEntry acs;
  DomainScores scores;
};

// One sweep point with the artifacts it produced.
struct SweepPoint {
  ClusterModel model;
  PoolTrainResult trained;
  std::vector<PredictionRecord> predictions;
  SweepRow row;
};

// Cluster the training slots with (mode, K, seed), train a pool and evaluate
// `domain` of `test` with specialized routing.
SweepPoint run_sweep_point(const BackboneParams& backbone, const Vocab& vocab, const Corpus& train, const Corpus& test,
                           const std::string& domain, FeatureMode mode, int k, std::uint64_t seed,
                           const TrainConfig& config);

struct SweepSpec {
  std::vector<int> ks;
  std::vector<FeatureMode> modes;
  std::vector<std::uint64_t> seeds;
  std::string domain;
};

// For each (seed, mode, K): cluster, train a pool, evaluate the domain with
// specialized routing.
std::vector<std::pair<std::uint64_t, SweepRow>> sweep_clusters(const BackboneParams& backbone, const Vocab& vocab,
                                                                const Corpus& train, const Corpus& test,
                                                                const SweepSpec& spec, const TrainConfig& config);

std::string sweep_csv(const std::vector<std::pair<std::uint64_t, SweepRow>>& rows);

}  // namespace mope
