#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mope/backbone.hpp"
#include "mope/corpus.hpp"

namespace mope {

struct AdamWConfig {
  float lr = 1e-2f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

struct OptimState {
  AdamWConfig hyper;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int step = 0;
};

OptimState make_optim_state(const AdamWConfig& hyper, const std::vector<Tensor>& params);

// One decoupled-weight-decay Adam step with bias correction. Returns the
// updated parameters; moments and the step counter advance in `state`.
std::vector<Tensor> adamw_step(OptimState& state, const std::vector<Tensor>& params, const std::vector<Tensor>& grads);

// Rescales gradients in place so their global L2 norm is at most max_norm.
void clip_global_norm(std::vector<Tensor>& grads, float max_norm);

struct TrainConfig {
  // Prefix-expert training.
  AdamWConfig expert_optim{};
  int expert_epochs = 4;
  int expert_batch = 8;
  float expert_clip = 1.0f;
  double fraction = 1.0;
  // Backbone language-model pretraining.
  AdamWConfig pretrain_optim{3e-4f, 0.9f, 0.999f, 1e-8f, 0.0f};
  int pretrain_epochs = 3;
  int pretrain_batch = 8;
  float pretrain_clip = 1.0f;
  int threads = 1;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Teacher-forced QA example. `tokens` is prompt followed by target; mask is
// 0 on prompt positions and 1 on target positions.
struct TrainExample {
  std::vector<int> prompt;
  std::vector<int> target;  // value words (or "none") then the end marker
  std::vector<int> tokens;
  std::vector<int> mask;
  SlotRef slot;
  std::string dialogue_id;  // examples of one dialogue share a history and are packed together
  int turn = 0;
};

TrainExample build_example(const Vocab& vocab, const Dialogue& dialogue, int turn, const SlotRef& slot,
                           const std::string& gold, int max_context);

// Shifted next-token view of an example: inputs tokens[0..n-2], labels
// tokens[1..n-1], loss mask selecting target labels.
struct LossView {
  std::vector<int> inputs;
  std::vector<int> labels;
  std::vector<int> mask;
  std::vector<int> rows;  // positions where mask == 1
};
LossView loss_view(const TrainExample& ex);

// Vocabulary over training utterances, schema names, lexicon values and the
// QA template words.
Vocab build_training_vocab(const Corpus& corpus);

// Language-model sequences, one per turn: the history up to that turn
// followed by its state summary and the end marker. Oldest turns are dropped
// so every sequence has at most max_context + 1 tokens.
struct PretrainingSet {
  std::vector<std::vector<int>> sequences;
  std::vector<int> group;  // index of the source dialogue
};
PretrainingSet pretraining_sequences(const Corpus& corpus, const Vocab& vocab, int max_context, std::uint64_t seed);

struct PretrainResult {
  BackboneParams params;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
};

PretrainResult pretrain_backbone(const Corpus& corpus, const Vocab& vocab, const BackboneConfig& config,
                                 const TrainConfig& train, std::uint64_t seed);

struct ExpertTrainResult {
  PrefixExpert expert;
  std::vector<double> epoch_losses;
};

// AdamW on the prefix matrices only; the backbone is read but never written.
ExpertTrainResult train_expert(const BackboneParams& backbone, const PrefixExpert& expert,
                               const std::vector<TrainExample>& examples, const TrainConfig& train,
                               std::uint64_t seed);

// Mean masked cross-entropy of the examples under (backbone, expert).
double mean_example_loss(const BackboneParams& backbone, const PrefixExpert* expert,
                         const std::vector<TrainExample>& examples);

// Masked QA loss and its gradient w.r.t. each prefix matrix (key, value per layer).
struct PrefixGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
PrefixGradient prefix_loss_gradient(const BackboneParams& backbone, const PrefixExpert& expert,
                                    const TrainExample& example);

// Keeps a dialogue when its seeded hash falls below `fraction`.
bool keep_dialogue(const std::string& id, double fraction, std::uint64_t seed);

}  // namespace mope
