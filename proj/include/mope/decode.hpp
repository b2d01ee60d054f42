#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mope/backbone.hpp"
#include "mope/corpus.hpp"

namespace mope {

struct Prediction {
  SlotRef slot;
  std::string value;        // never contains the end marker; "none" when empty
  std::string expert_used;  // cluster index, "icl" or "frozen"
};

// Greedy argmax continuation of `prompt`, at most max_new tokens, stopping
// at the end marker (which is not returned). Ties go to the lowest id.
std::vector<int> greedy_decode(const BackboneParams& params, const PrefixExpert* expert, std::vector<int> prompt,
                               int max_new);

// greedy_decode over many prompts at once. Prompts run as one token tree per
// step, so shared leading tokens are computed once; outputs equal
// greedy_decode on each prompt.
std::vector<std::vector<int>> greedy_decode_batch(const BackboneParams& params, const PrefixExpert* expert,
                                                 std::vector<std::vector<int>> prompts, int max_new);

// Value of `slot` after `turn`, generated with the given expert (or none).
Prediction generate_value(const BackboneParams& params, const Vocab& vocab, const PrefixExpert* expert,
                          const Dialogue& dialogue, int turn, const SlotRef& slot);

struct ValueQuery {
  const Dialogue* dialogue = nullptr;
  int turn = 0;
  SlotRef slot;
};

// generate_value for many queries sharing one expert.
std::vector<Prediction> generate_values(const BackboneParams& params, const Vocab& vocab, const PrefixExpert* expert,
                                        const std::vector<ValueQuery>& queries);

struct IclExemplar {
  const Dialogue* dialogue = nullptr;
  int turn = 0;
  SlotRef slot;
  std::string value;
};

// Exemplars rendered as complete QA pairs, oldest first, ahead of the query.
// Oldest exemplars are dropped until everything fits in the context.
std::vector<int> icl_prompt(const BackboneParams& params, const Vocab& vocab, const std::vector<IclExemplar>& exemplars,
                            const Dialogue& dialogue, int turn, const SlotRef& slot);
Prediction generate_icl(const BackboneParams& params, const Vocab& vocab, const std::vector<IclExemplar>& exemplars,
                        const Dialogue& dialogue, int turn, const SlotRef& slot);

struct IclQuery {
  ValueQuery query;
  const std::vector<IclExemplar>* exemplars = nullptr;
};

// generate_icl for many queries in one token tree; callers keep batches
// small (one dialogue) since attention cost is quadratic in tree size.
std::vector<Prediction> generate_icl_batch(const BackboneParams& params, const Vocab& vocab,
                                           const std::vector<IclQuery>& queries);

// Record written to predictions JSON-lines files.
struct PredictionRecord {
  std::string dialogue_id;
  int turn = 0;
  std::string domain;
  std::string slot;
  std::string value;
  std::string expert_used;
};

nlohmann::json prediction_to_json(const PredictionRecord& r);
PredictionRecord prediction_from_json(const nlohmann::json& j);

}  // namespace mope
