#pragma once

#include <compare>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mope/corpus.hpp"
#include "mope/decode.hpp"
#include "mope/routing.hpp"

namespace mope {

// One (turn, slot) position of an evaluation grid.
struct CellKey {
  std::string dialogue_id;
  int turn = 0;
  std::string domain;
  std::string slot;
  auto operator<=>(const CellKey&) const = default;
};

// Cell -> normalized value ("none" when unfilled).
using ValueGrid = std::map<CellKey, std::string>;

// Every turn of every dialogue involving `domain`, over all schema slots of
// `domain`, with gold values.
ValueGrid gold_grid(const Corpus& corpus, const std::string& domain);
ValueGrid grid_from_records(const std::vector<PredictionRecord>& records);  // ContractError on duplicate cells

struct Fraction {
  long correct = 0;
  long total = 0;
  bool vacuous = false;  // zero denominator, reported as 1.0
  double value() const { return total == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

// Predictions must cover exactly the cells of `golds` (ContractError otherwise).
Fraction slot_accuracy(const ValueGrid& preds, const ValueGrid& golds, bool include_none);
// A turn is (dialogue_id, turn); it counts as correct when all its cells match.
Fraction joint_goal_accuracy(const ValueGrid& preds, const ValueGrid& golds);

struct ErrorCounts {
  long partial = 0;  // gold filled, predicted none
  long over = 0;     // gold none, predicted a value
  long other = 0;    // both filled, different
  long total() const { return partial + over + other; }
};
ErrorCounts error_taxonomy(const ValueGrid& preds, const ValueGrid& golds);

struct DomainScores {
  Fraction sa_with_none;
  Fraction sa_without_none;
  Fraction jga;
  ErrorCounts errors;
  long turns = 0;
  long cells = 0;
};

struct EvalReport {
  std::map<std::string, DomainScores> domains;
  DomainScores overall;
};

EvalReport evaluate_grid(const ValueGrid& preds, const ValueGrid& golds);
nlohmann::json eval_report_to_json(const EvalReport& r);

// ---------------------------------------------------------------------------
// Slot-feature analyses

// Cosine similarity; 0 when either vector has zero norm.
double cosine(const std::vector<float>& a, const std::vector<float>& b);

struct AcsEntry {
  double train_acs = 0.0;
  double test_acs = 0.0;
  long train_pairs = 0;
  long test_pairs = 0;
};

// train_acs: mean cosine over unordered pairs of train slots sharing a
// cluster, pooled over clusters. test_acs: mean cosine between each test
// slot and the train slots of the cluster it is routed to. A side with no
// pairs reports 0.
AcsEntry average_cosine_similarity(const std::vector<SlotFeature>& train, const ClusterModel& model,
                                   const std::vector<SlotFeature>& test);

struct SimilarityMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;
  std::vector<std::string> zero_norm;  // slots whose feature has zero norm
};

SimilarityMatrix similarity_matrix(const std::vector<SlotFeature>& features);
std::string similarity_csv(const SimilarityMatrix& m);
std::string similarity_svg(const SimilarityMatrix& m);
std::string taxonomy_svg(const std::map<std::string, ErrorCounts>& bars);

// Spearman rank correlation with average ranks for ties; NaN when either
// side is constant or fewer than two points are given.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// CSV field quoting for names containing commas or quotes.
std::string csv_field(const std::string& s);
// Fixed six-decimal formatting used by every CSV.
std::string fmt6(double v);

}  // namespace mope
