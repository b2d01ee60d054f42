#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace mope {

// ---------------------------------------------------------------------------
// Dialogue data model

struct StateTriple {
  std::string domain;
  std::string slot;
  std::string value;
  auto operator<=>(const StateTriple&) const = default;
};

struct Turn {
  std::string system;
  std::string user;
  std::vector<StateTriple> state;  // cumulative belief state after this turn
};

struct Dialogue {
  std::string id;
  std::vector<std::string> domains;
  std::vector<Turn> turns;
};

// A (domain, slot-name) pair; the unit that is clustered and predicted.
struct SlotRef {
  std::string domain;
  std::string slot;
  std::string text() const { return domain + " " + slot; }
  auto operator<=>(const SlotRef&) const = default;
};

struct Schema {
  std::map<std::string, std::vector<std::string>> domains;
  // Optional: slot-name -> family, family -> admissible values.
  std::map<std::string, std::string> families;
  std::map<std::string, std::vector<std::string>> lexicon;

  std::vector<SlotRef> slots_of(const std::string& domain) const;
  bool has_slot(const SlotRef& s) const;
};

struct Corpus {
  Schema schema;
  std::vector<Dialogue> dialogues;
};

struct CorpusStats {
  std::size_t dialogues = 0;
  std::size_t turns = 0;
  std::size_t slots = 0;  // distinct (domain, slot) pairs in the schema
  std::size_t domains = 0;
};

CorpusStats corpus_stats(const Corpus& corpus);

// Domains that occur in at least one dialogue, in schema order.
std::vector<std::string> corpus_domains(const Corpus& corpus);
// All schema slots of the domains that occur in the corpus.
std::vector<SlotRef> corpus_slots(const Corpus& corpus);

nlohmann::json corpus_to_json(const Corpus& corpus);
Corpus corpus_from_json(const nlohmann::json& j);
// Throws ValidationError naming the JSON path of the first problem.
void validate_corpus(const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);

// ---------------------------------------------------------------------------
// Tokenization

// Lowercase, whitespace-separated words.
std::vector<std::string> split_words(std::string_view text);
std::string normalize_text(std::string_view text);

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kEndToken = "</a>";
inline constexpr const char* kAnswerToken = "answer";

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEnd = 2;
  static constexpr int kAnswer = 3;

  Vocab();
  explicit Vocab(std::vector<std::string> words);  // reserved tokens must come first

  int size() const { return static_cast<int>(words_.size()); }
  int id(const std::string& word) const;
  const std::string& word(int id) const;
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Frequency-sorted (descending), ties broken lexicographically; reserved first.
Vocab build_vocab(std::span<const std::string> texts);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SlotSpec {
  std::string name;
  std::string family;
  std::string phrase;  // user-utterance template containing "{v}"
};

struct DomainSpec {
  std::string name;
  std::vector<SlotSpec> slots;
};

struct SchemaSpec {
  std::vector<DomainSpec> domains;
  std::map<std::string, std::vector<std::string>> lexicon;  // family -> values
  std::string held_out;
};

// Six domains (hotel, restaurant, attraction, taxi, train, flight) with
// flight held out by default.
SchemaSpec default_schema_spec(const std::string& held_out = "flight");

struct SyntheticCorpus {
  Corpus train;
  Corpus test;
};

// Dialogues of the held-out domain go to the test split; one in five
// dialogues of the other domains is also kept for in-domain testing.
SyntheticCorpus generate_synthetic(std::uint64_t seed, int n_dialogues, const SchemaSpec& spec);

// Renders the value phrase of a slot, e.g. "in the north area".
std::string render_phrase(const SlotSpec& slot, const std::string& value);

}  // namespace mope
