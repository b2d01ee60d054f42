#include <gtest/gtest.h>

#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "mope/corpus.hpp"
#include "mope/errors.hpp"

using namespace mope;

namespace {

const std::string kFixture = std::string(MOPE_TEST_DATA) + "/two_dialogues.json";

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json fixture_json() { return nlohmann::json::parse(read_file(kFixture)); }

std::string regex_escape(const std::string& s) {
  static const std::regex special(R"([.^$|()\[\]{}*+?\\-])");
  return std::regex_replace(s, special, R"(\$&)");
}

// Recovers (slot, value) pairs from a user utterance using the generator's
// own phrase templates and lexicon.
std::set<std::pair<std::string, std::string>> invert(const SchemaSpec& spec, const std::string& domain,
                                                     const std::string& user) {
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& d : spec.domains) {
    if (d.name != domain) continue;
    for (const auto& s : d.slots) {
      std::string alts;
      for (const auto& v : spec.lexicon.at(s.family)) alts += (alts.empty() ? "" : "|") + regex_escape(v);
      const auto pos = s.phrase.find("{v}");
      const std::regex re("(?:^| )" + regex_escape(s.phrase.substr(0, pos)) + "(" + alts + ")" +
                          regex_escape(s.phrase.substr(pos + 3)) + "(?= |$)");
      for (std::sregex_iterator it(user.begin(), user.end(), re), end; it != end; ++it) out.insert({s.name, (*it)[1]});
    }
  }
  return out;
}

}  // namespace

TEST(Vocab, BuildEncodeDecode) {
  const std::vector<std::string> texts{"a b", "b c"};
  Vocab v = build_vocab(texts);
  EXPECT_EQ(v.size(), 7);
  EXPECT_EQ(v.word(Vocab::kPad), kPadToken);
  EXPECT_EQ(v.word(Vocab::kEnd), kEndToken);
  EXPECT_EQ(v.word(4), "b");  // most frequent first
  EXPECT_EQ(v.decode(v.encode("b a")), "b a");
  EXPECT_EQ(v.encode("zebra"), (std::vector<int>{Vocab::kUnk}));
  EXPECT_EQ(v.encode("  B   A "), v.encode("b a"));
}

TEST(Vocab, ReservedTokensMustLead) {
  EXPECT_THROW(Vocab(std::vector<std::string>{"x", kUnkToken, kEndToken, kAnswerToken}), FormatError);
}

TEST(Loader, FixtureHasTwoDialoguesAndMatchingStats) {
  const Corpus c = load_corpus(kFixture);
  const auto header = fixture_json()["stats"];
  const auto st = corpus_stats(c);
  EXPECT_EQ(st.dialogues, 2u);
  EXPECT_EQ(st.dialogues, header["dialogues"].get<std::size_t>());
  EXPECT_EQ(st.turns, header["turns"].get<std::size_t>());
  EXPECT_EQ(st.slots, header["slots"].get<std::size_t>());
  EXPECT_EQ(st.domains, header["domains"].get<std::size_t>());
}

TEST(Loader, SaveThenLoadIsIdentity) {
  mope::test::TempDir dir;
  const Corpus c = load_corpus(kFixture);
  save_corpus(dir / "a.json", c);
  const Corpus back = load_corpus(dir / "a.json");
  EXPECT_EQ(corpus_to_json(back), corpus_to_json(c));
  save_corpus(dir / "b.json", back);
  EXPECT_EQ(read_file(dir / "a.json"), read_file(dir / "b.json"));
}

TEST(Loader, ValidationErrorsNameThePath) {
  auto expect_error = [](nlohmann::json j, const std::string& fragment) {
    try {
      corpus_from_json(j);
      ADD_FAILURE() << "expected ValidationError containing " << fragment;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  auto j = fixture_json();
  j["dialogues"][0]["turns"][0]["state"][0]["value"] = "";
  expect_error(j, "$.dialogues[0].turns[0].state[0]");
  j = fixture_json();
  j["dialogues"][0]["turns"][1]["state"][1]["slot"] = "area";
  expect_error(j, "duplicate slot");
  j = fixture_json();
  j["dialogues"][1]["domains"][0] = "spaceship";
  expect_error(j, "$.dialogues[1].domains");
  j = fixture_json();
  j["dialogues"][1]["id"] = "fixture-1";
  expect_error(j, "duplicate dialogue id");
  j = fixture_json();
  j["dialogues"][0].erase("turns");
  expect_error(j, "$.dialogues[0]");
}

TEST(Loader, MalformedJsonIsValidationError) {
  mope::test::TempDir dir;
  std::ofstream(dir / "bad.json") << "{\"schema\": ";
  EXPECT_THROW(load_corpus(dir / "bad.json"), ValidationError);
  EXPECT_THROW(load_corpus(dir / "absent.json"), ValidationError);
}

TEST(Synthetic, OneDialogueRequestIsOneDialogue) {
  auto s = generate_synthetic(11, 1, default_schema_spec());
  EXPECT_EQ(s.train.dialogues.size() + s.test.dialogues.size(), 1u);
}

TEST(Synthetic, StatesAreCumulativeAndRecoverableFromUtterances) {
  const auto spec = default_schema_spec();
  const auto s = generate_synthetic(5, 200, spec);
  for (const Corpus* c : {&s.train, &s.test}) {
    EXPECT_NO_THROW(validate_corpus(*c));
    for (const auto& d : c->dialogues) {
      ASSERT_EQ(d.domains.size(), 1u);
      std::set<StateTriple> prev;
      for (const auto& t : d.turns) {
        const std::set<StateTriple> cur(t.state.begin(), t.state.end());
        EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end())) << d.id;
        std::set<std::pair<std::string, std::string>> added;
        for (const auto& st : cur) {
          if (!prev.count(st)) added.insert({st.slot, st.value});
        }
        EXPECT_FALSE(added.empty());
        EXPECT_LE(added.size(), 2u);
        EXPECT_EQ(invert(spec, d.domains[0], t.user), added) << d.id << ": " << t.user;
        prev = cur;
      }
    }
  }
}

TEST(Synthetic, HeldOutDomainOnlyInTest) {
  const auto s = generate_synthetic(6, 300, default_schema_spec("flight"));
  bool seen = false;
  for (const auto& d : s.train.dialogues) {
    EXPECT_NE(d.domains[0], "flight");
    for (const auto& t : d.turns)
      for (const auto& st : t.state) EXPECT_NE(st.domain, "flight");
  }
  for (const auto& d : s.test.dialogues) seen = seen || d.domains[0] == "flight";
  EXPECT_TRUE(seen);
}

TEST(Synthetic, SchemaMeetsSharingRequirements) {
  const auto spec = default_schema_spec();
  ASSERT_EQ(spec.domains.size(), 6u);
  std::map<std::string, int> family_domains;
  int total = 0;
  for (const auto& d : spec.domains) {
    EXPECT_GE(d.slots.size(), 4u);
    EXPECT_LE(d.slots.size(), 7u);
    std::set<std::string> fams;
    for (const auto& s : d.slots) fams.insert(s.family), ++total;
    for (const auto& f : fams) ++family_domains[f];
  }
  int shared = 0;
  for (const auto& d : spec.domains)
    for (const auto& s : d.slots) shared += family_domains[s.family] > 1;
  EXPECT_GE(static_cast<double>(shared) / total, 0.6);
}

TEST(Synthetic, SameSeedGivesIdenticalFiles) {
  mope::test::TempDir dir;
  save_corpus(dir / "a.json", generate_synthetic(9, 40, default_schema_spec()).train);
  save_corpus(dir / "b.json", generate_synthetic(9, 40, default_schema_spec()).train);
  save_corpus(dir / "c.json", generate_synthetic(10, 40, default_schema_spec()).train);
  EXPECT_EQ(read_file(dir / "a.json"), read_file(dir / "b.json"));
  EXPECT_NE(read_file(dir / "a.json"), read_file(dir / "c.json"));
}

TEST(Synthetic, HeldOutDomainMustShareAFamily) {
  auto spec = default_schema_spec();
  spec.lexicon["alien"] = {"zork"};
  for (auto& d : spec.domains) {
    if (d.name == "flight") d.slots = {{"warp", "alien", "at warp {v}"}};
  }
  EXPECT_THROW(generate_synthetic(1, 5, spec), ContractError);
}
