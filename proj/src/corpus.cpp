#include "mope/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "mope/errors.hpp"
#include "mope/rng.hpp"

namespace mope {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schema / corpus

std::vector<SlotRef> Schema::slots_of(const std::string& domain) const {
  std::vector<SlotRef> out;
  auto it = domains.find(domain);
  if (it == domains.end()) return out;
  for (const auto& s : it->second) out.push_back({domain, s});
  return out;
}

bool Schema::has_slot(const SlotRef& s) const {
  auto it = domains.find(s.domain);
  return it != domains.end() && std::find(it->second.begin(), it->second.end(), s.slot) != it->second.end();
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats st;
  st.dialogues = corpus.dialogues.size();
  for (const auto& d : corpus.dialogues) st.turns += d.turns.size();
  for (const auto& [dom, slots] : corpus.schema.domains) st.slots += slots.size();
  st.domains = corpus.schema.domains.size();
  return st;
}

std::vector<std::string> corpus_domains(const Corpus& corpus) {
  std::set<std::string> seen;
  for (const auto& d : corpus.dialogues) seen.insert(d.domains.begin(), d.domains.end());
  std::vector<std::string> out;
  for (const auto& [dom, slots] : corpus.schema.domains) {
    if (seen.count(dom)) out.push_back(dom);
  }
  return out;
}

std::vector<SlotRef> corpus_slots(const Corpus& corpus) {
  std::vector<SlotRef> out;
  for (const auto& dom : corpus_domains(corpus)) {
    auto s = corpus.schema.slots_of(dom);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

json corpus_to_json(const Corpus& corpus) {
  json schema;
  schema["domains"] = corpus.schema.domains;
  if (!corpus.schema.families.empty()) schema["families"] = corpus.schema.families;
  if (!corpus.schema.lexicon.empty()) schema["lexicon"] = corpus.schema.lexicon;
  json dialogues = json::array();
  for (const auto& d : corpus.dialogues) {
    json turns = json::array();
    for (const auto& t : d.turns) {
      json state = json::array();
      for (const auto& s : t.state) state.push_back({{"domain", s.domain}, {"slot", s.slot}, {"value", s.value}});
      turns.push_back({{"system", t.system}, {"user", t.user}, {"state", state}});
    }
    dialogues.push_back({{"id", d.id}, {"domains", d.domains}, {"turns", turns}});
  }
  return {{"schema", schema}, {"dialogues", dialogues}};
}

namespace {

const json& require(const json& j, const char* key, json::value_t type, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(path + ": missing field \"" + key + "\"");
  const json& v = j.at(key);
  const bool ok = type == json::value_t::string ? v.is_string()
                  : type == json::value_t::array ? v.is_array()
                                                 : v.is_object();
  if (!ok) throw ValidationError(path + "." + key + ": wrong type");
  return v;
}

std::string str_at(const json& j, const char* key, const std::string& path) {
  return require(j, key, json::value_t::string, path).get<std::string>();
}

}  // namespace

Corpus corpus_from_json(const json& j) {
  Corpus c;
  const json& schema = require(j, "schema", json::value_t::object, "$");
  const json& domains = require(schema, "domains", json::value_t::object, "$.schema");
  for (const auto& [name, slots] : domains.items()) {
    const std::string p = "$.schema.domains." + name;
    if (!slots.is_array()) throw ValidationError(p + ": expected a list of slot names");
    std::vector<std::string> names;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (!slots[i].is_string()) throw ValidationError(p + "[" + std::to_string(i) + "]: expected a string");
      names.push_back(slots[i].get<std::string>());
    }
    c.schema.domains[name] = std::move(names);
  }
  if (schema.contains("families")) {
    if (!schema["families"].is_object()) throw ValidationError("$.schema.families: expected an object");
    for (const auto& [k, v] : schema["families"].items()) {
      if (!v.is_string()) throw ValidationError("$.schema.families." + k + ": expected a string");
      c.schema.families[k] = v.get<std::string>();
    }
  }
  if (schema.contains("lexicon")) {
    try {
      c.schema.lexicon = schema["lexicon"].get<std::map<std::string, std::vector<std::string>>>();
    } catch (const json::exception&) {
      throw ValidationError("$.schema.lexicon: expected an object of string lists");
    }
  }
  const json& dialogues = require(j, "dialogues", json::value_t::array, "$");
  for (std::size_t i = 0; i < dialogues.size(); ++i) {
    const std::string p = "$.dialogues[" + std::to_string(i) + "]";
    const json& dj = dialogues[i];
    Dialogue d;
    d.id = str_at(dj, "id", p);
    const json& doms = require(dj, "domains", json::value_t::array, p);
    for (std::size_t k = 0; k < doms.size(); ++k) {
      if (!doms[k].is_string()) throw ValidationError(p + ".domains[" + std::to_string(k) + "]: expected a string");
      d.domains.push_back(doms[k].get<std::string>());
    }
    const json& turns = require(dj, "turns", json::value_t::array, p);
    for (std::size_t t = 0; t < turns.size(); ++t) {
      const std::string tp = p + ".turns[" + std::to_string(t) + "]";
      Turn turn;
      turn.system = str_at(turns[t], "system", tp);
      turn.user = str_at(turns[t], "user", tp);
      const json& state = require(turns[t], "state", json::value_t::array, tp);
      for (std::size_t s = 0; s < state.size(); ++s) {
        const std::string sp = tp + ".state[" + std::to_string(s) + "]";
        turn.state.push_back({str_at(state[s], "domain", sp), str_at(state[s], "slot", sp), str_at(state[s], "value", sp)});
      }
      d.turns.push_back(std::move(turn));
    }
    c.dialogues.push_back(std::move(d));
  }
  validate_corpus(c);
  return c;
}

void validate_corpus(const Corpus& c) {
  for (const auto& [dom, slots] : c.schema.domains) {
    std::set<std::string> uniq(slots.begin(), slots.end());
    if (uniq.size() != slots.size()) throw ValidationError("$.schema.domains." + dom + ": duplicate slot name");
    if (slots.empty()) throw ValidationError("$.schema.domains." + dom + ": no slots");
  }
  std::set<std::string> ids;
  for (std::size_t i = 0; i < c.dialogues.size(); ++i) {
    const Dialogue& d = c.dialogues[i];
    const std::string p = "$.dialogues[" + std::to_string(i) + "]";
    if (!ids.insert(d.id).second) throw ValidationError(p + ".id: duplicate dialogue id \"" + d.id + "\"");
    if (d.turns.empty()) throw ValidationError(p + ".turns: dialogue has no turns");
    for (const auto& dom : d.domains) {
      if (!c.schema.domains.count(dom)) throw ValidationError(p + ".domains: unknown domain \"" + dom + "\"");
    }
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      std::set<std::pair<std::string, std::string>> seen;
      for (std::size_t s = 0; s < d.turns[t].state.size(); ++s) {
        const StateTriple& st = d.turns[t].state[s];
        const std::string sp = p + ".turns[" + std::to_string(t) + "].state[" + std::to_string(s) + "]";
        if (!c.schema.domains.count(st.domain)) throw ValidationError(sp + ": unknown domain \"" + st.domain + "\"");
        if (!c.schema.has_slot({st.domain, st.slot})) {
          throw ValidationError(sp + ": unknown slot \"" + st.domain + " " + st.slot + "\"");
        }
        if (normalize_text(st.value).empty()) throw ValidationError(sp + ": empty value");
        if (normalize_text(st.value) == "none") throw ValidationError(sp + ": \"none\" is encoded by absence");
        if (!seen.insert({st.domain, st.slot}).second) {
          throw ValidationError(sp + ": duplicate slot \"" + st.domain + " " + st.slot + "\" in state");
        }
      }
    }
  }
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path.string() + ": cannot open corpus");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
  try {
    return corpus_from_json(j);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(path.string() + ": cannot write corpus");
  out << corpus_to_json(corpus).dump(1) << '\n';
  if (!out) throw ValidationError(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------
// Tokenization

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{kPadToken, kUnkToken, kEndToken, kAnswerToken}) {}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  const char* reserved[] = {kPadToken, kUnkToken, kEndToken, kAnswerToken};
  if (words_.size() < 4) throw FormatError("vocab: missing reserved tokens");
  for (int i = 0; i < 4; ++i) {
    if (words_[i] != reserved[i]) throw FormatError("vocab: reserved token " + std::to_string(i) + " must be " + reserved[i]);
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i)).second) throw FormatError("vocab: duplicate word " + words_[i]);
  }
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw IndexError("vocab: id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word(i);
  }
  return out;
}

Vocab build_vocab(std::span<const std::string> texts) {
  std::map<std::string, std::size_t> freq;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) ++freq[w];
  std::vector<std::string> words{kPadToken, kUnkToken, kEndToken, kAnswerToken};
  std::set<std::string> reserved(words.begin(), words.end());
  std::vector<std::pair<std::string, std::size_t>> entries;
  for (auto& [w, n] : freq) {
    if (!reserved.count(w)) entries.emplace_back(w, n);
  }
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (auto& [w, n] : entries) words.push_back(w);
  return Vocab(std::move(words));
}

// ---------------------------------------------------------------------------
// Synthetic corpus

SchemaSpec default_schema_spec(const std::string& held_out) {
  const SlotSpec area{"area", "area", "in the {v} area"};
  const SlotSpec price{"price-range", "price", "with a {v} price-range"};
  const SlotSpec name{"name", "name", "with the name {v}"};
  const SlotSpec day{"day", "day", "on the day {v}"};
  const SlotSpec people{"people", "people", "for {v} people"};
  const SlotSpec time{"time", "time", "at the time {v}"};
  const SlotSpec leave{"leave-at", "time", "with a leave-at of {v}"};
  const SlotSpec arrive{"arrive-by", "time", "with an arrive-by of {v}"};
  const SlotSpec depart{"departure", "place", "with departure from {v}"};
  const SlotSpec dest{"destination", "place", "with destination to {v}"};

  SchemaSpec spec;
  spec.domains = {
      {"hotel", {area, price, name, {"stars", "stars", "with {v} stars"}, {"parking", "yesno", "with parking {v}"}, day, people}},
      {"restaurant", {area, price, name, {"food", "food", "serving {v} food"}, day, time, people}},
      {"attraction", {area, name, {"type", "type", "of the {v} type"}, price}},
      {"taxi", {depart, dest, leave, arrive}},
      {"train", {depart, dest, day, leave, arrive, people}},
      {"flight", {depart, dest, day, leave, people}},
  };
  spec.lexicon = {
      {"area", {"north", "south", "east", "west", "centre"}},
      {"price", {"cheap", "moderate", "expensive"}},
      {"name", {"acorn", "bridgeview", "cityroomz", "lovell", "nirala", "oakhouse", "riverside", "warkworth"}},
      {"day", {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"}},
      {"people", {"1", "2", "3", "4", "5", "6", "7", "8"}},
      {"time", {"08:00", "09:15", "10:30", "11:45", "13:00", "14:15", "17:30", "19:45"}},
      {"place", {"cambridge", "london", "ely", "norwich", "stevenage", "leicester", "peterborough", "stansted"}},
      {"stars", {"2", "3", "4", "5"}},
      {"yesno", {"yes", "no"}},
      {"food", {"indian", "chinese", "italian", "british", "thai", "european"}},
      {"type", {"museum", "park", "college", "theatre", "gallery"}},
  };
  spec.held_out = held_out;
  return spec;
}

std::string render_phrase(const SlotSpec& slot, const std::string& value) {
  std::string out = slot.phrase;
  const auto pos = out.find("{v}");
  if (pos == std::string::npos) throw ContractError("slot template without {v}: " + slot.name);
  out.replace(pos, 3, value);
  return out;
}

namespace {

void validate_spec(const SchemaSpec& spec) {
  const DomainSpec* held = nullptr;
  std::set<std::string> train_families;
  for (const auto& d : spec.domains) {
    if (d.slots.empty()) throw ContractError("schema spec: domain " + d.name + " has no slots");
    for (const auto& s : d.slots) {
      auto lex = spec.lexicon.find(s.family);
      if (lex == spec.lexicon.end() || lex->second.empty()) {
        throw ContractError("schema spec: no lexicon for family " + s.family);
      }
      for (const auto& v : lex->second) {
        if (v == "none") throw ContractError("schema spec: \"none\" cannot be a value");
      }
    }
    if (d.name == spec.held_out) {
      held = &d;
    } else {
      for (const auto& s : d.slots) train_families.insert(s.family);
    }
  }
  if (!held) throw ContractError("schema spec: held-out domain \"" + spec.held_out + "\" is not defined");
  const bool shared = std::any_of(held->slots.begin(), held->slots.end(),
                                  [&](const SlotSpec& s) { return train_families.count(s.family) > 0; });
  if (!shared) {
    throw ContractError("schema spec: held-out domain shares no slot family with the training domains");
  }
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

Dialogue generate_dialogue(Rng& rng, const SchemaSpec& spec, const DomainSpec& dom, const std::string& id) {
  std::vector<int> order(dom.slots.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  const int lo = std::min<int>(2, static_cast<int>(order.size()));
  const int n_fill = std::uniform_int_distribution<int>(lo, static_cast<int>(order.size()))(rng);
  std::vector<int> filled(order.begin(), order.begin() + n_fill);
  std::vector<int> unfilled(order.begin() + n_fill, order.end());

  // Group the filled slots into turns of one or two.
  std::vector<std::vector<int>> groups;
  for (std::size_t i = 0; i < filled.size();) {
    const int take = (i + 1 < filled.size() && std::bernoulli_distribution(0.5)(rng)) ? 2 : 1;
    groups.emplace_back(filled.begin() + i, filled.begin() + i + take);
    i += take;
  }

  Dialogue d;
  d.id = id;
  d.domains = {dom.name};
  std::vector<StateTriple> state;
  std::vector<std::string> prev_phrases;
  for (std::size_t t = 0; t < groups.size(); ++t) {
    Turn turn;
    bool declined = false;
    if (t == 0) {
      turn.system = "hello , how can i help you ?";
    } else {
      std::string ask = dom.slots[groups[t][0]].name;
      if (!unfilled.empty() && std::bernoulli_distribution(0.3)(rng)) {
        ask = dom.slots[unfilled[std::uniform_int_distribution<std::size_t>(0, unfilled.size() - 1)(rng)]].name;
        declined = true;
      }
      turn.system = "ok , a " + dom.name + " " + join(prev_phrases, " and ") + " . any preference for the " + ask + " ?";
    }
    std::vector<std::string> phrases;
    for (int si : groups[t]) {
      const SlotSpec& slot = dom.slots[si];
      const auto& values = spec.lexicon.at(slot.family);
      const std::string value = values[std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(rng)];
      phrases.push_back(render_phrase(slot, value));
      state.push_back({dom.name, slot.name, value});
    }
    turn.user = std::string(declined ? "none . " : "") + "i need a " + dom.name + " " + join(phrases, " and ") + " .";
    turn.state = state;
    std::sort(turn.state.begin(), turn.state.end());
    d.turns.push_back(std::move(turn));
    prev_phrases = std::move(phrases);
  }
  return d;
}

std::string dialogue_id(int i) {
  std::ostringstream os;
  os << "dlg-" << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

SyntheticCorpus generate_synthetic(std::uint64_t seed, int n_dialogues, const SchemaSpec& spec) {
  if (n_dialogues <= 0) throw ContractError("generate_synthetic: n_dialogues must be positive");
  validate_spec(spec);
  Schema schema;
  for (const auto& d : spec.domains) {
    for (const auto& s : d.slots) {
      schema.domains[d.name].push_back(s.name);
      schema.families[s.name] = s.family;
    }
  }
  schema.lexicon = spec.lexicon;

  SyntheticCorpus out;
  out.train.schema = schema;
  out.test.schema = schema;
  Rng rng = make_rng(seed, "corpus");
  int in_domain = 0;
  for (int i = 0; i < n_dialogues; ++i) {
    const auto& dom = spec.domains[std::uniform_int_distribution<std::size_t>(0, spec.domains.size() - 1)(rng)];
    Dialogue d = generate_dialogue(rng, spec, dom, dialogue_id(i));
    if (dom.name == spec.held_out) {
      out.test.dialogues.push_back(std::move(d));
    } else if (in_domain++ % 5 == 4) {
      out.test.dialogues.push_back(std::move(d));
    } else {
      out.train.dialogues.push_back(std::move(d));
    }
  }
  return out;
}

}  // namespace mope
