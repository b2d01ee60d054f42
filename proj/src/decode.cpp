#include "mope/decode.hpp"

#include <map>

#include "mope/errors.hpp"
#include "mope/prompt.hpp"

namespace mope {

std::vector<int> greedy_decode(const BackboneParams& params, const PrefixExpert* expert, std::vector<int> prompt,
                               int max_new) {
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    Tape tape;
    ForwardOptions opt;
    opt.logit_rows = std::vector<int>{static_cast<int>(prompt.size()) - 1};
    ForwardTrace tr = forward(tape, params, expert, prompt, opt);
    const Tensor& logits = tr.logits.value();
    int best = 0;
    for (int v = 1; v < logits.cols(); ++v) {
      if (logits.at(0, v) > logits.at(0, best)) best = v;
    }
    if (best == Vocab::kEnd) break;
    out.push_back(best);
    prompt.push_back(best);
    if (static_cast<int>(prompt.size()) > params.config.max_context) break;
  }
  return out;
}

std::vector<std::vector<int>> greedy_decode_batch(const BackboneParams& params, const PrefixExpert* expert,
                                                 std::vector<std::vector<int>> prompts, int max_new) {
  const std::size_t n = prompts.size();
  std::vector<std::vector<int>> out(n);
  std::vector<bool> live(n, true);
  for (std::size_t i = 0; i < n; ++i) {
    if (prompts[i].empty()) throw ContractError("greedy_decode_batch: empty prompt");
  }
  for (int step = 0; step < max_new; ++step) {
    std::vector<std::size_t> active;
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = 0; i < n; ++i) {
      if (!live[i]) continue;
      active.push_back(i);
      seqs.push_back(prompts[i]);
    }
    if (active.empty()) break;
    TokenTrie trie = build_trie(seqs);
    std::vector<int> rows;
    for (const auto& path : trie.paths) rows.push_back(path.back());
    Tape tape;
    ForwardOptions opt;
    opt.parents = trie.parents;
    opt.logit_rows = rows;
    ForwardTrace tr = forward(tape, params, expert, trie.tokens, opt);
    const Tensor& logits = tr.logits.value();
    for (std::size_t a = 0; a < active.size(); ++a) {
      const int r = static_cast<int>(a);
      int best = 0;
      for (int v = 1; v < logits.cols(); ++v) {
        if (logits.at(r, v) > logits.at(r, best)) best = v;
      }
      const std::size_t i = active[a];
      if (best == Vocab::kEnd) {
        live[i] = false;
        continue;
      }
      out[i].push_back(best);
      prompts[i].push_back(best);
      if (static_cast<int>(prompts[i].size()) > params.config.max_context) live[i] = false;
    }
  }
  return out;
}

namespace {

Prediction finish(const Vocab& vocab, const SlotRef& slot, const std::vector<int>& ids, std::string expert_used) {
  Prediction p;
  p.slot = slot;
  p.value = normalize_text(vocab.decode(ids));
  if (p.value.empty()) p.value = "none";
  p.expert_used = std::move(expert_used);
  return p;
}

}  // namespace

Prediction generate_value(const BackboneParams& params, const Vocab& vocab, const PrefixExpert* expert,
                          const Dialogue& dialogue, int turn, const SlotRef& slot) {
  std::vector<int> prompt = render_prompt(vocab, dialogue, turn, slot, params.config.max_context, kMaxAnswerLen);
  auto ids = greedy_decode(params, expert, std::move(prompt), kMaxAnswerLen);
  return finish(vocab, slot, ids, expert ? std::to_string(expert->index) : "frozen");
}

std::vector<int> icl_prompt(const BackboneParams& params, const Vocab& vocab, const std::vector<IclExemplar>& exemplars,
                            const Dialogue& dialogue, int turn, const SlotRef& slot) {
  const int ctx = params.config.max_context;
  const std::vector<int> query = render_prompt(vocab, dialogue, turn, slot, ctx, kMaxAnswerLen);
  std::vector<std::vector<int>> shots;
  for (const auto& ex : exemplars) {
    if (!ex.dialogue) throw ContractError("icl_prompt: exemplar without a dialogue");
    std::vector<int> s = render_prompt(vocab, *ex.dialogue, ex.turn, ex.slot, ctx, 0);
    for (int id : vocab.encode(ex.value.empty() ? "none" : ex.value)) s.push_back(id);
    s.push_back(Vocab::kEnd);
    shots.push_back(std::move(s));
  }
  std::size_t first = 0;
  auto total = [&] {
    std::size_t n = query.size() + kMaxAnswerLen;
    for (std::size_t i = first; i < shots.size(); ++i) n += shots[i].size();
    return n;
  };
  while (first < shots.size() && total() > static_cast<std::size_t>(ctx)) ++first;
  std::vector<int> prompt;
  for (std::size_t i = first; i < shots.size(); ++i) prompt.insert(prompt.end(), shots[i].begin(), shots[i].end());
  prompt.insert(prompt.end(), query.begin(), query.end());
  return prompt;
}

Prediction generate_icl(const BackboneParams& params, const Vocab& vocab, const std::vector<IclExemplar>& exemplars,
                        const Dialogue& dialogue, int turn, const SlotRef& slot) {
  auto ids = greedy_decode(params, nullptr, icl_prompt(params, vocab, exemplars, dialogue, turn, slot), kMaxAnswerLen);
  return finish(vocab, slot, ids, "icl");
}

std::vector<Prediction> generate_icl_batch(const BackboneParams& params, const Vocab& vocab,
                                           const std::vector<IclQuery>& queries) {
  std::vector<std::vector<int>> prompts;
  for (const auto& q : queries) {
    if (!q.exemplars || !q.query.dialogue) throw ContractError("generate_icl_batch: incomplete query");
    prompts.push_back(icl_prompt(params, vocab, *q.exemplars, *q.query.dialogue, q.query.turn, q.query.slot));
  }
  auto ids = greedy_decode_batch(params, nullptr, std::move(prompts), kMaxAnswerLen);
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < queries.size(); ++i) out.push_back(finish(vocab, queries[i].query.slot, ids[i], "icl"));
  return out;
}

std::vector<Prediction> generate_values(const BackboneParams& params, const Vocab& vocab, const PrefixExpert* expert,
                                        const std::vector<ValueQuery>& queries) {
  // One token tree per dialogue keeps the attention matrices small.
  std::map<const Dialogue*, std::vector<std::size_t>> by_dialogue;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (!queries[i].dialogue) throw ContractError("generate_values: query without a dialogue");
    by_dialogue[queries[i].dialogue].push_back(i);
  }
  std::vector<Prediction> out(queries.size());
  for (const auto& [dialogue, members] : by_dialogue) {
    std::vector<std::vector<int>> prompts;
    for (std::size_t i : members) {
      prompts.push_back(render_prompt(vocab, *dialogue, queries[i].turn, queries[i].slot, params.config.max_context,
                                      kMaxAnswerLen));
    }
    auto ids = greedy_decode_batch(params, expert, std::move(prompts), kMaxAnswerLen);
    for (std::size_t m = 0; m < members.size(); ++m) {
      out[members[m]] = finish(vocab, queries[members[m]].slot, ids[m], expert ? std::to_string(expert->index) : "frozen");
    }
  }
  return out;
}

nlohmann::json prediction_to_json(const PredictionRecord& r) {
  return {{"dialogue_id", r.dialogue_id}, {"turn", r.turn},   {"domain", r.domain},
          {"slot", r.slot},               {"value", r.value}, {"expert_used", r.expert_used}};
}

PredictionRecord prediction_from_json(const nlohmann::json& j) {
  try {
    return {j.at("dialogue_id").get<std::string>(), j.at("turn").get<int>(),         j.at("domain").get<std::string>(),
            j.at("slot").get<std::string>(),        j.at("value").get<std::string>(), j.at("expert_used").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prediction record: ") + e.what());
  }
}

}  // namespace mope
