#include "mope/prompt.hpp"

#include "mope/errors.hpp"

namespace mope {

std::string render_history(const Dialogue& dialogue, int first_turn, int last_turn) {
  std::string out = "dialogue : ";
  for (int t = first_turn; t <= last_turn; ++t) {
    const Turn& turn = dialogue.turns.at(t);
    out += "system : " + normalize_text(turn.system) + " user : " + normalize_text(turn.user) + " ";
  }
  return out;
}

std::string render_question(const SlotRef& slot) {
  return "question : what is the value of " + slot.domain + " " + slot.slot + " ? answer :";
}

std::vector<int> render_prompt(const Vocab& vocab, const Dialogue& dialogue, int turn, const SlotRef& slot,
                               int max_context, int reserve) {
  if (turn < 0 || turn >= static_cast<int>(dialogue.turns.size())) {
    throw IndexError("render_prompt: turn " + std::to_string(turn) + " outside dialogue " + dialogue.id);
  }
  const std::vector<int> question = vocab.encode(render_question(slot));
  for (int first = 0; first <= turn + 1; ++first) {
    std::vector<int> tokens =
        first <= turn ? vocab.encode(render_history(dialogue, first, turn)) : vocab.encode("dialogue :");
    tokens.insert(tokens.end(), question.begin(), question.end());
    if (static_cast<int>(tokens.size()) + reserve <= max_context) return tokens;
  }
  throw CapacityError("render_prompt: question for " + slot.text() + " does not fit in " + std::to_string(max_context) +
                      " tokens");
}

std::string gold_value(const Dialogue& dialogue, int turn, const SlotRef& slot) {
  for (const auto& s : dialogue.turns.at(turn).state) {
    if (s.domain == slot.domain && s.slot == slot.slot) return normalize_text(s.value);
  }
  return "none";
}

std::vector<std::string> prompt_words() {
  return {"dialogue", "system", "user", ":", "question", "what", "is", "the", "value", "of", "?", "none"};
}

std::vector<SlotRef> dialogue_slots(const Dialogue& dialogue, const Schema& schema) {
  std::vector<SlotRef> out;
  for (const auto& dom : dialogue.domains) {
    for (const auto& s : schema.slots_of(dom)) out.push_back(s);
  }
  return out;
}

std::string render_state_summary(const Dialogue& dialogue, int turn, const Schema& schema,
                                 const std::vector<std::size_t>& order, const std::vector<std::string>& separators) {
  const std::vector<SlotRef> slots = dialogue_slots(dialogue, schema);
  if (order.size() != slots.size() || separators.size() != slots.size()) {
    throw ContractError("render_state_summary: order/separators do not cover every slot");
  }
  std::string out = "state :";
  for (std::size_t i = 0; i < order.size(); ++i) {
    const SlotRef& s = slots.at(order[i]);
    out += (i ? " ; " : " ") + s.domain + " " + s.slot + " " + separators[i] + " " + gold_value(dialogue, turn, s);
  }
  return out;
}

std::vector<std::string> summary_words() { return {"state", ";", "none", "?", ":", "-"}; }

std::vector<std::string> summary_separators() { return {"?", "? :", "? - :"}; }

}  // namespace mope
