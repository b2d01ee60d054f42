#pragma once

#include <string>
#include <vector>

#include "mope/corpus.hpp"

namespace mope {

inline constexpr int kMaxAnswerLen = 8;

// "dialogue : system : <U> user : <R> ... " for turns [first_turn, last_turn].
std::string render_history(const Dialogue& dialogue, int first_turn, int last_turn);
// "question : what is the value of <domain> <slot> ? answer :"
std::string render_question(const SlotRef& slot);

// Encoded history + question for the state after `turn`. Oldest turns are
// dropped until the prompt plus `reserve` tokens fits in max_context; the
// question is always kept. Throws CapacityError if even the bare question
// does not fit.
std::vector<int> render_prompt(const Vocab& vocab, const Dialogue& dialogue, int turn, const SlotRef& slot,
                               int max_context, int reserve);

// Gold value of `slot` after `turn`, or "none".
std::string gold_value(const Dialogue& dialogue, int turn, const SlotRef& slot);

// Words every QA prompt uses; included in any vocabulary built for training.
std::vector<std::string> prompt_words();

// "state : <domain> <slot> <value> ; ..." over every schema slot of the
// dialogue's domains after `turn`, unfilled slots reading "none", entries in
// the order given by `order` (indices into the flattened slot list).
// `separators[i]` is placed between entry i's slot and value.
std::string render_state_summary(const Dialogue& dialogue, int turn, const Schema& schema,
                                 const std::vector<std::size_t>& order, const std::vector<std::string>& separators);
std::vector<SlotRef> dialogue_slots(const Dialogue& dialogue, const Schema& schema);
std::vector<std::string> summary_words();
// Separator tokens used between slot and value in state summaries.
std::vector<std::string> summary_separators();

}  // namespace mope
