#include "mope/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "mope/errors.hpp"
#include "mope/prompt.hpp"
#include "mope/rng.hpp"

namespace mope {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Optimizer

OptimState make_optim_state(const AdamWConfig& hyper, const std::vector<Tensor>& params) {
  OptimState s;
  s.hyper = hyper;
  for (const auto& p : params) {
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

std::vector<Tensor> adamw_step(OptimState& state, const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ContractError("adamw_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state.m[i].shape()) {
      throw ContractError("adamw_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                          shape_str(params[i].shape()) + " vs gradient " + shape_str(grads[i].shape()));
    }
  }
  const AdamWConfig& h = state.hyper;
  state.step += 1;
  const float bc1 = 1.0f - std::pow(h.beta1, static_cast<float>(state.step));
  const float bc2 = 1.0f - std::pow(h.beta2, static_cast<float>(state.step));
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].size();
    std::vector<float> p = params[i].to_vector();
    std::vector<float> m = state.m[i].to_vector();
    std::vector<float> v = state.v[i].to_vector();
    for (std::size_t j = 0; j < n; ++j) {
      const float g = grads[i][j];
      m[j] = h.beta1 * m[j] + (1.0f - h.beta1) * g;
      v[j] = h.beta2 * v[j] + (1.0f - h.beta2) * g * g;
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      p[j] *= 1.0f - h.lr * h.weight_decay;
      p[j] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
    state.m[i] = Tensor(params[i].shape(), std::move(m));
    state.v[i] = Tensor(params[i].shape(), std::move(v));
    out.emplace_back(params[i].shape(), std::move(p));
  }
  return out;
}

void clip_global_norm(std::vector<Tensor>& grads, float max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (float v : g.data()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (max_norm <= 0.0f || norm <= max_norm) return;
  const float s = static_cast<float>(max_norm / norm);
  for (auto& g : grads) {
    std::vector<float> d = g.to_vector();
    for (float& v : d) v *= s;
    g = Tensor(g.shape(), std::move(d));
  }
}

// ---------------------------------------------------------------------------
// Config

namespace {

json optim_json(const AdamWConfig& c) {
  return {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

void read_optim(const json& j, AdamWConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
}

}  // namespace

json train_config_to_json(const TrainConfig& c) {
  return {{"expert", {{"optim", optim_json(c.expert_optim)},
                      {"epochs", c.expert_epochs},
                      {"batch", c.expert_batch},
                      {"clip", c.expert_clip},
                      {"fraction", c.fraction}}},
          {"pretrain", {{"optim", optim_json(c.pretrain_optim)},
                        {"epochs", c.pretrain_epochs},
                        {"batch", c.pretrain_batch},
                        {"clip", c.pretrain_clip}}},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    if (j.contains("expert")) {
      const json& e = j["expert"];
      if (e.contains("optim")) read_optim(e["optim"], c.expert_optim);
      c.expert_epochs = e.value("epochs", c.expert_epochs);
      c.expert_batch = e.value("batch", c.expert_batch);
      c.expert_clip = e.value("clip", c.expert_clip);
      c.fraction = e.value("fraction", c.fraction);
    }
    if (j.contains("pretrain")) {
      const json& p = j["pretrain"];
      if (p.contains("optim")) read_optim(p["optim"], c.pretrain_optim);
      c.pretrain_epochs = p.value("epochs", c.pretrain_epochs);
      c.pretrain_batch = p.value("batch", c.pretrain_batch);
      c.pretrain_clip = p.value("clip", c.pretrain_clip);
    }
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("training config: ") + e.what());
  }
  if (c.expert_epochs < 0 || c.pretrain_epochs < 0) throw ValidationError("training config: epochs must be >= 0");
  if (c.expert_batch < 1 || c.pretrain_batch < 1) throw ValidationError("training config: batch must be >= 1");
  if (!(c.fraction > 0.0 && c.fraction <= 1.0)) throw ValidationError("training config: fraction must be in (0, 1]");
  if (c.threads < 1) throw ValidationError("training config: threads must be >= 1");
  return c;
}

// ---------------------------------------------------------------------------
// Examples

TrainExample build_example(const Vocab& vocab, const Dialogue& dialogue, int turn, const SlotRef& slot,
                           const std::string& gold, int max_context) {
  TrainExample ex;
  ex.slot = slot;
  ex.dialogue_id = dialogue.id;
  ex.turn = turn;
  const std::string value = normalize_text(gold).empty() ? std::string("none") : normalize_text(gold);
  ex.target = vocab.encode(value);
  ex.target.push_back(Vocab::kEnd);
  ex.prompt = render_prompt(vocab, dialogue, turn, slot, max_context, static_cast<int>(ex.target.size()));
  ex.tokens = ex.prompt;
  ex.tokens.insert(ex.tokens.end(), ex.target.begin(), ex.target.end());
  ex.mask.assign(ex.prompt.size(), 0);
  ex.mask.resize(ex.tokens.size(), 1);
  return ex;
}

LossView loss_view(const TrainExample& ex) {
  LossView lv;
  const std::size_t n = ex.tokens.size();
  if (n < 2) throw ContractError("loss_view: example shorter than two tokens");
  lv.inputs.assign(ex.tokens.begin(), ex.tokens.end() - 1);
  lv.labels.assign(ex.tokens.begin() + 1, ex.tokens.end());
  lv.mask.assign(ex.mask.begin() + 1, ex.mask.end());
  for (std::size_t i = 0; i < lv.mask.size(); ++i) {
    if (lv.mask[i]) lv.rows.push_back(static_cast<int>(i));
  }
  return lv;
}

Vocab build_training_vocab(const Corpus& corpus) {
  std::vector<std::string> texts;
  for (const auto& d : corpus.dialogues) {
    for (const auto& t : d.turns) {
      texts.push_back(t.system);
      texts.push_back(t.user);
      for (const auto& s : t.state) texts.push_back(s.value);
    }
  }
  for (const auto& [dom, slots] : corpus.schema.domains) {
    texts.push_back(dom);
    for (const auto& s : slots) texts.push_back(s);
  }
  for (const auto& [fam, values] : corpus.schema.lexicon) {
    for (const auto& v : values) texts.push_back(v);
  }
  for (const auto& w : prompt_words()) texts.push_back(w);
  for (const auto& w : summary_words()) texts.push_back(w);
  return build_vocab(texts);
}

PretrainingSet pretraining_sequences(const Corpus& corpus, const Vocab& vocab, int max_context, std::uint64_t seed) {
  Rng rng = make_rng(seed, "pretrain/summary");
  const std::vector<std::string> kSeparators = summary_separators();
  PretrainingSet out;
  for (std::size_t di = 0; di < corpus.dialogues.size(); ++di) {
    const Dialogue& d = corpus.dialogues[di];
    std::vector<std::size_t> order(dialogue_slots(d, corpus.schema).size());
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<std::string> seps(order.size());
      for (auto& sep : seps) {
        sep = kSeparators[std::uniform_int_distribution<std::size_t>(0, kSeparators.size() - 1)(rng)];
      }
      std::vector<int> tail = vocab.encode(render_state_summary(d, t, corpus.schema, order, seps));
      tail.push_back(Vocab::kEnd);
      std::vector<int> seq;
      for (int first = 0; first <= t + 1; ++first) {
        seq = first <= t ? vocab.encode(render_history(d, first, t)) : vocab.encode("dialogue :");
        seq.insert(seq.end(), tail.begin(), tail.end());
        if (static_cast<int>(seq.size()) <= max_context + 1) break;
      }
      if (static_cast<int>(seq.size()) > max_context + 1) seq.resize(max_context + 1);
      out.sequences.push_back(std::move(seq));
      out.group.push_back(static_cast<int>(di));
    }
  }
  return out;
}

bool keep_dialogue(const std::string& id, double fraction, std::uint64_t seed) {
  if (fraction >= 1.0) return true;
  const double u = static_cast<double>(sub_seed(seed, "fraction/" + id) >> 11) * 0x1.0p-53;
  return u < fraction;
}

// ---------------------------------------------------------------------------
// Packed loss
//
// Sequences of one minibatch that share leading tokens (the same dialogue
// history) run as a single token tree. The batch loss is the mean over
// sequences of each sequence's mean cross-entropy over its labelled rows.

namespace {

struct Packed {
  Var loss;
  std::vector<double> per_sequence;
  std::vector<Var> backbone_leaves;
  std::vector<Var> prefix_leaves;
};

Packed packed_loss(Tape& tape, const BackboneParams& params, const PrefixExpert* expert,
                   const std::vector<const LossView*>& views, bool train_backbone, bool train_prefix) {
  std::vector<std::vector<int>> inputs;
  for (const LossView* v : views) inputs.push_back(v->inputs);
  TokenTrie trie = build_trie(inputs);
  ForwardOptions opt;
  opt.train_backbone = train_backbone;
  opt.train_prefix = train_prefix;
  opt.parents = trie.parents;
  std::vector<int> rows;
  for (std::size_t s = 0; s < views.size(); ++s) {
    for (int r : views[s]->rows) rows.push_back(trie.paths[s][r]);
  }
  opt.logit_rows = rows;
  ForwardTrace tr = forward(tape, params, expert, trie.tokens, opt);

  Packed out;
  out.backbone_leaves = tr.backbone_leaves;
  out.prefix_leaves = tr.prefix_leaves;
  const float inv = 1.0f / static_cast<float>(views.size());
  int offset = 0;
  for (const LossView* v : views) {
    const int n = static_cast<int>(v->rows.size());
    std::vector<int> idx(n), labels(n);
    for (int i = 0; i < n; ++i) {
      idx[i] = offset + i;
      labels[i] = v->labels[v->rows[i]];
    }
    offset += n;
    Var ce = cross_entropy(select_rows(tr.logits, idx), labels, std::vector<int>(n, 1));
    out.per_sequence.push_back(ce.value()[0]);
    Var term = scale(ce, inv);
    out.loss = out.per_sequence.size() == 1 ? term : add(out.loss, term);
  }
  return out;
}

void accumulate(std::vector<std::vector<double>>& acc, const std::vector<Var>& leaves, const Gradients& g) {
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto it = g.find(leaves[i].id);
    if (it == g.end()) continue;
    auto& a = acc[i];
    if (a.empty()) a.assign(it->second.size(), 0.0);
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += it->second[j];
  }
}

std::vector<Tensor> to_tensors(const std::vector<std::vector<double>>& acc, const std::vector<Tensor>& like) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < like.size(); ++i) {
    std::vector<float> d(like[i].size(), 0.0f);
    if (!acc[i].empty()) {
      for (std::size_t j = 0; j < d.size(); ++j) d[j] = static_cast<float>(acc[i][j]);
    }
    out.emplace_back(like[i].shape(), std::move(d));
  }
  return out;
}

// Splits positions [begin, end) of `order` into runs sharing a group id.
std::vector<std::vector<std::size_t>> runs_by_group(const std::vector<std::size_t>& order, std::size_t begin,
                                                    std::size_t end, const std::vector<int>& group) {
  std::vector<std::vector<std::size_t>> runs;
  for (std::size_t i = begin; i < end; ++i) {
    if (runs.empty() || group[order[i]] != group[runs.back().front()]) runs.emplace_back();
    runs.back().push_back(order[i]);
  }
  return runs;
}

// Shuffles whole groups and the members inside each, keeping groups contiguous.
std::vector<std::size_t> grouped_order(const std::vector<int>& group, Rng& rng) {
  std::vector<std::vector<std::size_t>> members;
  std::map<int, std::size_t> slot;
  for (std::size_t i = 0; i < group.size(); ++i) {
    auto [it, fresh] = slot.try_emplace(group[i], members.size());
    if (fresh) members.emplace_back();
    members[it->second].push_back(i);
  }
  std::shuffle(members.begin(), members.end(), rng);
  for (auto& m : members) std::shuffle(m.begin(), m.end(), rng);
  std::vector<std::size_t> order;
  order.reserve(group.size());
  for (const auto& m : members) order.insert(order.end(), m.begin(), m.end());
  return order;
}

// One minibatch: forward/backward per group run, gradients summed over runs.
// Returns the summed per-sequence losses and fills `grads` (batch mean).
double batch_step(const BackboneParams& params, const PrefixExpert* expert, const std::vector<LossView>& views,
                  const std::vector<std::vector<std::size_t>>& runs, std::size_t batch_size, bool train_backbone,
                  bool train_prefix, const std::vector<Tensor>& like, std::vector<Tensor>& grads) {
  std::vector<std::vector<double>> acc(like.size());
  double total = 0.0;
  for (const auto& run : runs) {
    std::vector<const LossView*> vs;
    for (std::size_t i : run) vs.push_back(&views[i]);
    Tape tape;
    Packed p = packed_loss(tape, params, expert, vs, train_backbone, train_prefix);
    for (double l : p.per_sequence) total += l;
    // packed_loss averages within the run; rescale to the batch mean.
    Var loss = scale(p.loss, static_cast<float>(run.size()) / static_cast<float>(batch_size));
    accumulate(acc, train_backbone ? p.backbone_leaves : p.prefix_leaves, tape.backward(loss));
  }
  grads = to_tensors(acc, like);
  return total;
}

std::vector<Tensor> backbone_tensors(const BackboneParams& p) {
  std::vector<Tensor> out;
  for (auto& [name, t] : p.named()) out.push_back(t);
  return out;
}

BackboneParams backbone_from_tensors(const BackboneParams& like, const std::vector<Tensor>& tensors) {
  auto named = like.named();
  for (std::size_t i = 0; i < named.size(); ++i) named[i].second = tensors[i];
  return BackboneParams::from_named(like.config, named);
}

LossView lm_view(const std::vector<int>& seq) {
  LossView lv;
  lv.inputs.assign(seq.begin(), seq.end() - 1);
  lv.labels.assign(seq.begin() + 1, seq.end());
  lv.mask.assign(lv.labels.size(), 1);
  lv.rows.resize(lv.labels.size());
  std::iota(lv.rows.begin(), lv.rows.end(), 0);
  return lv;
}

double mean_view_loss(const BackboneParams& params, const PrefixExpert* expert, const std::vector<LossView>& views,
                      const std::vector<int>& group) {
  if (views.empty()) return 0.0;
  std::vector<std::size_t> order(views.size());
  std::iota(order.begin(), order.end(), 0);
  double total = 0.0;
  for (const auto& run : runs_by_group(order, 0, order.size(), group)) {
    std::vector<const LossView*> vs;
    for (std::size_t i : run) vs.push_back(&views[i]);
    Tape tape;
    for (double l : packed_loss(tape, params, expert, vs, false, false).per_sequence) total += l;
  }
  return total / static_cast<double>(views.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Pretraining

PretrainResult pretrain_backbone(const Corpus& corpus, const Vocab& vocab, const BackboneConfig& config_in,
                                 const TrainConfig& train, std::uint64_t seed) {
  BackboneConfig config = config_in;
  config.vocab_size = vocab.size();
  const PretrainingSet set = pretraining_sequences(corpus, vocab, config.max_context, seed);
  std::vector<LossView> views;
  std::vector<int> group;
  for (std::size_t i = 0; i < set.sequences.size(); ++i) {
    if (set.sequences[i].size() < 2) continue;
    views.push_back(lm_view(set.sequences[i]));
    group.push_back(set.group[i]);
  }
  if (views.empty()) throw ContractError("pretrain_backbone: corpus has no usable dialogues");

  PretrainResult res;
  res.params = init_backbone(config, sub_seed(seed, "pretrain/init"));
  res.initial_loss = mean_view_loss(res.params, nullptr, views, group);
  if (train.pretrain_epochs == 0) return res;

  std::vector<Tensor> tensors = backbone_tensors(res.params);
  OptimState state = make_optim_state(train.pretrain_optim, tensors);
  Rng rng = make_rng(seed, "pretrain/order");
  const std::size_t batch = static_cast<std::size_t>(train.pretrain_batch);
  for (int epoch = 0; epoch < train.pretrain_epochs; ++epoch) {
    const std::vector<std::size_t> order = grouped_order(group, rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t end = std::min(order.size(), b + batch);
      std::vector<Tensor> grads;
      epoch_loss += batch_step(res.params, nullptr, views, runs_by_group(order, b, end, group), end - b, true, false,
                               tensors, grads);
      clip_global_norm(grads, train.pretrain_clip);
      tensors = adamw_step(state, tensors, grads);
      res.params = backbone_from_tensors(res.params, tensors);
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(views.size()));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Expert training

namespace {

std::vector<Tensor> expert_tensors(const PrefixExpert& e) {
  std::vector<Tensor> out;
  for (const auto& l : e.layers) {
    out.push_back(l.key);
    out.push_back(l.value);
  }
  return out;
}

PrefixExpert expert_from_tensors(int index, const std::vector<Tensor>& t) {
  PrefixExpert e;
  e.index = index;
  for (std::size_t i = 0; i + 1 < t.size(); i += 2) e.layers.push_back({t[i], t[i + 1]});
  return e;
}

std::vector<int> example_groups(const std::vector<TrainExample>& examples) {
  std::map<std::string, int> ids;
  std::vector<int> group;
  for (const auto& ex : examples) group.push_back(ids.try_emplace(ex.dialogue_id, static_cast<int>(ids.size())).first->second);
  return group;
}

}  // namespace

PrefixGradient prefix_loss_gradient(const BackboneParams& backbone, const PrefixExpert& expert,
                                    const TrainExample& example) {
  const LossView lv = loss_view(example);
  Tape tape;
  Packed p = packed_loss(tape, backbone, &expert, {&lv}, false, true);
  Gradients g = tape.backward(p.loss);
  PrefixGradient out;
  out.loss = p.per_sequence[0];
  for (const Var& v : p.prefix_leaves) out.grads.push_back(g.at(v.id));
  return out;
}

double mean_example_loss(const BackboneParams& backbone, const PrefixExpert* expert,
                         const std::vector<TrainExample>& examples) {
  std::vector<LossView> views;
  for (const auto& ex : examples) views.push_back(loss_view(ex));
  return mean_view_loss(backbone, expert, views, example_groups(examples));
}

ExpertTrainResult train_expert(const BackboneParams& backbone, const PrefixExpert& expert,
                               const std::vector<TrainExample>& examples, const TrainConfig& train,
                               std::uint64_t seed) {
  if (examples.empty()) {
    throw ContractError("train_expert: expert " + std::to_string(expert.index) + " has no training examples");
  }
  check_expert_shape(expert, backbone.config);
  std::vector<LossView> views;
  for (const auto& ex : examples) views.push_back(loss_view(ex));
  const std::vector<int> group = example_groups(examples);

  ExpertTrainResult res;
  res.expert = expert;
  std::vector<Tensor> tensors = expert_tensors(expert);
  OptimState state = make_optim_state(train.expert_optim, tensors);
  Rng rng = make_rng(seed, "expert/order/" + std::to_string(expert.index));
  const std::size_t batch = static_cast<std::size_t>(train.expert_batch);
  for (int epoch = 0; epoch < train.expert_epochs; ++epoch) {
    const std::vector<std::size_t> order = grouped_order(group, rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t end = std::min(order.size(), b + batch);
      std::vector<Tensor> grads;
      epoch_loss += batch_step(backbone, &res.expert, views, runs_by_group(order, b, end, group), end - b, false, true,
                               tensors, grads);
      clip_global_norm(grads, train.expert_clip);
      tensors = adamw_step(state, tensors, grads);
      res.expert = expert_from_tensors(expert.index, tensors);
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(examples.size()));
  }
  return res;
}

}  // namespace mope
