#include "mope/backbone.hpp"

#include <cmath>
#include <map>
#include <random>

#include "mope/errors.hpp"
#include "mope/rng.hpp"

namespace mope {

namespace {

constexpr float kLayerNormEps = 1e-5f;
constexpr float kInitStd = 0.02f;

Tensor normal_tensor(Shape shape, Rng& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> data(shape_numel(shape));
  for (float& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void BackboneConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ContractError(std::string("backbone config: ") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(max_context, "max_context");
  if (prefix_len < 0) throw ContractError("backbone config: prefix_len must be non-negative");
  if (d_model % n_heads != 0) throw ContractError("backbone config: n_heads must divide d_model");
}

nlohmann::json config_to_json(const BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_context", c.max_context},
          {"prefix_len", c.prefix_len}};
}

BackboneConfig config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  auto get = [&](const char* key, int& field) {
    if (j.contains(key)) {
      if (!j[key].is_number_integer()) throw ValidationError(std::string("config.") + key + ": expected an integer");
      field = j[key].get<int>();
    }
  };
  get("vocab_size", c.vocab_size);
  get("d_model", c.d_model);
  get("n_layers", c.n_layers);
  get("n_heads", c.n_heads);
  get("d_ff", c.d_ff);
  get("max_context", c.max_context);
  get("prefix_len", c.prefix_len);
  return c;
}

std::vector<std::pair<std::string, Tensor>> BackboneParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerParams& p = layers[l];
    const std::string pre = "layer." + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1_gain", p.ln1_gain);
    out.emplace_back(pre + "ln1_bias", p.ln1_bias);
    out.emplace_back(pre + "wq", p.wq);
    out.emplace_back(pre + "bq", p.bq);
    out.emplace_back(pre + "wk", p.wk);
    out.emplace_back(pre + "bk", p.bk);
    out.emplace_back(pre + "wv", p.wv);
    out.emplace_back(pre + "bv", p.bv);
    out.emplace_back(pre + "wo", p.wo);
    out.emplace_back(pre + "bo", p.bo);
    out.emplace_back(pre + "ln2_gain", p.ln2_gain);
    out.emplace_back(pre + "ln2_bias", p.ln2_bias);
    out.emplace_back(pre + "w1", p.w1);
    out.emplace_back(pre + "b1", p.b1);
    out.emplace_back(pre + "w2", p.w2);
    out.emplace_back(pre + "b2", p.b2);
  }
  out.emplace_back("final_gain", final_gain);
  out.emplace_back("final_bias", final_bias);
  return out;
}

std::size_t BackboneParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t.size();
  return n;
}

bool BackboneParams::bit_equal(const BackboneParams& other) const {
  if (!(config == other.config)) return false;
  auto a = named();
  auto b = other.named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].second.bit_equal(b[i].second)) return false;
  }
  return true;
}

namespace {

// kind: 0 = normal-initialized weight, 1 = gain (ones), 2 = bias (zeros)
template <typename Fill>
BackboneParams make_params(const BackboneConfig& config, Fill&& fill) {
  const int d = config.d_model;
  BackboneParams p;
  p.config = config;
  p.token_embedding = fill(Shape{config.vocab_size, d}, 0);
  p.position_embedding = fill(Shape{config.max_context, d}, 0);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_gain = fill(Shape{d}, 1);
    lp.ln1_bias = fill(Shape{d}, 2);
    lp.wq = fill(Shape{d, d}, 0);
    lp.bq = fill(Shape{d}, 2);
    lp.wk = fill(Shape{d, d}, 0);
    lp.bk = fill(Shape{d}, 2);
    lp.wv = fill(Shape{d, d}, 0);
    lp.bv = fill(Shape{d}, 2);
    lp.wo = fill(Shape{d, d}, 0);
    lp.bo = fill(Shape{d}, 2);
    lp.ln2_gain = fill(Shape{d}, 1);
    lp.ln2_bias = fill(Shape{d}, 2);
    lp.w1 = fill(Shape{d, config.d_ff}, 0);
    lp.b1 = fill(Shape{config.d_ff}, 2);
    lp.w2 = fill(Shape{config.d_ff, d}, 0);
    lp.b2 = fill(Shape{d}, 2);
    p.layers.push_back(std::move(lp));
  }
  p.final_gain = fill(Shape{d}, 1);
  p.final_bias = fill(Shape{d}, 2);
  return p;
}

}  // namespace

BackboneParams init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "backbone/init");
  return make_params(config, [&](Shape shape, int kind) {
    if (kind == 0) return normal_tensor(std::move(shape), rng, kInitStd);
    return Tensor::filled(std::move(shape), kind == 1 ? 1.0f : 0.0f);
  });
}

BackboneParams BackboneParams::from_named(const BackboneConfig& config,
                                          const std::vector<std::pair<std::string, Tensor>>& named) {
  config.validate();
  BackboneParams p = make_params(config, [](Shape shape, int) { return Tensor::zeros(std::move(shape)); });
  auto expected = p.named();
  if (expected.size() != named.size()) {
    throw FormatError("backbone: expected " + std::to_string(expected.size()) + " tensors, got " +
                      std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (expected[i].first != named[i].first) {
      throw FormatError("backbone: tensor " + std::to_string(i) + " is \"" + named[i].first + "\", expected \"" +
                        expected[i].first + "\"");
    }
    if (expected[i].second.shape() != named[i].second.shape()) {
      throw FormatError("backbone: tensor \"" + named[i].first + "\" has shape " + shape_str(named[i].second.shape()) +
                        ", expected " + shape_str(expected[i].second.shape()));
    }
  }
  std::size_t i = 0;
  auto next = [&]() -> const Tensor& { return named[i++].second; };
  p.token_embedding = next();
  p.position_embedding = next();
  for (auto& l : p.layers) {
    for (Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln2_gain,
                      &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2}) {
      *t = next();
    }
  }
  p.final_gain = next();
  p.final_bias = next();
  return p;
}

bool PrefixExpert::bit_equal(const PrefixExpert& other) const {
  if (index != other.index || layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (!layers[l].key.bit_equal(other.layers[l].key) || !layers[l].value.bit_equal(other.layers[l].value)) return false;
  }
  return true;
}

void check_expert_shape(const PrefixExpert& expert, const BackboneConfig& config) {
  if (static_cast<int>(expert.layers.size()) != config.n_layers) {
    throw ShapeError("prefix expert has " + std::to_string(expert.layers.size()) + " layers, backbone has " +
                     std::to_string(config.n_layers));
  }
  const Shape want{expert.prefix_len(), config.d_model};
  for (const auto& l : expert.layers) {
    if (l.key.shape() != want || l.value.shape() != want) {
      throw ShapeError("prefix expert matrices must be " + shape_str(want) + ", got " + shape_str(l.key.shape()) +
                       " / " + shape_str(l.value.shape()));
    }
  }
}

AttentionOutput attend_with_prefix(Var queries, Var keys, Var values, const std::optional<std::pair<Var, Var>>& prefix,
                                   int n_heads, const ColumnSets* tree) {
  const int d = queries.value().cols();
  if (keys.value().shape() != queries.value().shape() || values.value().shape() != queries.value().shape()) {
    throw ShapeError("attention: queries/keys/values must share a shape");
  }
  if (n_heads <= 0 || d % n_heads != 0) throw ShapeError("attention: n_heads must divide the model width");
  int p = 0;
  if (prefix) {
    const Shape& ks = prefix->first.value().shape();
    const Shape& vs = prefix->second.value().shape();
    if (ks.size() != 2 || ks[1] != d || ks != vs) {
      throw ShapeError("attention: prefix shapes " + shape_str(ks) + " / " + shape_str(vs) + " do not match width " +
                       std::to_string(d));
    }
    p = ks[0];
  }
  const int hd = d / n_heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  AttentionOutput out;
  std::vector<Var> heads;
  for (int h = 0; h < n_heads; ++h) {
    Var q = slice_cols(queries, h * hd, hd);
    Var k = slice_cols(keys, h * hd, hd);
    Var v = slice_cols(values, h * hd, hd);
    if (prefix) {
      k = concat_rows(slice_cols(prefix->first, h * hd, hd), k);
      v = concat_rows(slice_cols(prefix->second, h * hd, hd), v);
    }
    Var scores = scale(matmul_nt(q, k), inv_sqrt);
    Var w = tree ? tree_softmax(scores, *tree) : causal_softmax(scores, p);
    out.weights.push_back(w);
    heads.push_back(matmul(w, v));
  }
  out.output = concat_cols(heads);
  return out;
}

TokenTrie build_trie(const std::vector<std::vector<int>>& sequences) {
  TokenTrie trie;
  std::map<std::pair<int, int>, int> child;  // (parent, token) -> node
  for (const auto& seq : sequences) {
    std::vector<int> path;
    int parent = -1;
    for (int tok : seq) {
      auto [it, fresh] = child.try_emplace({parent, tok}, static_cast<int>(trie.tokens.size()));
      if (fresh) {
        trie.tokens.push_back(tok);
        trie.parents.push_back(parent);
      }
      parent = it->second;
      path.push_back(parent);
    }
    trie.paths.push_back(std::move(path));
  }
  return trie;
}

ForwardTrace forward(Tape& tape, const BackboneParams& params, const PrefixExpert* expert, std::span<const int> tokens,
                     const ForwardOptions& options) {
  const BackboneConfig& cfg = params.config;
  const int t_len = static_cast<int>(tokens.size());
  if (t_len == 0) throw ContractError("forward: empty token sequence");
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) throw IndexError("forward: token id " + std::to_string(id) + " out of range");
  }
  if (expert) check_expert_shape(*expert, cfg);

  ForwardTrace tr;
  auto leaf = [&](const Tensor& t) {
    Var v = options.train_backbone ? tape.parameter(t) : tape.constant(t);
    tr.backbone_leaves.push_back(v);
    return v;
  };
  Var tok = leaf(params.token_embedding);
  Var pos = leaf(params.position_embedding);
  std::vector<int> positions(t_len);
  std::optional<ColumnSets> tree;
  if (options.parents) {
    const auto& par = *options.parents;
    if (static_cast<int>(par.size()) != t_len) throw ShapeError("forward: one parent per token required");
    tree = tree_columns(par, expert ? expert->prefix_len() : 0);
    for (int i = 0; i < t_len; ++i) {
      positions[i] = par[i] < 0 ? 0 : positions[par[i]] + 1;
      if (positions[i] >= cfg.max_context) {
        throw CapacityError("forward: tree path longer than max_context " + std::to_string(cfg.max_context));
      }
    }
  } else {
    if (t_len > cfg.max_context) {
      throw CapacityError("forward: sequence of " + std::to_string(t_len) + " tokens exceeds max_context " +
                          std::to_string(cfg.max_context));
    }
    for (int i = 0; i < t_len; ++i) positions[i] = i;
  }
  Var x = add(embedding(tok, tokens), embedding(pos, positions));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[l];
    Var ln1g = leaf(lp.ln1_gain), ln1b = leaf(lp.ln1_bias);
    Var wq = leaf(lp.wq), bq = leaf(lp.bq), wk = leaf(lp.wk), bk = leaf(lp.bk);
    Var wv = leaf(lp.wv), bv = leaf(lp.bv), wo = leaf(lp.wo), bo = leaf(lp.bo);
    Var ln2g = leaf(lp.ln2_gain), ln2b = leaf(lp.ln2_bias);
    Var w1 = leaf(lp.w1), b1 = leaf(lp.b1), w2 = leaf(lp.w2), b2 = leaf(lp.b2);

    std::optional<std::pair<Var, Var>> prefix;
    if (expert) {
      const PrefixLayer& pl = expert->layers[l];
      Var pk = options.train_prefix ? tape.parameter(pl.key) : tape.constant(pl.key);
      Var pv = options.train_prefix ? tape.parameter(pl.value) : tape.constant(pl.value);
      tr.prefix_leaves.push_back(pk);
      tr.prefix_leaves.push_back(pv);
      prefix = std::make_pair(pk, pv);
    }

    Var h = layer_norm(x, ln1g, ln1b, kLayerNormEps);
    Var q = add_bias(matmul(h, wq), bq);
    Var k = add_bias(matmul(h, wk), bk);
    Var v = add_bias(matmul(h, wv), bv);
    AttentionOutput att = attend_with_prefix(q, k, v, prefix, cfg.n_heads, tree ? &*tree : nullptr);
    if (options.keep_attention) {
      std::vector<Tensor> ws;
      for (const Var& w : att.weights) ws.push_back(w.value());
      tr.attention.push_back(std::move(ws));
    }
    x = add(x, add_bias(matmul(att.output, wo), bo));
    Var h2 = layer_norm(x, ln2g, ln2b, kLayerNormEps);
    Var ff = add_bias(matmul(gelu(add_bias(matmul(h2, w1), b1)), w2), b2);
    x = add(x, ff);
  }
  Var fg = leaf(params.final_gain), fb = leaf(params.final_bias);
  tr.hiddens = layer_norm(x, fg, fb, kLayerNormEps);
  Var rows = options.logit_rows ? select_rows(tr.hiddens, *options.logit_rows) : tr.hiddens;
  tr.logits = matmul_nt(rows, tok);
  return tr;
}

ForwardResult forward(const BackboneParams& params, const PrefixExpert* expert, std::span<const int> tokens) {
  Tape tape;
  ForwardTrace tr = forward(tape, params, expert, tokens);
  return {tr.logits.value(), tr.hiddens.value()};
}

std::vector<float> hidden_feature(const BackboneParams& params, std::span<const int> tokens) {
  if (tokens.empty()) throw ContractError("hidden_feature: empty slot text");
  Tape tape;
  ForwardOptions opt;
  opt.logit_rows = std::vector<int>{static_cast<int>(tokens.size()) - 1};
  ForwardTrace tr = forward(tape, params, nullptr, tokens, opt);
  const Tensor& h = tr.hiddens.value();
  const int last = h.rows() - 1;
  std::vector<float> out(h.cols());
  for (int c = 0; c < h.cols(); ++c) out[c] = h.at(last, c);
  return out;
}

std::vector<float> embedding_feature(const BackboneParams& params, std::span<const int> tokens) {
  if (tokens.empty()) throw ContractError("embedding_feature: empty slot text");
  const Tensor& e = params.token_embedding;
  const int d = e.cols();
  std::vector<double> acc(d, 0.0);
  for (int id : tokens) {
    if (id < 0 || id >= e.rows()) throw IndexError("embedding_feature: token id out of range");
    for (int c = 0; c < d; ++c) acc[c] += e.at(id, c);
  }
  std::vector<float> out(d);
  for (int c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(tokens.size()));
  return out;
}

}  // namespace mope
