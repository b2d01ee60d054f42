#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mope/tensor.hpp"

namespace mope {

struct BackboneConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int max_context = 128;
  int prefix_len = 10;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws ContractError
  bool operator==(const BackboneConfig&) const = default;
};

nlohmann::json config_to_json(const BackboneConfig& c);
BackboneConfig config_from_json(const nlohmann::json& j);

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

// Frozen transformer weights. The output projection is tied to the token
// embedding table.
struct BackboneParams {
  BackboneConfig config;
  Tensor token_embedding;     // vocab x d_model
  Tensor position_embedding;  // max_context x d_model
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;

  // Canonical, stable ordering used for checkpoints and optimizers.
  std::vector<std::pair<std::string, Tensor>> named() const;
  static BackboneParams from_named(const BackboneConfig& config,
                                   const std::vector<std::pair<std::string, Tensor>>& named);
  std::size_t parameter_count() const;
  bool bit_equal(const BackboneParams& other) const;
};

BackboneParams init_backbone(const BackboneConfig& config, std::uint64_t seed);

// Key/value prefix for one layer; each is prefix_len x d_model.
struct PrefixLayer {
  Tensor key;
  Tensor value;
};

// One prefix expert: 2L matrices, a key and a value prefix per layer.
struct PrefixExpert {
  int index = 0;
  std::vector<PrefixLayer> layers;

  int prefix_len() const { return layers.empty() ? 0 : layers[0].key.shape()[0]; }
  int matrix_count() const { return 2 * static_cast<int>(layers.size()); }
  bool bit_equal(const PrefixExpert& other) const;
};

// Checks 2L matrices of prefix_len x d_model.
void check_expert_shape(const PrefixExpert& expert, const BackboneConfig& config);

// Per-head attention with the layer's key/value prefix prepended. Queries,
// keys and values are T x d_model; prefixes, when present, p x d_model.
// Every query row sees all p prefix slots plus the causally visible tokens.
struct AttentionOutput {
  Var output;                 // T x d_model (heads concatenated)
  std::vector<Var> weights;   // per head, T x (p + T); invisible entries are 0
};
// With `tree` set, rows attend along the token tree instead of causally.
AttentionOutput attend_with_prefix(Var queries, Var keys, Var values, const std::optional<std::pair<Var, Var>>& prefix,
                                   int n_heads, const ColumnSets* tree = nullptr);

// Sequences packed into a prefix tree: shared leading tokens are stored
// once. paths[s][i] is the node holding token i of sequence s.
struct TokenTrie {
  std::vector<int> tokens;
  std::vector<int> parents;  // -1 for roots; always smaller than the node index
  std::vector<std::vector<int>> paths;
};
TokenTrie build_trie(const std::vector<std::vector<int>>& sequences);

struct ForwardOptions {
  bool train_backbone = false;
  bool train_prefix = false;
  bool keep_attention = false;
  // When set, logits are produced for these rows only (in this order).
  std::optional<std::vector<int>> logit_rows;
  // When set, tokens form a tree (see TokenTrie): positions are depths and a
  // token sees only its ancestors. Every path computes exactly what the flat
  // sequence along it would.
  std::optional<std::vector<int>> parents;
};

struct ForwardTrace {
  Var logits;   // rows x vocab
  Var hiddens;  // T x d_model, final layer after the last layer norm
  // Leaves created for the backbone, in BackboneParams::named() order.
  std::vector<Var> backbone_leaves;
  // Prefix leaves, key then value for each layer.
  std::vector<Var> prefix_leaves;
  // attention[layer][head]
  std::vector<std::vector<Tensor>> attention;
};

// Records a forward pass on the tape. Throws CapacityError when the token
// sequence exceeds max_context.
ForwardTrace forward(Tape& tape, const BackboneParams& params, const PrefixExpert* expert,
                     std::span<const int> tokens, const ForwardOptions& options = {});

struct ForwardResult {
  Tensor logits;
  Tensor hiddens;
};
ForwardResult forward(const BackboneParams& params, const PrefixExpert* expert, std::span<const int> tokens);

// Final-layer hidden state at the last position, no expert attached.
std::vector<float> hidden_feature(const BackboneParams& params, std::span<const int> tokens);
// Mean of the token-embedding rows.
std::vector<float> embedding_feature(const BackboneParams& params, std::span<const int> tokens);

}  // namespace mope
