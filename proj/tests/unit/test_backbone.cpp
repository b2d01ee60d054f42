#include <gtest/gtest.h>

#include <cstring>

#include "../common/reference_model.hpp"
#include "helpers.hpp"
#include "mope/backbone.hpp"
#include "mope/errors.hpp"
#include "mope/experts.hpp"

using namespace mope;
using mope::test::random_tensor;
using mope::test::tiny_config;

namespace {

// Backbone with O(1) random weights so every path through the network matters.
BackboneParams scrambled_backbone(const BackboneConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto named = init_backbone(c, seed).named();
  for (auto& [name, t] : named) t = random_tensor(t.shape(), rng, 0.3f);
  return BackboneParams::from_named(c, named);
}

PrefixExpert scrambled_expert(const BackboneConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PrefixExpert e = init_expert(c, 0, seed);
  for (auto& l : e.layers) {
    l.key = random_tensor(l.key.shape(), rng, 0.5f);
    l.value = random_tensor(l.value.shape(), rng, 0.5f);
  }
  return e;
}

}  // namespace

TEST(BackboneConfig, HeadWidthAndValidation) {
  BackboneConfig c;
  c.vocab_size = 10;
  EXPECT_EQ(c.head_dim(), 16);
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Backbone, InitIsDeterministic) {
  const auto c = tiny_config();
  EXPECT_TRUE(init_backbone(c, 3).bit_equal(init_backbone(c, 3)));
  EXPECT_FALSE(init_backbone(c, 3).bit_equal(init_backbone(c, 4)));
}

TEST(Backbone, ForwardShapes) {
  const auto c = tiny_config();
  const auto p = init_backbone(c, 1);
  std::vector<int> toks{1, 4, 5, 6};
  auto r = forward(p, nullptr, toks);
  EXPECT_EQ(r.logits.shape(), (Shape{4, c.vocab_size}));
  EXPECT_EQ(r.hiddens.shape(), (Shape{4, c.d_model}));
  std::vector<int> one{5};
  EXPECT_EQ(forward(p, nullptr, one).hiddens.shape(), (Shape{1, c.d_model}));
}

TEST(Backbone, CapacityAndIndexErrors) {
  const auto c = tiny_config();
  const auto p = init_backbone(c, 1);
  std::vector<int> too_long(c.max_context + 1, 4);
  EXPECT_THROW(forward(p, nullptr, too_long), CapacityError);
  std::vector<int> bad{c.vocab_size};
  EXPECT_THROW(forward(p, nullptr, bad), IndexError);
}

TEST(Backbone, MatchesDoublePrecisionReference) {
  const auto c = tiny_config();
  const auto p = scrambled_backbone(c, 5);
  const auto e = scrambled_expert(c, 6);
  std::vector<int> toks{3, 7, 1, 9, 4, 4, 11};
  for (const PrefixExpert* ex : {static_cast<const PrefixExpert*>(nullptr), &e}) {
    auto got = forward(p, ex, toks);
    auto want = reference::forward(reference::weights_of(p, ex), toks);
    for (int i = 0; i < got.logits.rows(); ++i) {
      for (int v = 0; v < got.logits.cols(); ++v) EXPECT_NEAR(got.logits.at(i, v), want.logits[i][v], 1e-4);
    }
  }
}

TEST(Attention, PrefixRowsHaveLengthPPlusTAndSumToOne) {
  const auto c = tiny_config();
  const auto p = scrambled_backbone(c, 2);
  const auto e = scrambled_expert(c, 3);
  std::vector<int> toks{2, 5, 8, 3, 3};
  Tape tape;
  ForwardOptions opt;
  opt.keep_attention = true;
  auto tr = forward(tape, p, &e, toks, opt);
  ASSERT_EQ(static_cast<int>(tr.attention.size()), c.n_layers);
  for (const auto& layer : tr.attention) {
    ASSERT_EQ(static_cast<int>(layer.size()), c.n_heads);
    for (const auto& w : layer) {
      ASSERT_EQ(w.shape(), (Shape{5, c.prefix_len + 5}));
      for (int r = 0; r < 5; ++r) {
        double sum = 0.0;
        for (int col = 0; col < w.cols(); ++col) {
          const bool visible = col < c.prefix_len + r + 1;
          if (!visible) EXPECT_EQ(w.at(r, col), 0.0f);
          if (visible && col < c.prefix_len) EXPECT_GT(w.at(r, col), 0.0f);
          sum += w.at(r, col);
        }
        EXPECT_NEAR(sum, 1.0, 1e-5);
      }
    }
  }
}

TEST(Attention, PrefixShapeMismatchIsShapeError) {
  const auto c = tiny_config();
  const auto p = init_backbone(c, 1);
  PrefixExpert e = init_expert(c, 0, 1);
  e.layers[1].key = Tensor::zeros({c.prefix_len, c.d_model + 1});
  std::vector<int> toks{1, 2};
  EXPECT_THROW(forward(p, &e, toks), ShapeError);
}

TEST(Attention, PrefixGradientReachesFirstLayer) {
  const auto c = tiny_config();
  const auto p = scrambled_backbone(c, 8);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto e = scrambled_expert(c, 20 + trial);
    std::vector<int> toks;
    for (int i = 0; i < 6; ++i) toks.push_back(static_cast<int>(rng() % c.vocab_size));
    Tape tape;
    ForwardOptions opt;
    opt.train_prefix = true;
    auto tr = forward(tape, p, &e, toks, opt);
    std::vector<int> labels(6, 1), mask(6, 1);
    Gradients g = tape.backward(cross_entropy(tr.logits, labels, mask));
    double norm = 0.0;
    for (float v : g.at(tr.prefix_leaves[0].id).data()) norm += std::abs(v);
    for (float v : g.at(tr.prefix_leaves[1].id).data()) norm += std::abs(v);
    EXPECT_GT(norm, 0.0);
  }
}

TEST(TokenTrie, SharesCommonPrefixes) {
  TokenTrie t = build_trie({{1, 2, 3}, {1, 2, 4}, {5}});
  EXPECT_EQ(t.tokens, (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_EQ(t.parents, (std::vector<int>{-1, 0, 1, 1, -1}));
  EXPECT_EQ(t.paths[1], (std::vector<int>{0, 1, 3}));
}

TEST(TokenTrie, TreeForwardIsBitIdenticalToFlatForwards) {
  const auto c = tiny_config();
  const auto p = scrambled_backbone(c, 9);
  const auto e = scrambled_expert(c, 10);
  const std::vector<std::vector<int>> seqs{{1, 2, 3, 4, 5}, {1, 2, 3, 6}, {1, 2, 7, 8, 9, 10}, {11, 3}, {1, 2, 3, 4, 5, 6}};
  const TokenTrie trie = build_trie(seqs);
  for (const PrefixExpert* ex : {static_cast<const PrefixExpert*>(nullptr), &e}) {
    Tape tape;
    ForwardOptions opt;
    opt.parents = trie.parents;
    auto tr = forward(tape, p, ex, trie.tokens, opt);
    const Tensor& tree_logits = tr.logits.value();
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      auto flat = forward(p, ex, seqs[s]);
      for (std::size_t i = 0; i < seqs[s].size(); ++i) {
        const int node = trie.paths[s][i];
        EXPECT_EQ(std::memcmp(&flat.logits.data()[i * flat.logits.cols()], &tree_logits.data()[node * flat.logits.cols()],
                              sizeof(float) * flat.logits.cols()),
                  0)
            << "sequence " << s << " position " << i;
      }
    }
  }
}

TEST(TokenTrie, DepthLimitedByContext) {
  const auto c = tiny_config();
  const auto p = init_backbone(c, 1);
  std::vector<int> chain(c.max_context + 1, 3);
  const TokenTrie trie = build_trie({chain});
  Tape tape;
  ForwardOptions opt;
  opt.parents = trie.parents;
  EXPECT_THROW(forward(tape, p, nullptr, trie.tokens, opt), CapacityError);
}

TEST(Features, HiddenAndEmbeddingWidths) {
  const auto c = tiny_config();
  const auto p = scrambled_backbone(c, 1);
  std::vector<int> toks{4, 5};
  EXPECT_EQ(static_cast<int>(hidden_feature(p, toks).size()), c.d_model);
  auto emb = embedding_feature(p, toks);
  ASSERT_EQ(static_cast<int>(emb.size()), c.d_model);
  for (int j = 0; j < c.d_model; ++j) {
    EXPECT_FLOAT_EQ(emb[j], static_cast<float>((static_cast<double>(p.token_embedding.at(4, j)) + p.token_embedding.at(5, j)) / 2));
  }
  // The hidden feature is the last row of the final hidden states.
  auto r = forward(p, nullptr, toks);
  auto h = hidden_feature(p, toks);
  for (int j = 0; j < c.d_model; ++j) EXPECT_EQ(h[j], r.hiddens.at(1, j));
}
