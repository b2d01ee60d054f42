#include <gtest/gtest.h>

#include <fstream>

#include "helpers.hpp"
#include "mope/checkpoint.hpp"
#include "mope/errors.hpp"
#include "mope/experts.hpp"

using namespace mope;
using mope::test::tiny_config;

TEST(ExpertPool, ShapesAreTwoLMatricesOfPByD) {
  BackboneConfig c;
  c.vocab_size = 20;
  auto pool = init_pool(c, 3, 1);
  ASSERT_EQ(pool.size(), 3);
  for (const auto& e : pool.experts) {
    EXPECT_EQ(e.matrix_count(), 2 * c.n_layers);
    for (const auto& l : e.layers) {
      EXPECT_EQ(l.key.shape(), (Shape{10, 64}));
      EXPECT_EQ(l.value.shape(), (Shape{10, 64}));
    }
    EXPECT_NO_THROW(check_expert_shape(e, c));
  }
}

TEST(ExpertPool, InitialisationIsSmallDeterministicAndDistinct) {
  const auto c = tiny_config();
  auto a = init_pool(c, 3, 7), b = init_pool(c, 3, 7);
  EXPECT_TRUE(a.bit_equal(b));
  EXPECT_FALSE(a.experts[0].bit_equal(a.experts[1]));
  EXPECT_FALSE(a.bit_equal(init_pool(c, 3, 8)));
  double sq = 0.0;
  std::size_t n = 0;
  for (const auto& e : a.experts) {
    for (const auto& l : e.layers) {
      for (float v : l.key.data()) sq += v * v, ++n;
      for (float v : l.value.data()) sq += v * v, ++n;
    }
  }
  EXPECT_NEAR(std::sqrt(sq / n), 0.02, 0.004);
}

TEST(ExpertPool, SelectChecksRange) {
  auto pool = init_pool(tiny_config(), 2, 1);
  EXPECT_EQ(select_expert(pool, 1).index, 1);
  EXPECT_THROW(select_expert(pool, 2), ContractError);
  EXPECT_THROW(select_expert(pool, -1), ContractError);
  EXPECT_THROW(init_pool(tiny_config(), 0, 1), ContractError);
}

TEST(ExpertPool, SaveLoadRoundTripIsBitExact) {
  mope::test::TempDir dir;
  auto pool = init_pool(tiny_config(), 3, 5);
  pool.provenance.mode = "embedding";
  save_pool(dir.path(), pool);
  EXPECT_TRUE(load_pool(dir.path()).bit_equal(pool));
}

TEST(ExpertPool, TruncatedPayloadIsFormatError) {
  mope::test::TempDir dir;
  save_pool(dir.path(), init_pool(tiny_config(), 2, 5));
  const auto bin = dir / "expert_1.bin";
  std::filesystem::resize_file(bin, std::filesystem::file_size(bin) - 4);
  EXPECT_THROW(load_pool(dir.path()), FormatError);
}

TEST(ExpertPool, MissingExpertIsFormatError) {
  mope::test::TempDir dir;
  save_pool(dir.path(), init_pool(tiny_config(), 2, 5));
  std::filesystem::remove(dir / "expert_1.json");
  EXPECT_THROW(load_pool(dir.path()), FormatError);
}

TEST(ExpertPool, DeclaredKMustMatchExperts) {
  mope::test::TempDir dir;
  save_pool(dir.path(), init_pool(tiny_config(), 2, 5));
  nlohmann::json j;
  std::ifstream(dir / "pool.json") >> j;
  j["k"] = 3;
  std::ofstream(dir / "pool.json") << j.dump();
  EXPECT_THROW(load_pool(dir.path()), FormatError);
}

TEST(Checkpoint, BackboneRoundTripAndVersionCheck) {
  mope::test::TempDir dir;
  const auto c = tiny_config(6);
  auto p = init_backbone(c, 3);
  std::vector<std::string> words{"<pad>", "<unk>", "</a>", "answer", "x", "y"};
  save_backbone(dir / "bb", p, words);
  auto back = load_backbone(dir / "bb");
  EXPECT_TRUE(back.params.bit_equal(p));
  EXPECT_EQ(back.vocab, words);
  nlohmann::json m;
  std::ifstream(dir / "bb.json") >> m;
  m["format"] = "mope-ckpt-0";
  std::ofstream(dir / "bb.json") << m.dump();
  EXPECT_THROW(load_backbone(dir / "bb"), FormatError);
}
