#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "helpers.hpp"
#include "mope/errors.hpp"
#include "mope/eval.hpp"

using namespace mope;

namespace {

struct Cell {
  std::string dialogue;
  int turn;
  std::string domain, slot, gold, pred;
};

std::vector<Cell> random_cells(std::mt19937_64& rng) {
  const std::vector<std::string> values{"none", "none", "north", "south", "cheap", "2"};
  std::vector<Cell> cells;
  const int dialogues = 1 + static_cast<int>(rng() % 3);
  const int slots = 1 + static_cast<int>(rng() % 3);
  for (int d = 0; d < dialogues; ++d) {
    const int turns = 1 + static_cast<int>(rng() % 3);
    for (int t = 0; t < turns; ++t) {
      for (int s = 0; s < slots; ++s) {
        const std::string domain = s % 2 ? "hotel" : "taxi";
        const std::string gold = values[rng() % values.size()];
        const std::string pred = rng() % 2 ? gold : values[rng() % values.size()];
        cells.push_back({"d" + std::to_string(d), t, domain, "s" + std::to_string(s), gold, pred});
      }
    }
  }
  return cells;
}

void to_grids(const std::vector<Cell>& cells, ValueGrid& preds, ValueGrid& golds) {
  for (const auto& c : cells) {
    golds[{c.dialogue, c.turn, c.domain, c.slot}] = c.gold;
    preds[{c.dialogue, c.turn, c.domain, c.slot}] = c.pred;
  }
}

SlotFeature feat(const std::string& name, std::vector<float> v) { return {{"d", name}, std::move(v), FeatureMode::hidden}; }

}  // namespace

TEST(Metrics, RandomGridsAgreeWithDirectCounting) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto cells = random_cells(rng);
    ValueGrid preds, golds;
    to_grids(cells, preds, golds);

    long sa_ok = 0, nn_ok = 0, nn_total = 0, partial = 0, over = 0, other = 0;
    std::set<std::pair<std::string, int>> turns, bad_turns;
    for (const auto& c : cells) {
      turns.insert({c.dialogue, c.turn});
      sa_ok += c.pred == c.gold;
      if (c.gold != "none") nn_total += 1, nn_ok += c.pred == c.gold;
      if (c.pred != c.gold) {
        bad_turns.insert({c.dialogue, c.turn});
        if (c.pred == "none") ++partial;
        else if (c.gold == "none") ++over;
        else ++other;
      }
    }
    const auto sa = slot_accuracy(preds, golds, true);
    EXPECT_EQ(sa.correct, sa_ok);
    EXPECT_EQ(sa.total, static_cast<long>(cells.size()));
    const auto nn = slot_accuracy(preds, golds, false);
    EXPECT_EQ(nn.correct, nn_ok);
    EXPECT_EQ(nn.total, nn_total);
    EXPECT_EQ(nn.vacuous, nn_total == 0);
    if (nn_total == 0) EXPECT_EQ(nn.value(), 1.0);
    const auto jga = joint_goal_accuracy(preds, golds);
    EXPECT_EQ(jga.total, static_cast<long>(turns.size()));
    EXPECT_EQ(jga.correct, static_cast<long>(turns.size() - bad_turns.size()));
    EXPECT_LE(jga.value(), sa.value() + 1e-12);
    const auto e = error_taxonomy(preds, golds);
    EXPECT_EQ(e.partial, partial);
    EXPECT_EQ(e.over, over);
    EXPECT_EQ(e.other, other);
    EXPECT_EQ(e.total(), sa.total - sa.correct);
  }
}

TEST(Metrics, PerfectPredictionsScoreOne) {
  std::mt19937_64 rng(1);
  auto cells = random_cells(rng);
  ValueGrid preds, golds;
  to_grids(cells, preds, golds);
  auto r = evaluate_grid(golds, golds);
  EXPECT_EQ(r.overall.sa_with_none.value(), 1.0);
  EXPECT_EQ(r.overall.jga.value(), 1.0);
  EXPECT_EQ(r.overall.errors.total(), 0);
}

TEST(Metrics, CoverageMismatchIsContractError) {
  ValueGrid golds{{{"d", 0, "hotel", "area"}, "north"}};
  ValueGrid missing;
  ValueGrid extra = golds;
  extra[{"d", 1, "hotel", "area"}] = "none";
  EXPECT_THROW(slot_accuracy(missing, golds, true), ContractError);
  EXPECT_THROW(joint_goal_accuracy(extra, golds), ContractError);
  EXPECT_THROW(grid_from_records({{"d", 0, "hotel", "area", "x", "0"}, {"d", 0, "hotel", "area", "y", "0"}}),
               ContractError);
}

TEST(Metrics, ReportSplitsDomainsAndFlagsEmptyDenominators) {
  ValueGrid golds{{{"d", 0, "hotel", "area"}, "none"}, {{"d", 0, "taxi", "dest"}, "cambridge"}};
  ValueGrid preds{{{"d", 0, "hotel", "area"}, "none"}, {{"d", 0, "taxi", "dest"}, "none"}};
  auto r = evaluate_grid(preds, golds);
  ASSERT_EQ(r.domains.size(), 2u);
  EXPECT_TRUE(r.domains["hotel"].sa_without_none.vacuous);
  EXPECT_EQ(r.domains["taxi"].errors.partial, 1);
  auto j = eval_report_to_json(r);
  EXPECT_TRUE(j["domains"]["hotel"]["sa_without_none"]["zero_denominator"].get<bool>());
  EXPECT_EQ(j["overall"]["jga"]["value"].get<double>(), 0.0);
  EXPECT_EQ(j["overall"]["sa_with_none"]["correct"].get<long>(), 1);
}

TEST(Cosine, ClosedFormsAndZeroNorm) {
  EXPECT_DOUBLE_EQ(cosine({1, 0}, {0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(cosine({1, 1}, {2, 2}), 1.0);
  EXPECT_DOUBLE_EQ(cosine({1, 0}, {-3, 0}), -1.0);
  EXPECT_EQ(cosine({0, 0}, {1, 2}), 0.0);
  EXPECT_THROW(cosine({1}, {1, 2}), ShapeError);
}

TEST(Acs, HandComputedCase) {
  std::vector<SlotFeature> train{feat("a", {1, 0}), feat("b", {1, 1}), feat("c", {0, 1}), feat("e", {-1, 0})};
  ClusterModel m;
  m.k = 2;
  m.centroids = {{1, 0.5f}, {-1, 0}};
  m.assignments = {{{"d", "a"}, 0}, {{"d", "b"}, 0}, {{"d", "c"}, 0}, {{"d", "e"}, 1}};
  std::vector<SlotFeature> test{feat("t", {2, 0})};
  auto e = average_cosine_similarity(train, m, test);
  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_EQ(e.train_pairs, 3);
  EXPECT_NEAR(e.train_acs, (r + 0.0 + r) / 3.0, 1e-12);
  EXPECT_EQ(e.test_pairs, 3);
  EXPECT_NEAR(e.test_acs, (1.0 + r + 0.0) / 3.0, 1e-12);
}

TEST(Acs, RandomCasesAgreeWithPairwiseOracle) {
  std::mt19937_64 rng(7);
  std::normal_distribution<float> dist;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 6), k = 1 + static_cast<int>(rng() % 3);
    std::vector<SlotFeature> train, test;
    ClusterModel m;
    m.k = k;
    for (int c = 0; c < k; ++c) m.centroids.push_back({dist(rng), dist(rng), dist(rng)});
    for (int i = 0; i < n; ++i) {
      train.push_back(feat("s" + std::to_string(i), {dist(rng), dist(rng), dist(rng)}));
      m.assignments[train.back().slot] = static_cast<int>(rng() % k);
    }
    for (int i = 0; i < 3; ++i) test.push_back(feat("t" + std::to_string(i), {dist(rng), dist(rng), dist(rng)}));
    double sum = 0.0;
    long pairs = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        if (m.assignments[train[i].slot] == m.assignments[train[j].slot]) sum += cosine(train[i].vector, train[j].vector), ++pairs;
      }
    }
    double tsum = 0.0;
    long tpairs = 0;
    for (const auto& t : test) {
      const int c = assign_nearest(m, t);
      for (const auto& f : train) {
        if (m.assignments[f.slot] == c) tsum += cosine(t.vector, f.vector), ++tpairs;
      }
    }
    auto e = average_cosine_similarity(train, m, test);
    EXPECT_EQ(e.train_pairs, pairs);
    EXPECT_NEAR(e.train_acs, pairs ? sum / pairs : 0.0, 1e-12);
    EXPECT_EQ(e.test_pairs, tpairs);
    EXPECT_NEAR(e.test_acs, tpairs ? tsum / tpairs : 0.0, 1e-12);
  }
}

TEST(SimilarityMatrix, SymmetricUnitDiagonalAndPairwiseCosine) {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> dist;
  std::vector<SlotFeature> fs;
  for (int i = 0; i < 6; ++i) fs.push_back(feat("s" + std::to_string(i), {dist(rng), dist(rng), dist(rng), dist(rng)}));
  fs.push_back(feat("zero", {0, 0, 0, 0}));
  auto m = similarity_matrix(fs);
  ASSERT_EQ(m.values.size(), fs.size());
  EXPECT_EQ(m.zero_norm, (std::vector<std::string>{"d zero"}));
  for (std::size_t i = 0; i < fs.size(); ++i) {
    EXPECT_EQ(m.values[i][i], i + 1 < fs.size() ? 1.0 : 0.0);
    for (std::size_t j = 0; j < fs.size(); ++j) {
      EXPECT_EQ(m.values[i][j], m.values[j][i]);
      EXPECT_GE(m.values[i][j], -1.0);
      EXPECT_LE(m.values[i][j], 1.0);
      if (i != j) EXPECT_NEAR(m.values[i][j], cosine(fs[i].vector, fs[j].vector), 1e-15);
    }
  }
  const std::string csv = similarity_csv(m);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "slot,d s0,d s1,d s2,d s3,d s4,d s5,d zero");
  EXPECT_NE(similarity_svg(m).find("<svg"), std::string::npos);
}

TEST(Spearman, KnownValuesTiesAndDegenerateInputs) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}), 0.8, 1e-12);
  // Ranks with ties: x -> 1,2.5,2.5,4 ; y -> 1,2,3,4.
  EXPECT_NEAR(spearman({1, 2, 2, 3}, {1, 2, 3, 4}), 4.5 / std::sqrt(4.5 * 5.0), 1e-12);
  EXPECT_TRUE(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
  EXPECT_TRUE(std::isnan(spearman({1}, {1})));
  EXPECT_THROW(spearman({1, 2}, {1}), ShapeError);
}

TEST(Formatting, SixDecimalsAndCsvQuoting) {
  EXPECT_EQ(fmt6(0.5), "0.500000");
  EXPECT_EQ(fmt6(-1e-9), "0.000000");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_field("plain"), "plain");
}

TEST(TaxonomySvg, OneBarPerCategory) {
  auto svg = taxonomy_svg({{"hotel", {3, 1, 2}}});
  EXPECT_NE(svg.find("partial: 3"), std::string::npos);
  EXPECT_NE(svg.find("over: 1"), std::string::npos);
  EXPECT_NE(svg.find("other: 2"), std::string::npos);
}
