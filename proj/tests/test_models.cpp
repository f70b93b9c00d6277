// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "devcloud/models.hpp"

using namespace devcloud;
using namespace devcloud::models;

namespace {

std::shared_ptr<TableModel> four_way() {
  TableModel::Rows rows;
  rows.emplace(std::vector<TokenId>{}, TokenDistribution({0.5, 0.3, 0.15, 0.05}));
  return std::make_shared<TableModel>(std::move(rows));
}

}  // namespace

TEST(TableModel, LongestSuffixWins) {
  std::istringstream in(
      "# default row\n"
      " : 0.25, 0.25, 0.25, 0.25\n"
      "1 : 1, 0, 0, 0\n"
      "2,1 : 0, 1, 0, 0   # trailing comment\n");
  const auto m = parse_table(in);
  EXPECT_EQ(m.vocab_size(), 4u);
  EXPECT_EQ(m.next(std::vector<TokenId>{}).top1(), 0.25);
  EXPECT_EQ(m.next(std::vector<TokenId>{0, 1}).argmax(), 0u);
  EXPECT_EQ(m.next(std::vector<TokenId>{2, 1}).argmax(), 1u);
  EXPECT_EQ(m.next(std::vector<TokenId>{3}).top1(), 0.25);
}

TEST(TableModel, ParseErrorsNameTheLine) {
  const auto code_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_table(in, "t");
    } catch (const Error& e) {
      return std::make_pair(e.code(), std::string(e.what()));
    }
    return std::make_pair(Errc::kOk, std::string());
  };
  EXPECT_EQ(code_of("1 : 0.5, 0.5\n").first, Errc::kMissingDefaultRow);
  auto [c, msg] = code_of(": 0.5, 0.5\n1 0.5 0.5\n");
  EXPECT_EQ(c, Errc::kParse);
  EXPECT_NE(msg.find("t:2"), std::string::npos);
  EXPECT_EQ(code_of(": 0.5, 0.6\n").first, Errc::kInvalidDistribution);
  EXPECT_EQ(code_of(": 0.5, abc\n").first, Errc::kParse);
  EXPECT_EQ(code_of(": 0.5, 0.5\n0 : 1, 0, 0\n").first, Errc::kInvalidDistribution);
  EXPECT_EQ(code_of(": 0.5, 0.5\n5 : 1, 0\n").first, Errc::kInvalidConfig);
}

TEST(NgramModel, AddOneSmoothingMatchesCounts) {
  const std::vector<TokenId> corpus{0, 1, 0, 1, 0};
  NgramModel m(corpus, 2, 2);
  // Independent oracle: count bigrams directly.
  const auto oracle = [&](TokenId prev, TokenId next) {
    double c = 0, total = 0;
    for (std::size_t i = 1; i < corpus.size(); ++i) {
      if (corpus[i - 1] != prev) continue;
      total += 1;
      if (corpus[i] == next) c += 1;
    }
    return (c + 1.0) / (total + 2.0);
  };
  const auto d = m.next(std::vector<TokenId>{1, 0});
  EXPECT_NEAR(d[1], oracle(0, 1), 1e-15);
  EXPECT_NEAR(d[1], 0.75, 1e-15);
  EXPECT_NEAR(m.next(std::vector<TokenId>{1})[0], oracle(1, 0), 1e-15);
  // Empty prefix falls back to unigram counts.
  EXPECT_NEAR(m.next(std::vector<TokenId>{})[0], (3.0 + 1.0) / (5.0 + 2.0), 1e-15);
}

TEST(NgramModel, Errors) {
  const std::vector<TokenId> c{0, 1};
  EXPECT_THROW(NgramModel(c, 3, 2), Error);
  EXPECT_THROW(NgramModel(c, 0, 2), Error);
  EXPECT_THROW(NgramModel(c, 1, 1), Error);
}

TEST(LoadTokens, CommaOrSpaceSeparated) {
  const std::string path = ::testing::TempDir() + "/tokens.txt";
  {
    std::ofstream out(path);
    out << "1, 2,3\n4 5\n";
  }
  EXPECT_EQ(load_tokens(path), (std::vector<TokenId>{1, 2, 3, 4, 5}));
  EXPECT_THROW(load_tokens(path + ".missing"), Error);
}

TEST(LayeredModel, LastLayerIsBaseExactly) {
  auto base = four_way();
  LayeredModel lm(base, 8);
  const std::vector<TokenId> p{1, 2};
  const auto s = lm.layer_signals(p);
  ASSERT_EQ(s.size(), 8u);
  EXPECT_EQ(s.back().provisional_dist, base->next(p));
  EXPECT_EQ(lm.next(p), base->next(p));
  for (std::uint32_t l = 0; l < 8; ++l) {
    EXPECT_EQ(s[l].layer_index, l);
    EXPECT_GE(s[l].top1, s[l].top2);
    EXPECT_NEAR(s[l].margin, s[l].top1 - s[l].top2, 1e-15);
  }
}

TEST(LayeredModel, GoldenMarginsSeed7) {
  LayeredModel lm(four_way(), 8);
  const std::vector<TokenId> p{1, 2};
  const double golden[] = {0.24379810301875629, 0.14040994398706752, 0.11669526144043674, 0.14238011482124813,
                           0.16577443476301906, 0.18375055745632823, 0.19712721965207863, 0.20000000000000001};
  const auto s = lm.layer_signals(p);
  for (int l = 0; l < 8; ++l) EXPECT_DOUBLE_EQ(s[l].margin, golden[l]) << "layer " << l;
}

TEST(LayeredModel, MarginsRiseInExpectation) {
  auto target = make_synthetic_target({});
  LayeredModel lm(target, 12);
  std::vector<double> mean(12, 0.0);
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    const std::vector<TokenId> p{static_cast<TokenId>(i % 64), static_cast<TokenId>(i / 64)};
    const auto s = lm.layer_signals(p);
    for (int l = 0; l < 12; ++l) mean[l] += s[l].margin / n;
  }
  for (int l = 1; l < 12; ++l) EXPECT_GE(mean[l] + 1e-3, mean[l - 1]) << "layer " << l;
}

TEST(Synthetic, DeterministicAndValid) {
  SyntheticPairSpec spec;
  const auto t1 = make_synthetic_target(spec), t2 = make_synthetic_target(spec);
  const auto d = make_synthetic_draft(spec);
  EXPECT_EQ(t1->vocab_size(), 64u);
  EXPECT_EQ(d->vocab_size(), 64u);
  for (TokenId v = 0; v < 64; ++v) {
    const std::vector<TokenId> p{v};
    EXPECT_EQ(t1->next(p), t2->next(p));
    EXPECT_NE(t1->next(p), d->next(p));
  }
  spec.seed = 2;
  EXPECT_NE(make_synthetic_target(spec)->next(std::vector<TokenId>{0}), t1->next(std::vector<TokenId>{0}));
}

TEST(Importance, EntropyExamples) {
  EXPECT_NEAR(entropy_importance(TokenDistribution({0.5, 0.5, 0.0, 0.0})), 0.5, 1e-15);
  EXPECT_NEAR(entropy_importance(TokenDistribution::uniform(8)), 0.0, 1e-12);
  EXPECT_NEAR(entropy_importance(TokenDistribution::one_hot(8, 3)), 1.0, 1e-15);
  EXPECT_EQ(entropy_importance(TokenDistribution({1.0})), 1.0);
}

TEST(Importance, EntropyProviderUsesModelWhenNoDist) {
  auto m = four_way();
  EntropyImportance imp(m);
  const std::vector<TokenId> p{0, 1, 2};
  EXPECT_DOUBLE_EQ(imp.score(p, 2), entropy_importance(m->next(std::vector<TokenId>{0, 1})));
  const auto one_hot = TokenDistribution::one_hot(4, 0);
  EXPECT_DOUBLE_EQ(imp.score(p, 2, &one_hot), 1.0);
  EXPECT_THROW(imp.score(p, 3), Error);
}

TEST(Importance, TraceParseAndLookup) {
  std::istringstream in("0 1.5\n# gap\n2 0.25\n");
  const auto t = parse_trace(in);
  const std::vector<TokenId> p{9, 9, 9};
  EXPECT_DOUBLE_EQ(t.score(p, 0), 1.5);
  EXPECT_DOUBLE_EQ(t.score(p, 2), 0.25);
  try {
    t.score(p, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kPositionNotInTrace);
  }
  std::istringstream bad("0 1 2\n");
  EXPECT_THROW(parse_trace(bad), Error);
}

TEST(Importance, LomaxQuantileClosedForm) {
  // Survival (1 + x)^-2 for alpha 2, scale 1: the 0.75 quantile is 1.
  EXPECT_NEAR(lomax_quantile(0.75, 2.0, 1.0), 1.0, 1e-15);
  EXPECT_NEAR(lomax_quantile(0.0, 2.0, 3.0), 0.0, 1e-15);
}

TEST(Importance, LomaxTopDecileCarriesMajorityOfMass) {
  LomaxImportance imp(2.0, 1.0, 11);
  std::vector<double> xs;
  for (TokenId i = 0; i < 100000; ++i) {
    const std::vector<TokenId> p{i % 97, i / 97, i};
    xs.push_back(imp.score(p, 2));
  }
  std::sort(xs.begin(), xs.end(), std::greater<>());
  double top = 0.0, all = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    all += xs[i];
    if (i < xs.size() / 10) top += xs[i];
  }
  EXPECT_GT(top / all, 0.5);
}

TEST(Importance, LomaxIsKeyedByPrefix) {
  LomaxImportance imp(2.0, 1.0, 3);
  const std::vector<TokenId> a{1, 2, 3}, b{1, 2, 4};
  EXPECT_DOUBLE_EQ(imp.score(a, 1), imp.score(b, 1));
  EXPECT_NE(imp.score(a, 2), imp.score(b, 2));
  EXPECT_THROW(LomaxImportance(0.0, 1.0, 1), Error);
}
