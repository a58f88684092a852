#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "oracles.hpp"
#include "test_util.hpp"
#include "wavbert/decode.hpp"

using namespace wavbert;
using namespace wavbert::testing;

namespace {

constexpr int kBlank = Vocabulary::kBlank;
constexpr int a = 4, b = 5, c = 6;

// Log-probs whose per-frame argmax is `frames`, with a fixed peak posterior.
Tensor peaked(const std::vector<int>& frames, std::size_t vocab = 8, double peak = 0.8) {
  const double rest = (1.0 - peak) / static_cast<double>(vocab - 1);
  std::vector<double> v(frames.size() * vocab, std::log(rest));
  for (std::size_t t = 0; t < frames.size(); ++t) v[t * vocab + static_cast<std::size_t>(frames[t])] = std::log(peak);
  return Tensor({frames.size(), vocab}, v);
}

TokenSeq chars(const std::string& s) { return TokenSeq(s.begin(), s.end()); }

TEST(GreedyCtc, CollapseRules) {
  EXPECT_EQ(ctc_greedy_decode(peaked({kBlank, a, a, kBlank, b})).tokens, (TokenSeq{a, b}));
  EXPECT_EQ(ctc_greedy_decode(peaked({a, kBlank, a})).tokens, (TokenSeq{a, a}));
  const auto blank = ctc_greedy_decode(peaked({kBlank, kBlank, kBlank}));
  EXPECT_TRUE(blank.tokens.empty());
  EXPECT_EQ(blank.confidence, 0.0);
}

TEST(GreedyCtc, ConfidenceIsMeanPeakOverNonBlankFrames) {
  std::vector<double> v(3 * 8, std::log(0.1 / 7));
  v[0 * 8 + a] = std::log(0.9);
  v[1 * 8 + kBlank] = std::log(0.9);
  v[2 * 8 + b] = std::log(0.6);
  for (std::size_t k = 0; k < 8; ++k) {
    if (k != static_cast<std::size_t>(b)) v[2 * 8 + k] = std::log(0.4 / 7);
  }
  const auto h = ctc_greedy_decode(Tensor({3, 8}, v));
  EXPECT_EQ(h.tokens, (TokenSeq{a, b}));
  EXPECT_NEAR(h.confidence, 0.75, 1e-12);
  EXPECT_EQ(h.source, HeadId::Ctc1);
}

TEST(GreedyCtc, AdjacentDuplicatesOnlyFromBlankSeparatedRepeats) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> frames(1 + rng.below(12));
    for (int& f : frames) {
      const auto r = rng.below(4);
      f = r == 0 ? kBlank : a + static_cast<int>(r) - 1;
    }
    const auto h = ctc_greedy_decode(peaked(frames));
    // Reconstruction: the collapse of the argmax frames.
    EXPECT_EQ(h.tokens, oracle::collapse(frames));
    for (std::size_t i = 1; i < h.tokens.size(); ++i) {
      if (h.tokens[i] != h.tokens[i - 1]) continue;
      // Some blank frame must separate the two runs.
      bool separated = false;
      std::size_t seen = 0;
      int prev = -1;
      for (int f : frames) {
        if (f != prev && f != kBlank) ++seen;
        if (f == kBlank && seen == i) separated = true;
        prev = f;
      }
      EXPECT_TRUE(separated);
    }
    EXPECT_GE(h.confidence, 0.0);
    EXPECT_LE(h.confidence, 1.0);
  }
}

TEST(CeDecode, OneHotUniformAndAllPad) {
  std::vector<double> v(3 * 8, 0.0);
  const TokenSeq want{a, b, c};
  for (std::size_t i = 0; i < 3; ++i) v[i * 8 + static_cast<std::size_t>(want[i])] = 30.0;
  const auto h = ce_decode(Tensor({3, 8}, v));
  EXPECT_EQ(h.tokens, want);
  EXPECT_GT(h.confidence, 0.999);
  EXPECT_EQ(h.source, HeadId::Ce);

  std::vector<double> u(2 * 8, 0.0);
  for (std::size_t i = 0; i < 2; ++i) u[i * 8 + static_cast<std::size_t>(a)] = 1e-12;  // break the tie toward a
  EXPECT_NEAR(ce_decode(Tensor({2, 8}, u)).confidence, 1.0 / 8.0, 1e-9);

  std::vector<double> pad(4 * 8, 0.0);
  for (std::size_t i = 0; i < 4; ++i) pad[i * 8 + Vocabulary::kPad] = 10.0;
  const auto p = ce_decode(Tensor({4, 8}, pad));
  EXPECT_TRUE(p.tokens.empty());
  EXPECT_EQ(p.confidence, 0.0);
}

TEST(CeDecode, StripsSpecials) {
  std::vector<double> v(4 * 8, 0.0);
  const int ids[4] = {a, Vocabulary::kMask, Vocabulary::kUnk, b};
  for (std::size_t i = 0; i < 4; ++i) v[i * 8 + static_cast<std::size_t>(ids[i])] = 20.0;
  EXPECT_EQ(ce_decode(Tensor({4, 8}, v)).tokens, (TokenSeq{a, b}));
}

TEST(Select, HigherConfidenceWinsTiesGoToCtc2) {
  const Hypothesis h2{{a}, 0.9, HeadId::Ctc2};
  const Hypothesis hc{{b}, 0.4, HeadId::Ce};
  EXPECT_EQ(select_output(h2, hc).source, HeadId::Ctc2);
  EXPECT_EQ(select_output(Hypothesis{{a}, 0.4, HeadId::Ctc2}, Hypothesis{{b}, 0.9, HeadId::Ce}).source, HeadId::Ce);
  EXPECT_EQ(select_output(Hypothesis{{a}, 0.5, HeadId::Ctc2}, Hypothesis{{b}, 0.5, HeadId::Ce}).source, HeadId::Ctc2);
  const auto empty = select_output(Hypothesis{{}, 0.0, HeadId::Ctc2}, Hypothesis{{}, 0.0, HeadId::Ce});
  EXPECT_TRUE(empty.tokens.empty());
  EXPECT_EQ(empty.confidence, 0.0);
  EXPECT_EQ(select_output(std::nullopt, hc).source, HeadId::Ce);
  EXPECT_EQ(select_output(h2, std::nullopt).source, HeadId::Ctc2);
}

TEST(Select, PureAndBoundedBySelectedHeadPerUtterance) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    auto random_hyp = [&](HeadId id) {
      TokenSeq t(rng.below(6));
      for (int& x : t) x = a + static_cast<int>(rng.below(3));
      return Hypothesis{t, rng.uniform(), id};
    };
    const auto h2 = random_hyp(HeadId::Ctc2);
    const auto hc = random_hyp(HeadId::Ce);
    const auto s1 = select_output(h2, hc);
    const auto s2 = select_output(h2, hc);
    EXPECT_EQ(s1.tokens, s2.tokens);
    EXPECT_EQ(s1.source, s2.source);
    TokenSeq ref(1 + rng.below(5));
    for (int& x : ref) x = a + static_cast<int>(rng.below(3));
    EXPECT_LE(cer(s1.tokens, ref), std::max(cer(h2.tokens, ref), cer(hc.tokens, ref)));
  }
}

TEST(Cer, Examples) {
  EXPECT_EQ(cer({a, b, c}, {a, b, c}), 0.0);
  EXPECT_EQ(cer({}, {a, b, c}), 1.0);
  EXPECT_EQ(edit_distance(chars("kitten"), chars("sitting")), 3u);
  EXPECT_DOUBLE_EQ(cer(chars("kitten"), chars("sitting")), 3.0 / 7.0);
  EXPECT_THROW(cer({a}, {}), ContractError);
}

TEST(Cer, MatchesRecursiveOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    TokenSeq x(rng.below(9)), y(1 + rng.below(9));
    for (int& v : x) v = static_cast<int>(rng.below(4));
    for (int& v : y) v = static_cast<int>(rng.below(4));
    EXPECT_EQ(edit_distance(x, y), oracle::edit_distance_recursive(x, y));
  }
}

TEST(Cer, SymmetricAndTriangle) {
  Rng rng(4);
  auto random_seq = [&] {
    TokenSeq t(1 + rng.below(8));
    for (int& v : t) v = static_cast<int>(rng.below(3));
    return t;
  };
  for (int trial = 0; trial < 500; ++trial) {
    const auto x = random_seq(), y = random_seq(), z = random_seq();
    EXPECT_DOUBLE_EQ(cer(x, y) * static_cast<double>(y.size()), cer(y, x) * static_cast<double>(x.size()));
    EXPECT_LE(edit_distance(x, z), edit_distance(x, y) + edit_distance(y, z));
  }
}

TEST(Confidence, AlternativeModes) {
  std::vector<double> v(2 * 8, std::log(0.5 / 7));
  v[0 * 8 + a] = std::log(0.5);
  v[1 * 8 + b] = std::log(0.5);
  const Tensor lp({2, 8}, v);
  EXPECT_NEAR(ctc_greedy_decode(lp, 0, ConfidenceMode::SumLogProb).confidence, 0.25, 1e-12);
  EXPECT_NEAR(ctc_greedy_decode(lp, 0, ConfidenceMode::MeanLogProb).confidence, 0.5, 1e-12);
  EXPECT_EQ(parse_confidence_mode("mean_log_prob"), ConfidenceMode::MeanLogProb);
  EXPECT_THROW(parse_confidence_mode("bogus"), ConfigError);
}

}  // namespace
