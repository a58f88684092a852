#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "wavbert/data.hpp"
#include "wavbert/objectives.hpp"

using namespace wavbert;
using namespace wavbert::testing;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// Replays the generator's draw order to recover each frame's source token.
std::vector<std::vector<int>> frame_labels(const CorpusOptions& opt) {
  Rng rng(opt.seed);
  for (std::size_t i = 0; i < opt.vocab_size * opt.input_dim; ++i) rng.normal();
  std::vector<std::vector<int>> labels;
  for (std::size_t u = 0; u < opt.num_utts; ++u) {
    std::vector<int> frames;
    const auto len = rng.between(static_cast<std::int64_t>(opt.min_len), static_cast<std::int64_t>(opt.max_len));
    for (std::int64_t i = 0; i < len; ++i) {
      const int tok = Vocabulary::kFirstContent + static_cast<int>(rng.below(opt.vocab_size));
      const auto reps = rng.between(static_cast<std::int64_t>(opt.min_repeat), static_cast<std::int64_t>(opt.max_repeat));
      for (std::int64_t r = 0; r < reps; ++r) {
        frames.push_back(tok);
        if (opt.noise_sigma > 0.0) {
          for (std::size_t j = 0; j < opt.input_dim; ++j) rng.normal();
        }
      }
    }
    labels.push_back(std::move(frames));
  }
  return labels;
}

TEST(Vocabulary, LayoutIsFixed) {
  const Vocabulary v;
  EXPECT_EQ(Vocabulary::kBlank, 0);
  EXPECT_EQ(Vocabulary::kPad, 1);
  EXPECT_EQ(Vocabulary::kMask, 2);
  EXPECT_EQ(Vocabulary::kUnk, 3);
  EXPECT_EQ(v.size(), 36u);
  EXPECT_TRUE(v.is_content(4));
  EXPECT_TRUE(v.is_content(35));
  EXPECT_FALSE(v.is_content(36));
  EXPECT_TRUE(Vocabulary::is_special(3));
}

TEST(Corpus, DefaultsAndDeterminism) {
  const CorpusOptions opt;
  EXPECT_EQ(opt.vocab_size, 32u);
  EXPECT_EQ(opt.input_dim, 16u);
  EXPECT_EQ(opt.min_len, 3u);
  EXPECT_EQ(opt.max_len, 10u);
  EXPECT_EQ(opt.min_repeat, 2u);
  EXPECT_EQ(opt.max_repeat, 4u);
  EXPECT_EQ(opt.noise_sigma, 0.1);
  const auto a = generate_corpus(opt);
  const auto b = generate_corpus(opt);
  ASSERT_EQ(a.size(), opt.num_utts);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    EXPECT_TRUE(bitwise_equal(a[i].features, b[i].features));
  }
  auto other = opt;
  other.seed = opt.seed + 1;
  EXPECT_NE(generate_corpus(other)[0].tokens, a[0].tokens);
}

TEST(Corpus, ZeroNoiseSpansAreConstant) {
  CorpusOptions opt;
  opt.noise_sigma = 0.0;
  opt.num_utts = 50;
  const auto corpus = generate_corpus(opt);
  const auto labels = frame_labels(opt);
  for (std::size_t u = 0; u < corpus.size(); ++u) {
    const auto& f = corpus[u].features;
    ASSERT_EQ(labels[u].size(), f.shape()[0]);
    for (std::size_t t = 1; t < labels[u].size(); ++t) {
      const bool same_span = labels[u][t] == labels[u][t - 1];
      const bool equal = std::equal(f.data().begin() + t * 16, f.data().begin() + (t + 1) * 16,
                                    f.data().begin() + (t - 1) * 16);
      if (same_span) {
        EXPECT_TRUE(equal);
      }
    }
  }
}

TEST(Corpus, NearestPrototypeRecoversFrameTokens) {
  CorpusOptions opt;
  opt.num_utts = 200;
  const auto corpus = generate_corpus(opt);
  const auto labels = frame_labels(opt);
  Rng rng(opt.seed);
  const auto protos = token_prototypes(rng, opt);
  std::size_t correct = 0, total = 0;
  for (std::size_t u = 0; u < corpus.size(); ++u) {
    const auto& f = corpus[u].features;
    for (std::size_t t = 0; t < f.shape()[0]; ++t) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < protos.size(); ++k) {
        double d = 0.0;
        for (std::size_t j = 0; j < 16; ++j) {
          const double diff = f.data()[t * 16 + j] - protos[k][j];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      correct += Vocabulary::kFirstContent + static_cast<int>(best) == labels[u][t];
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(total), 0.99);
}

TEST(Corpus, EveryUtteranceIsCtcFeasible) {
  CorpusOptions opt;
  opt.num_utts = 2000;
  for (const auto& u : generate_corpus(opt)) {
    EXPECT_GE(u.num_frames(), 2 * u.tokens.size());
    EXPECT_GE(u.num_frames(), ctc_min_frames(u.tokens));
    EXPECT_GE(u.tokens.size(), 3u);
    EXPECT_LE(u.tokens.size(), 10u);
    for (int id : u.tokens) EXPECT_TRUE(Vocabulary{}.is_content(id));
    for (double x : u.features.data()) EXPECT_TRUE(std::isfinite(x));
  }
}

TEST(Corpus, RejectsBadOptions) {
  CorpusOptions opt;
  opt.min_repeat = 1;
  EXPECT_THROW(generate_corpus(opt), ConfigError);
  opt = CorpusOptions{};
  opt.min_len = 5;
  opt.max_len = 4;
  EXPECT_THROW(generate_corpus(opt), ConfigError);
  opt = CorpusOptions{};
  opt.noise_sigma = -1.0;
  EXPECT_THROW(generate_corpus(opt), ConfigError);
}

TEST(Masking, MinimumOneAndFullRatio) {
  Rng rng(1);
  const auto one = make_masked_truth({7}, rng);
  EXPECT_EQ(one.tokens, TokenSeq{Vocabulary::kMask});
  EXPECT_TRUE(one.positions[0]);
  const TokenSeq seq{4, 5, 6, 7, 8};
  const auto all = make_masked_truth(seq, rng, 1.0, 1.0);
  EXPECT_EQ(all.tokens, TokenSeq(5, Vocabulary::kMask));
  EXPECT_THROW(make_masked_truth({}, rng), ContractError);
}

TEST(Masking, MonteCarloMaskCount) {
  // ceil(20 r) with r ~ U[0.15, 0.5] is uniform over 4..10, mean 7.
  Rng rng = Rng::stream(99, 2);
  TokenSeq seq(20);
  for (std::size_t i = 0; i < 20; ++i) seq[i] = 4 + static_cast<int>(i);
  double total = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto mt = make_masked_truth(seq, rng);
    const auto count = std::count(mt.positions.begin(), mt.positions.end(), true);
    EXPECT_EQ(count, std::count(mt.tokens.begin(), mt.tokens.end(), Vocabulary::kMask));
    for (std::size_t j = 0; j < 20; ++j) {
      if (!mt.positions[j]) {
        EXPECT_EQ(mt.tokens[j], seq[j]);
      }
    }
    total += static_cast<double>(count);
  }
  EXPECT_NEAR(total / 10000.0, 7.0, 0.2);
}

TEST(Collate, SingleUtteranceHasNoPadding) {
  const auto corpus = generate_corpus(CorpusOptions{.num_utts = 1});
  const Batch b = collate(corpus);
  EXPECT_EQ(b.size(), 1u);
  for (bool m : b.frame_mask[0]) EXPECT_TRUE(m);
  for (bool m : b.token_mask[0]) EXPECT_TRUE(m);
}

TEST(Collate, LengthsThreeAndFive) {
  auto utt = [](std::size_t frames, TokenSeq toks) {
    Utterance u;
    u.id = "u" + std::to_string(frames);
    u.tokens = std::move(toks);
    std::vector<double> v(frames * 2);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i + 1);
    u.features = Tensor({frames, 2}, v);
    return u;
  };
  const Batch b = collate({utt(3, {4}), utt(5, {4, 5, 6})});
  EXPECT_EQ(b.max_frames(), 5u);
  EXPECT_EQ(std::count(b.frame_mask[0].begin(), b.frame_mask[0].end(), false), 2);
  EXPECT_EQ(b.tokens[0], (TokenSeq{4, Vocabulary::kPad, Vocabulary::kPad}));
  EXPECT_EQ(b.features.at({0, 4, 1}), 0.0);
}

TEST(Collate, RoundTripAndMaskingAvoidsPadding) {
  CorpusOptions opt;
  opt.num_utts = 12;
  const auto corpus = generate_corpus(opt);
  Batch b = collate(corpus);
  Rng rng(3);
  apply_masking(b, rng, 0.15, 0.5);
  const auto back = uncollate(b);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(back[i].id, corpus[i].id);
    EXPECT_EQ(back[i].tokens, corpus[i].tokens);
    EXPECT_TRUE(bitwise_equal(back[i].features, corpus[i].features));
    for (std::size_t s = 0; s < b.max_tokens(); ++s) {
      if (!b.token_mask[i][s]) {
        EXPECT_FALSE(b.mask_positions[i][s]);
        EXPECT_EQ(b.masked_tokens[i][s], Vocabulary::kPad);
      }
    }
    EXPECT_GE(std::count(b.mask_positions[i].begin(), b.mask_positions[i].end(), true), 1);
  }
}

TEST(Dataset, FileRoundTripIsBitwise) {
  CorpusOptions opt;
  opt.num_utts = 20;
  const auto corpus = generate_corpus(opt);
  const auto path = std::filesystem::temp_directory_path() / "wavbert_dataset_roundtrip.jsonl";
  save_dataset(path, corpus);
  const auto loaded = load_dataset(path);
  std::filesystem::remove(path);
  ASSERT_EQ(loaded.size(), corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(loaded[i].id, corpus[i].id);
    EXPECT_EQ(loaded[i].tokens, corpus[i].tokens);
    EXPECT_TRUE(bitwise_equal(loaded[i].features, corpus[i].features));
  }
  const std::string line = utterance_to_line(corpus[0]);
  const std::string numbers = line.substr(line.find("\"features\":[") + 12);
  EXPECT_EQ(numbers.find_first_of("eE"), std::string::npos) << "no exponent notation";
  EXPECT_THROW(utterance_from_line("{\"id\":\"x\"}"), IoError);
  EXPECT_THROW(utterance_from_line("{\"id\":\"x\",\"tokens\":[],\"frames\":2,\"dim\":2,\"features\":[1]}"), IoError);
  EXPECT_THROW(load_dataset("/nonexistent/dir/file.jsonl"), IoError);
}

}  // namespace
