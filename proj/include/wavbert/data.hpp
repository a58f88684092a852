#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "wavbert/error.hpp"
#include "wavbert/ops.hpp"
#include "wavbert/rng.hpp"

namespace wavbert {

using TokenSeq = std::vector<int>;

// Fixed special ids followed by `content_size` content tokens.
struct Vocabulary {
  static constexpr int kBlank = 0;
  static constexpr int kPad = 1;
  static constexpr int kMask = 2;
  static constexpr int kUnk = 3;
  static constexpr int kFirstContent = 4;

  std::size_t content_size = 32;

  std::size_t size() const { return content_size + kFirstContent; }
  static bool is_special(int id) { return id < kFirstContent; }
  bool is_content(int id) const {
    return id >= kFirstContent && static_cast<std::size_t>(id) < size();
  }
};

struct Utterance {
  std::string id;
  TokenSeq tokens;
  Tensor features;  // (T, input_dim)

  std::size_t num_frames() const { return features.shape()[0]; }
};

struct CorpusOptions {
  std::uint64_t seed = 1234;
  std::size_t num_utts = 576;
  std::size_t vocab_size = 32;  // content tokens
  std::size_t input_dim = 16;
  std::size_t min_len = 3;
  std::size_t max_len = 10;
  std::size_t min_repeat = 2;
  std::size_t max_repeat = 4;
  double noise_sigma = 0.1;
};

// Fixed Normal(0,1) prototype per content token; the first draws of the
// corpus RNG, so they depend on (seed, vocab_size, input_dim) only.
inline std::vector<std::vector<double>> token_prototypes(Rng& rng, const CorpusOptions& opt) {
  std::vector<std::vector<double>> protos(opt.vocab_size, std::vector<double>(opt.input_dim));
  for (auto& p : protos) {
    for (double& v : p) v = rng.normal();
  }
  return protos;
}

inline std::vector<Utterance> generate_corpus(const CorpusOptions& opt) {
  if (opt.vocab_size == 0 || opt.input_dim == 0 || opt.min_len == 0 ||
      opt.min_len > opt.max_len || opt.min_repeat > opt.max_repeat) {
    throw ConfigError("generate_corpus: empty vocabulary, dimension or length range");
  }
  if (opt.min_repeat < 2) {
    throw ConfigError("generate_corpus: min_repeat must be >= 2 for CTC feasibility");
  }
  if (!(opt.noise_sigma >= 0.0)) throw ConfigError("generate_corpus: noise_sigma must be >= 0");
  Rng rng(opt.seed);
  const auto protos = token_prototypes(rng, opt);
  std::vector<Utterance> corpus;
  corpus.reserve(opt.num_utts);
  for (std::size_t u = 0; u < opt.num_utts; ++u) {
    Utterance utt;
    std::ostringstream id;
    id << "utt" << std::setw(5) << std::setfill('0') << u;
    utt.id = id.str();
    const auto len = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(opt.min_len),
                                                          static_cast<std::int64_t>(opt.max_len)));
    std::vector<double> frames;
    std::size_t num_frames = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const auto tok = static_cast<std::size_t>(rng.below(opt.vocab_size));
      utt.tokens.push_back(Vocabulary::kFirstContent + static_cast<int>(tok));
      const auto reps = static_cast<std::size_t>(rng.between(
          static_cast<std::int64_t>(opt.min_repeat), static_cast<std::int64_t>(opt.max_repeat)));
      for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t j = 0; j < opt.input_dim; ++j) {
          frames.push_back(protos[tok][j] + (opt.noise_sigma > 0.0 ? opt.noise_sigma * rng.normal() : 0.0));
        }
        ++num_frames;
      }
    }
    utt.features = Tensor({num_frames, opt.input_dim}, std::move(frames));
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

struct MaskedTruth {
  TokenSeq tokens;   // Y^r
  BoolSeq positions; // true where MASK was substituted
};

// Replaces ceil(ratio * len) positions (at least one) with MASK, ratio drawn
// uniformly from [ratio_min, ratio_max].
inline MaskedTruth make_masked_truth(const TokenSeq& tokens, Rng& rng, double ratio_min = 0.15,
                                     double ratio_max = 0.5) {
  if (tokens.empty()) throw ContractError("make_masked_truth: empty token sequence");
  const double ratio = ratio_min == ratio_max ? ratio_min : rng.uniform(ratio_min, ratio_max);
  const std::size_t len = tokens.size();
  auto count = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(len)));
  count = std::clamp<std::size_t>(count, 1, len);
  std::vector<std::size_t> order(len);
  for (std::size_t i = 0; i < len; ++i) order[i] = i;
  // Partial Fisher-Yates: the first `count` entries are a uniform subset.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(len - i));
    std::swap(order[i], order[j]);
  }
  MaskedTruth out{tokens, BoolSeq(len, false)};
  for (std::size_t i = 0; i < count; ++i) {
    out.tokens[order[i]] = Vocabulary::kMask;
    out.positions[order[i]] = true;
  }
  return out;
}

struct Batch {
  std::vector<std::string> ids;
  Tensor features;                       // (B, T_max, input_dim), zero padded
  std::vector<BoolSeq> frame_mask;       // B x T_max
  std::vector<TokenSeq> tokens;          // B x S_max, PAD padded
  std::vector<BoolSeq> token_mask;       // B x S_max
  std::vector<TokenSeq> masked_tokens;   // Y^r, PAD padded
  std::vector<BoolSeq> mask_positions;   // B x S_max

  std::size_t size() const { return ids.size(); }
  std::size_t max_frames() const { return features.shape()[1]; }
  std::size_t max_tokens() const { return tokens.empty() ? 0 : tokens[0].size(); }

  std::size_t num_frames(std::size_t b) const {
    return static_cast<std::size_t>(std::count(frame_mask[b].begin(), frame_mask[b].end(), true));
  }
  std::size_t num_tokens(std::size_t b) const {
    return static_cast<std::size_t>(std::count(token_mask[b].begin(), token_mask[b].end(), true));
  }

  // Padded (T_max, input_dim) feature block of item b.
  Tensor item_features(std::size_t b) const {
    const std::size_t t = features.shape()[1];
    const std::size_t d = features.shape()[2];
    const auto src = features.data().subspan(b * t * d, t * d);
    return Tensor({t, d}, std::vector<double>(src.begin(), src.end()));
  }

  // Content tokens of item b with padding removed.
  TokenSeq item_tokens(std::size_t b) const {
    return TokenSeq(tokens[b].begin(),
                    tokens[b].begin() + static_cast<std::ptrdiff_t>(num_tokens(b)));
  }
};

// Right-pads features with zeros and tokens with PAD. The masked-truth
// fields are initialised unmasked; see apply_masking.
inline Batch collate(const std::vector<Utterance>& utts) {
  if (utts.empty()) throw ContractError("collate: empty utterance list");
  const std::size_t dim = utts[0].features.shape()[1];
  std::size_t t_max = 0;
  std::size_t s_max = 0;
  for (const auto& u : utts) {
    if (u.features.rank() != 2 || u.features.shape()[1] != dim) {
      throw DimensionError("collate: inconsistent feature shapes");
    }
    t_max = std::max(t_max, u.num_frames());
    s_max = std::max(s_max, u.tokens.size());
  }
  Batch batch;
  std::vector<double> feats(utts.size() * t_max * dim, 0.0);
  for (std::size_t b = 0; b < utts.size(); ++b) {
    const auto& u = utts[b];
    batch.ids.push_back(u.id);
    std::copy(u.features.data().begin(), u.features.data().end(),
              feats.begin() + static_cast<std::ptrdiff_t>(b * t_max * dim));
    BoolSeq fm(t_max, false);
    std::fill_n(fm.begin(), u.num_frames(), true);
    batch.frame_mask.push_back(std::move(fm));
    TokenSeq toks(s_max, Vocabulary::kPad);
    std::copy(u.tokens.begin(), u.tokens.end(), toks.begin());
    BoolSeq tm(s_max, false);
    std::fill_n(tm.begin(), u.tokens.size(), true);
    batch.tokens.push_back(toks);
    batch.masked_tokens.push_back(std::move(toks));
    batch.token_mask.push_back(std::move(tm));
    batch.mask_positions.push_back(BoolSeq(s_max, false));
  }
  batch.features = Tensor({utts.size(), t_max, dim}, std::move(feats));
  return batch;
}

// Draws Y^r for every item; PAD positions are never masked.
inline void apply_masking(Batch& batch, Rng& rng, double ratio_min, double ratio_max) {
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TokenSeq content = batch.item_tokens(b);
    if (content.empty()) continue;
    const MaskedTruth mt = make_masked_truth(content, rng, ratio_min, ratio_max);
    std::copy(mt.tokens.begin(), mt.tokens.end(), batch.masked_tokens[b].begin());
    for (std::size_t i = 0; i < mt.positions.size(); ++i) batch.mask_positions[b][i] = mt.positions[i];
  }
}

// Inverse of collate (masked-truth fields aside).
inline std::vector<Utterance> uncollate(const Batch& batch) {
  std::vector<Utterance> out;
  const std::size_t dim = batch.features.shape()[2];
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t t = batch.num_frames(b);
    const auto src = batch.features.data().subspan(b * batch.max_frames() * dim, t * dim);
    out.push_back({batch.ids[b], batch.item_tokens(b),
                   Tensor({t, dim}, std::vector<double>(src.begin(), src.end()))});
  }
  return out;
}

// ---- line-delimited dataset files -------------------------------------
//
// One JSON object per line:
//   {"id":"utt00000","tokens":[4,17],"frames":5,"dim":16,"features":[...]}
// Floats are written in shortest round-trip fixed notation.

namespace detail {

inline void append_fixed(std::string& out, double v) {
  char buf[512];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
  if (res.ec != std::errc()) throw IoError("dataset: cannot format value");
  out.append(buf, res.ptr);
}

}  // namespace detail

inline std::string utterance_to_line(const Utterance& u) {
  std::string line = "{\"id\":";
  line += nlohmann::json(u.id).dump();
  line += ",\"tokens\":[";
  for (std::size_t i = 0; i < u.tokens.size(); ++i) {
    if (i) line += ',';
    line += std::to_string(u.tokens[i]);
  }
  line += "],\"frames\":" + std::to_string(u.features.shape()[0]);
  line += ",\"dim\":" + std::to_string(u.features.shape()[1]);
  line += ",\"features\":[";
  const auto data = u.features.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (i) line += ',';
    detail::append_fixed(line, data[i]);
  }
  line += "]}";
  return line;
}

inline Utterance utterance_from_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.tokens = j.at("tokens").get<TokenSeq>();
    const auto frames = j.at("frames").get<std::size_t>();
    const auto dim = j.at("dim").get<std::size_t>();
    auto values = j.at("features").get<std::vector<double>>();
    u.features = Tensor({frames, dim}, std::move(values));
    return u;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset: malformed record: ") + e.what());
  } catch (const DimensionError& e) {
    throw IoError(std::string("dataset: inconsistent record: ") + e.what());
  }
}

inline void save_dataset(const std::filesystem::path& path, const std::vector<Utterance>& utts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("dataset: cannot open " + path.string() + " for writing");
  for (const auto& u : utts) out << utterance_to_line(u) << '\n';
  if (!out) throw IoError("dataset: write failed for " + path.string());
}

inline std::vector<Utterance> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("dataset: cannot open " + path.string());
  std::vector<Utterance> utts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    utts.push_back(utterance_from_line(line));
  }
  return utts;
}

}  // namespace wavbert
