#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "wavbert/data.hpp"
#include "wavbert/ops.hpp"

namespace wavbert {

enum class HeadId { Ctc1, Ctc2, Ce };

inline const char* to_string(HeadId h) {
  switch (h) {
    case HeadId::Ctc1: return "ctc1";
    case HeadId::Ctc2: return "ctc2";
    case HeadId::Ce: return "ce";
  }
  return "?";
}

// How a head's per-position posteriors become one confidence in [0, 1].
enum class ConfidenceMode {
  MeanMaxPosterior,  // mean of max posterior over kept positions
  SumLogProb,        // exp(sum of max log-posteriors)
  MeanLogProb,       // exp(mean of max log-posteriors)
};

inline ConfidenceMode parse_confidence_mode(const std::string& s) {
  if (s == "mean_max_posterior") return ConfidenceMode::MeanMaxPosterior;
  if (s == "sum_log_prob") return ConfidenceMode::SumLogProb;
  if (s == "mean_log_prob") return ConfidenceMode::MeanLogProb;
  throw ConfigError("confidence: unknown mode '" + s + "'");
}

inline std::string to_string(ConfidenceMode m) {
  switch (m) {
    case ConfidenceMode::MeanMaxPosterior: return "mean_max_posterior";
    case ConfidenceMode::SumLogProb: return "sum_log_prob";
    case ConfidenceMode::MeanLogProb: return "mean_log_prob";
  }
  return "?";
}

struct Hypothesis {
  TokenSeq tokens;
  double confidence = 0.0;
  HeadId source = HeadId::Ctc1;
};

namespace detail {

inline double confidence_from(const std::vector<double>& max_log_probs, ConfidenceMode mode) {
  if (max_log_probs.empty()) return 0.0;
  double acc = 0.0;
  switch (mode) {
    case ConfidenceMode::MeanMaxPosterior:
      for (double lp : max_log_probs) acc += std::exp(lp);
      return std::clamp(acc / static_cast<double>(max_log_probs.size()), 0.0, 1.0);
    case ConfidenceMode::SumLogProb:
      for (double lp : max_log_probs) acc += lp;
      return std::clamp(std::exp(acc), 0.0, 1.0);
    case ConfidenceMode::MeanLogProb:
      for (double lp : max_log_probs) acc += lp;
      return std::clamp(std::exp(acc / static_cast<double>(max_log_probs.size())), 0.0, 1.0);
  }
  return 0.0;
}

struct RowMax {
  std::size_t index;
  double value;
};

inline RowMax row_argmax(std::span<const double> row) {
  RowMax best{0, row[0]};
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k] > best.value) best = {k, row[k]};
  }
  return best;
}

}  // namespace detail

// Greedy CTC: per-frame argmax, merge repeats, drop blanks. Special ids
// other than blank are dropped as well. Confidence uses the frames whose
// argmax is a kept (non-blank) symbol.
inline Hypothesis ctc_greedy_decode(const Tensor& log_probs, std::size_t num_frames = 0,
                                    ConfidenceMode mode = ConfidenceMode::MeanMaxPosterior,
                                    HeadId source = HeadId::Ctc1) {
  if (log_probs.rank() != 2) throw DimensionError("ctc_greedy_decode: expected (T, vocab)");
  const std::size_t t_len = num_frames == 0 ? log_probs.shape()[0] : num_frames;
  const std::size_t vocab = log_probs.shape()[1];
  Hypothesis hyp;
  hyp.source = source;
  std::vector<double> kept;
  int previous = -1;
  for (std::size_t t = 0; t < t_len; ++t) {
    const auto best = detail::row_argmax(log_probs.data().subspan(t * vocab, vocab));
    const int id = static_cast<int>(best.index);
    if (!Vocabulary::is_special(id)) {
      kept.push_back(best.value);
      if (id != previous) hyp.tokens.push_back(id);
    }
    previous = id;
  }
  hyp.confidence = detail::confidence_from(kept, mode);
  return hyp;
}

// Per-position argmax of CE logits, dropping special ids.
inline Hypothesis ce_decode(const Tensor& ce_logits,
                            ConfidenceMode mode = ConfidenceMode::MeanMaxPosterior) {
  if (ce_logits.rank() != 2) throw DimensionError("ce_decode: expected (S, vocab)");
  const Tensor lp = log_softmax(ce_logits, 1);
  const std::size_t vocab = lp.shape()[1];
  Hypothesis hyp;
  hyp.source = HeadId::Ce;
  std::vector<double> kept;
  for (std::size_t i = 0; i < lp.shape()[0]; ++i) {
    const auto best = detail::row_argmax(lp.data().subspan(i * vocab, vocab));
    const int id = static_cast<int>(best.index);
    if (Vocabulary::is_special(id)) continue;
    hyp.tokens.push_back(id);
    kept.push_back(best.value);
  }
  hyp.confidence = detail::confidence_from(kept, mode);
  return hyp;
}

// Higher confidence wins; ties go to CTC2. A single available head is
// returned as is.
inline Hypothesis select_output(const std::optional<Hypothesis>& ctc2,
                                const std::optional<Hypothesis>& ce) {
  if (ctc2 && ce) {
    if (ctc2->tokens.empty() && ce->tokens.empty()) return Hypothesis{{}, 0.0, HeadId::Ctc2};
    return ce->confidence > ctc2->confidence ? *ce : *ctc2;
  }
  if (ctc2) return *ctc2;
  if (ce) return *ce;
  return Hypothesis{{}, 0.0, HeadId::Ctc2};
}

// Unit-cost Levenshtein distance, two-row DP.
inline std::size_t edit_distance(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1);
  std::vector<std::size_t> cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double cer(const TokenSeq& hypothesis, const TokenSeq& reference) {
  if (reference.empty()) throw ContractError("cer: empty reference");
  return static_cast<double>(edit_distance(hypothesis, reference)) /
         static_cast<double>(reference.size());
}

}  // namespace wavbert
