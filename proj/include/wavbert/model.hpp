#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wavbert/data.hpp"
#include "wavbert/decode.hpp"
#include "wavbert/embed_attn.hpp"
#include "wavbert/encoders.hpp"
#include "wavbert/fusion.hpp"
#include "wavbert/model_config.hpp"
#include "wavbert/objectives.hpp"

namespace wavbert {

// CE supervision when the linguistic input is the CTC hypothesis.
enum class CeOnHypothesis {
  Truncate,  // align by position up to min(S_hyp, S_truth)
  Skip,      // no CE term for that item
};

inline CeOnHypothesis parse_ce_on_hypothesis(const std::string& s) {
  if (s == "truncate") return CeOnHypothesis::Truncate;
  if (s == "skip") return CeOnHypothesis::Skip;
  throw ConfigError("ce_on_hypothesis: unknown value '" + s + "'");
}

inline std::string to_string(CeOnHypothesis c) {
  return c == CeOnHypothesis::Truncate ? "truncate" : "skip";
}

struct StepOptions {
  std::uint64_t step = 0;
  SamplingSchedule schedule;
  CeOnHypothesis ce_rule = CeOnHypothesis::Truncate;
  const ForwardContext* ctx = nullptr;
};

struct ItemResult {
  LossTerms terms;
  InputBranch branch = InputBranch::Ground;
  bool length_mismatch = false;
};

struct BatchObjective {
  Tensor total;
  // Per-term means over contributing items (NaN when no item contributed).
  double ctc1 = NAN, cmlm = NAN, ctc2 = NAN, ce = NAN;
  std::size_t ground = 0;
  std::size_t hypothesis = 0;
  std::size_t infeasible_ctc = 0;
  std::size_t length_mismatch = 0;
};

struct InferenceResult {
  Hypothesis ctc1;
  std::optional<Hypothesis> ctc2;
  std::optional<Hypothesis> ce;
  Hypothesis selected;
};

// Both encoders, the embedding attention module (inside the linguistic
// encoder) and the representation aggregation module.
class WavBert {
 public:
  WavBert(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    acoustic_ = AcousticEncoder(cfg_, rng);
    linguistic_ = LinguisticEncoder(cfg_, rng);
    aggregation_ = RepresentationAggregation(cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  ParameterList parameters() const {
    ParameterList out;
    acoustic_.collect("acoustic", out);
    linguistic_.collect("linguistic", out);
    aggregation_.collect("aggregation", out);
    return out;
  }

  std::size_t census() const { return parameters().census(); }

  AcousticEncoder& acoustic() { return acoustic_; }
  LinguisticEncoder& linguistic() { return linguistic_; }
  RepresentationAggregation& aggregation() { return aggregation_; }
  const AcousticEncoder& acoustic() const { return acoustic_; }
  const LinguisticEncoder& linguistic() const { return linguistic_; }
  const RepresentationAggregation& aggregation() const { return aggregation_; }

  // Training forward for item b of a masked batch. `draw` is the uniform
  // variate that picks the linguistic input branch.
  ItemResult forward_item(const Batch& batch, std::size_t b, double draw,
                          const StepOptions& opt) const {
    const Tensor frames = batch.item_features(b);
    const BoolSeq& frame_mask = batch.frame_mask[b];
    const std::size_t num_frames = batch.num_frames(b);
    const TokenSeq truth = batch.item_tokens(b);

    ItemResult r;
    const AcousticOutputs ac = acoustic_.encode(frames, frame_mask, opt.ctx);
    const Tensor lp1 = log_softmax(ac.ctc1_logits, 1);
    r.terms.ctc1 = ctc_loss(lp1, truth, num_frames);

    LinguisticOutputs ling;
    TokenSeq ce_target;  // aligned with the linguistic positions, PAD = ignored
    if (cfg_.uses_replacement()) {
      ling = linguistic_.encode_replacement(ac.hidden, frame_mask, opt.ctx);
      r.branch = InputBranch::Hypothesis;
      ce_target = truncate_target(truth, ling.mask.size(), r.length_mismatch);
    } else {
      TokenSeq hyp;
      {
        NoGradGuard no_grad;
        hyp = ctc_greedy_decode(lp1, num_frames).tokens;
      }
      const LinguisticInput input = select_linguistic_input(
          opt.step, opt.schedule, draw, batch.masked_tokens[b], hyp);
      r.branch = input.branch;
      const BoolSeq mask = input.branch == InputBranch::Ground ? batch.token_mask[b]
                                                               : BoolSeq(input.tokens.size(), true);
      ling = linguistic_.encode(input.tokens, mask, ac.hidden, frame_mask,
                                linguistic_.has_embed_attention(), opt.ctx);
      if (input.branch == InputBranch::Ground) {
        const LossValue cm = cmlm_loss(ling.cmlm_logits, batch.tokens[b], batch.mask_positions[b]);
        if (!cm.flagged) r.terms.cmlm = cm.value;
        ce_target = batch.tokens[b];
      } else if (opt.ce_rule == CeOnHypothesis::Truncate) {
        ce_target = truncate_target(truth, input.tokens.size(), r.length_mismatch);
      }
    }

    const AggregationOutputs agg =
        aggregation_.aggregate(ac.hidden, frame_mask, ling.hidden, ling.mask, opt.ctx);
    if (agg.ctc2_logits) r.terms.ctc2 = ctc_loss(log_softmax(*agg.ctc2_logits, 1), truth, num_frames);
    if (agg.ce_logits && !ce_target.empty()) {
      const LossValue ce = ce_loss(*agg.ce_logits, ce_target);
      if (!ce.flagged) r.terms.ce = ce.value;
    }
    return r;
  }

  // Mean of each term over the batch items that produced it, combined with
  // the loss weights.
  BatchObjective batch_objective(const Batch& batch, const std::vector<double>& draws,
                                 const StepOptions& opt, const LossWeights& weights) const {
    BatchObjective out;
    std::optional<Tensor> sums[4];
    std::size_t counts[4] = {0, 0, 0, 0};
    auto accumulate = [&](int slot, const std::optional<Tensor>& t) {
      if (!t) return;
      if (!std::isfinite(t->item())) {
        if (slot == 0 || slot == 2) ++out.infeasible_ctc;
        return;
      }
      sums[slot] = sums[slot] ? add(*sums[slot], *t) : *t;
      ++counts[slot];
    };
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const ItemResult r = forward_item(batch, b, draws.at(b), opt);
      (r.branch == InputBranch::Ground ? out.ground : out.hypothesis)++;
      out.length_mismatch += r.length_mismatch;
      accumulate(0, r.terms.ctc1);
      accumulate(1, r.terms.cmlm);
      accumulate(2, r.terms.ctc2);
      accumulate(3, r.terms.ce);
    }
    LossTerms means;
    std::optional<Tensor>* slots[4] = {&means.ctc1, &means.cmlm, &means.ctc2, &means.ce};
    double* values[4] = {&out.ctc1, &out.cmlm, &out.ctc2, &out.ce};
    for (int i = 0; i < 4; ++i) {
      if (!sums[i]) continue;
      *slots[i] = scale(*sums[i], 1.0 / static_cast<double>(counts[i]));
      *values[i] = (*slots[i])->item();
    }
    out.total = combined_loss(means, weights).total;
    return out;
  }

  // Two-pass inference: greedy CTC1 output feeds the linguistic encoder,
  // then the more confident of CTC2 / CE is selected.
  InferenceResult infer(const Tensor& frames,
                        ConfidenceMode mode = ConfidenceMode::MeanMaxPosterior) const {
    NoGradGuard no_grad;
    const std::size_t t = frames.shape()[0];
    const BoolSeq frame_mask(t, true);
    const AcousticOutputs ac = acoustic_.encode(frames, frame_mask);
    InferenceResult out;
    out.ctc1 = ctc_greedy_decode(log_softmax(ac.ctc1_logits, 1), 0, mode, HeadId::Ctc1);
    LinguisticOutputs ling;
    if (cfg_.uses_replacement()) {
      ling = linguistic_.encode_replacement(ac.hidden, frame_mask);
    } else {
      const TokenSeq input = out.ctc1.tokens.empty() ? TokenSeq{Vocabulary::kUnk} : out.ctc1.tokens;
      ling = linguistic_.encode(input, BoolSeq(input.size(), true), ac.hidden, frame_mask,
                                linguistic_.has_embed_attention());
    }
    const AggregationOutputs agg = aggregation_.aggregate(ac.hidden, frame_mask, ling.hidden, ling.mask);
    if (agg.ctc2_logits) {
      out.ctc2 = ctc_greedy_decode(log_softmax(*agg.ctc2_logits, 1), 0, mode, HeadId::Ctc2);
    }
    if (agg.ce_logits) out.ce = ce_decode(*agg.ce_logits, mode);
    out.selected = select_output(out.ctc2, out.ce);
    return out;
  }

 private:
  static TokenSeq truncate_target(const TokenSeq& truth, std::size_t length, bool& mismatch) {
    mismatch = length != truth.size();
    TokenSeq target(length, Vocabulary::kPad);
    std::copy_n(truth.begin(), std::min(length, truth.size()), target.begin());
    return target;
  }

  ModelConfig cfg_;
  AcousticEncoder acoustic_;
  LinguisticEncoder linguistic_;
  RepresentationAggregation aggregation_;
};

}  // namespace wavbert
