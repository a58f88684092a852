#pragma once

#include <optional>
#include <string>

#include "wavbert/model_config.hpp"
#include "wavbert/nn.hpp"

namespace wavbert {

// Outputs of the representation aggregation module. Heads that the active
// variant does not build are absent; asking for them is a config error.
struct AggregationOutputs {
  std::optional<Tensor> acoustic_guided;    // H_AGL
  std::optional<Tensor> linguistic_guided;  // H_LGA
  std::optional<Tensor> acoustic;           // aggregated H_A
  std::optional<Tensor> linguistic;         // aggregated H_L
  std::optional<Tensor> ctc2_logits;        // (T, vocab)
  std::optional<Tensor> ce_logits;          // (S, vocab)

  const Tensor& ctc2() const {
    if (!ctc2_logits) throw ConfigError("aggregate: CTC2 head is absent in this variant");
    return *ctc2_logits;
  }
  const Tensor& ce() const {
    if (!ce_logits) throw ConfigError("aggregate: CE head is absent in this variant");
    return *ce_logits;
  }
};

// One aggregation direction: attention, gate, FFN with residual, head.
//   C = ATT(Q = query_side, K = V = key_side)
//   G = gated_fuse(C, query_side)
//   H = G + FFN(LN(G)),  logits = affine(H)
class AggregationDirection {
 public:
  AggregationDirection() = default;
  AggregationDirection(const ModelConfig& cfg, Rng& rng)
      : attention_(cfg.model_dim, cfg.num_heads, rng, {cfg.init_std}),
        gate_enabled_(cfg.gate_enabled),
        ffn_norm_(cfg.model_dim),
        ffn_(cfg.model_dim, cfg.ffn_dim, rng, {cfg.init_std}) {
    if (cfg.gate_enabled) gate_ = GatedWeighting(cfg.model_dim, rng, {cfg.init_std}, cfg.gate_bias_init);
    head_ = Linear(cfg.model_dim, cfg.vocab_size, rng, {cfg.init_std});
  }

  struct Result {
    Tensor gated;
    Tensor aggregated;
    Tensor logits;
  };

  Result operator()(const Tensor& query_side, const Tensor& key_side, const BoolSeq& key_mask,
                    const ForwardContext* ctx = nullptr) const {
    const Tensor context = attention_(query_side, key_side, key_side, key_mask);
    Result r;
    r.gated = gated_fuse(context, query_side, gate_enabled_ ? &gate_ : nullptr, gate_enabled_);
    r.aggregated = add(r.gated, dropout(ffn_(ffn_norm_(r.gated), ctx), ctx));
    r.logits = head_(r.aggregated);
    return r;
  }

  GatedWeighting& gate() { return gate_; }
  MultiHeadAttention& attention() { return attention_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    attention_.collect(prefix + ".attn", out);
    if (gate_.built()) gate_.collect(prefix + ".gate", out);
    ffn_norm_.collect(prefix + ".ffn_norm", out);
    ffn_.collect(prefix + ".ffn", out);
    head_.collect(prefix + ".head", out);
  }

 private:
  MultiHeadAttention attention_;
  GatedWeighting gate_;
  bool gate_enabled_ = true;
  LayerNorm ffn_norm_;
  FeedForward ffn_;
  Linear head_;
};

// Gated cross-modal attention between H_A (frames) and H_L (tokens), or one
// of its single-direction ablations.
class RepresentationAggregation {
 public:
  RepresentationAggregation() = default;
  RepresentationAggregation(const ModelConfig& cfg, Rng& rng) : variant_(cfg.aggregation) {
    if (cfg.has_acoustic_guided()) acoustic_guided_.emplace(cfg, rng);
    if (cfg.has_linguistic_guided()) linguistic_guided_.emplace(cfg, rng);
  }

  AggregationVariant variant() const { return variant_; }

  AggregationOutputs aggregate(const Tensor& acoustic, const BoolSeq& frame_mask,
                               const Tensor& linguistic, const BoolSeq& token_mask,
                               const ForwardContext* ctx = nullptr) const {
    if (acoustic.rank() != 2 || linguistic.rank() != 2 || acoustic.shape()[0] == 0 ||
        linguistic.shape()[0] == 0) {
      throw EmptyInputError("aggregate: both representations must be nonempty (T, d) and (S, d)");
    }
    AggregationOutputs out;
    if (acoustic_guided_) {
      // Frames query tokens; padded tokens are masked.
      auto r = (*acoustic_guided_)(acoustic, linguistic, token_mask, ctx);
      out.acoustic_guided = r.gated;
      out.acoustic = r.aggregated;
      out.ctc2_logits = r.logits;
    }
    if (linguistic_guided_) {
      // Tokens query frames; padded frames are masked.
      auto r = (*linguistic_guided_)(linguistic, acoustic, frame_mask, ctx);
      out.linguistic_guided = r.gated;
      out.linguistic = r.aggregated;
      out.ce_logits = r.logits;
    }
    return out;
  }

  bool has_acoustic_guided() const { return acoustic_guided_.has_value(); }
  bool has_linguistic_guided() const { return linguistic_guided_.has_value(); }
  AggregationDirection& acoustic_guided() { return *acoustic_guided_; }
  AggregationDirection& linguistic_guided() { return *linguistic_guided_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    if (acoustic_guided_) acoustic_guided_->collect(prefix + ".acoustic_guided", out);
    if (linguistic_guided_) linguistic_guided_->collect(prefix + ".linguistic_guided", out);
  }

 private:
  AggregationVariant variant_ = AggregationVariant::CrossModal;
  std::optional<AggregationDirection> acoustic_guided_;
  std::optional<AggregationDirection> linguistic_guided_;
};

}  // namespace wavbert
