#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "wavbert/data.hpp"
#include "wavbert/model_config.hpp"
#include "wavbert/nn.hpp"

namespace wavbert {

struct EmbedFuseParts {
  Tensor linguistic;  // E_L
  Tensor context;     // cross-attention output C
  Tensor output;      // E_L + phi * C
};

// Conditions word embeddings on the acoustic representation:
//   E_L = FFN(SelfAttn(E))              (one pre-norm transformer block)
//   C   = ATT(Q = E_L, K = H_A, V = H_A)
//   out = gated_fuse(C, E_L)
class EmbeddingAttention {
 public:
  EmbeddingAttention() = default;
  EmbeddingAttention(const ModelConfig& cfg, Rng& rng)
      : self_block_(cfg.model_dim, cfg.num_heads, cfg.ffn_dim, rng, {cfg.init_std}),
        cross_(cfg.model_dim, cfg.num_heads, rng, {cfg.init_std}),
        gate_enabled_(cfg.embed_gate_enabled) {
    if (gate_enabled_) gate_ = GatedWeighting(cfg.model_dim, rng, {cfg.init_std}, cfg.gate_bias_init);
  }

  EmbedFuseParts fuse_parts(const Tensor& embeddings, const BoolSeq& token_mask,
                            const Tensor& acoustic, const BoolSeq& frame_mask,
                            const ForwardContext* ctx = nullptr) const {
    if (embeddings.rank() != 2 || acoustic.rank() != 2 ||
        embeddings.shape()[1] != acoustic.shape()[1]) {
      throw DimensionError("embed_fuse: inconsistent shapes " + shape_str(embeddings.shape()) +
                           " and " + shape_str(acoustic.shape()));
    }
    EmbedFuseParts parts;
    parts.linguistic = self_block_(embeddings, token_mask, ctx);
    parts.context = cross_(parts.linguistic, acoustic, acoustic, frame_mask);
    parts.output = gated_fuse(parts.context, parts.linguistic, gate_enabled_ ? &gate_ : nullptr,
                              gate_enabled_);
    return parts;
  }

  Tensor operator()(const Tensor& embeddings, const BoolSeq& token_mask, const Tensor& acoustic,
                    const BoolSeq& frame_mask, const ForwardContext* ctx = nullptr) const {
    return fuse_parts(embeddings, token_mask, acoustic, frame_mask, ctx).output;
  }

  bool gate_enabled() const { return gate_enabled_; }
  // Disabling after construction keeps the parameters but bypasses them.
  void set_gate_enabled(bool on) {
    if (on && !gate_.built()) {
      throw ConfigError("embed_fuse: no gate parameters were built");
    }
    gate_enabled_ = on;
  }

  GatedWeighting& gate() { return gate_; }
  MultiHeadAttention& cross_attention() { return cross_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    self_block_.collect(prefix + ".self", out);
    cross_.collect(prefix + ".cross", out);
    if (gate_.built()) gate_.collect(prefix + ".gate", out);
  }

 private:
  TransformerBlock self_block_;
  MultiHeadAttention cross_;
  GatedWeighting gate_;
  bool gate_enabled_ = true;
};

// Probability of feeding the masked ground truth to the linguistic encoder.
struct SamplingSchedule {
  double p_start = 0.9;
  double p_end = 0.1;
  std::uint64_t step_start = 800;
  std::uint64_t step_end = 2000;
  bool ground_before_start = false;  // p = 1 before step_start

  // "w/o Sampling with Decay": ground truth at every step.
  static SamplingSchedule always_ground() { return {1.0, 1.0, 0, 1, true}; }

  void validate() const {
    if (!(0.0 <= p_end && p_end <= p_start && p_start <= 1.0)) {
      throw ConfigError("sampling schedule: need 0 <= p_end <= p_start <= 1");
    }
    if (step_start >= step_end) throw ConfigError("sampling schedule: need step_start < step_end");
  }
};

inline double sample_probability(std::uint64_t step, const SamplingSchedule& s) {
  if (step < s.step_start) return s.ground_before_start ? 1.0 : s.p_start;
  if (step >= s.step_end) return s.p_end;
  const double f = static_cast<double>(step - s.step_start) /
                   static_cast<double>(s.step_end - s.step_start);
  return (1.0 - f) * s.p_start + f * s.p_end;
}

enum class InputBranch { Ground, Hypothesis };

inline const char* to_string(InputBranch b) {
  return b == InputBranch::Ground ? "ground" : "hypothesis";
}

struct LinguisticInput {
  TokenSeq tokens;
  InputBranch branch;
};

// Ground truth when rng_draw < p, else the CTC hypothesis. An empty
// hypothesis (all-blank CTC output) becomes a single UNK.
inline LinguisticInput select_linguistic_input(std::uint64_t step, const SamplingSchedule& schedule,
                                               double rng_draw, const TokenSeq& masked_truth,
                                               const TokenSeq& ctc1_hypothesis) {
  if (masked_truth.empty()) throw ContractError("select_linguistic_input: empty masked truth");
  if (rng_draw < sample_probability(step, schedule)) return {masked_truth, InputBranch::Ground};
  if (ctc1_hypothesis.empty()) return {TokenSeq{Vocabulary::kUnk}, InputBranch::Hypothesis};
  return {ctc1_hypothesis, InputBranch::Hypothesis};
}

}  // namespace wavbert
