#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "wavbert/data.hpp"
#include "wavbert/embed_attn.hpp"
#include "wavbert/model_config.hpp"
#include "wavbert/nn.hpp"

namespace wavbert {

inline void check_mask(const BoolSeq& mask, std::size_t length, const char* what) {
  if (mask.size() != length) {
    throw DimensionError(std::string(what) + ": mask length " + std::to_string(mask.size()) +
                         " != sequence length " + std::to_string(length));
  }
}

struct AcousticOutputs {
  Tensor hidden;       // H_A (T, d)
  Tensor ctc1_logits;  // (T, vocab)
};

// Frame projection + learned positions + transformer stack + CTC head.
// No subsampling: output length equals the number of input frames.
class AcousticEncoder {
 public:
  AcousticEncoder() = default;
  AcousticEncoder(const ModelConfig& cfg, Rng& rng)
      : frame_proj_(cfg.input_dim, cfg.model_dim, rng, {cfg.init_std}),
        positions_(cfg.max_positions, cfg.model_dim, rng, {cfg.init_std}),
        final_norm_(cfg.model_dim) {
    for (std::size_t i = 0; i < cfg.acoustic_layers; ++i) {
      blocks_.emplace_back(cfg.model_dim, cfg.num_heads, cfg.ffn_dim, rng,
                           InitOptions{cfg.init_std});
    }
    ctc_head_ = Linear(cfg.model_dim, cfg.vocab_size, rng, {cfg.init_std});
  }

  AcousticOutputs encode(const Tensor& frames, const BoolSeq& frame_mask,
                         const ForwardContext* ctx = nullptr) const {
    if (frames.rank() != 2) {
      throw DimensionError("encode_acoustic: frames must be (T, input_dim), got " +
                           shape_str(frames.shape()));
    }
    const std::size_t t = frames.shape()[0];
    if (t == 0) throw EmptyInputError("encode_acoustic: no frames");
    check_mask(frame_mask, t, "encode_acoustic");
    Tensor h = add(frame_proj_(frames), positions_(t));
    for (const auto& block : blocks_) h = block(h, frame_mask, ctx);
    h = final_norm_(h);
    return {h, ctc_head_(h)};
  }

  Linear& ctc_head() { return ctc_head_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    frame_proj_.collect(prefix + ".frame_proj", out);
    positions_.collect(prefix + ".positions", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    }
    final_norm_.collect(prefix + ".final_norm", out);
    ctc_head_.collect(prefix + ".ctc_head", out);
  }

 private:
  Linear frame_proj_;
  PositionalEmbedding positions_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear ctc_head_;
};

struct LinguisticOutputs {
  Tensor hidden;       // H_L (S, d)
  Tensor cmlm_logits;  // (S, vocab)
  BoolSeq mask;        // token mask actually used (pseudo-token mask for replacement)
};

// Groups of ceil(T_valid / max_len) valid frames; row s of the returned
// (S, T) matrix averages group s.
inline Tensor replacement_pooling(const BoolSeq& frame_mask, std::size_t max_len) {
  const std::size_t t = frame_mask.size();
  const auto valid = static_cast<std::size_t>(std::count(frame_mask.begin(), frame_mask.end(), true));
  if (valid == 0) throw DegenerateAttentionError("replacement pooling: every frame is masked");
  const std::size_t group = (valid + max_len - 1) / max_len;
  const std::size_t s = (valid + group - 1) / group;
  std::vector<double> pool(s * t, 0.0);
  std::size_t seen = 0;
  for (std::size_t j = 0; j < t; ++j) {
    if (!frame_mask[j]) continue;
    const std::size_t row = seen / group;
    const std::size_t count = std::min(group, valid - row * group);
    pool[row * t + j] = 1.0 / static_cast<double>(count);
    ++seen;
  }
  return Tensor({s, t}, std::move(pool));
}

// Token embeddings + learned positions -> (optional) embedding attention
// -> transformer stack -> CMLM head.
class LinguisticEncoder {
 public:
  LinguisticEncoder() = default;
  LinguisticEncoder(const ModelConfig& cfg, Rng& rng)
      : vocab_size_(cfg.vocab_size), replacement_max_len_(cfg.replacement_max_len) {
    if (cfg.uses_replacement()) {
      replacement_proj_ = Linear(cfg.model_dim, cfg.model_dim, rng, {cfg.init_std});
    } else {
      token_table_ = normal_parameter({cfg.vocab_size, cfg.model_dim}, rng, cfg.init_std);
    }
    positions_ = PositionalEmbedding(cfg.max_positions, cfg.model_dim, rng, {cfg.init_std});
    if (cfg.builds_embed_attention()) embed_attention_.emplace(cfg, rng);
    for (std::size_t i = 0; i < cfg.linguistic_layers; ++i) {
      blocks_.emplace_back(cfg.model_dim, cfg.num_heads, cfg.ffn_dim, rng,
                           InitOptions{cfg.init_std});
    }
    final_norm_ = LayerNorm(cfg.model_dim);
    cmlm_head_ = Linear(cfg.model_dim, cfg.vocab_size, rng, {cfg.init_std});
  }

  // Word embeddings plus positions (E).
  Tensor embed(const TokenSeq& tokens) const {
    if (!token_table_.defined()) {
      throw ConfigError("encode_linguistic: token embeddings are bypassed (replacement strategy)");
    }
    for (int id : tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
        throw VocabularyError("encode_linguistic: token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(vocab_size_));
      }
    }
    return add(embedding(token_table_, tokens, Vocabulary::kPad), positions_(tokens.size()));
  }

  LinguisticOutputs encode(const TokenSeq& tokens, const BoolSeq& token_mask,
                           const Tensor& acoustic, const BoolSeq& frame_mask, bool fuse_embedding,
                           const ForwardContext* ctx = nullptr) const {
    if (tokens.empty()) throw EmptyInputError("encode_linguistic: no tokens");
    check_mask(token_mask, tokens.size(), "encode_linguistic");
    Tensor e = embed(tokens);
    if (fuse_embedding) {
      if (!embed_attention_) {
        throw ConfigError("encode_linguistic: embedding attention module was not built");
      }
      if (!acoustic.defined()) throw ContractError("encode_linguistic: H_A required for fusion");
      e = (*embed_attention_)(e, token_mask, acoustic, frame_mask, ctx);
    }
    return run_stack(e, token_mask, ctx);
  }

  // Replacement ablation: mean-pooled H_A groups projected to d replace
  // the word embeddings.
  LinguisticOutputs encode_replacement(const Tensor& acoustic, const BoolSeq& frame_mask,
                                       const ForwardContext* ctx = nullptr) const {
    if (!replacement_proj_.weight().defined()) {
      throw ConfigError("encode_linguistic: replacement projection was not built");
    }
    check_mask(frame_mask, acoustic.shape()[0], "encode_replacement");
    const Tensor pooled = matmul(replacement_pooling(frame_mask, replacement_max_len_), acoustic);
    const std::size_t s = pooled.shape()[0];
    const Tensor e = add(replacement_proj_(pooled), positions_(s));
    return run_stack(e, BoolSeq(s, true), ctx);
  }

  bool has_embed_attention() const { return embed_attention_.has_value(); }
  EmbeddingAttention& embed_attention() { return *embed_attention_; }
  Tensor& token_table() { return token_table_; }
  PositionalEmbedding& positions() { return positions_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    if (token_table_.defined()) out.add(prefix + ".token_table", token_table_);
    if (replacement_proj_.weight().defined()) replacement_proj_.collect(prefix + ".replacement", out);
    positions_.collect(prefix + ".positions", out);
    if (embed_attention_) embed_attention_->collect(prefix + ".embed_attn", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
    }
    final_norm_.collect(prefix + ".final_norm", out);
    cmlm_head_.collect(prefix + ".cmlm_head", out);
  }

 private:
  LinguisticOutputs run_stack(Tensor h, const BoolSeq& mask, const ForwardContext* ctx) const {
    for (const auto& block : blocks_) h = block(h, mask, ctx);
    h = final_norm_(h);
    return {h, cmlm_head_(h), mask};
  }

  std::size_t vocab_size_ = 0;
  std::size_t replacement_max_len_ = 16;
  Tensor token_table_;
  Linear replacement_proj_;
  PositionalEmbedding positions_;
  std::optional<EmbeddingAttention> embed_attention_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
  Linear cmlm_head_;
};

}  // namespace wavbert
