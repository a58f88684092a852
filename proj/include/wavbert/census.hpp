#pragma once

#include <cstddef>

#include "wavbert/model_config.hpp"

// Closed-form parameter counts. These are written from the architecture
// arithmetic alone and are checked against the registered parameters of a
// built model; checkpoints carry the total.

namespace wavbert::census {

inline std::size_t affine(std::size_t in, std::size_t out) { return in * out + out; }
inline std::size_t layer_norm(std::size_t d) { return 2 * d; }
inline std::size_t attention(std::size_t d) { return 4 * affine(d, d); }
inline std::size_t feed_forward(std::size_t d, std::size_t inner) {
  return affine(d, inner) + affine(inner, d);
}
inline std::size_t gate(std::size_t d) { return affine(2 * d, d); }

inline std::size_t transformer_block(const ModelConfig& c) {
  return 2 * layer_norm(c.model_dim) + attention(c.model_dim) + feed_forward(c.model_dim, c.ffn_dim);
}

inline std::size_t acoustic_encoder(const ModelConfig& c) {
  const std::size_t d = c.model_dim;
  return affine(c.input_dim, d) + c.max_positions * d + c.acoustic_layers * transformer_block(c) +
         layer_norm(d) + affine(d, c.vocab_size);
}

inline std::size_t embed_attention(const ModelConfig& c) {
  return transformer_block(c) + attention(c.model_dim) + (c.embed_gate_enabled ? gate(c.model_dim) : 0);
}

inline std::size_t linguistic_encoder(const ModelConfig& c) {
  const std::size_t d = c.model_dim;
  const std::size_t input = c.uses_replacement() ? affine(d, d) : c.vocab_size * d;
  return input + c.max_positions * d + (c.builds_embed_attention() ? embed_attention(c) : 0) +
         c.linguistic_layers * transformer_block(c) + layer_norm(d) + affine(d, c.vocab_size);
}

inline std::size_t aggregation_direction(const ModelConfig& c) {
  const std::size_t d = c.model_dim;
  return attention(d) + (c.gate_enabled ? gate(d) : 0) + layer_norm(d) + feed_forward(d, c.ffn_dim) +
         affine(d, c.vocab_size);
}

inline std::size_t aggregation(const ModelConfig& c) {
  return (c.has_acoustic_guided() ? 1 : 0) * aggregation_direction(c) +
         (c.has_linguistic_guided() ? 1 : 0) * aggregation_direction(c);
}

inline std::size_t total(const ModelConfig& c) {
  return acoustic_encoder(c) + linguistic_encoder(c) + aggregation(c);
}

// Gate parameters removed by gate_enabled = false.
inline std::size_t gate_toggle_delta(const ModelConfig& c) {
  return ((c.has_acoustic_guided() ? 1 : 0) + (c.has_linguistic_guided() ? 1 : 0)) * gate(c.model_dim);
}

// Signed change from attention to replacement embedding: the word table and
// (when built) the embedding attention module go, a d x d projection comes in.
inline long long replacement_delta(const ModelConfig& c) {
  ModelConfig attention_cfg = c;
  attention_cfg.embedding = EmbeddingStrategy::Attention;
  const long long removed = static_cast<long long>(c.vocab_size * c.model_dim) +
      static_cast<long long>(attention_cfg.builds_embed_attention() ? embed_attention(c) : 0);
  return static_cast<long long>(affine(c.model_dim, c.model_dim)) - removed;
}

}  // namespace wavbert::census
