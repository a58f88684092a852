#pragma once

#include <cstddef>
#include <string>

#include "wavbert/error.hpp"

namespace wavbert {

enum class AggregationVariant { CrossModal, AcousticGuided, LinguisticGuided };

enum class EmbeddingStrategy {
  Attention,    // word embeddings, optionally fused with H_A by the embedding attention module
  Replacement,  // pooled projection of H_A replaces the word embeddings
};

inline std::string to_string(AggregationVariant v) {
  switch (v) {
    case AggregationVariant::CrossModal: return "cross_modal";
    case AggregationVariant::AcousticGuided: return "acoustic_guided";
    case AggregationVariant::LinguisticGuided: return "linguistic_guided";
  }
  return "?";
}

inline AggregationVariant parse_aggregation_variant(const std::string& s) {
  if (s == "cross_modal") return AggregationVariant::CrossModal;
  if (s == "acoustic_guided") return AggregationVariant::AcousticGuided;
  if (s == "linguistic_guided") return AggregationVariant::LinguisticGuided;
  throw ConfigError("aggregation_variant: unknown value '" + s + "'");
}

inline std::string to_string(EmbeddingStrategy s) {
  return s == EmbeddingStrategy::Attention ? "attention" : "replacement";
}

inline EmbeddingStrategy parse_embedding_strategy(const std::string& s) {
  if (s == "attention") return EmbeddingStrategy::Attention;
  if (s == "replacement") return EmbeddingStrategy::Replacement;
  throw ConfigError("embedding_strategy: unknown value '" + s + "'");
}

// Architecture of the whole model. Everything that changes the parameter
// set lives here and feeds the checkpoint digest.
struct ModelConfig {
  std::size_t vocab_size = 36;  // specials + content tokens
  std::size_t input_dim = 16;
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t acoustic_layers = 2;
  std::size_t linguistic_layers = 2;
  std::size_t max_positions = 512;
  double init_std = 0.02;
  double gate_bias_init = 0.0;
  double dropout = 0.0;

  AggregationVariant aggregation = AggregationVariant::CrossModal;
  bool gate_enabled = true;        // gates of the aggregation module
  bool fuse_embedding = true;      // build the embedding attention module
  bool embed_gate_enabled = true;  // gate inside the embedding attention module
  EmbeddingStrategy embedding = EmbeddingStrategy::Attention;
  std::size_t replacement_max_len = 16;

  bool has_acoustic_guided() const { return aggregation != AggregationVariant::LinguisticGuided; }
  bool has_linguistic_guided() const { return aggregation != AggregationVariant::AcousticGuided; }
  bool uses_replacement() const { return embedding == EmbeddingStrategy::Replacement; }
  bool builds_embed_attention() const { return !uses_replacement() && fuse_embedding; }

  void validate() const {
    if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0) {
      throw ConfigError("model_dim must be a positive multiple of num_heads");
    }
    if (vocab_size <= 4 || input_dim == 0 || ffn_dim == 0 || max_positions == 0) {
      throw ConfigError("vocab_size, input_dim, ffn_dim and max_positions must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (!(init_std >= 0.0)) throw ConfigError("init_std must be >= 0");
    if (replacement_max_len == 0) throw ConfigError("replacement_max_len must be positive");
  }
};

}  // namespace wavbert
