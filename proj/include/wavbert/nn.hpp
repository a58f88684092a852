#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wavbert/ops.hpp"
#include "wavbert/rng.hpp"

namespace wavbert {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Ordered parameter registry; order is the registration order and is the
// order used by checkpoints and the optimizer.
class ParameterList {
 public:
  void add(std::string name, Tensor tensor) {
    items_.push_back({std::move(name), std::move(tensor)});
  }

  std::size_t size() const { return items_.size(); }
  const NamedParameter& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  // Total number of scalar parameters.
  std::size_t census() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }

  std::optional<Tensor> find(const std::string& name) const {
    for (const auto& p : items_) {
      if (p.name == name) return p.tensor;
    }
    return std::nullopt;
  }

  void zero_grads() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedParameter> items_;
};

struct InitOptions {
  double stddev = 0.02;
};

inline Tensor normal_parameter(Shape shape, Rng& rng, double stddev) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return Tensor::parameter(std::move(shape), std::move(values));
}

inline Tensor constant_parameter(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

// Per-step state threaded through forward passes. Dropout is active only
// when `training` is set, a rate is positive and an RNG is supplied.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

inline Tensor dropout(const Tensor& x, const ForwardContext* ctx) {
  if (!ctx || !ctx->training || ctx->dropout <= 0.0 || !ctx->rng) return x;
  const double keep = 1.0 - ctx->dropout;
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = ctx->rng->uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, const InitOptions& init)
      : weight_(normal_parameter({in, out}, rng, init.stddev)), bias_(constant_parameter({out}, 0.0)) {}

  Tensor operator()(const Tensor& x) const {
    if (x.rank() == 0 || x.shape().back() != in_features()) {
      throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                           shape_str(weight_.shape()));
    }
    return add(matmul(x, weight_), bias_);
  }

  std::size_t in_features() const { return weight_.shape()[0]; }
  std::size_t out_features() const { return weight_.shape()[1]; }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.add(prefix + ".weight", weight_);
    out.add(prefix + ".bias", bias_);
  }

  static std::size_t census(std::size_t in, std::size_t out) { return in * out + out; }

 private:
  Tensor weight_;
  Tensor bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gamma_(constant_parameter({d}, 1.0)), beta_(constant_parameter({d}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma_, beta_); }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.add(prefix + ".gamma", gamma_);
    out.add(prefix + ".beta", beta_);
  }

 private:
  Tensor gamma_;
  Tensor beta_;
};

struct AttentionResult {
  Tensor output;
  std::vector<Tensor> weights;  // one (T_q, T_k) matrix per head
};

// Multi-head scaled dot-product attention with separate Q/K/V/output
// projections. Heads are column slices of the projected inputs.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_dim, std::size_t num_heads, Rng& rng,
                     const InitOptions& init)
      : num_heads_(num_heads) {
    if (num_heads == 0 || model_dim % num_heads != 0) {
      throw ConfigError("attention: model_dim " + std::to_string(model_dim) +
                        " is not divisible by num_heads " + std::to_string(num_heads));
    }
    query_ = Linear(model_dim, model_dim, rng, init);
    key_ = Linear(model_dim, model_dim, rng, init);
    value_ = Linear(model_dim, model_dim, rng, init);
    output_ = Linear(model_dim, model_dim, rng, init);
  }

  std::size_t model_dim() const { return query_.in_features(); }
  std::size_t num_heads() const { return num_heads_; }

  AttentionResult attend(const Tensor& q, const Tensor& k, const Tensor& v,
                         const BoolSeq& key_padding_mask) const {
    const std::size_t d = model_dim();
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape()[1] != d ||
        k.shape()[1] != d || v.shape()[1] != d || k.shape()[0] != v.shape()[0]) {
      throw DimensionError("attention: expected (T_q, " + std::to_string(d) + ") query and (T_k, " +
                           std::to_string(d) + ") key/value, got " + shape_str(q.shape()) + ", " +
                           shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    if (key_padding_mask.size() != k.shape()[0]) {
      throw DimensionError("attention: mask length " + std::to_string(key_padding_mask.size()) +
                           " != key length " + std::to_string(k.shape()[0]));
    }
    const Tensor qp = query_(q);
    const Tensor kp = key_(k);
    const Tensor vp = value_(v);
    const std::size_t head_dim = d / num_heads_;
    const double temperature = 1.0 / std::sqrt(static_cast<double>(head_dim));
    AttentionResult result;
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < num_heads_; ++h) {
      const Tensor qh = slice_last(qp, h * head_dim, head_dim);
      const Tensor kh = slice_last(kp, h * head_dim, head_dim);
      const Tensor vh = slice_last(vp, h * head_dim, head_dim);
      const Tensor scores = scale(matmul(qh, transpose(kh)), temperature);
      Tensor weights = masked_softmax(scores, key_padding_mask);
      heads.push_back(matmul(weights, vh));
      result.weights.push_back(std::move(weights));
    }
    result.output = output_(num_heads_ == 1 ? heads[0] : concat_last(heads));
    return result;
  }

  Tensor operator()(const Tensor& q, const Tensor& k, const Tensor& v,
                    const BoolSeq& key_padding_mask) const {
    return attend(q, k, v, key_padding_mask).output;
  }

  Linear& query() { return query_; }
  Linear& key() { return key_; }
  Linear& value() { return value_; }
  Linear& output() { return output_; }
  const Linear& value() const { return value_; }
  const Linear& output() const { return output_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    query_.collect(prefix + ".query", out);
    key_.collect(prefix + ".key", out);
    value_.collect(prefix + ".value", out);
    output_.collect(prefix + ".output", out);
  }

  static std::size_t census(std::size_t d) { return 4 * Linear::census(d, d); }

 private:
  std::size_t num_heads_ = 1;
  Linear query_, key_, value_, output_;
};

// Position-wise affine -> GELU -> affine.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t model_dim, std::size_t inner_dim, Rng& rng, const InitOptions& init)
      : inner_(model_dim, inner_dim, rng, init), outer_(inner_dim, model_dim, rng, init) {}

  Tensor operator()(const Tensor& x, const ForwardContext* ctx = nullptr) const {
    return outer_(dropout(gelu(inner_(x)), ctx));
  }

  Linear& inner() { return inner_; }
  Linear& outer() { return outer_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    inner_.collect(prefix + ".inner", out);
    outer_.collect(prefix + ".outer", out);
  }

  static std::size_t census(std::size_t d, std::size_t inner) {
    return Linear::census(d, inner) + Linear::census(inner, d);
  }

 private:
  Linear inner_, outer_;
};

// Pre-norm transformer encoder block:
//   x = x + Attn(LN(x)); x = x + FFN(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t model_dim, std::size_t num_heads, std::size_t inner_dim, Rng& rng,
                   const InitOptions& init)
      : attn_norm_(model_dim),
        attention_(model_dim, num_heads, rng, init),
        ffn_norm_(model_dim),
        ffn_(model_dim, inner_dim, rng, init) {}

  Tensor operator()(const Tensor& x, const BoolSeq& mask,
                    const ForwardContext* ctx = nullptr) const {
    const Tensor normed = attn_norm_(x);
    const Tensor h = add(x, dropout(attention_(normed, normed, normed, mask), ctx));
    return add(h, dropout(ffn_(ffn_norm_(h), ctx), ctx));
  }

  MultiHeadAttention& attention() { return attention_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    attn_norm_.collect(prefix + ".attn_norm", out);
    attention_.collect(prefix + ".attn", out);
    ffn_norm_.collect(prefix + ".ffn_norm", out);
    ffn_.collect(prefix + ".ffn", out);
  }

  static std::size_t census(std::size_t d, std::size_t inner) {
    return 2 * 2 * d + MultiHeadAttention::census(d) + FeedForward::census(d, inner);
  }

 private:
  LayerNorm attn_norm_;
  MultiHeadAttention attention_;
  LayerNorm ffn_norm_;
  FeedForward ffn_;
};

// Sigmoid gate over [context; residual]:
//   phi = sigmoid(W [context; residual] + B), elementwise of width d.
class GatedWeighting {
 public:
  GatedWeighting() = default;
  GatedWeighting(std::size_t model_dim, Rng& rng, const InitOptions& init, double bias_init = 0.0)
      : proj_(2 * model_dim, model_dim, rng, init) {
    auto b = proj_.bias().mutable_data();
    std::fill(b.begin(), b.end(), bias_init);
  }

  Tensor gate(const Tensor& context, const Tensor& residual) const {
    return sigmoid(proj_(concat_last({context, residual})));
  }

  Linear& projection() { return proj_; }
  bool built() const { return proj_.weight().defined(); }

  void collect(const std::string& prefix, ParameterList& out) const {
    proj_.collect(prefix + ".proj", out);
  }

  static std::size_t census(std::size_t d) { return Linear::census(2 * d, d); }

 private:
  Linear proj_;
};

// residual + phi * context when a gate is given, residual + context otherwise.
inline Tensor gated_fuse(const Tensor& context, const Tensor& residual, const GatedWeighting* gate,
                         bool enabled) {
  if (context.shape() != residual.shape()) {
    throw DimensionError("gated_fuse: context " + shape_str(context.shape()) +
                         " and residual " + shape_str(residual.shape()) + " differ");
  }
  if (!enabled) return add(residual, context);
  if (!gate) throw ConfigError("gated_fuse: gate enabled but no gate parameters built");
  return add(residual, mul(gate->gate(context, residual), context));
}

// Learned absolute positions 0..max_length-1.
class PositionalEmbedding {
 public:
  PositionalEmbedding() = default;
  PositionalEmbedding(std::size_t max_length, std::size_t model_dim, Rng& rng,
                      const InitOptions& init)
      : table_(normal_parameter({max_length, model_dim}, rng, init.stddev)) {}

  std::size_t max_length() const { return table_.shape()[0]; }

  Tensor operator()(std::size_t length) const {
    if (length > max_length()) {
      throw CapacityError("positional_embedding: length " + std::to_string(length) +
                          " exceeds maximum " + std::to_string(max_length()));
    }
    std::vector<int> ids(length);
    for (std::size_t i = 0; i < length; ++i) ids[i] = static_cast<int>(i);
    return embedding(table_, ids);
  }

  Tensor& table() { return table_; }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.add(prefix + ".table", table_);
  }

 private:
  Tensor table_;
};

}  // namespace wavbert
