#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "wavbert/data.hpp"
#include "wavbert/nn.hpp"
#include "wavbert/ops.hpp"

namespace wavbert {

// ---- CTC -----------------------------------------------------------------

// Minimum frame count for a target: one frame per label plus one blank
// between each pair of equal neighbours.
inline std::size_t ctc_min_frames(const TokenSeq& target) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i) repeats += target[i] == target[i - 1];
  return target.size() + repeats;
}

namespace detail {

inline double log_add(double a, double b) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

}  // namespace detail

// Negative log-likelihood of `target` under CTC with the blank at `blank`,
// using the first `num_frames` rows of `log_probs` (all rows when 0).
// Forward (alpha) and backward (beta) recursions run in log space over the
// blank-augmented label sequence of length 2U+1; the adjoint is
//   d(-log P)/d log_probs[t][k] = -sum_{s: l'_s = k} exp(alpha_t(s) + beta_t(s) - lp_t(k) - log P).
// Infeasible targets (too few frames) yield +inf with nothing recorded.
inline Tensor ctc_loss(const Tensor& log_probs, const TokenSeq& target, std::size_t num_frames = 0,
                       int blank = Vocabulary::kBlank) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (log_probs.rank() != 2) {
    throw DimensionError("ctc_loss: log_probs must be (T, vocab), got " +
                         shape_str(log_probs.shape()));
  }
  const std::size_t vocab = log_probs.shape()[1];
  const std::size_t t_len = num_frames == 0 ? log_probs.shape()[0] : num_frames;
  if (t_len > log_probs.shape()[0]) throw DimensionError("ctc_loss: num_frames exceeds rows");
  for (int id : target) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab || id == blank) {
      throw VocabularyError("ctc_loss: target id " + std::to_string(id) + " invalid");
    }
  }
  if (t_len == 0 || t_len < ctc_min_frames(target)) {
    return Tensor::scalar(std::numeric_limits<double>::infinity());
  }
  const std::size_t labels = 2 * target.size() + 1;
  std::vector<int> ext(labels, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  const auto lp = log_probs.data();
  auto at = [&](std::size_t t, std::size_t s) { return lp[t * vocab + static_cast<std::size_t>(ext[s])]; };
  auto skip_allowed = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(t_len * labels, kNegInf);
  alpha[0] = at(0, 0);
  if (labels > 1) alpha[1] = at(0, 1);
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < labels; ++s) {
      double acc = alpha[(t - 1) * labels + s];
      if (s >= 1) acc = detail::log_add(acc, alpha[(t - 1) * labels + s - 1]);
      if (skip_allowed(s)) acc = detail::log_add(acc, alpha[(t - 1) * labels + s - 2]);
      alpha[t * labels + s] = acc == kNegInf ? kNegInf : acc + at(t, s);
    }
  }
  const std::size_t last = (t_len - 1) * labels;
  double log_p = alpha[last + labels - 1];
  if (labels > 1) log_p = detail::log_add(log_p, alpha[last + labels - 2]);
  if (log_p == kNegInf) return Tensor::scalar(std::numeric_limits<double>::infinity());

  const bool track = detail::tracking({&log_probs});
  if (!track) return Tensor::scalar(-log_p);

  std::vector<double> beta(t_len * labels, kNegInf);
  beta[last + labels - 1] = at(t_len - 1, labels - 1);
  if (labels > 1) beta[last + labels - 2] = at(t_len - 1, labels - 2);
  for (std::size_t t = t_len - 1; t-- > 0;) {
    for (std::size_t s = 0; s < labels; ++s) {
      double acc = beta[(t + 1) * labels + s];
      if (s + 1 < labels) acc = detail::log_add(acc, beta[(t + 1) * labels + s + 1]);
      if (s + 2 < labels && skip_allowed(s + 2)) acc = detail::log_add(acc, beta[(t + 1) * labels + s + 2]);
      beta[t * labels + s] = acc == kNegInf ? kNegInf : acc + at(t, s);
    }
  }
  // Occupancy gradient, computed eagerly; the adjoint only scales it.
  std::vector<double> dlp(log_probs.numel(), 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t s = 0; s < labels; ++s) {
      const double ab = alpha[t * labels + s] + beta[t * labels + s];
      if (ab == kNegInf) continue;
      dlp[t * vocab + static_cast<std::size_t>(ext[s])] -= std::exp(ab - at(t, s) - log_p);
    }
  }
  return detail::make_result({}, {-log_p}, true,
                             [ln = log_probs.node(), dlp = std::move(dlp)](const detail::Node& o) {
                               if (double* g = detail::grad_target(ln)) {
                                 for (std::size_t i = 0; i < dlp.size(); ++i) g[i] += o.grad[0] * dlp[i];
                               }
                             });
}

// ---- token-level NLL --------------------------------------------------------

// Result of a loss that may have nothing to score.
struct LossValue {
  Tensor value;
  bool flagged = false;  // no scored positions; value is 0 and carries no gradient
};

namespace detail {

// Mean of -log_probs[i][target[i]] over positions with selected[i].
inline LossValue selected_nll(const Tensor& logits, const TokenSeq& target,
                              const BoolSeq& selected, const char* op) {
  if (logits.rank() != 2 || logits.shape()[0] != target.size() ||
      selected.size() != target.size()) {
    throw DimensionError(std::string(op) + ": logits " + shape_str(logits.shape()) +
                         " do not align with a target of length " + std::to_string(target.size()));
  }
  const std::size_t vocab = logits.shape()[1];
  std::size_t count = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!selected[i]) continue;
    if (target[i] < 0 || static_cast<std::size_t>(target[i]) >= vocab) {
      throw VocabularyError(std::string(op) + ": target id " + std::to_string(target[i]) +
                            " outside vocabulary");
    }
    ++count;
  }
  if (count == 0) return {Tensor::scalar(0.0), true};
  const Tensor lp = log_softmax(logits, 1);
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (selected[i]) total -= lp.data()[i * vocab + static_cast<std::size_t>(target[i])];
  }
  Tensor out = make_result({}, {total * inv}, tracking({&lp}),
                           [ln = lp.node(), target, selected, vocab, inv](const Node& o) {
                             if (double* g = grad_target(ln)) {
                               for (std::size_t i = 0; i < target.size(); ++i) {
                                 if (selected[i]) {
                                   g[i * vocab + static_cast<std::size_t>(target[i])] -= o.grad[0] * inv;
                                 }
                               }
                             }
                           });
  return {out, false};
}

}  // namespace detail

// Mean token NLL over positions whose target is not PAD.
inline LossValue ce_loss(const Tensor& logits, const TokenSeq& target, int ignore_id = Vocabulary::kPad) {
  BoolSeq selected(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) selected[i] = target[i] != ignore_id;
  return detail::selected_nll(logits, target, selected, "ce_loss");
}

// Mean NLL of the original tokens at masked positions only.
inline LossValue cmlm_loss(const Tensor& cmlm_logits, const TokenSeq& original,
                           const BoolSeq& masked_positions) {
  return detail::selected_nll(cmlm_logits, original, masked_positions, "cmlm_loss");
}

// ---- combined objective -----------------------------------------------------

struct LossWeights {
  double mu1 = 0.5;  // CTC on the acoustic encoder
  double mu2 = 0.5;  // CMLM
  double mu3 = 0.5;  // CTC on the aggregated acoustic stream
  double mu4 = 0.5;  // CE on the aggregated linguistic stream

  void validate() const {
    if (mu1 < 0 || mu2 < 0 || mu3 < 0 || mu4 < 0) throw ConfigError("loss weights must be >= 0");
    if (mu1 + mu2 + mu3 + mu4 <= 0) throw ConfigError("at least one loss weight must be positive");
  }
};

struct LossTerms {
  std::optional<Tensor> ctc1, cmlm, ctc2, ce;
};

struct CombinedLoss {
  Tensor total;
  std::size_t absent = 0;  // terms that were missing or non-finite
};

inline CombinedLoss combined_loss(const LossTerms& terms, const LossWeights& w) {
  CombinedLoss out;
  const std::array<std::pair<const std::optional<Tensor>*, double>, 4> parts{
      {{&terms.ctc1, w.mu1}, {&terms.cmlm, w.mu2}, {&terms.ctc2, w.mu3}, {&terms.ce, w.mu4}}};
  for (const auto& [term, mu] : parts) {
    if (!*term || !std::isfinite((*term)->item())) {
      ++out.absent;
      continue;
    }
    const Tensor weighted = scale(**term, mu);
    out.total = out.total.defined() ? add(out.total, weighted) : weighted;
  }
  if (!out.total.defined()) out.total = Tensor::scalar(0.0);
  return out;
}

// Scalar form; non-finite inputs count as absent.
inline double combined_loss(double ctc1, double cmlm, double ctc2, double ce, const LossWeights& w) {
  double total = 0.0;
  const std::array<std::pair<double, double>, 4> parts{
      {{ctc1, w.mu1}, {cmlm, w.mu2}, {ctc2, w.mu3}, {ce, w.mu4}}};
  for (const auto& [v, mu] : parts) {
    if (std::isfinite(v)) total += mu * v;
  }
  return total;
}

// ---- learning rate ------------------------------------------------------------

// Warmup / hold / decay over fixed step ratios.
struct TriStageSchedule {
  double peak_lr = 5e-5;
  std::uint64_t total_steps = 2000;
  std::array<double, 3> ratios{0.05, 0.45, 0.5};
  double floor_lr = 5e-7;

  void validate() const {
    if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
    if (!(floor_lr > 0) || floor_lr > peak_lr) throw ConfigError("need 0 < floor_lr <= peak_lr");
    for (double r : ratios) {
      if (r < 0) throw ConfigError("stage ratios must be >= 0");
    }
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
      throw ConfigError("stage ratios must sum to 1");
    }
  }

  double warmup_end() const { return ratios[0] * static_cast<double>(total_steps); }
  double hold_end() const { return (ratios[0] + ratios[1]) * static_cast<double>(total_steps); }
};

inline double lr_at(std::uint64_t step, const TriStageSchedule& s) {
  const double x = static_cast<double>(std::min(step, s.total_steps));
  const double warm = s.warmup_end();
  const double hold = s.hold_end();
  const double total = static_cast<double>(s.total_steps);
  if (x < warm) {
    const double f = x / warm;
    return (1.0 - f) * s.floor_lr + f * s.peak_lr;
  }
  if (x <= hold) return s.peak_lr;
  if (total <= hold) return s.floor_lr;
  const double f = (x - hold) / (total - hold);
  return (1.0 - f) * s.peak_lr + f * s.floor_lr;
}

// ---- Adam -------------------------------------------------------------------

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamOptions options;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
  std::uint64_t skipped = 0;  // parameter updates dropped for non-finite gradients

  void ensure(const ParameterList& params) {
    if (first_moment.size() == params.size()) return;
    first_moment.clear();
    second_moment.clear();
    for (const auto& p : params) {
      first_moment.emplace_back(p.tensor.numel(), 0.0);
      second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }
};

// One bias-corrected Adam update. Parameters that never received a gradient
// are left untouched.
inline void optimizer_step(const ParameterList& params, OptimizerState& state, double lr) {
  state.ensure(params);
  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    bool finite = true;
    for (double v : g) finite = finite && std::isfinite(v);
    if (!finite) {
      ++state.skipped;
      continue;
    }
    auto w = p.mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * g[j];
      v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

}  // namespace wavbert
