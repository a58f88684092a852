#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "wavbert/checkpoint.hpp"
#include "wavbert/data.hpp"
#include "wavbert/decode.hpp"
#include "wavbert/gradcheck.hpp"
#include "wavbert/model.hpp"
#include "wavbert/run_config.hpp"

namespace wavbert {

namespace fs = std::filesystem;

// RNG stream ids derived from the run seed.
enum StreamId : std::uint64_t {
  kStreamOrder = 1,
  kStreamMasking = 2,
  kStreamBranch = 3,
  kStreamDropout = 4,
};

struct Datasets {
  std::vector<Utterance> train;
  std::vector<Utterance> eval;
};

inline void check_dataset(const std::vector<Utterance>& utts, const ModelConfig& model, const std::string& what) {
  const Vocabulary vocab{model.vocab_size - Vocabulary::kFirstContent};
  for (const auto& u : utts) {
    if (u.features.rank() != 2 || u.features.shape()[1] != model.input_dim) {
      throw ConfigError(what + ": utterance " + u.id + " has features " + shape_str(u.features.shape()) +
                        ", model expects input_dim " + std::to_string(model.input_dim));
    }
    if (u.tokens.empty()) throw ConfigError(what + ": utterance " + u.id + " has no tokens");
    for (int id : u.tokens) {
      if (!vocab.is_content(id)) {
        throw VocabularyError(what + ": utterance " + u.id + " has non-content token " + std::to_string(id));
      }
    }
  }
}

inline Datasets load_datasets(const RunConfig& cfg) {
  Datasets d;
  if (cfg.train_data.empty() || cfg.eval_data.empty()) {
    std::vector<Utterance> all = generate_corpus(cfg.corpus_options());
    d.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.num_train), all.end());
    all.resize(cfg.num_train);
    d.train = std::move(all);
  }
  if (!cfg.train_data.empty()) d.train = load_dataset(cfg.train_data);
  if (!cfg.eval_data.empty()) d.eval = load_dataset(cfg.eval_data);
  if (cfg.train_subset > 0 && cfg.train_subset < d.train.size()) d.train.resize(cfg.train_subset);
  check_dataset(d.train, cfg.model, "train data");
  check_dataset(d.eval, cfg.model, "eval data");
  return d;
}

// Epoch-wise shuffled order; a batch may wrap into the next epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, Rng rng) : rng_(rng), order_(n) {
    if (n == 0) throw EmptyInputError("batch sampler: empty dataset");
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  }

  std::vector<std::size_t> next(std::size_t batch_size) {
    std::vector<std::size_t> out;
    while (out.size() < batch_size) {
      if (pos_ == 0) rng_.shuffle(order_);
      out.push_back(order_[pos_]);
      pos_ = (pos_ + 1) % order_.size();
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Rescales all gradients so their global L2 norm is at most max_norm.
inline double clip_grad_norm(const ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor t = p.tensor;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

inline nlohmann::json loss_json(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

struct TrainOptions {
  fs::path out_dir;           // empty = write nothing
  std::ostream* progress = nullptr;
  bool write_checkpoints = true;
};

struct TrainOutcome {
  WavBert model;
  OptimizerState optimizer;
  std::uint64_t steps = 0;
  fs::path final_checkpoint;
  std::vector<nlohmann::json> metrics;
};

inline std::uint64_t model_digest(const RunConfig& cfg) { return config_digest(cfg); }

inline CheckpointData make_checkpoint(const RunConfig& cfg, const WavBert& model, const OptimizerState& opt,
                                      std::uint64_t step) {
  return snapshot(model.parameters(), &opt, model_digest(cfg), step);
}

inline std::string step_checkpoint_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06llu.wbrt", static_cast<unsigned long long>(step));
  return buf;
}

// encode_acoustic -> ctc1; pick the linguistic input; embedding attention and
// linguistic encoder -> cmlm; aggregation -> ctc2, ce; weighted sum; Adam.
inline TrainOutcome train(const RunConfig& cfg, const Datasets& data, const TrainOptions& opt = {}) {
  cfg.validate();
  if (data.train.empty()) throw EmptyInputError("train: empty training set");
  TrainOutcome out{WavBert(cfg.model, cfg.seed), OptimizerState{}, 0, {}, {}};
  out.optimizer.options = cfg.adam;
  const ParameterList params = out.model.parameters();

  const bool writing = !opt.out_dir.empty();
  const fs::path ckpt_dir = cfg.checkpoint_dir.empty() ? opt.out_dir / "checkpoints" : fs::path(cfg.checkpoint_dir);
  std::ofstream metrics_file;
  if (writing) {
    fs::create_directories(opt.out_dir);
    write_file_atomic(opt.out_dir / "resolved_config.txt", resolved_config_text(cfg));
    metrics_file.open(opt.out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics_file) throw IoError("train: cannot open metrics log in " + opt.out_dir.string());
  }

  BatchSampler sampler(data.train.size(), Rng::stream(cfg.seed, kStreamOrder));
  Rng masking_rng = Rng::stream(cfg.seed, kStreamMasking);
  Rng branch_rng = Rng::stream(cfg.seed, kStreamBranch);
  Rng dropout_rng = Rng::stream(cfg.seed, kStreamDropout);
  const ForwardContext ctx{true, cfg.model.dropout, &dropout_rng};
  const TriStageSchedule lr_schedule = cfg.lr_schedule();
  const SamplingSchedule schedule = cfg.effective_schedule();

  for (std::uint64_t step = 0; step < cfg.total_steps; ++step) {
    const double lr = lr_at(step, lr_schedule);
    StepOptions so{step, schedule, cfg.ce_on_hypothesis, &ctx};

    for (const auto& p : params) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
    BatchObjective agg;
    double total = 0.0;
    double sums[4] = {0, 0, 0, 0};
    std::size_t present[4] = {0, 0, 0, 0};
    for (std::size_t micro = 0; micro < cfg.grad_accum; ++micro) {
      std::vector<Utterance> items;
      for (std::size_t i : sampler.next(cfg.batch_size)) items.push_back(data.train[i]);
      Batch batch = collate(items);
      apply_masking(batch, masking_rng, cfg.mask_ratio_min, cfg.mask_ratio_max);
      std::vector<double> draws(batch.size());
      for (double& d : draws) d = branch_rng.uniform();

      TapeScope scope;
      const BatchObjective obj = out.model.batch_objective(batch, draws, so, cfg.weights);
      const double value = obj.total.item();
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite combined loss at step " + std::to_string(step) +
                           " (ctc1=" + detail::format_double(obj.ctc1) + " cmlm=" + detail::format_double(obj.cmlm) +
                           " ctc2=" + detail::format_double(obj.ctc2) + " ce=" + detail::format_double(obj.ce) + ")");
      }
      backward(cfg.grad_accum == 1 ? obj.total : scale(obj.total, 1.0 / static_cast<double>(cfg.grad_accum)));
      total += value / static_cast<double>(cfg.grad_accum);
      const double vals[4] = {obj.ctc1, obj.cmlm, obj.ctc2, obj.ce};
      for (int i = 0; i < 4; ++i) {
        if (std::isfinite(vals[i])) {
          sums[i] += vals[i];
          ++present[i];
        }
      }
      agg.ground += obj.ground;
      agg.hypothesis += obj.hypothesis;
      agg.infeasible_ctc += obj.infeasible_ctc;
      agg.length_mismatch += obj.length_mismatch;
    }
    const double grad_norm = clip_grad_norm(params, cfg.grad_clip);
    optimizer_step(params, out.optimizer, lr);
    out.steps = step + 1;

    if (step % cfg.log_interval == 0 || step + 1 == cfg.total_steps) {
      auto mean = [&](int i) { return present[i] ? sums[i] / static_cast<double>(present[i]) : NAN; };
      nlohmann::json line = {
          {"step", step},
          {"total", loss_json(total)},
          {"ctc1", loss_json(mean(0))},
          {"cmlm", loss_json(mean(1))},
          {"ctc2", loss_json(mean(2))},
          {"ce", loss_json(mean(3))},
          {"p", sample_probability(step, schedule)},
          {"lr", lr},
          {"ground", agg.ground},
          {"hypothesis", agg.hypothesis},
          {"infeasible_ctc", agg.infeasible_ctc},
          {"length_mismatch", agg.length_mismatch},
          {"skipped_updates", out.optimizer.skipped},
          {"grad_norm", loss_json(grad_norm)},
      };
      if (writing) metrics_file << line.dump() << '\n' << std::flush;
      if (opt.progress) *opt.progress << line.dump() << '\n' << std::flush;
      out.metrics.push_back(std::move(line));
    }
    if (writing && opt.write_checkpoints && (step + 1) % cfg.eval_interval == 0 && step + 1 < cfg.total_steps) {
      save_checkpoint(ckpt_dir / step_checkpoint_name(step + 1),
                      make_checkpoint(cfg, out.model, out.optimizer, step + 1));
    }
  }

  if (writing) {
    out.final_checkpoint = opt.out_dir / "final.wbrt";
    save_checkpoint(out.final_checkpoint, make_checkpoint(cfg, out.model, out.optimizer, out.steps));
  }
  return out;
}

// ---- evaluation --------------------------------------------------------------

struct EvalReport {
  std::size_t utterances = 0;
  std::size_t reference_tokens = 0;
  // Corpus-level CER: total edits / total reference tokens. NaN for absent heads.
  double cer_ctc1 = NAN;
  double cer_ctc2 = NAN;
  double cer_ce = NAN;
  double cer_selected = NAN;
  double win_ctc2 = 0.0;  // fraction of utterances where the head was selected
  double win_ce = 0.0;
  std::vector<nlohmann::json> rows;

  nlohmann::json summary() const {
    return {{"utterances", utterances},       {"reference_tokens", reference_tokens},
            {"cer_ctc1", loss_json(cer_ctc1)}, {"cer_ctc2", loss_json(cer_ctc2)},
            {"cer_ce", loss_json(cer_ce)},     {"cer_selected", loss_json(cer_selected)},
            {"win_ctc2", win_ctc2},            {"win_ce", win_ce}};
  }
};

inline EvalReport evaluate(const WavBert& model, const std::vector<Utterance>& utts,
                           ConfidenceMode mode = ConfidenceMode::MeanMaxPosterior) {
  if (utts.empty()) throw EmptyInputError("evaluate: empty dataset");
  check_dataset(utts, model.config(), "evaluate");
  EvalReport r;
  std::size_t e1 = 0, e2 = 0, ece = 0, esel = 0, w2 = 0, wce = 0;
  bool has2 = false, hasce = false;
  for (const auto& u : utts) {
    const InferenceResult inf = model.infer(u.features, mode);
    const std::size_t d1 = edit_distance(inf.ctc1.tokens, u.tokens);
    const std::size_t dsel = edit_distance(inf.selected.tokens, u.tokens);
    e1 += d1;
    esel += dsel;
    nlohmann::json row = {{"id", u.id},
                          {"reference", u.tokens},
                          {"ctc1", inf.ctc1.tokens},
                          {"ctc1_confidence", inf.ctc1.confidence},
                          {"selected", inf.selected.tokens},
                          {"selected_head", to_string(inf.selected.source)},
                          {"cer_ctc1", cer(inf.ctc1.tokens, u.tokens)},
                          {"cer_selected", cer(inf.selected.tokens, u.tokens)}};
    if (inf.ctc2) {
      has2 = true;
      e2 += edit_distance(inf.ctc2->tokens, u.tokens);
      row["ctc2"] = inf.ctc2->tokens;
      row["ctc2_confidence"] = inf.ctc2->confidence;
      row["cer_ctc2"] = cer(inf.ctc2->tokens, u.tokens);
    }
    if (inf.ce) {
      hasce = true;
      ece += edit_distance(inf.ce->tokens, u.tokens);
      row["ce"] = inf.ce->tokens;
      row["ce_confidence"] = inf.ce->confidence;
      row["cer_ce"] = cer(inf.ce->tokens, u.tokens);
    }
    w2 += inf.selected.source == HeadId::Ctc2;
    wce += inf.selected.source == HeadId::Ce;
    r.reference_tokens += u.tokens.size();
    r.rows.push_back(std::move(row));
  }
  r.utterances = utts.size();
  const double n = static_cast<double>(r.reference_tokens);
  r.cer_ctc1 = static_cast<double>(e1) / n;
  if (has2) r.cer_ctc2 = static_cast<double>(e2) / n;
  if (hasce) r.cer_ce = static_cast<double>(ece) / n;
  r.cer_selected = static_cast<double>(esel) / n;
  r.win_ctc2 = static_cast<double>(w2) / static_cast<double>(r.utterances);
  r.win_ce = static_cast<double>(wce) / static_cast<double>(r.utterances);
  return r;
}

// Rebuilds a model from a checkpoint; refuses before touching any parameter
// when the architecture does not match.
inline WavBert load_model(const RunConfig& cfg, const fs::path& checkpoint, bool allow_digest_mismatch = false,
                          OptimizerState* optimizer = nullptr) {
  const CheckpointData data = load_checkpoint(checkpoint);
  WavBert model(cfg.model, cfg.seed);
  restore(data, model.parameters(), optimizer, model_digest(cfg), allow_digest_mismatch);
  return model;
}

// ---- ablation ----------------------------------------------------------------

struct AblationVariant {
  std::string key;
  std::string label;
  std::function<void(RunConfig&)> apply;
};

inline const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants = {
      {"cross_modal", "Gated Cross-Modal Attention", [](RunConfig&) {}},
      {"no_gated_weighting", "w/o Gated Weighting", [](RunConfig& c) { c.model.gate_enabled = false; }},
      {"acoustic_guided", "Gated Acoustic-Guided Attention",
       [](RunConfig& c) { c.model.aggregation = AggregationVariant::AcousticGuided; }},
      {"linguistic_guided", "Gated Linguistic-Guided Attention",
       [](RunConfig& c) { c.model.aggregation = AggregationVariant::LinguisticGuided; }},
      {"embedding_replacement", "Embedding Replacement",
       [](RunConfig& c) { c.model.embedding = EmbeddingStrategy::Replacement; }},
      {"no_sampling", "w/o Sampling with Decay", [](RunConfig& c) { c.sampling = false; }},
      {"no_gated_attention", "w/o Gated Attention", [](RunConfig& c) { c.model.fuse_embedding = false; }},
  };
  return variants;
}

inline const AblationVariant& find_ablation_variant(const std::string& key) {
  for (const auto& v : ablation_variants()) {
    if (v.key == key || v.label == key) return v;
  }
  throw ConfigError("ablate: unknown variant '" + key + "'");
}

struct AblationRow {
  std::string key;
  std::string label;
  std::size_t census = 0;
  std::uint64_t steps = 0;
  EvalReport train_report;
  EvalReport eval_report;
};

struct AblationOptions {
  fs::path out_dir;
  std::ostream* progress = nullptr;
};

inline std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& keys,
                                       const Datasets& data, const AblationOptions& opt = {}) {
  std::vector<const AblationVariant*> chosen;
  for (const auto& k : keys) chosen.push_back(&find_ablation_variant(k));
  std::vector<AblationRow> rows;
  for (const AblationVariant* v : chosen) {
    RunConfig cfg = base;
    v->apply(cfg);
    cfg.resolve();
    cfg.validate();
    if (opt.progress) *opt.progress << "# variant " << v->key << "\n" << std::flush;
    TrainOptions to;
    if (!opt.out_dir.empty()) to.out_dir = opt.out_dir / v->key;
    to.write_checkpoints = false;
    const TrainOutcome t = train(cfg, data, to);
    AblationRow row{v->key, v->label, t.model.census(), t.steps, evaluate(t.model, data.train, cfg.confidence), {}};
    if (!data.eval.empty()) row.eval_report = evaluate(t.model, data.eval, cfg.confidence);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_cer(double v) {
  if (!std::isfinite(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// Markdown table, one row per variant.
inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string s =
      "| Model | Params | Train CER | Eval CER | Eval CTC1 | Eval CTC2 | Eval CE |\n"
      "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    s += "| " + r.label + " | " + std::to_string(r.census) + " | " + format_cer(r.train_report.cer_selected) +
         " | " + format_cer(r.eval_report.cer_selected) + " | " + format_cer(r.eval_report.cer_ctc1) + " | " +
         format_cer(r.eval_report.cer_ctc2) + " | " + format_cer(r.eval_report.cer_ce) + " |\n";
  }
  return s;
}

// ---- gradient check on the whole model ----------------------------------------

// Fixed masked batch with every item on the ground-truth branch, so all four
// losses are present and the loss is a deterministic function of the weights.
inline std::function<Tensor()> model_loss_closure(const WavBert& model, const RunConfig& cfg,
                                                  const std::vector<Utterance>& items) {
  Batch batch = collate(items);
  Rng rng = Rng::stream(cfg.seed, kStreamMasking);
  apply_masking(batch, rng, cfg.mask_ratio_min, cfg.mask_ratio_max);
  auto shared = std::make_shared<Batch>(std::move(batch));
  const std::size_t n = items.size();
  const LossWeights weights = cfg.weights;
  return [&model, shared, n, weights]() {
    StepOptions so{0, SamplingSchedule::always_ground(), CeOnHypothesis::Truncate, nullptr};
    return model.batch_objective(*shared, std::vector<double>(n, 0.0), so, weights).total;
  };
}

}  // namespace wavbert
