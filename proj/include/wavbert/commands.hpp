#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "wavbert/trainer.hpp"

// Subcommand bodies shared by the wavbert tool and the tests. Each returns a
// process exit code; errors are mapped by run_guarded.

namespace wavbert::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "run";
  std::vector<std::string> overrides;
};

inline RunConfig resolve_config(const CommonArgs& a) {
  RunConfig cfg = a.config_path.empty() ? default_config() : load_config_file(a.config_path);
  for (const auto& o : a.overrides) apply_override(cfg, o);
  if (a.seed) cfg.seed = *a.seed;
  cfg.resolve();
  cfg.validate();
  return cfg;
}

inline void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, text);
}

inline int cmd_gen_data(const CommonArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve_config(a);
  std::vector<Utterance> all = generate_corpus(cfg.corpus_options());
  std::vector<Utterance> eval(all.begin() + static_cast<std::ptrdiff_t>(cfg.num_train), all.end());
  all.resize(cfg.num_train);
  fs::create_directories(a.out_dir);
  save_dataset(fs::path(a.out_dir) / "train.jsonl", all);
  save_dataset(fs::path(a.out_dir) / "eval.jsonl", eval);
  write_text(fs::path(a.out_dir) / "resolved_config.txt", resolved_config_text(cfg));
  out << "wrote " << all.size() << " train and " << eval.size() << " eval utterances to " << a.out_dir << "\n";
  return kOk;
}

inline int cmd_train(const CommonArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve_config(a);
  const Datasets data = load_datasets(cfg);
  TrainOptions to;
  to.out_dir = a.out_dir;
  to.progress = &out;
  const TrainOutcome t = train(cfg, data, to);
  out << "final checkpoint " << t.final_checkpoint.string() << " after " << t.steps << " steps\n";
  return kOk;
}

// Config for a checkpoint: explicit --config/--set if given, otherwise the
// resolved config echoed next to the checkpoint.
inline RunConfig config_for_checkpoint(const CommonArgs& a, const fs::path& checkpoint) {
  if (!a.config_path.empty()) return resolve_config(a);
  const fs::path dir = fs::absolute(checkpoint).parent_path();
  for (const fs::path& candidate : {dir / "resolved_config.txt", dir.parent_path() / "resolved_config.txt"}) {
    if (fs::exists(candidate)) {
      CommonArgs b = a;
      b.config_path = candidate.string();
      return resolve_config(b);
    }
  }
  return resolve_config(a);
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;            // JSONL path; empty = split from the config
  std::string split = "eval";  // train | eval
  bool allow_mismatch = false;
};

inline int cmd_evaluate(const CommonArgs& a, const EvaluateArgs& e, std::ostream& out) {
  const RunConfig cfg = config_for_checkpoint(a, e.checkpoint);
  const WavBert model = load_model(cfg, e.checkpoint, e.allow_mismatch);
  std::vector<Utterance> utts;
  if (!e.data.empty()) {
    utts = load_dataset(e.data);
  } else {
    Datasets d = load_datasets(cfg);
    if (e.split == "train") {
      utts = std::move(d.train);
    } else if (e.split == "eval") {
      utts = std::move(d.eval);
    } else {
      throw ConfigError("evaluate: --split must be train or eval");
    }
  }
  const EvalReport r = evaluate(model, utts, cfg.confidence);
  fs::create_directories(a.out_dir);
  std::string rows;
  for (const auto& row : r.rows) rows += row.dump() + "\n";
  write_text(fs::path(a.out_dir) / "per_utterance.jsonl", rows);
  write_text(fs::path(a.out_dir) / "evaluation.json", r.summary().dump(2) + "\n");
  out << r.summary().dump() << "\n";
  return kOk;
}

struct AblateArgs {
  std::vector<std::string> variants;  // empty = all seven
};

inline int cmd_ablate(const CommonArgs& a, const AblateArgs& ab, std::ostream& out) {
  const RunConfig cfg = resolve_config(a);
  std::vector<std::string> keys = ab.variants;
  if (keys.empty()) {
    for (const auto& v : ablation_variants()) keys.push_back(v.key);
  }
  for (const auto& k : keys) find_ablation_variant(k);  // reject unknown names before training
  const Datasets data = load_datasets(cfg);
  AblationOptions ao;
  ao.out_dir = a.out_dir;
  ao.progress = &out;
  const auto rows = ablate(cfg, keys, data, ao);
  const std::string table = format_ablation_table(rows);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"key", r.key},
                 {"label", r.label},
                 {"census", r.census},
                 {"steps", r.steps},
                 {"train", r.train_report.summary()},
                 {"eval", r.eval_report.summary()}});
  }
  fs::create_directories(a.out_dir);
  write_text(fs::path(a.out_dir) / "ablation.md", table);
  write_text(fs::path(a.out_dir) / "ablation.json", j.dump(2) + "\n");
  out << table;
  return kOk;
}

struct GradcheckArgs {
  double fraction = 0.01;
  double tolerance = 1e-4;
  std::size_t batch = 2;
};

inline int cmd_gradcheck(const CommonArgs& a, const GradcheckArgs& g, std::ostream& out) {
  const RunConfig cfg = resolve_config(a);
  const WavBert model(cfg.model, cfg.seed);
  std::vector<Utterance> items = generate_corpus(cfg.corpus_options());
  if (items.size() < g.batch) throw ConfigError("gradcheck: corpus smaller than the batch");
  items.resize(g.batch);
  GradcheckOptions go;
  go.sample_fraction = g.fraction;
  go.tolerance = g.tolerance;
  go.seed = cfg.seed;
  const GradcheckReport r = gradcheck(model.parameters(), model_loss_closure(model, cfg, items), go);
  if (!r.warning.empty()) out << "warning: " << r.warning << "\n";
  out << "census " << r.census << ", checked " << r.checked << ", max relative error " << r.max_rel_error;
  if (r.checked) out << " at " << r.worst.name << "[" << r.worst.index << "]";
  out << "\n";
  for (const auto& f : r.failures) {
    out << "FAIL " << f.name << "[" << f.index << "] analytic " << f.analytic << " numeric " << f.numeric
        << " rel " << f.rel_error << "\n";
  }
  out << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? kOk : kNumeric;
}

// Runs a command body, mapping library errors to exit codes.
template <class F>
int run_guarded(F&& body, std::ostream& err = std::cerr) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const VocabularyError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace wavbert::cli
