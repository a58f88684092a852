#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wavbert/data.hpp"
#include "wavbert/decode.hpp"
#include "wavbert/error.hpp"
#include "wavbert/model.hpp"
#include "wavbert/model_config.hpp"
#include "wavbert/objectives.hpp"

namespace wavbert {

// Everything a run needs. Config files are `key = value` lines; `#` starts
// a comment.
struct RunConfig {
  std::uint64_t seed = 1;

  // data
  CorpusOptions corpus;  // num_utts is derived from num_train + num_eval
  std::size_t num_train = 512;
  std::size_t num_eval = 64;
  std::size_t train_subset = 0;  // 0 = use every training utterance
  std::string train_data;        // JSONL path; empty = generate
  std::string eval_data;

  ModelConfig model;  // vocab_size and input_dim derived from the corpus keys

  bool sampling = true;
  SamplingSchedule schedule;
  double mask_ratio_min = 0.15;
  double mask_ratio_max = 0.5;

  LossWeights weights;
  double peak_lr = 5e-5;
  double floor_lr_ratio = 0.01;
  std::array<double, 3> stage_ratios{0.05, 0.45, 0.5};
  AdamOptions adam;
  double grad_clip = 0.0;  // 0 = off
  std::size_t grad_accum = 1;

  CeOnHypothesis ce_on_hypothesis = CeOnHypothesis::Truncate;
  ConfidenceMode confidence = ConfidenceMode::MeanMaxPosterior;

  std::size_t batch_size = 8;
  std::uint64_t total_steps = 2000;
  std::uint64_t log_interval = 50;
  std::uint64_t eval_interval = 500;
  std::string checkpoint_dir;  // empty = <out>/checkpoints

  TriStageSchedule lr_schedule() const {
    TriStageSchedule s;
    s.peak_lr = peak_lr;
    s.floor_lr = peak_lr * floor_lr_ratio;
    s.total_steps = total_steps;
    s.ratios = stage_ratios;
    return s;
  }

  SamplingSchedule effective_schedule() const {
    return sampling ? schedule : SamplingSchedule::always_ground();
  }

  CorpusOptions corpus_options() const {
    CorpusOptions c = corpus;
    c.num_utts = num_train + num_eval;
    return c;
  }

  // Fills the fields derived from others; call after any change.
  void resolve() {
    model.vocab_size = corpus.vocab_size + Vocabulary::kFirstContent;
    model.input_dim = corpus.input_dim;
  }

  void validate() const {
    model.validate();
    schedule.validate();
    weights.validate();
    lr_schedule().validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (grad_accum == 0) throw ConfigError("grad_accum must be positive");
    if (log_interval == 0 || eval_interval == 0) throw ConfigError("log/eval intervals must be positive");
    if (!(0.0 < mask_ratio_min && mask_ratio_min <= mask_ratio_max && mask_ratio_max <= 1.0)) {
      throw ConfigError("mask ratios: need 0 < mask_ratio_min <= mask_ratio_max <= 1");
    }
    if (!(floor_lr_ratio > 0.0 && floor_lr_ratio <= 1.0)) throw ConfigError("floor_lr_ratio must be in (0, 1]");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
    if (train_data.empty() && num_train == 0) throw ConfigError("num_train must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ConfigError(key + ": cannot parse '" + text + "'");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + text + "'");
}

template <std::size_t N>
std::array<double, N> parse_doubles(const std::string& key, const std::string& text) {
  std::array<double, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) throw ConfigError(key + ": expected " + std::to_string(N) + " values");
    out[i++] = parse_number<double>(key, trim(item));
  }
  if (i != N) throw ConfigError(key + ": expected " + std::to_string(N) + " values");
  return out;
}

template <std::size_t N>
std::string format_doubles(const std::array<double, N>& v) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) s += ',';
    s += format_double(v[i]);
  }
  return s;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string doc;
  bool architecture;  // feeds the checkpoint digest
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// The key table. Order here is the order of the resolved-config echo.
inline const std::vector<ConfigKey>& config_keys() {
  using detail::format_double;
  using detail::parse_bool;
  using detail::parse_number;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add_u64 = [&k](std::string name, std::string doc, bool arch, auto member) {
      k.push_back({name, std::move(doc), arch,
                   [name, member](RunConfig& c, const std::string& v) {
                     member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(
                         parse_number<std::uint64_t>(name, v));
                   },
                   [member](const RunConfig& c) {
                     return std::to_string(member(const_cast<RunConfig&>(c)));
                   }});
    };
    auto add_f64 = [&k](std::string name, std::string doc, bool arch, auto member) {
      k.push_back({name, std::move(doc), arch,
                   [name, member](RunConfig& c, const std::string& v) {
                     member(c) = parse_number<double>(name, v);
                   },
                   [member](const RunConfig& c) {
                     return format_double(member(const_cast<RunConfig&>(c)));
                   }});
    };
    auto add_bool = [&k](std::string name, std::string doc, bool arch, auto member) {
      k.push_back({name, std::move(doc), arch,
                   [name, member](RunConfig& c, const std::string& v) { member(c) = parse_bool(name, v); },
                   [member](const RunConfig& c) {
                     return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false");
                   }});
    };
    auto add_str = [&k](std::string name, std::string doc, auto member) {
      k.push_back({name, std::move(doc), false,
                   [member](RunConfig& c, const std::string& v) { member(c) = v; },
                   [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }});
    };

    add_u64("seed", "model init, batching, masking and sampling seed", false,
            [](RunConfig& c) -> std::uint64_t& { return c.seed; });

    add_u64("data_seed", "synthetic corpus seed", false,
            [](RunConfig& c) -> std::uint64_t& { return c.corpus.seed; });
    add_u64("num_train", "generated training utterances", false,
            [](RunConfig& c) -> std::size_t& { return c.num_train; });
    add_u64("num_eval", "generated evaluation utterances", false,
            [](RunConfig& c) -> std::size_t& { return c.num_eval; });
    add_u64("train_subset", "train on the first N utterances only (0 = all)", false,
            [](RunConfig& c) -> std::size_t& { return c.train_subset; });
    add_str("train_data", "training JSONL file (empty = generate)",
            [](RunConfig& c) -> std::string& { return c.train_data; });
    add_str("eval_data", "evaluation JSONL file (empty = generate)",
            [](RunConfig& c) -> std::string& { return c.eval_data; });
    add_u64("vocab_size", "content tokens (specials are added on top)", true,
            [](RunConfig& c) -> std::size_t& { return c.corpus.vocab_size; });
    add_u64("input_dim", "acoustic feature dimension", true,
            [](RunConfig& c) -> std::size_t& { return c.corpus.input_dim; });
    add_u64("min_len", "shortest token sequence", false,
            [](RunConfig& c) -> std::size_t& { return c.corpus.min_len; });
    add_u64("max_len", "longest token sequence", false,
            [](RunConfig& c) -> std::size_t& { return c.corpus.max_len; });
    add_u64("min_repeat", "fewest frames per token", false,
            [](RunConfig& c) -> std::size_t& { return c.corpus.min_repeat; });
    add_u64("max_repeat", "most frames per token", false,
            [](RunConfig& c) -> std::size_t& { return c.corpus.max_repeat; });
    add_f64("noise_sigma", "frame noise standard deviation", false,
            [](RunConfig& c) -> double& { return c.corpus.noise_sigma; });

    add_u64("model_dim", "hidden width", true, [](RunConfig& c) -> std::size_t& { return c.model.model_dim; });
    add_u64("num_heads", "attention heads", true, [](RunConfig& c) -> std::size_t& { return c.model.num_heads; });
    add_u64("ffn_dim", "feed-forward inner width", true,
            [](RunConfig& c) -> std::size_t& { return c.model.ffn_dim; });
    add_u64("acoustic_layers", "acoustic encoder blocks", true,
            [](RunConfig& c) -> std::size_t& { return c.model.acoustic_layers; });
    add_u64("linguistic_layers", "linguistic encoder blocks", true,
            [](RunConfig& c) -> std::size_t& { return c.model.linguistic_layers; });
    add_u64("max_positions", "learned position table size", true,
            [](RunConfig& c) -> std::size_t& { return c.model.max_positions; });
    add_f64("init_std", "normal init standard deviation", false,
            [](RunConfig& c) -> double& { return c.model.init_std; });
    add_f64("gate_bias_init", "initial gate bias", false,
            [](RunConfig& c) -> double& { return c.model.gate_bias_init; });
    add_f64("dropout", "dropout rate during training", false,
            [](RunConfig& c) -> double& { return c.model.dropout; });
    k.push_back({"aggregation_variant", "cross_modal | acoustic_guided | linguistic_guided", true,
                 [](RunConfig& c, const std::string& v) { c.model.aggregation = parse_aggregation_variant(v); },
                 [](const RunConfig& c) { return to_string(c.model.aggregation); }});
    add_bool("gate_enabled", "gates in the aggregation module", true,
             [](RunConfig& c) -> bool& { return c.model.gate_enabled; });
    add_bool("fuse_embedding", "build the embedding attention module", true,
             [](RunConfig& c) -> bool& { return c.model.fuse_embedding; });
    add_bool("embed_gate_enabled", "gate inside the embedding attention module", true,
             [](RunConfig& c) -> bool& { return c.model.embed_gate_enabled; });
    k.push_back({"embedding_strategy", "attention | replacement", true,
                 [](RunConfig& c, const std::string& v) { c.model.embedding = parse_embedding_strategy(v); },
                 [](const RunConfig& c) { return to_string(c.model.embedding); }});
    add_u64("replacement_max_len", "pooled positions for the replacement strategy", true,
            [](RunConfig& c) -> std::size_t& { return c.model.replacement_max_len; });

    add_bool("sampling", "sampling with decay (false = always ground truth)", false,
             [](RunConfig& c) -> bool& { return c.sampling; });
    add_f64("sample_p_start", "ground-truth probability at sample_step_start", false,
            [](RunConfig& c) -> double& { return c.schedule.p_start; });
    add_f64("sample_p_end", "ground-truth probability at sample_step_end", false,
            [](RunConfig& c) -> double& { return c.schedule.p_end; });
    add_u64("sample_step_start", "decay start step", false,
            [](RunConfig& c) -> std::uint64_t& { return c.schedule.step_start; });
    add_u64("sample_step_end", "decay end step", false,
            [](RunConfig& c) -> std::uint64_t& { return c.schedule.step_end; });
    add_bool("sample_ground_before_start", "p = 1 before sample_step_start", false,
             [](RunConfig& c) -> bool& { return c.schedule.ground_before_start; });
    add_f64("mask_ratio_min", "smallest masked fraction", false,
            [](RunConfig& c) -> double& { return c.mask_ratio_min; });
    add_f64("mask_ratio_max", "largest masked fraction", false,
            [](RunConfig& c) -> double& { return c.mask_ratio_max; });

    add_f64("mu1", "CTC1 weight", false, [](RunConfig& c) -> double& { return c.weights.mu1; });
    add_f64("mu2", "CMLM weight", false, [](RunConfig& c) -> double& { return c.weights.mu2; });
    add_f64("mu3", "CTC2 weight", false, [](RunConfig& c) -> double& { return c.weights.mu3; });
    add_f64("mu4", "CE weight", false, [](RunConfig& c) -> double& { return c.weights.mu4; });
    add_f64("peak_lr", "tri-stage peak learning rate", false, [](RunConfig& c) -> double& { return c.peak_lr; });
    add_f64("floor_lr_ratio", "floor_lr / peak_lr", false,
            [](RunConfig& c) -> double& { return c.floor_lr_ratio; });
    k.push_back({"stage_ratios", "warmup,hold,decay fractions", false,
                 [](RunConfig& c, const std::string& v) { c.stage_ratios = detail::parse_doubles<3>("stage_ratios", v); },
                 [](const RunConfig& c) { return detail::format_doubles(c.stage_ratios); }});
    k.push_back({"adam_betas", "beta1,beta2", false,
                 [](RunConfig& c, const std::string& v) {
                   const auto b = detail::parse_doubles<2>("adam_betas", v);
                   c.adam.beta1 = b[0];
                   c.adam.beta2 = b[1];
                 },
                 [](const RunConfig& c) {
                   return detail::format_doubles(std::array<double, 2>{c.adam.beta1, c.adam.beta2});
                 }});
    add_f64("adam_eps", "Adam epsilon", false, [](RunConfig& c) -> double& { return c.adam.eps; });
    add_f64("grad_clip", "global gradient norm clip (0 = off)", false,
            [](RunConfig& c) -> double& { return c.grad_clip; });
    add_u64("grad_accum", "micro-batches per optimizer step", false,
            [](RunConfig& c) -> std::size_t& { return c.grad_accum; });
    k.push_back({"ce_on_hypothesis", "truncate | skip", false,
                 [](RunConfig& c, const std::string& v) { c.ce_on_hypothesis = parse_ce_on_hypothesis(v); },
                 [](const RunConfig& c) { return to_string(c.ce_on_hypothesis); }});
    k.push_back({"confidence", "mean_max_posterior | sum_log_prob | mean_log_prob", false,
                 [](RunConfig& c, const std::string& v) { c.confidence = parse_confidence_mode(v); },
                 [](const RunConfig& c) { return to_string(c.confidence); }});

    add_u64("batch_size", "utterances per micro-batch", false,
            [](RunConfig& c) -> std::size_t& { return c.batch_size; });
    add_u64("total_steps", "optimizer steps", false,
            [](RunConfig& c) -> std::uint64_t& { return c.total_steps; });
    add_u64("log_interval", "steps between metrics lines", false,
            [](RunConfig& c) -> std::uint64_t& { return c.log_interval; });
    add_u64("eval_interval", "steps between checkpoints", false,
            [](RunConfig& c) -> std::uint64_t& { return c.eval_interval; });
    add_str("checkpoint_dir", "checkpoint directory (empty = <out>/checkpoints)",
            [](RunConfig& c) -> std::string& { return c.checkpoint_dir; });
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& name) {
  for (const auto& key : config_keys()) {
    if (key.name == name) return key;
  }
  throw ConfigError("unknown config key '" + name + "'");
}

inline void set_config_value(RunConfig& c, const std::string& name, const std::string& value) {
  find_config_key(name).set(c, value);
  c.resolve();
}

// `key=value` as given on the command line.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected key=value");
  set_config_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c;
  c.resolve();
  apply_config_text(c, ss.str(), path.string());
  return c;
}

inline std::string resolved_config_text(const RunConfig& c) {
  std::string out;
  for (const auto& key : config_keys()) {
    out += key.name + " = " + key.get(c) + "\n";
  }
  return out;
}

// FNV-1a over the canonical `key=value` lines of the architecture keys.
inline std::uint64_t config_digest(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& key : config_keys()) {
    if (!key.architecture) continue;
    const std::string line = key.name + "=" + key.get(c) + "\n";
    for (unsigned char ch : line) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline RunConfig default_config() {
  RunConfig c;
  c.resolve();
  return c;
}

}  // namespace wavbert
