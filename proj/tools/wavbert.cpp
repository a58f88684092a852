#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "wavbert/commands.hpp"

using namespace wavbert::cli;

namespace {

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config_path, "key = value config file");
  sub->add_option("--seed", a.seed, "run seed (overrides the config)");
  sub->add_option("--out", a.out_dir, "output directory")->capture_default_str();
  sub->add_option("--set", a.overrides, "override one config key, key=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wavbert: speech recognition with gated acoustic/linguistic fusion on synthetic data"};
  app.require_subcommand(1);

  CommonArgs common;
  EvaluateArgs eval_args;
  AblateArgs ablate_args;
  GradcheckArgs grad_args;

  auto* train = app.add_subcommand("train", "train a model and write checkpoints plus a metrics log");
  add_common(train, common);

  auto* evaluate = app.add_subcommand("evaluate", "two-pass inference and CER per head");
  add_common(evaluate, common);
  evaluate->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file")->required();
  evaluate->add_option("--data", eval_args.data, "JSONL dataset (default: split from the config)");
  evaluate->add_option("--split", eval_args.split, "train | eval")->capture_default_str();
  evaluate->add_flag("--allow-config-mismatch", eval_args.allow_mismatch,
                     "load even if the config digest differs");

  auto* ablate = app.add_subcommand("ablate", "train each variant from the same seed and tabulate CER");
  add_common(ablate, common);
  ablate->add_option("--variants", ablate_args.variants, "variant keys (default: all)")->delimiter(',');

  auto* gradcheck = app.add_subcommand("gradcheck", "compare gradients with central finite differences");
  add_common(gradcheck, common);
  gradcheck->add_option("--fraction", grad_args.fraction, "fraction of parameters to check")->capture_default_str();
  gradcheck->add_option("--tolerance", grad_args.tolerance, "max relative error")->capture_default_str();
  gradcheck->add_option("--batch", grad_args.batch, "utterances in the fixed batch")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus as train/eval JSONL");
  add_common(gen, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  return run_guarded([&] {
    if (*train) return cmd_train(common, std::cout);
    if (*evaluate) return cmd_evaluate(common, eval_args, std::cout);
    if (*ablate) return cmd_ablate(common, ablate_args, std::cout);
    if (*gradcheck) return cmd_gradcheck(common, grad_args, std::cout);
    return cmd_gen_data(common, std::cout);
  });
}
