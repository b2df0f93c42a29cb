#include <cstdio>
#include <exception>
#include <functional>
#include <optional>

#include "CLI11.hpp"
#include "onerec/pipeline.hpp"

namespace onerec::pipeline {

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, CommonOptions& opts) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("--config", opts.config, "pipeline config (JSON); defaults when omitted");
  sub->add_option("--set", opts.sets, "dotted.key=value override, repeatable");
  sub->add_option("--seed", opts.seed, "global seed override");
  return sub;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"onerec: synthetic generative-recommendation pipeline"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string records, out;

  using Run = std::function<void(const PipelineConfig&)>;
  std::vector<std::pair<CLI::App*, Run>> commands;
  commands.emplace_back(add_command(app, "gen", "generate the synthetic corpus and user split", opts), cmd_gen);
  commands.emplace_back(add_command(app, "tokenize", "fit the residual k-means item tokenizer", opts), cmd_tokenize);
  commands.emplace_back(add_command(app, "pretrain", "text base, Stage 1 and Stage 2 pre-training", opts),
                        [](const PipelineConfig& c) { cmd_pretrain(c); });
  commands.emplace_back(add_command(app, "sft", "multi-task supervised fine-tuning", opts), cmd_sft);
  commands.emplace_back(add_command(app, "distill", "on-policy distillation from the text base", opts), cmd_distill);
  commands.emplace_back(add_command(app, "recrl", "GRPO with hit rewards", opts), cmd_recrl);
  commands.emplace_back(add_command(app, "eval", "metric report on held-out users", opts),
                        [](const PipelineConfig& c) { cmd_eval(c); });
  auto* fit = add_command(app, "fit-scaling", "frontier and parametric scaling fits", opts);
  fit->add_option("--records", records, "run-record JSONL (skips the training sweep)");
  fit->add_option("--out", out, "fit report path");
  commands.emplace_back(fit, [](const PipelineConfig& c) { cmd_fit_scaling(c); });
  commands.emplace_back(add_command(app, "pipeline", "gen through eval", opts),
                        [](const PipelineConfig& c) { cmd_pipeline(c); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (!records.empty()) opts.sets.push_back("scaling.records=\"" + records + "\"");
    if (!out.empty()) opts.sets.push_back("scaling.out=\"" + out + "\"");
    const PipelineConfig cfg = opts.config.empty() ? parse_config("{}", opts.sets, opts.seed)
                                                   : load_config(opts.config, opts.sets, opts.seed);
    for (const auto& [sub, run] : commands) {
      if (sub->parsed()) run(cfg);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "onerec: configuration error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "onerec: error: %s\n", e.what());
    return 1;
  }
}

}  // namespace onerec::pipeline
