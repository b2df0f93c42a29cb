#pragma once

// Staged command surface: config loading, artifact layout and one function
// per subcommand (gen, tokenize, pretrain, sft, distill, recrl, eval,
// fit-scaling, pipeline).

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "onerec/align.hpp"
#include "onerec/corpus.hpp"
#include "onerec/evalmetrics.hpp"
#include "onerec/model.hpp"
#include "onerec/rqkmeans.hpp"
#include "onerec/scaling.hpp"
#include "onerec/train.hpp"

namespace onerec::pipeline {

struct ScalingSweep {
  std::string records;  // run-record JSONL; empty: train the sweep below
  std::string out;      // fit report path; empty: <artifact_dir>/scaling/report.json
  std::vector<int> d_models{16, 24, 32};
  std::vector<std::int64_t> steps{100, 200, 400};
  train::StageConfig stage;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path artifact_dir = "artifacts";

  corpus::SyntheticConfig corpus;
  double test_fraction = 0.2;

  std::vector<int> level_sizes{8, 16, 16};
  int fsq_dims = 0;  // 0: no fourth level
  int fsq_levels_per_dim = 2;
  rq::KMeansOptions kmeans;

  model::ModelConfig model;  // vocab_size comes from the tokenizer

  train::StageConfig text_stage;
  train::StageConfig stage1;
  train::StageConfig stage2;
  bool stage1_enabled = true;
  std::map<data::Source, double> stage1_mix;
  std::map<data::Source, double> stage2_mix;
  int general_count = 512;

  align::SftConfig sft;
  int sft_max_per_user = 2;
  int sft_general_samples = 200;

  align::DistillConfig distill;
  int distill_prompts = 64;

  align::GrpoConfig recrl;

  align::EvalOptions eval;
  int eval_max_per_user = 1;
  int eval_max_samples = 64;  // per task
  std::string eval_checkpoint = "auto";

  ScalingSweep scaling;

  PipelineConfig();
  void validate() const;
  /// Every field, defaults included. Keys are sorted, so equal configs dump equal text.
  std::string to_json() const;
  /// Fingerprint of to_json() without artifact_dir.
  std::uint64_t hash() const;
};

/// Parses a config document. Unknown or mistyped fields raise ConfigError
/// naming the dotted field path. `overrides` are "dotted.path=value" strings
/// whose value is read as JSON when it parses and as a string otherwise.
PipelineConfig parse_config(std::string_view json_text, std::span<const std::string> overrides = {},
                            std::optional<std::uint64_t> seed = std::nullopt);
PipelineConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {},
                           std::optional<std::uint64_t> seed = std::nullopt);

std::string hex64(std::uint64_t v);

/// File locations under artifact_dir.
struct Layout {
  std::filesystem::path root;
  explicit Layout(std::filesystem::path dir) : root(std::move(dir)) {}
  std::filesystem::path train_corpus() const { return root / "corpus" / "train"; }
  std::filesystem::path test_corpus() const { return root / "corpus" / "test"; }
  std::filesystem::path tokenizer() const { return root / "tokenizer.rqkm"; }
  std::filesystem::path vocab() const { return root / "vocab.json"; }
  std::filesystem::path checkpoint(std::string_view stage) const;
  std::filesystem::path trace(std::string_view name) const;
  std::filesystem::path runs() const { return root / "runs.jsonl"; }
  std::filesystem::path manifest(std::string_view command) const;
  std::filesystem::path report_json() const { return root / "report.json"; }
  std::filesystem::path report_csv() const { return root / "report.csv"; }
  std::filesystem::path scaling_dir() const { return root / "scaling"; }
};

/// Checkpoint stages in pipeline order.
inline constexpr std::array<std::string_view, 5> kCheckpointStages{"base", "pretrain", "sft", "distill", "recrl"};

struct PretrainSummary {
  double stage2_initial_itemic_loss = 0.0;  // before the first Stage-2 step
  double stage2_final_loss = 0.0;
  // Stage 1 only: every parameter outside the item-row mask compared bitwise.
  bool stage1_frozen_unchanged = true;
  std::size_t stage1_changed_entries = 0;  // trainable entries that moved
};

void cmd_gen(const PipelineConfig& cfg);
void cmd_tokenize(const PipelineConfig& cfg);
PretrainSummary cmd_pretrain(const PipelineConfig& cfg);
void cmd_sft(const PipelineConfig& cfg);
void cmd_distill(const PipelineConfig& cfg);
void cmd_recrl(const PipelineConfig& cfg);
eval::MetricReport cmd_eval(const PipelineConfig& cfg);
scaling::ScalingReport cmd_fit_scaling(const PipelineConfig& cfg);
/// gen -> tokenize -> pretrain -> sft -> distill -> recrl -> eval.
eval::MetricReport cmd_pipeline(const PipelineConfig& cfg);

/// Loaded corpus, tokenizer, vocabulary and catalogue of an artifact directory.
struct World {
  corpus::Corpus train;
  corpus::Corpus test;
  rq::TokenizerModel tokenizer;
  std::uint64_t tokenizer_hash = 0;  // of the tokenizer file bytes
  vocab::Vocab vocab;
  data::ItemCatalog catalog;
};
World load_world(const PipelineConfig& cfg, std::string_view command);

/// Loads a stage checkpoint, checking that it was trained with the current tokenizer.
model::Parameters<float> load_stage(const World& w, const PipelineConfig& cfg, std::string_view stage,
                                    std::string_view command);

/// Instruction samples of every task over `users`.
std::vector<align::ChatSample> task_samples(const PipelineConfig& cfg, const World& w,
                                            std::span<const corpus::UserRecord> users, int max_per_user,
                                            std::optional<align::ThinkMode> think, std::uint64_t seed);

/// Metric report of `params` on held-out users.
eval::MetricReport evaluate(const PipelineConfig& cfg, const World& w, const model::Parameters<float>& params);

/// Dispatches argv to a subcommand; returns the process exit status.
int run_cli(int argc, char** argv);

}  // namespace onerec::pipeline
