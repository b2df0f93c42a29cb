#pragma once

// Optimiser, learning-rate schedule, data mixing and the two pre-training
// stages (itemic-row alignment, then full-parameter co-pretraining).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "onerec/data.hpp"
#include "onerec/model.hpp"
#include "onerec/scaling.hpp"

namespace onerec::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <typename T>
struct OptimizerState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;
};

/// Per-parameter trainable flags.
class TrainableMask {
 public:
  TrainableMask() = default;
  explicit TrainableMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {}

  static TrainableMask all(const model::ParamLayout& layout);
  /// Item-code and special-token embedding rows, plus the matching output rows when untied.
  static TrainableMask item_rows(const model::ParamLayout& layout, const model::ModelConfig& cfg,
                                 const vocab::Vocab& vocab);

  std::span<const std::uint8_t> bits() const { return bits_; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  std::size_t size() const { return bits_.size(); }
  std::size_t trainable_count() const;

 private:
  std::vector<std::uint8_t> bits_;
};

/// Decoupled-weight-decay Adam on a flat vector. Entries with trainable == 0
/// are not touched; decay applies where decay != 0.
template <typename T>
void adamw_update(std::span<T> w, std::span<const T> g, std::span<const std::uint8_t> trainable,
                  std::span<const std::uint8_t> decay, OptimizerState<T>& state, double lr, const AdamWConfig& cfg);

/// adamw_update over a model; decay on matrices only. Throws TrainingError naming
/// the tensor when a trainable gradient entry is not finite.
template <typename T>
void adamw_step(model::Parameters<T>& params, std::span<const T> grad, OptimizerState<T>& state, double lr,
                const AdamWConfig& cfg, const TrainableMask& mask);

/// Scales trainable gradient entries so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<T> grad, const TrainableMask& mask, double max_norm);

struct LrSchedule {
  double peak_lr = 1e-3;
  double min_lr = 1e-4;
  double warmup_fraction = 0.10;
  std::int64_t total_steps = 100;

  void validate() const;
  std::int64_t warmup_steps() const;
};

/// Linear 0 -> peak over the warmup, cosine peak -> min afterwards.
double lr_at(const LrSchedule& s, std::int64_t step);

struct MixSource {
  data::Source source = data::Source::general_text;
  double weight = 1.0;
  std::vector<data::TrainExample> examples;
  std::string name;  // trace label; empty: the source name
};

/// Endless example stream: each draw picks a source with probability
/// proportional to its weight; each source cycles through its examples in a
/// seeded shuffled order.
class MixStream {
 public:
  MixStream(std::vector<MixSource> sources, std::uint64_t seed);

  struct Draw {
    int source_index;
    const data::TrainExample* example;
  };
  Draw next();
  const std::vector<MixSource>& sources() const { return sources_; }

 private:
  std::vector<MixSource> sources_;
  std::vector<double> cumulative_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
  Rng rng_;
};

/// Greedy packing into rows of at most context_len tokens; examples never
/// share attention. Each supervised token gets weight 1 / (total supervised).
struct PackedBatch {
  std::vector<model::SequenceObjective> rows;
  std::vector<std::vector<int>> term_source;  // per row, per term: index into the source list
  std::size_t tokens = 0;
  std::size_t targets = 0;
};
PackedBatch pack_examples(std::span<const data::TrainExample* const> examples, std::span<const int> source_of,
                          int context_len);

struct StageConfig {
  std::int64_t steps = 100;
  int batch_tokens = 256;
  double peak_lr = 1e-3;
  double min_lr = 1e-4;
  double warmup_fraction = 0.10;
  double clip_norm = 1.0;  // <= 0 disables clipping
  AdamWConfig adamw;
};

struct TraceRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;                 // all supervised tokens of the step
  std::vector<double> source_loss;  // per source; NaN when absent from the step
};

struct StageResult {
  std::vector<TraceRow> trace;
  std::vector<std::string> source_names;
  scaling::RunRecord record;  // loss: mean over the last 5% of steps
};

/// Runs one training stage. Parameters outside `mask` are never written.
StageResult run_stage(model::Parameters<float>& params, MixStream& stream, const StageConfig& cfg,
                      const TrainableMask& mask, const std::string& label);

/// Stage 1: only item-code and special rows train (defaults: peak 1e-3, min 1e-4).
StageResult run_stage1(model::Parameters<float>& params, const vocab::Vocab& vocab, MixStream& stream,
                       const StageConfig& cfg);
/// Stage 2: all parameters train (defaults: peak 1e-4, min 2e-5).
StageResult run_stage2(model::Parameters<float>& params, MixStream& stream, const StageConfig& cfg);

StageConfig stage1_defaults();
StageConfig stage2_defaults();

/// Mean per-token negative log-likelihood of the supervised tokens.
double mean_loss(const model::Parameters<float>& params, std::span<const data::TrainExample> examples);

/// CSV with columns step, source, loss, lr; one "all" row per step plus one
/// row per source present in the step.
void write_loss_trace(const StageResult& result, const std::filesystem::path& path);

}  // namespace onerec::train
