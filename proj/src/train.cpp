#include "onerec/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace onerec::train {

using model::ParamLayout;
using model::Parameters;

TrainableMask TrainableMask::all(const ParamLayout& layout) {
  return TrainableMask(std::vector<std::uint8_t>(layout.size(), 1));
}

TrainableMask TrainableMask::item_rows(const ParamLayout& layout, const model::ModelConfig& cfg,
                                       const vocab::Vocab& vocab) {
  if (vocab.size() != cfg.vocab_size) throw ConfigError("trainable mask: vocab size does not match the model");
  std::vector<std::uint8_t> bits(layout.size(), 0);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  for (int id = vocab.text_count(); id < vocab.size(); ++id) {
    std::fill_n(bits.begin() + static_cast<std::ptrdiff_t>(layout.tok_emb + id * d), d, 1);
    if (!cfg.tied_embeddings) std::fill_n(bits.begin() + static_cast<std::ptrdiff_t>(layout.lm_head + id * d), d, 1);
  }
  return TrainableMask(std::move(bits));
}

std::size_t TrainableMask::trainable_count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

template <typename T>
void adamw_update(std::span<T> w, std::span<const T> g, std::span<const std::uint8_t> trainable,
                  std::span<const std::uint8_t> decay, OptimizerState<T>& state, double lr, const AdamWConfig& cfg) {
  const std::size_t n = w.size();
  if (g.size() != n || trainable.size() != n || decay.size() != n) {
    throw InputError("adamw: gradient/mask sizes do not match the parameters");
  }
  if (state.m.empty()) {
    state.m.assign(n, T(0));
    state.v.assign(n, T(0));
  }
  if (state.m.size() != n) throw InputError("adamw: optimizer state does not match the parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    if (!trainable[i]) continue;
    const double gi = g[i];
    const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
    const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    double wi = w[i];
    if (decay[i]) wi -= lr * cfg.weight_decay * wi;
    wi -= lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
    w[i] = static_cast<T>(wi);
  }
}

template <typename T>
void adamw_step(Parameters<T>& params, std::span<const T> grad, OptimizerState<T>& state, double lr,
                const AdamWConfig& cfg, const TrainableMask& mask) {
  if (grad.size() != params.count() || mask.size() != params.count()) {
    throw InputError("adamw: gradient/mask sizes do not match the parameters");
  }
  std::vector<std::uint8_t> decay(params.count(), 0);
  for (const auto& t : params.layout.tensors()) {
    for (std::size_t k = t.offset; k < t.offset + t.size(); ++k) {
      if (mask[k] && !std::isfinite(grad[k])) {
        throw TrainingError("non-finite gradient in parameter group '" + t.name + "' (" +
                            std::string(model::param_kind_name(t.kind)) + ")");
      }
    }
    if (t.decays()) std::fill_n(decay.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 1);
  }
  adamw_update<T>(params.values, grad, mask.bits(), decay, state, lr, cfg);
}

template <typename T>
double clip_grad_norm(std::span<T> grad, const TrainableMask& mask, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (mask[i]) sq += static_cast<double>(grad[i]) * grad[i];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (mask[i]) grad[i] = static_cast<T>(grad[i] * s);
    }
  }
  return norm;
}

void LrSchedule::validate() const {
  if (!(min_lr > 0) || !(min_lr <= peak_lr)) throw ConfigError("lr schedule: need 0 < min_lr <= peak_lr");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw ConfigError("lr schedule: warmup_fraction must be in [0, 1)");
  if (total_steps < 2) throw ConfigError("lr schedule: total_steps must be at least 2");
}

std::int64_t LrSchedule::warmup_steps() const {
  const auto w = static_cast<std::int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
  return std::clamp<std::int64_t>(w, 1, total_steps - 1);
}

double lr_at(const LrSchedule& s, std::int64_t step) {
  s.validate();
  if (step < 0 || step > s.total_steps) {
    throw InputError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  const std::int64_t w = s.warmup_steps();
  if (step <= w) return s.peak_lr * static_cast<double>(step) / static_cast<double>(w);
  const double progress = static_cast<double>(step - w) / static_cast<double>(s.total_steps - w);
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

MixStream::MixStream(std::vector<MixSource> sources, std::uint64_t seed)
    : sources_(std::move(sources)), rng_(mix_seed(seed, 0x6d6978)) {
  if (sources_.empty()) throw ConfigError("mix: no sources");
  double total = 0.0;
  for (const auto& s : sources_) {
    if (s.examples.empty()) throw ConfigError("mix: source '" + std::string(data::source_name(s.source)) + "' is empty");
    if (!(s.weight >= 0) || !std::isfinite(s.weight)) throw ConfigError("mix: weights must be finite and non-negative");
    total += s.weight;
  }
  if (!(total > 0)) throw ConfigError("mix: weights sum to zero");
  double acc = 0.0;
  for (std::size_t k = 0; k < sources_.size(); ++k) {
    acc += sources_[k].weight / total;
    cumulative_.push_back(acc);
    std::vector<std::size_t> order(sources_[k].examples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(mix_seed(seed, k));
    std::shuffle(order.begin(), order.end(), shuffle);
    order_.push_back(std::move(order));
  }
  cursor_.assign(sources_.size(), 0);
}

MixStream::Draw MixStream::next() {
  const double u = uniform01(rng_);
  std::size_t k = 0;
  std::size_t last_positive = 0;
  for (std::size_t j = 0; j < cumulative_.size(); ++j) {
    if (sources_[j].weight > 0) last_positive = j;
  }
  while (k < last_positive && (u >= cumulative_[k] || sources_[k].weight == 0)) ++k;
  const auto& order = order_[k];
  const std::size_t idx = order[cursor_[k]];
  cursor_[k] = (cursor_[k] + 1) % order.size();
  return Draw{static_cast<int>(k), &sources_[k].examples[idx]};
}

PackedBatch pack_examples(std::span<const data::TrainExample* const> examples, std::span<const int> source_of,
                          int context_len) {
  PackedBatch out;
  for (const auto* ex : examples) {
    if (static_cast<int>(ex->tokens.size()) > context_len) throw InputError("pack: example longer than the context");
    out.targets += static_cast<std::size_t>(std::count(ex->mask.begin(), ex->mask.end(), std::uint8_t{1}));
  }
  if (out.targets == 0) throw InputError("pack: batch has no supervised tokens");
  const double w = 1.0 / static_cast<double>(out.targets);
  model::SequenceObjective* row = nullptr;
  int segment = 0;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = *examples[e];
    if (row == nullptr || static_cast<int>(row->tokens.size() + ex.tokens.size()) > context_len) {
      out.rows.emplace_back();
      out.term_source.emplace_back();
      row = &out.rows.back();
      segment = 0;
    }
    const int base = static_cast<int>(row->tokens.size());
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      row->tokens.push_back(ex.tokens[i]);
      row->positions.push_back(static_cast<int>(i));
      row->segments.push_back(segment);
      if (ex.mask[i]) {
        if (i == 0) throw InputError("pack: the first token of an example cannot be a target");
        row->terms.push_back(model::TokenTerm{base + static_cast<int>(i), w, {}, 0.0, {}});
        out.term_source.back().push_back(source_of[e]);
      }
    }
    out.tokens += ex.tokens.size();
    ++segment;
  }
  return out;
}

StageConfig stage1_defaults() {
  StageConfig c;
  c.peak_lr = 1e-3;
  c.min_lr = 1e-4;
  return c;
}

StageConfig stage2_defaults() {
  StageConfig c;
  c.peak_lr = 1e-4;
  c.min_lr = 2e-5;
  return c;
}

StageResult run_stage(Parameters<float>& params, MixStream& stream, const StageConfig& cfg, const TrainableMask& mask,
                      const std::string& label) {
  if (mask.size() != params.count()) throw ConfigError("run_stage: mask does not match the parameters");
  if (cfg.batch_tokens < 1) throw ConfigError("run_stage: batch_tokens must be positive");
  const LrSchedule schedule{cfg.peak_lr, cfg.min_lr, cfg.warmup_fraction, cfg.steps};
  schedule.validate();
  const int n_sources = static_cast<int>(stream.sources().size());

  StageResult result;
  for (const auto& s : stream.sources()) {
    result.source_names.emplace_back(s.name.empty() ? std::string(data::source_name(s.source)) : s.name);
  }
  OptimizerState<float> state;
  std::vector<float> grad;
  double tokens_seen = 0.0;
  const int ctx = params.config.context_len;

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<const data::TrainExample*> batch;
    std::vector<int> source_of;
    std::size_t filled = 0;
    while (filled < static_cast<std::size_t>(cfg.batch_tokens)) {
      const auto draw = stream.next();
      batch.push_back(draw.example);
      source_of.push_back(draw.source_index);
      filled += draw.example->tokens.size();
    }
    const PackedBatch packed = pack_examples(batch, source_of, ctx);
    const auto res = model::evaluate(params, std::span<const model::SequenceObjective>(packed.rows), &grad);

    TraceRow row;
    row.step = step;
    row.lr = lr_at(schedule, step + 1);
    row.loss = res.loss;
    std::vector<double> sum(n_sources, 0.0), count(n_sources, 0.0);
    for (std::size_t r = 0; r < packed.rows.size(); ++r) {
      for (std::size_t k = 0; k < packed.term_source[r].size(); ++k) {
        sum[packed.term_source[r][k]] -= res.logprobs[r][k];
        count[packed.term_source[r][k]] += 1.0;
      }
    }
    row.source_loss.resize(n_sources);
    for (int s = 0; s < n_sources; ++s) {
      row.source_loss[s] = count[s] > 0 ? sum[s] / count[s] : std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(res.loss)) {
      std::ostringstream msg;
      msg << label << ": non-finite loss at step " << step << " (lr " << row.lr << "; per source:";
      for (int s = 0; s < n_sources; ++s) msg << ' ' << result.source_names[s] << '=' << row.source_loss[s];
      msg << ')';
      throw TrainingError(msg.str());
    }
    clip_grad_norm<float>(grad, mask, cfg.clip_norm);
    adamw_step<float>(params, grad, state, row.lr, cfg.adamw, mask);
    tokens_seen += static_cast<double>(packed.tokens);
    result.trace.push_back(std::move(row));
  }

  const auto tail = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(cfg.steps))));
  double tail_loss = 0.0;
  for (std::size_t k = result.trace.size() - tail; k < result.trace.size(); ++k) tail_loss += result.trace[k].loss;
  result.record = scaling::RunRecord{static_cast<double>(params.count()), tokens_seen,
                                     tail_loss / static_cast<double>(tail), label};
  return result;
}

StageResult run_stage1(Parameters<float>& params, const vocab::Vocab& vocab, MixStream& stream, const StageConfig& cfg) {
  return run_stage(params, stream, cfg, TrainableMask::item_rows(params.layout, params.config, vocab), "stage1");
}

StageResult run_stage2(Parameters<float>& params, MixStream& stream, const StageConfig& cfg) {
  return run_stage(params, stream, cfg, TrainableMask::all(params.layout), "stage2");
}

double mean_loss(const Parameters<float>& params, std::span<const data::TrainExample> examples) {
  if (examples.empty()) throw InputError("mean_loss: no examples");
  std::vector<const data::TrainExample*> ptrs;
  for (const auto& ex : examples) ptrs.push_back(&ex);
  const std::vector<int> source_of(ptrs.size(), 0);
  const auto packed = pack_examples(ptrs, source_of, params.config.context_len);
  return model::evaluate(params, std::span<const model::SequenceObjective>(packed.rows),
                         static_cast<std::vector<float>*>(nullptr))
      .loss;
}

void write_loss_trace(const StageResult& result, const std::filesystem::path& path) {
  std::ostringstream out;
  out.precision(9);
  out << "step,source,loss,lr\n";
  for (const auto& row : result.trace) {
    out << row.step << ",all," << row.loss << ',' << row.lr << '\n';
    for (std::size_t s = 0; s < row.source_loss.size(); ++s) {
      if (std::isnan(row.source_loss[s])) continue;
      out << row.step << ',' << result.source_names[s] << ',' << row.source_loss[s] << ',' << row.lr << '\n';
    }
  }
  io::write_file_atomic(path, out.str());
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<const std::uint8_t>,
                                  std::span<const std::uint8_t>, OptimizerState<float>&, double, const AdamWConfig&);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<const std::uint8_t>,
                                   std::span<const std::uint8_t>, OptimizerState<double>&, double, const AdamWConfig&);
template void adamw_step<float>(Parameters<float>&, std::span<const float>, OptimizerState<float>&, double,
                                const AdamWConfig&, const TrainableMask&);
template void adamw_step<double>(Parameters<double>&, std::span<const double>, OptimizerState<double>&, double,
                                 const AdamWConfig&, const TrainableMask&);
template double clip_grad_norm<float>(std::span<float>, const TrainableMask&, double);
template double clip_grad_norm<double>(std::span<double>, const TrainableMask&, double);

}  // namespace onerec::train
