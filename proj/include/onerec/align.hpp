#pragma once

// Post-training: instruction tasks, supervised fine-tuning, on-policy
// distillation from a general-text teacher and GRPO with hit rewards.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "onerec/data.hpp"
#include "onerec/evalmetrics.hpp"
#include "onerec/generate.hpp"
#include "onerec/model.hpp"
#include "onerec/train.hpp"

namespace onerec::align {

enum class Task : int {
  item_understanding = 0,
  short_video_rec,
  ad_rec,
  product_rec,
  label_prediction,
  interactive_rec,
  label_conditional_rec,
  rec_explanation,
  general,
};

inline constexpr std::array<Task, 8> kRecIfTasks{
    Task::item_understanding, Task::short_video_rec, Task::ad_rec,          Task::product_rec,
    Task::label_prediction,   Task::interactive_rec, Task::label_conditional_rec, Task::rec_explanation};

std::string_view task_name(Task t);
Task parse_task(std::string_view s);
/// Tasks answered with an item run.
bool is_rec_task(Task t);

enum class ThinkMode { think, no_think, automatic };

/// Prompt suffix: " /think", " /no_think" or "".
std::string_view think_suffix(ThinkMode m);
/// Uniform over the three modes.
ThinkMode draw_think_mode(Rng& rng);

struct ChatSample {
  Task task = Task::general;
  ThinkMode think = ThinkMode::automatic;
  std::vector<int> prompt;
  std::vector<int> response;  // ends with eos
  std::string user_id;
  // Evaluation targets.
  std::vector<rq::ItemicCode> targets;  // item tasks
  std::optional<corpus::Domain> domain;  // trie restriction for item tasks
  std::string reference;                 // text tasks
  bool label = false;                    // label prediction

  void validate(int context_len) const;
};

struct TaskOptions {
  int context_len = 128;
  int target_window = 4;  // future interactions that count as targets
  int max_per_user = 1;   // cut points per user, latest first; 0 for all
  std::optional<ThinkMode> think;  // forced mode; drawn uniformly when unset
  std::uint64_t seed = 0;
};

/// Builds samples of one task from users' interaction histories. Each cut k
/// splits a user's sequence into context [0, k) and future [k, ...).
std::vector<ChatSample> build_task_samples(const data::ItemCatalog& catalog, std::span<const corpus::UserRecord> users,
                                           Task task, const TaskOptions& opts);

/// General-text samples: a sentence prefix as the prompt, the rest as the response.
std::vector<ChatSample> build_general_samples(const vocab::Vocab& vocab, int count, const TaskOptions& opts);

/// prompt + response with the loss on the response only.
data::TrainExample to_train_example(const ChatSample& s);

// ---------------------------------------------------------------- SFT

struct SftConfig {
  train::StageConfig stage = [] {
    train::StageConfig c;
    c.peak_lr = 5e-6;
    c.min_lr = 5e-7;
    return c;
  }();
};

/// Prompt-masked cross-entropy over the batch; writes the gradient when grad != null.
double sft_loss(const model::Parameters<float>& params, std::span<const ChatSample> batch, std::vector<float>* grad);

/// One AdamW step on the prompt-masked loss; returns the loss before the step.
double sft_step(model::Parameters<float>& params, std::span<const ChatSample> batch,
                train::OptimizerState<float>& state, double lr, const train::AdamWConfig& cfg);

/// Full-parameter fine-tuning over a task mixture (weights proportional to sample counts).
train::StageResult run_sft(model::Parameters<float>& params, std::span<const ChatSample> samples,
                           const SftConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------- distillation

struct DistillConfig {
  double clip_lo = -10.0;  // alpha
  double clip_hi = 0.0;    // beta
  double temperature = 1.2;
  double penalty_logprob = -1e9;
  // Off when the teacher's vocabulary includes the item tokens (e.g. a frozen copy of the student).
  bool penalize_item_tokens = true;
  int prompts_per_step = 8;
  int max_new = 24;
  std::int64_t steps = 100;
  double peak_lr = 1e-4;
  double min_lr = 1e-5;
  double warmup_fraction = 0.1;
  double clip_norm = 1.0;
  train::AdamWConfig adamw;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Trajectory {
  std::vector<int> prompt;
  std::vector<int> response;
  std::vector<double> student_logprobs;
  std::vector<double> teacher_logprobs;
  std::vector<double> rewards;       // one per kept response token
  std::optional<int> truncated_at;   // index of the penalised item token

  std::string to_json() const;
};

/// Per-token rewards clip(teacher - student, alpha, beta). With penalize_item_tokens, an
/// item token's teacher log-probability becomes penalty_logprob and the trajectory ends there.
void distill_rewards(Trajectory& traj, const vocab::Vocab& vocab, const DistillConfig& cfg);

/// Samples one trajectory from the student and scores it under both models.
Trajectory roll_out(const model::Parameters<float>& student, const model::Parameters<float>& teacher,
                    const vocab::Vocab& vocab, std::span<const int> prompt, const DistillConfig& cfg,
                    std::uint64_t seed);

/// Exact KL(student || teacher) averaged over every predicted position of `response`.
double mean_reverse_kl(const model::Parameters<float>& student, const model::Parameters<float>& teacher,
                       std::span<const int> prompt, std::span<const int> response);

/// Mean total probability of item tokens (item blocks plus their markers) at the
/// position right after each prompt.
double itemic_mass(const model::Parameters<float>& params, const vocab::Vocab& vocab,
                   std::span<const std::vector<int>> prompts);

struct DistillStepResult {
  std::vector<Trajectory> trajectories;
  double mean_reward = 0.0;
  double mean_reverse_kl = 0.0;  // over the sampled trajectories, before the update
  double grad_norm = 0.0;        // before clipping
};

/// Policy-gradient loss -sum_t R_t log pi(x_t) / (kept tokens) and its gradient.
double distill_objective(const model::Parameters<float>& student, std::span<const Trajectory> trajectories,
                         std::vector<float>* grad);

/// One on-policy round: sample, reward, update (when lr > 0).
DistillStepResult distill_step(model::Parameters<float>& student, const model::Parameters<float>& teacher,
                               const vocab::Vocab& vocab, std::span<const std::vector<int>> prompts,
                               const DistillConfig& cfg, train::OptimizerState<float>& state, double lr,
                               std::uint64_t round_seed);

struct AlignTraceRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double mean_reward = 0.0;
  double mean_reverse_kl = 0.0;  // distillation
  double hit_rate = 0.0;         // GRPO
  double kl_to_ref = 0.0;        // GRPO
};

/// Writes step,lr,mean_reward,mean_reverse_kl,hit_rate,kl_to_ref.
void write_align_trace(std::span<const AlignTraceRow> rows, const std::filesystem::path& path);

/// Distillation over general prompts; each step draws prompts_per_step prompts.
/// When `dump` is set, every trajectory is appended to it as JSON lines.
std::vector<AlignTraceRow> run_distill(model::Parameters<float>& student, const model::Parameters<float>& teacher,
                                       const vocab::Vocab& vocab, std::span<const std::vector<int>> prompts,
                                       const DistillConfig& cfg, const std::filesystem::path* dump = nullptr);

// ---------------------------------------------------------------- GRPO

/// 1 when any target's item block occurs contiguously in the response.
double hit_reward(std::span<const int> response, std::span<const std::vector<int>> target_blocks);

/// (r - mean) / (population std + eps); exactly zero for constant rewards.
std::vector<double> grpo_advantages(std::span<const double> rewards, double eps);

struct GrpoConfig {
  int group_size = 8;  // G
  double kl_coefficient = 0.05;
  double advantage_eps = 1e-6;
  double temperature = 1.0;
  int prompts_per_step = 4;
  std::int64_t steps = 50;
  double peak_lr = 5e-5;
  double min_lr = 5e-6;
  double warmup_fraction = 0.1;
  double clip_norm = 1.0;
  bool length_normalize = false;
  train::AdamWConfig adamw;
  std::uint64_t seed = 0;

  void validate() const;
};

struct GrpoGroup {
  std::vector<int> prompt;
  std::vector<std::vector<int>> responses;  // item runs
  std::vector<double> rewards;
  std::vector<double> advantages;
};

struct GrpoStepResult {
  std::vector<GrpoGroup> groups;
  double hit_rate = 0.0;
  double kl_to_ref = 0.0;  // mean exact per-token KL to the reference, before the update
};

/// Trie for a sample's domain (or the whole catalogue).
struct TrieSet {
  vocab::Vocab vocab;
  model::ItemTrie all, video, ad, product;
  explicit TrieSet(const data::ItemCatalog& catalog);
  const model::ItemTrie& for_domain(std::optional<corpus::Domain> d) const;
};

/// Objective -[(1/G) sum_i Adv_i log pi(R_i|q) - beta KL(pi || pi_ref)] averaged over groups;
/// log pi is the trie-masked log-probability of the run.
double grpo_objective(const model::Parameters<float>& policy, const model::Parameters<float>& reference,
                      std::span<const GrpoGroup> groups, const TrieSet& tries,
                      std::span<const std::optional<corpus::Domain>> domains, const GrpoConfig& cfg,
                      std::vector<float>* grad, double* kl_out = nullptr);

GrpoStepResult grpo_step(model::Parameters<float>& policy, const model::Parameters<float>& reference,
                         std::span<const ChatSample* const> samples, const TrieSet& tries, const GrpoConfig& cfg,
                         train::OptimizerState<float>& state, double lr, std::uint64_t round_seed);

std::vector<AlignTraceRow> run_grpo(model::Parameters<float>& policy, const model::Parameters<float>& reference,
                                    std::span<const ChatSample> samples, const TrieSet& tries,
                                    const GrpoConfig& cfg);

// ---------------------------------------------------------------- evaluation

struct EvalOptions {
  int beam = 32;
  int max_text_tokens = 48;
};

/// Greedy continuation (lowest token id on ties) until `stop` or max_new tokens.
std::vector<int> greedy_decode(const model::Parameters<float>& params, std::span<const int> prompt, int max_new,
                               int stop);

/// Metrics for one task's samples: pass@1, pass@32, recall@32 for item tasks,
/// auc for label prediction, judge_score for text tasks.
std::map<std::string, double> evaluate_task(const model::Parameters<float>& params, const data::ItemCatalog& catalog,
                                            const TrieSet& tries, std::span<const ChatSample> samples,
                                            const EvalOptions& opts);

}  // namespace onerec::align
