#include "onerec/align.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"

namespace onerec::align {

using model::Parameters;
using vocab::Special;

namespace {

constexpr std::array<std::string_view, 9> kTaskNames{
    "item_understanding", "short_video_rec", "ad_rec",          "product_rec", "label_prediction",
    "interactive_rec",    "label_conditional_rec", "rec_explanation", "general"};

// Preference order when a label-conditioned query picks one of the next item's labels.
constexpr std::array<corpus::Label, 5> kQueryLabels{corpus::Label::like, corpus::Label::follow, corpus::Label::comment,
                                                    corpus::Label::effective_view, corpus::Label::click};

std::vector<int> text(const vocab::Vocab& v, std::string_view s) { return v.encode_text(s); }

void append(std::vector<int>& out, std::span<const int> more) { out.insert(out.end(), more.begin(), more.end()); }

std::string caption_part(const std::string& caption, int k) {
  std::size_t start = 0;
  for (int i = 0; i < k; ++i) {
    start = caption.find(',', start);
    if (start == std::string::npos) return {};
    ++start;
  }
  const auto end = caption.find(',', start);
  auto piece = caption.substr(start, end == std::string::npos ? std::string::npos : end - start);
  const auto first = piece.find_first_not_of(' ');
  return first == std::string::npos ? std::string() : piece.substr(first);
}

std::optional<corpus::Domain> task_domain(Task t) {
  switch (t) {
    case Task::short_video_rec: return corpus::Domain::video;
    case Task::ad_rec: return corpus::Domain::ad;
    case Task::product_rec: return corpus::Domain::product;
    default: return std::nullopt;
  }
}

std::vector<int> think_prefix(const vocab::Vocab& v, ThinkMode m) {
  if (m != ThinkMode::think) return {};
  return {v.special(Special::think_open), v.special(Special::think_close)};
}

// Prompt followed by whatever the response starts with before the answer proper.
std::vector<int> answer_prompt(const vocab::Vocab& v, const ChatSample& s) {
  std::vector<int> p = s.prompt;
  append(p, think_prefix(v, s.think));
  return p;
}

}  // namespace

std::string_view task_name(Task t) { return kTaskNames.at(static_cast<std::size_t>(t)); }

Task parse_task(std::string_view s) {
  for (std::size_t k = 0; k < kTaskNames.size(); ++k) {
    if (kTaskNames[k] == s) return static_cast<Task>(k);
  }
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

bool is_rec_task(Task t) {
  return t == Task::short_video_rec || t == Task::ad_rec || t == Task::product_rec || t == Task::interactive_rec ||
         t == Task::label_conditional_rec;
}

std::string_view think_suffix(ThinkMode m) {
  switch (m) {
    case ThinkMode::think: return " /think";
    case ThinkMode::no_think: return " /no_think";
    case ThinkMode::automatic: return "";
  }
  return "";
}

ThinkMode draw_think_mode(Rng& rng) { return static_cast<ThinkMode>(rng() % 3); }

void ChatSample::validate(int context_len) const {
  if (prompt.empty()) throw InputError("chat sample: empty prompt");
  if (response.empty()) throw InputError("chat sample: empty response");
  if (static_cast<int>(prompt.size() + response.size()) > context_len) {
    throw InputError("chat sample: prompt + response exceed context_len");
  }
}

std::vector<ChatSample> build_task_samples(const data::ItemCatalog& catalog, std::span<const corpus::UserRecord> users,
                                           Task task, const TaskOptions& opts) {
  if (task == Task::general) throw ConfigError("build_task_samples: use build_general_samples for general text");
  if (opts.target_window < 1) throw ConfigError("build_task_samples: target_window must be >= 1");
  if (opts.max_per_user < 0) throw ConfigError("build_task_samples: max_per_user must be >= 0");
  const auto& v = catalog.vocab();
  const int eos = v.special(Special::eos);
  Rng rng(mix_seed(opts.seed, 0x7461736b00ULL + static_cast<std::uint64_t>(task)));
  const auto domain = task_domain(task);
  std::vector<ChatSample> out;

  for (const auto& user : users) {
    const auto& seq = user.interactions;
    const int n = static_cast<int>(seq.size());
    if (n < 2) continue;
    int made = 0;
    const int first_cut = n - opts.target_window >= 1 ? n - opts.target_window : n - 1;
    for (int k = first_cut; k >= 1; --k) {
      if (opts.max_per_user > 0 && made >= opts.max_per_user) break;
      ChatSample s;
      s.task = task;
      s.user_id = user.user_id;
      s.think = opts.think ? *opts.think : draw_think_mode(rng);
      s.domain = domain;
      const std::string suffix(think_suffix(s.think));
      const auto& next = catalog.at(seq[k].item_id);

      // Future items that answer the query.
      std::vector<const corpus::Interaction*> future;
      std::string query;
      corpus::Label wanted = corpus::Label::click;
      if (task == Task::interactive_rec) {
        query = caption_part(next.caption, 0);
      } else if (task == Task::label_conditional_rec) {
        for (auto l : kQueryLabels) {
          if (seq[k].labels.contains(l)) {
            wanted = l;
            break;
          }
        }
      }
      for (int j = k; j < n && static_cast<int>(future.size()) < opts.target_window; ++j) {
        const auto& it = seq[j];
        bool ok = true;
        if (domain) ok = it.domain == *domain;
        if (task == Task::interactive_rec) ok = caption_part(catalog.at(it.item_id).caption, 0) == query;
        if (task == Task::label_conditional_rec) ok = it.labels.contains(wanted);
        if (!is_rec_task(task)) ok = j == k;
        if (ok) future.push_back(&it);
      }
      if (future.empty()) continue;

      std::vector<int> head = text(v, "hist ");
      std::vector<int> tail;
      const auto& first = catalog.at(future.front()->item_id);
      const auto& first_run = catalog.tokens(future.front()->item_id);
      std::vector<int> response = think_prefix(v, s.think);
      switch (task) {
        case Task::short_video_rec: tail = text(v, " next video" + suffix + ">"); break;
        case Task::ad_rec: tail = text(v, " next ad" + suffix + ">"); break;
        case Task::product_rec: tail = text(v, " next product" + suffix + ">"); break;
        case Task::interactive_rec: tail = text(v, " find " + query + suffix + ">"); break;
        case Task::label_conditional_rec:
          tail = text(v, " will " + std::string(corpus::label_name(wanted)) + suffix + ">");
          break;
        case Task::label_prediction:
        case Task::rec_explanation:
        case Task::item_understanding:
        case Task::general: break;
      }
      if (is_rec_task(task)) {
        append(response, first_run);
        response.push_back(eos);
        for (const auto* it : future) s.targets.push_back(catalog.at(it->item_id).code);
      } else if (task == Task::item_understanding) {
        head = text(v, "describe ");
        append(head, first_run);
        append(head, text(v, suffix + ">"));
        append(response, text(v, first.caption));
        response.push_back(eos);
        s.reference = first.caption;
      } else if (task == Task::rec_explanation) {
        tail = text(v, " why ");
        append(tail, first_run);
        append(tail, text(v, suffix + ">"));
        s.reference = "likes " + caption_part(first.caption, 0) + ", " + caption_part(first.caption, 1);
        append(response, text(v, s.reference));
        response.push_back(eos);
      }

      if (task == Task::label_prediction) {
        // One real next item (label: liked) and one unseen catalogue item (label: no).
        std::vector<std::pair<int, bool>> cands{{catalog.index_of(next.item_id), seq[k].labels.contains(corpus::Label::like)}};
        for (int tries = 0; tries < 64; ++tries) {
          const int idx = static_cast<int>(rng() % catalog.size());
          const auto& id = catalog.items()[idx].item_id;
          if (std::none_of(seq.begin(), seq.end(), [&](const corpus::Interaction& x) { return x.item_id == id; })) {
            cands.emplace_back(idx, false);
            break;
          }
        }
        bool any = false;
        for (const auto& [idx, label] : cands) {
          ChatSample c = s;
          std::vector<int> q = text(v, " like ");
          append(q, catalog.tokens(idx));
          append(q, text(v, "?" + suffix + ">"));
          c.response = think_prefix(v, s.think);
          append(c.response, text(v, label ? "Yes" : "No"));
          c.response.push_back(eos);
          c.label = label;
          const int budget = opts.context_len - static_cast<int>(head.size() + q.size() + c.response.size());
          if (budget <= 0) continue;
          const auto hist = data::history_tokens(catalog, std::span(seq).first(k), budget);
          if (hist.empty()) continue;
          c.prompt = head;
          append(c.prompt, hist);
          append(c.prompt, q);
          c.validate(opts.context_len);
          out.push_back(std::move(c));
          any = true;
        }
        made += any ? 1 : 0;
        continue;
      }

      if (task == Task::item_understanding) {
        s.prompt = std::move(head);
      } else {
        const int budget = opts.context_len - static_cast<int>(head.size() + tail.size() + response.size());
        if (budget <= 0) continue;
        const auto hist = data::history_tokens(catalog, std::span(seq).first(k), budget);
        if (hist.empty()) continue;
        s.prompt = std::move(head);
        append(s.prompt, hist);
        append(s.prompt, tail);
      }
      s.response = std::move(response);
      if (static_cast<int>(s.prompt.size() + s.response.size()) > opts.context_len) continue;
      s.validate(opts.context_len);
      out.push_back(std::move(s));
      ++made;
    }
  }
  return out;
}

std::vector<ChatSample> build_general_samples(const vocab::Vocab& vocab, int count, const TaskOptions& opts) {
  Rng rng(mix_seed(opts.seed, 0x67656e6572616cULL));
  const int eos = vocab.special(Special::eos);
  std::vector<ChatSample> out;
  for (int n = 0; n < count; ++n) {
    std::string sentence = data::general_sentence(rng);
    if (static_cast<int>(sentence.size()) + 1 > opts.context_len) sentence.resize(opts.context_len - 1);
    // Prompt: the first one or two words including the following space.
    const int words = 1 + static_cast<int>(rng() % 2);
    std::size_t cut = 0;
    for (int w = 0; w < words; ++w) {
      const auto sp = sentence.find(' ', cut);
      if (sp == std::string::npos) break;
      cut = sp + 1;
    }
    if (cut == 0 || cut >= sentence.size()) continue;
    ChatSample s;
    s.task = Task::general;
    s.think = ThinkMode::automatic;
    s.prompt = vocab.encode_text(sentence.substr(0, cut));
    s.response = vocab.encode_text(sentence.substr(cut));
    s.response.push_back(eos);
    s.reference = sentence.substr(cut);
    s.validate(opts.context_len);
    out.push_back(std::move(s));
  }
  return out;
}

data::TrainExample to_train_example(const ChatSample& s) {
  data::TrainExample ex;
  ex.tokens = s.prompt;
  append(ex.tokens, s.response);
  ex.mask.assign(s.prompt.size(), 0);
  ex.mask.resize(ex.tokens.size(), 1);
  ex.source = data::Source::general_text;
  return ex;
}

// ---------------------------------------------------------------- SFT

double sft_loss(const Parameters<float>& params, std::span<const ChatSample> batch, std::vector<float>* grad) {
  if (batch.empty()) throw InputError("sft_loss: empty batch");
  std::vector<data::TrainExample> examples;
  for (const auto& s : batch) {
    s.validate(params.config.context_len);
    examples.push_back(to_train_example(s));
  }
  std::vector<const data::TrainExample*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  const std::vector<int> source_of(ptrs.size(), 0);
  const auto packed = train::pack_examples(ptrs, source_of, params.config.context_len);
  return model::evaluate(params, std::span<const model::SequenceObjective>(packed.rows), grad).loss;
}

double sft_step(Parameters<float>& params, std::span<const ChatSample> batch, train::OptimizerState<float>& state,
                double lr, const train::AdamWConfig& cfg) {
  std::vector<float> grad;
  const double loss = sft_loss(params, batch, &grad);
  if (!std::isfinite(loss)) throw TrainingError("sft_step: non-finite loss");
  train::adamw_step<float>(params, grad, state, lr, cfg, train::TrainableMask::all(params.layout));
  return loss;
}

train::StageResult run_sft(Parameters<float>& params, std::span<const ChatSample> samples, const SftConfig& cfg,
                           std::uint64_t seed) {
  if (samples.empty()) throw InputError("run_sft: no samples");
  std::vector<train::MixSource> sources;
  for (std::size_t t = 0; t < kTaskNames.size(); ++t) {
    train::MixSource src;
    src.name = std::string(kTaskNames[t]);
    for (const auto& s : samples) {
      if (static_cast<std::size_t>(s.task) == t) {
        s.validate(params.config.context_len);
        src.examples.push_back(to_train_example(s));
      }
    }
    if (src.examples.empty()) continue;
    src.weight = static_cast<double>(src.examples.size());
    sources.push_back(std::move(src));
  }
  train::MixStream stream(std::move(sources), seed);
  return train::run_stage(params, stream, cfg.stage, train::TrainableMask::all(params.layout), "sft");
}

// ---------------------------------------------------------------- distillation

void DistillConfig::validate() const {
  if (!(clip_lo < clip_hi)) throw ConfigError("distill: clip_lo must be below clip_hi");
  if (!(temperature > 0)) throw ConfigError("distill: temperature must be positive");
  if (prompts_per_step < 1 || max_new < 1) throw ConfigError("distill: prompts_per_step and max_new must be >= 1");
  if (!(penalty_logprob < clip_lo)) throw ConfigError("distill: penalty_logprob must be below clip_lo");
}

std::string Trajectory::to_json() const {
  nlohmann::json j{{"prompt", prompt}, {"response", response}, {"student_logprobs", student_logprobs},
                   {"teacher_logprobs", teacher_logprobs}, {"rewards", rewards}};
  j["truncated_at"] = truncated_at ? nlohmann::json(*truncated_at) : nlohmann::json(nullptr);
  return j.dump();
}

void distill_rewards(Trajectory& traj, const vocab::Vocab& vocab, const DistillConfig& cfg) {
  cfg.validate();
  if (traj.student_logprobs.size() != traj.response.size() || traj.teacher_logprobs.size() != traj.response.size()) {
    throw InputError("distill_rewards: logprob arrays do not match the response");
  }
  traj.rewards.clear();
  traj.truncated_at.reset();
  for (std::size_t t = 0; t < traj.response.size(); ++t) {
    if (cfg.penalize_item_tokens && vocab.is_item_token(traj.response[t])) {
      traj.teacher_logprobs[t] = cfg.penalty_logprob;
      traj.rewards.push_back(std::clamp(cfg.penalty_logprob - traj.student_logprobs[t], cfg.clip_lo, cfg.clip_hi));
      traj.truncated_at = static_cast<int>(t);
      return;
    }
    traj.rewards.push_back(
        std::clamp(traj.teacher_logprobs[t] - traj.student_logprobs[t], cfg.clip_lo, cfg.clip_hi));
  }
}

Trajectory roll_out(const Parameters<float>& student, const Parameters<float>& teacher, const vocab::Vocab& vocab,
                    std::span<const int> prompt, const DistillConfig& cfg, std::uint64_t seed) {
  if (student.config.vocab_size != teacher.config.vocab_size || student.config.vocab_size != vocab.size()) {
    throw ConfigError("distill: student, teacher and vocabulary sizes differ");
  }
  const int room = std::min(student.config.context_len, teacher.config.context_len) - static_cast<int>(prompt.size());
  if (room < 1) throw InputError("distill: prompt leaves no room for a response");
  Trajectory traj;
  traj.prompt.assign(prompt.begin(), prompt.end());
  auto res = model::sample(student, prompt, cfg.temperature, std::min(cfg.max_new, room), seed,
                           vocab.special(Special::eos));
  traj.response = std::move(res.tokens);
  // Both models scored by teacher forcing so identical models give identical values.
  traj.student_logprobs = model::sequence_logprob(student, prompt, traj.response);
  traj.teacher_logprobs = model::sequence_logprob(teacher, prompt, traj.response);
  distill_rewards(traj, vocab, cfg);
  return traj;
}

double mean_reverse_kl(const Parameters<float>& student, const Parameters<float>& teacher, std::span<const int> prompt,
                       std::span<const int> response) {
  if (response.empty()) return 0.0;
  const auto s = model::response_distributions(student, prompt, response);
  const auto q = model::response_distributions(teacher, prompt, response);
  double total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double kl = 0;
    for (std::size_t v = 0; v < s[i].size(); ++v) kl += std::exp(s[i][v]) * (s[i][v] - q[i][v]);
    total += kl;
  }
  return total / static_cast<double>(s.size());
}

double itemic_mass(const Parameters<float>& params, const vocab::Vocab& vocab, std::span<const std::vector<int>> prompts) {
  if (prompts.empty()) throw InputError("itemic_mass: no prompts");
  double total = 0;
  for (const auto& p : prompts) {
    model::Decoder<float> dec(params);
    for (int t : p) dec.step(t);
    const auto lp = model::log_softmax<float>(dec.logits());
    for (int v = 0; v < vocab.size(); ++v) {
      if (vocab.is_item_token(v)) total += std::exp(lp[v]);
    }
  }
  return total / static_cast<double>(prompts.size());
}

double distill_objective(const Parameters<float>& student, std::span<const Trajectory> trajectories,
                         std::vector<float>* grad) {
  std::size_t kept = 0;
  for (const auto& t : trajectories) kept += t.rewards.size();
  if (kept == 0) {
    if (grad) grad->assign(student.count(), 0.0f);
    return 0.0;
  }
  std::vector<model::SequenceObjective> batch;
  for (const auto& t : trajectories) {
    if (t.rewards.empty()) continue;
    model::SequenceObjective s;
    s.tokens = t.prompt;
    s.tokens.insert(s.tokens.end(), t.response.begin(), t.response.begin() + static_cast<std::ptrdiff_t>(t.rewards.size()));
    for (std::size_t i = 0; i < t.rewards.size(); ++i) {
      s.terms.push_back(model::TokenTerm{static_cast<int>(t.prompt.size() + i),
                                         t.rewards[i] / static_cast<double>(kept), {}, 0.0, {}});
    }
    batch.push_back(std::move(s));
  }
  return model::evaluate(student, std::span<const model::SequenceObjective>(batch), grad).loss;
}

DistillStepResult distill_step(Parameters<float>& student, const Parameters<float>& teacher, const vocab::Vocab& vocab,
                               std::span<const std::vector<int>> prompts, const DistillConfig& cfg,
                               train::OptimizerState<float>& state, double lr, std::uint64_t round_seed) {
  cfg.validate();
  if (prompts.empty()) throw InputError("distill_step: no prompts");
  DistillStepResult r;
  r.trajectories.resize(prompts.size());
  std::vector<double> kl(prompts.size(), 0.0);
  const int n = static_cast<int>(prompts.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    r.trajectories[i] = roll_out(student, teacher, vocab, prompts[i], cfg, mix_seed(round_seed, i));
    const auto& t = r.trajectories[i];
    kl[i] = mean_reverse_kl(student, teacher, t.prompt,
                            std::span(t.response).first(t.rewards.size())) *
            static_cast<double>(t.rewards.size());
  }
  std::size_t kept = 0;
  double reward_sum = 0;
  for (int i = 0; i < n; ++i) {
    kept += r.trajectories[i].rewards.size();
    for (double x : r.trajectories[i].rewards) reward_sum += x;
    r.mean_reverse_kl += kl[i];
  }
  if (kept > 0) {
    r.mean_reward = reward_sum / static_cast<double>(kept);
    r.mean_reverse_kl /= static_cast<double>(kept);
  }
  std::vector<float> grad;
  distill_objective(student, r.trajectories, &grad);
  const auto mask = train::TrainableMask::all(student.layout);
  r.grad_norm = train::clip_grad_norm<float>(grad, mask, cfg.clip_norm);
  if (lr > 0) train::adamw_step<float>(student, grad, state, lr, cfg.adamw, mask);
  return r;
}

void write_align_trace(std::span<const AlignTraceRow> rows, const std::filesystem::path& path) {
  std::ostringstream out;
  out.precision(9);
  out << "step,lr,mean_reward,mean_reverse_kl,hit_rate,kl_to_ref\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.lr << ',' << r.mean_reward << ',' << r.mean_reverse_kl << ',' << r.hit_rate << ','
        << r.kl_to_ref << '\n';
  }
  io::write_file_atomic(path, out.str());
}

namespace {

// Endless shuffled cycle over [0, n).
class Cycle {
 public:
  Cycle(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::size_t next() {
    const std::size_t v = order_[pos_];
    pos_ = (pos_ + 1) % order_.size();
    return v;
  }

 private:
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<AlignTraceRow> run_distill(Parameters<float>& student, const Parameters<float>& teacher,
                                       const vocab::Vocab& vocab, std::span<const std::vector<int>> prompts,
                                       const DistillConfig& cfg, const std::filesystem::path* dump) {
  cfg.validate();
  if (prompts.empty()) throw InputError("run_distill: no prompts");
  const train::LrSchedule schedule{cfg.peak_lr, cfg.min_lr, cfg.warmup_fraction, cfg.steps};
  schedule.validate();
  Cycle cycle(prompts.size(), mix_seed(cfg.seed, 1));
  train::OptimizerState<float> state;
  std::vector<AlignTraceRow> rows;
  std::string dump_text;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<int>> batch;
    for (int i = 0; i < cfg.prompts_per_step; ++i) batch.push_back(prompts[cycle.next()]);
    const double lr = train::lr_at(schedule, step + 1);
    const auto r = distill_step(student, teacher, vocab, batch, cfg, state, lr,
                                mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(step)));
    if (!std::isfinite(r.mean_reward) || !std::isfinite(r.grad_norm)) {
      throw TrainingError("distill: non-finite reward or gradient at step " + std::to_string(step));
    }
    rows.push_back(AlignTraceRow{step, lr, r.mean_reward, r.mean_reverse_kl, 0.0, 0.0});
    if (dump) {
      for (const auto& t : r.trajectories) dump_text += t.to_json() + "\n";
    }
  }
  if (dump) io::write_file_atomic(*dump, dump_text);
  return rows;
}

// ---------------------------------------------------------------- GRPO

double hit_reward(std::span<const int> response, std::span<const std::vector<int>> target_blocks) {
  for (const auto& block : target_blocks) {
    if (block.empty()) continue;
    if (std::search(response.begin(), response.end(), block.begin(), block.end()) != response.end()) return 1.0;
  }
  return 0.0;
}

std::vector<double> grpo_advantages(std::span<const double> rewards, double eps) {
  if (rewards.size() < 2) throw ConfigError("grpo_advantages: group size must be >= 2");
  if (!(eps >= 0)) throw ConfigError("grpo_advantages: eps must be >= 0");
  std::vector<double> adv(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return adv;
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / (sd + eps);
  return adv;
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("grpo: group_size must be >= 2");
  if (!(kl_coefficient >= 0)) throw ConfigError("grpo: kl_coefficient must be >= 0");
  if (!(temperature > 0)) throw ConfigError("grpo: temperature must be positive");
  if (prompts_per_step < 1) throw ConfigError("grpo: prompts_per_step must be >= 1");
}

TrieSet::TrieSet(const data::ItemCatalog& catalog)
    : vocab(catalog.vocab()),
      all(catalog.trie()),
      video(catalog.trie(corpus::Domain::video)),
      ad(catalog.trie(corpus::Domain::ad)),
      product(catalog.trie(corpus::Domain::product)) {}

const model::ItemTrie& TrieSet::for_domain(std::optional<corpus::Domain> d) const {
  const model::ItemTrie* t = &all;
  if (d) {
    switch (*d) {
      case corpus::Domain::video: t = &video; break;
      case corpus::Domain::ad: t = &ad; break;
      case corpus::Domain::product: t = &product; break;
    }
  }
  if (t->empty()) throw ConfigError("item trie for the requested domain is empty");
  return *t;
}

double grpo_objective(const Parameters<float>& policy, const Parameters<float>& reference,
                      std::span<const GrpoGroup> groups, const TrieSet& tries,
                      std::span<const std::optional<corpus::Domain>> domains, const GrpoConfig& cfg,
                      std::vector<float>* grad, double* kl_out) {
  if (groups.size() != domains.size()) throw InputError("grpo_objective: groups and domains differ in length");
  if (groups.empty()) throw InputError("grpo_objective: no groups");
  const double P = static_cast<double>(groups.size());
  std::vector<model::SequenceObjective> batch;
  std::vector<double> kl_norm;  // per sequence: weight of its KL terms in the reported mean
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    const auto& trie = tries.for_domain(domains[g]);
    const double G = static_cast<double>(grp.responses.size());
    std::size_t positions = 0;
    for (const auto& r : grp.responses) positions += r.size();
    for (std::size_t i = 0; i < grp.responses.size(); ++i) {
      const auto& run = grp.responses[i];
      const auto allowed = trie.path_allowed(run);
      model::SequenceObjective s;
      s.tokens = grp.prompt;
      s.tokens.insert(s.tokens.end(), run.begin(), run.end());
      std::vector<std::vector<double>> ref;
      if (cfg.kl_coefficient > 0) ref = model::response_distributions(reference, grp.prompt, run);
      const double len = cfg.length_normalize ? static_cast<double>(run.size()) : 1.0;
      for (std::size_t t = 0; t < run.size(); ++t) {
        model::TokenTerm term;
        term.index = static_cast<int>(grp.prompt.size() + t);
        term.weight = grp.advantages[i] / (G * P * len);
        term.allowed = allowed[t];
        if (cfg.kl_coefficient > 0) {
          term.kl_weight = cfg.kl_coefficient / (P * static_cast<double>(positions));
          term.ref_logprobs = std::move(ref[t]);
        }
        s.terms.push_back(std::move(term));
      }
      batch.push_back(std::move(s));
      kl_norm.push_back(1.0 / (P * static_cast<double>(positions)));
    }
  }
  const auto res = model::evaluate(policy, std::span<const model::SequenceObjective>(batch), grad);
  if (kl_out) {
    double kl = 0;
    for (std::size_t b = 0; b < res.kl.size(); ++b) {
      for (double x : res.kl[b]) kl += x * kl_norm[b];
    }
    *kl_out = kl;
  }
  return res.loss;
}

GrpoStepResult grpo_step(Parameters<float>& policy, const Parameters<float>& reference,
                         std::span<const ChatSample* const> samples, const TrieSet& tries, const GrpoConfig& cfg,
                         train::OptimizerState<float>& state, double lr, std::uint64_t round_seed) {
  cfg.validate();
  if (samples.empty()) throw InputError("grpo_step: no prompts");
  GrpoStepResult r;
  r.groups.resize(samples.size());
  std::vector<std::optional<corpus::Domain>> domains(samples.size());
  const int n = static_cast<int>(samples.size());
  for (int p = 0; p < n; ++p) domains[p] = samples[p]->domain;
#pragma omp parallel for schedule(dynamic)
  for (int p = 0; p < n; ++p) {
    const ChatSample& s = *samples[p];
    auto& grp = r.groups[p];
    grp.prompt = s.prompt;
    if (s.think == ThinkMode::think) {
      // The reasoning block is empty; it is part of the prompt for item generation.
      grp.prompt.push_back(s.response.at(0));
      grp.prompt.push_back(s.response.at(1));
    }
    const auto& trie = tries.for_domain(s.domain);
    model::Decoder<float> dec(policy);
    for (int t : grp.prompt) dec.step(t);
    Rng rng(mix_seed(round_seed, static_cast<std::uint64_t>(p)));
    for (int i = 0; i < cfg.group_size; ++i) {
      grp.responses.push_back(model::sample_item(dec, trie, cfg.temperature, rng).tokens);
    }
  }
  double hits = 0;
  for (int p = 0; p < n; ++p) {
    auto& grp = r.groups[p];
    std::vector<std::vector<int>> blocks;
    for (const auto& code : samples[p]->targets) blocks.push_back(tries.vocab.encode_code(code));
    for (const auto& resp : grp.responses) {
      grp.rewards.push_back(hit_reward(resp, blocks));
      hits += grp.rewards.back();
    }
    grp.advantages = grpo_advantages(grp.rewards, cfg.advantage_eps);
  }
  r.hit_rate = hits / static_cast<double>(n * cfg.group_size);
  std::vector<float> grad;
  grpo_objective(policy, reference, r.groups, tries, domains, cfg, &grad, &r.kl_to_ref);
  const auto mask = train::TrainableMask::all(policy.layout);
  train::clip_grad_norm<float>(grad, mask, cfg.clip_norm);
  if (lr > 0) train::adamw_step<float>(policy, grad, state, lr, cfg.adamw, mask);
  return r;
}

std::vector<AlignTraceRow> run_grpo(Parameters<float>& policy, const Parameters<float>& reference,
                                    std::span<const ChatSample> samples, const TrieSet& tries, const GrpoConfig& cfg) {
  cfg.validate();
  std::vector<const ChatSample*> pool;
  for (const auto& s : samples) {
    if (is_rec_task(s.task) && !s.targets.empty()) pool.push_back(&s);
  }
  if (pool.empty()) throw InputError("run_grpo: no item-task samples");
  const train::LrSchedule schedule{cfg.peak_lr, cfg.min_lr, cfg.warmup_fraction, cfg.steps};
  schedule.validate();
  Cycle cycle(pool.size(), mix_seed(cfg.seed, 2));
  train::OptimizerState<float> state;
  std::vector<AlignTraceRow> rows;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<const ChatSample*> batch;
    for (int i = 0; i < cfg.prompts_per_step; ++i) batch.push_back(pool[cycle.next()]);
    const double lr = train::lr_at(schedule, step + 1);
    const auto r = grpo_step(policy, reference, batch, tries, cfg, state, lr,
                             mix_seed(cfg.seed, 5000 + static_cast<std::uint64_t>(step)));
    rows.push_back(AlignTraceRow{step, lr, r.hit_rate, 0.0, r.hit_rate, r.kl_to_ref});
  }
  return rows;
}

// ---------------------------------------------------------------- evaluation

std::vector<int> greedy_decode(const Parameters<float>& params, std::span<const int> prompt, int max_new, int stop) {
  if (prompt.empty()) throw InputError("greedy_decode: empty prompt");
  model::Decoder<float> dec(params);
  for (int t : prompt) dec.step(t);
  std::vector<int> out;
  for (int k = 0; k < max_new; ++k) {
    const auto z = dec.logits();
    const int pick = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    out.push_back(pick);
    if (pick == stop || dec.length() >= params.config.context_len) break;
    dec.step(pick);
  }
  return out;
}

std::map<std::string, double> evaluate_task(const Parameters<float>& params, const data::ItemCatalog& catalog,
                                            const TrieSet& tries, std::span<const ChatSample> samples,
                                            const EvalOptions& opts) {
  if (samples.empty()) throw InputError("evaluate_task: no samples");
  if (opts.beam < 32) throw ConfigError("evaluate_task: beam must be >= 32 for pass@32");
  const auto& v = catalog.vocab();
  const Task task = samples.front().task;
  for (const auto& s : samples) {
    if (s.task != task) throw InputError("evaluate_task: mixed tasks");
  }
  const int n = static_cast<int>(samples.size());
  std::map<std::string, double> out;
  if (is_rec_task(task)) {
    std::vector<double> p1(n), p32(n), r32(n);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
      const auto& s = samples[i];
      model::GenerationOptions g;
      g.n = opts.beam;
      const auto items = model::generate_items(params, answer_prompt(v, s), tries.for_domain(s.domain), g);
      std::vector<rq::ItemicCode> codes;
      for (const auto& it : items) codes.push_back(it.code);
      p1[i] = eval::pass_at_k(codes, s.targets, 1);
      p32[i] = eval::pass_at_k(codes, s.targets, 32);
      r32[i] = eval::recall_at_k(codes, s.targets, 32);
    }
    out["pass@1"] = std::accumulate(p1.begin(), p1.end(), 0.0) / n;
    out["pass@32"] = std::accumulate(p32.begin(), p32.end(), 0.0) / n;
    out["recall@32"] = std::accumulate(r32.begin(), r32.end(), 0.0) / n;
  } else if (task == Task::label_prediction) {
    const int yes = v.encode_text("Y").at(0), no = v.encode_text("N").at(0);
    std::vector<eval::LabelScore> scores(n);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
      scores[i] = eval::LabelScore{eval::yes_probability(params, answer_prompt(v, samples[i]), yes, no),
                                   samples[i].label};
    }
    out["auc"] = eval::auc(scores);
  } else {
    const int eos = v.special(Special::eos);
    std::vector<eval::JudgeTranscript> transcripts(n);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
      const auto prompt = answer_prompt(v, samples[i]);
      const int room = params.config.context_len - static_cast<int>(prompt.size());
      auto gen = greedy_decode(params, prompt, std::min(opts.max_text_tokens, room), eos);
      if (!gen.empty() && gen.back() == eos) gen.pop_back();
      transcripts[i] = eval::build_transcript(samples[i].reference, v.decode_text(gen));
    }
    out["judge_score"] = eval::judge_score(transcripts);
  }
  return out;
}

}  // namespace onerec::align
