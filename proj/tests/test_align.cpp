#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "fixtures.hpp"
#include "onerec/align.hpp"
#include "test_util.hpp"

using namespace onerec;
using namespace onerec::align;

namespace {

const testutil::World& world() {
  static const testutil::World w = testutil::make_world(2, 200, 256);
  return w;
}

TaskOptions options(std::optional<ThinkMode> think = ThinkMode::no_think, int per_user = 1) {
  TaskOptions o;
  o.context_len = 96;
  o.think = think;
  o.max_per_user = per_user;
  o.seed = 3;
  return o;
}

std::string decode(std::span<const int> ids) { return world().vocab.decode_text(ids); }

bool contains(std::span<const int> hay, std::span<const int> needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

model::Parameters<float> small_model(std::uint64_t seed, int ctx = 96) {
  auto cfg = world().model_config(32, ctx);
  cfg.seed = seed;
  return model::init_parameters<float>(cfg);
}

}  // namespace

TEST(Tasks, NamesRoundTrip) {
  for (auto t : kRecIfTasks) EXPECT_EQ(parse_task(task_name(t)), t);
  EXPECT_EQ(parse_task("general"), Task::general);
  EXPECT_THROW(parse_task("nope"), ConfigError);
  EXPECT_EQ(kRecIfTasks.size(), 8u);
}

TEST(Tasks, ThinkSuffixUniform) {
  Rng rng(9);
  std::map<ThinkMode, int> count;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++count[draw_think_mode(rng)];
  const double p = 1.0 / 3.0, sd = std::sqrt(n * p * (1 - p));
  for (auto m : {ThinkMode::think, ThinkMode::no_think, ThinkMode::automatic}) {
    EXPECT_LT(std::abs(count[m] - n * p), 3 * sd);
  }

  // The suffix is visible in the built prompts.
  const auto samples = build_task_samples(world().catalog, world().users(), Task::short_video_rec, options(std::nullopt, 0));
  std::map<ThinkMode, int> seen;
  for (const auto& s : samples) {
    ++seen[s.think];
    const auto text = decode(s.prompt);
    const bool has_think = text.find("/think>") != std::string::npos;
    const bool has_no = text.find("/no_think>") != std::string::npos;
    EXPECT_EQ(has_think, s.think == ThinkMode::think);
    EXPECT_EQ(has_no, s.think == ThinkMode::no_think);
    const bool opens = s.response.front() == world().vocab.special(vocab::Special::think_open);
    EXPECT_EQ(opens, s.think == ThinkMode::think);
  }
  EXPECT_EQ(seen.size(), 3u);
}

TEST(Tasks, EveryTaskBuildsValidSamples) {
  const auto& w = world();
  const int eos = w.vocab.special(vocab::Special::eos);
  for (auto task : kRecIfTasks) {
    const auto samples = build_task_samples(w.catalog, w.users(), task, options());
    ASSERT_FALSE(samples.empty()) << task_name(task);
    for (const auto& s : samples) {
      EXPECT_EQ(s.task, task);
      EXPECT_NO_THROW(s.validate(96));
      EXPECT_EQ(s.response.back(), eos);
      if (is_rec_task(task)) {
        ASSERT_FALSE(s.targets.empty());
        EXPECT_LE(s.targets.size(), 4u);
        const auto run = w.vocab.encode_code(s.targets.front());
        EXPECT_TRUE(std::equal(run.begin(), run.end(), s.response.begin()));
      } else if (task != Task::label_prediction) {
        EXPECT_FALSE(s.reference.empty());
        std::string answer = decode(std::span(s.response).first(s.response.size() - 1));
        EXPECT_EQ(answer, s.reference);
      }
    }
  }
}

TEST(Tasks, DomainTasksTargetTheirDomain) {
  const auto& w = world();
  const std::map<Task, corpus::Domain> dom{{Task::short_video_rec, corpus::Domain::video},
                                           {Task::ad_rec, corpus::Domain::ad},
                                           {Task::product_rec, corpus::Domain::product}};
  std::map<rq::ItemicCode, std::vector<corpus::Domain>> domains_of;
  for (const auto& item : w.catalog.items()) domains_of[item.code].push_back(item.domain);
  for (const auto& [task, d] : dom) {
    for (const auto& s : build_task_samples(w.catalog, w.users(), task, options(ThinkMode::no_think, 0))) {
      EXPECT_EQ(s.domain, d);
      for (const auto& c : s.targets) {
        const auto& ds = domains_of[c];
        EXPECT_NE(std::find(ds.begin(), ds.end(), d), ds.end());
      }
    }
  }
}

TEST(Tasks, LabelPredictionHasBothClassesAndYesNoAnswers) {
  const auto samples = build_task_samples(world().catalog, world().users(), Task::label_prediction, options());
  int pos = 0, neg = 0;
  for (const auto& s : samples) {
    const auto answer = decode(std::span(s.response).first(s.response.size() - 1));
    EXPECT_EQ(answer, s.label ? "Yes" : "No");
    (s.label ? pos : neg)++;
  }
  EXPECT_GT(pos, 0);
  EXPECT_GT(neg, pos);
}

TEST(Tasks, HistoryPrecedesTheCut) {
  // The prompt's item runs are the tail of the history before some cut k, and
  // the first target is an interaction at or after k.
  const auto& w = world();
  const auto samples = build_task_samples(w.catalog, w.users(), Task::short_video_rec, options());
  std::map<std::string, const corpus::UserRecord*> by_id;
  for (const auto& u : w.users()) by_id[u.user_id] = &u;
  for (const auto& s : samples) {
    const auto& seq = by_id.at(s.user_id)->interactions;
    std::vector<int> items;
    for (int t : s.prompt) {
      if (w.vocab.is_item_token(t)) items.push_back(t);
    }
    ASSERT_FALSE(items.empty());
    bool found = false;
    for (int k = static_cast<int>(seq.size()) - 1; k >= 1 && !found; --k) {
      std::vector<int> history;
      for (int j = 0; j < k; ++j) {
        const auto& run = w.catalog.tokens(seq[j].item_id);
        history.insert(history.end(), run.begin(), run.end());
      }
      if (items.size() > history.size() || !std::equal(items.rbegin(), items.rend(), history.rbegin())) continue;
      for (std::size_t j = k; j < seq.size(); ++j) found = found || w.catalog.at(seq[j].item_id).code == s.targets.front();
    }
    EXPECT_TRUE(found) << s.user_id;
  }
}

TEST(Tasks, GeneralSamplesSplitSentences) {
  const auto samples = build_general_samples(world().vocab, 200, options());
  ASSERT_EQ(samples.size(), 200u);
  for (const auto& s : samples) {
    EXPECT_EQ(s.task, Task::general);
    EXPECT_EQ(s.think, ThinkMode::automatic);
    const auto prompt = decode(s.prompt);
    EXPECT_EQ(prompt.back(), ' ');
    EXPECT_EQ(decode(std::span(s.response).first(s.response.size() - 1)), s.reference);
  }
}

TEST(Sft, TrainExampleMasksPrompt) {
  const auto s = build_task_samples(world().catalog, world().users(), Task::ad_rec, options()).front();
  const auto ex = to_train_example(s);
  ASSERT_EQ(ex.tokens.size(), s.prompt.size() + s.response.size());
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) EXPECT_EQ(ex.mask[i], i >= s.prompt.size() ? 1 : 0);
}

TEST(Sft, LossAndGradientCoverResponseTokensOnly) {
  const auto p = small_model(5);
  const auto all = build_task_samples(world().catalog, world().users(), Task::rec_explanation, options());
  const std::vector<ChatSample> batch(all.begin(), all.begin() + 6);
  std::vector<float> grad;
  const double loss = sft_loss(p, batch, &grad);

  // Independent construction: one unpacked sequence per sample, terms on the
  // response positions only.
  std::vector<model::SequenceObjective> seqs;
  std::size_t targets = 0;
  for (const auto& s : batch) targets += s.response.size();
  double nll = 0;
  for (const auto& s : batch) {
    model::SequenceObjective q;
    q.tokens = s.prompt;
    q.tokens.insert(q.tokens.end(), s.response.begin(), s.response.end());
    for (std::size_t i = 0; i < s.response.size(); ++i) {
      q.terms.push_back(model::TokenTerm{static_cast<int>(s.prompt.size() + i), 1.0 / targets, {}, 0.0, {}});
    }
    seqs.push_back(std::move(q));
    for (double lp : model::sequence_logprob(p, s.prompt, s.response)) nll -= lp / targets;
  }
  std::vector<float> ref_grad;
  const double ref = model::evaluate(p, std::span<const model::SequenceObjective>(seqs), &ref_grad).loss;
  EXPECT_NEAR(loss, ref, 1e-6);
  EXPECT_NEAR(loss, nll, 1e-6);
  double diff = 0, norm = 0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    diff += (grad[i] - ref_grad[i]) * (grad[i] - ref_grad[i]);
    norm += ref_grad[i] * ref_grad[i];
  }
  EXPECT_LT(std::sqrt(diff), 1e-4 * std::sqrt(norm));
}

TEST(Sft, ReducesResponseNll) {
  auto p = small_model(6);
  std::vector<ChatSample> samples;
  for (auto task : kRecIfTasks) {
    auto s = build_task_samples(world().catalog, world().users(), task, options(std::nullopt, 1));
    samples.insert(samples.end(), s.begin(), s.begin() + std::min<std::size_t>(s.size(), 63));
  }
  samples.resize(500);
  const double before = sft_loss(p, samples, nullptr);
  SftConfig cfg;
  cfg.stage.steps = 300;
  cfg.stage.peak_lr = 3e-3;
  cfg.stage.min_lr = 3e-4;
  const auto r = run_sft(p, samples, cfg, 1);
  EXPECT_EQ(r.trace.size(), 300u);
  EXPECT_EQ(r.record.label, "sft");
  const double after = sft_loss(p, samples, nullptr);
  EXPECT_LE(after, 0.7 * before) << before << " -> " << after;
}

TEST(SftStep, LowersLossOnItsBatch) {
  auto p = small_model(8);
  const auto all = build_task_samples(world().catalog, world().users(), Task::item_understanding, options());
  const std::vector<ChatSample> batch(all.begin(), all.begin() + 8);
  train::OptimizerState<float> st;
  const double first = sft_step(p, batch, st, 1e-3, {});
  double last = first;
  for (int k = 0; k < 20; ++k) last = sft_step(p, batch, st, 1e-3, {});
  EXPECT_LT(last, first);
}

// ---------------------------------------------------------------- distillation

namespace {

int an_item_token() { return world().vocab.token_of(1, 3); }

Trajectory random_trajectory(Rng& rng) {
  const auto& v = world().vocab;
  Trajectory t;
  t.prompt = {1, 2, 3};
  const int n = 1 + static_cast<int>(rng() % 20);
  for (int i = 0; i < n; ++i) {
    const double u = uniform01(rng);
    const int tok = u < 0.05 ? an_item_token()
                    : u < 0.07 ? v.special(vocab::Special::item_begin)
                               : static_cast<int>(rng() % 256);
    t.response.push_back(tok);
    t.student_logprobs.push_back(-15.0 * uniform01(rng));
    t.teacher_logprobs.push_back(-15.0 * uniform01(rng));
  }
  return t;
}

}  // namespace

TEST(DistillRewards, IdentityGivesClippedZero) {
  Trajectory t;
  t.prompt = {5};
  t.response = {10, 20, 30};
  t.student_logprobs = {-1.0, -2.0, -0.5};
  t.teacher_logprobs = t.student_logprobs;
  DistillConfig cfg;
  distill_rewards(t, world().vocab, cfg);
  EXPECT_EQ(t.rewards, (std::vector<double>{0.0, 0.0, 0.0}));
  cfg.clip_lo = 0.5;
  cfg.clip_hi = 2.0;
  distill_rewards(t, world().vocab, cfg);
  EXPECT_EQ(t.rewards, (std::vector<double>{0.5, 0.5, 0.5}));
}

TEST(DistillRewards, ItemTokenPenalisedAndTruncated) {
  Trajectory t;
  t.prompt = {5};
  t.response = {10, 20, 30, an_item_token(), 40, 50};
  t.student_logprobs = {-1, -1, -1, -3, -1, -1};
  t.teacher_logprobs = {-1, -1, -1, -1, -1, -1};
  DistillConfig cfg;
  cfg.clip_lo = -5;
  distill_rewards(t, world().vocab, cfg);
  ASSERT_TRUE(t.truncated_at.has_value());
  EXPECT_EQ(*t.truncated_at, 3);
  ASSERT_EQ(t.rewards.size(), 4u);
  EXPECT_EQ(t.rewards[3], -5.0);
  EXPECT_EQ(t.teacher_logprobs[3], cfg.penalty_logprob);

  // A teacher that scores item tokens itself: plain clipped differences, no truncation.
  t.teacher_logprobs = {-1, -1, -1, -1, -1, -1};
  cfg.penalize_item_tokens = false;
  cfg.clip_hi = 1;
  distill_rewards(t, world().vocab, cfg);
  EXPECT_FALSE(t.truncated_at.has_value());
  EXPECT_EQ(t.rewards, (std::vector<double>{0, 0, 0, 1, 0, 0}));
}

TEST(DistillRewards, MatchBruteForceOnRandomTrajectories) {
  Rng rng(12);
  const auto& v = world().vocab;
  DistillConfig cfg;
  for (int trial = 0; trial < 1000; ++trial) {
    auto t = random_trajectory(rng);
    const auto teacher = t.teacher_logprobs;
    cfg.clip_lo = -1.0 - 10.0 * uniform01(rng);
    cfg.clip_hi = cfg.clip_lo + 0.5 + 5.0 * uniform01(rng);
    distill_rewards(t, v, cfg);
    std::vector<double> expect;
    int cut = -1;
    for (std::size_t i = 0; i < t.response.size(); ++i) {
      const int tok = t.response[i];
      const bool item = (tok >= 256 && tok < v.special_offset()) || tok == v.special(vocab::Special::item_begin) ||
                        tok == v.special(vocab::Special::item_end);
      const double diff = (item ? -1e9 : teacher[i]) - t.student_logprobs[i];
      expect.push_back(diff < cfg.clip_lo ? cfg.clip_lo : diff > cfg.clip_hi ? cfg.clip_hi : diff);
      if (item) {
        cut = static_cast<int>(i);
        break;
      }
    }
    ASSERT_EQ(t.rewards, expect);
    ASSERT_EQ(t.truncated_at.value_or(-1), cut);
    for (double r : t.rewards) {
      ASSERT_GE(r, cfg.clip_lo);
      ASSERT_LE(r, cfg.clip_hi);
    }
  }
}

TEST(DistillRewards, ConfigChecks) {
  DistillConfig cfg;
  cfg.clip_lo = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  Trajectory t;
  t.prompt = {1};
  t.response = {2};
  t.student_logprobs = {-1.0};
  EXPECT_THROW(distill_rewards(t, world().vocab, DistillConfig{}), InputError);
  auto a = small_model(1);
  auto cfg2 = a.config;
  cfg2.vocab_size = 300;
  const auto b = model::init_parameters<float>(cfg2);
  const std::vector<int> prompt{1, 2};
  EXPECT_THROW(roll_out(a, b, world().vocab, prompt, DistillConfig{}, 1), ConfigError);
}

TEST(Distill, RollOutLogprobsMatchTeacherForcing) {
  const auto student = small_model(2);
  const auto teacher = small_model(3);
  const std::vector<int> prompt = world().vocab.encode_text("the old ");
  DistillConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto t = roll_out(student, teacher, world().vocab, prompt, cfg, seed);
    const auto s_lp = model::sequence_logprob(student, prompt, t.response);
    const auto q_lp = model::sequence_logprob(teacher, prompt, t.response);
    for (std::size_t i = 0; i < t.rewards.size(); ++i) {
      EXPECT_EQ(t.student_logprobs[i], s_lp[i]);
      if (!t.truncated_at || static_cast<int>(i) != *t.truncated_at) EXPECT_EQ(t.teacher_logprobs[i], q_lp[i]);
    }
  }
}

TEST(Distill, ReverseKlExactAndZeroForIdenticalModels) {
  const auto a = small_model(2);
  const auto b = small_model(3);
  const std::vector<int> prompt{10, 20, 30};
  const std::vector<int> resp{40, 50};
  EXPECT_EQ(mean_reverse_kl(a, a, prompt, resp), 0.0);
  const auto la = model::forward(a, std::vector<int>{10, 20, 30, 40});
  const auto lb = model::forward(b, std::vector<int>{10, 20, 30, 40});
  double kl = 0;
  for (int row : {2, 3}) {
    const auto pa = model::log_softmax<float>(la.row(row));
    const auto pb = model::log_softmax<float>(lb.row(row));
    for (std::size_t v = 0; v < pa.size(); ++v) kl += std::exp(pa[v]) * (pa[v] - pb[v]);
  }
  EXPECT_NEAR(mean_reverse_kl(a, b, prompt, resp), kl / 2, 1e-9);
  EXPECT_GT(kl, 0);
}

TEST(Distill, SelfTeacherGivesZeroGradientWithoutItemTokens) {
  const auto student = small_model(4);
  const auto& v = world().vocab;
  std::vector<Trajectory> trajs;
  DistillConfig cfg;
  cfg.max_new = 2;
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    auto t = roll_out(student, student, v, v.encode_text("the "), cfg, seed);
    if (!t.truncated_at) trajs.push_back(std::move(t));
  }
  ASSERT_FALSE(trajs.empty());
  std::vector<float> grad;
  distill_objective(student, trajs, &grad);
  EXPECT_TRUE(std::all_of(grad.begin(), grad.end(), [](float g) { return g == 0.0f; }));
}

TEST(Distill, ObjectiveGradientIsRewardWeightedScore) {
  const auto student = small_model(4);
  Trajectory t;
  t.prompt = {7, 8};
  t.response = {9, 10, 11};
  t.rewards = {-1.0, -0.5};  // truncated after the second token
  std::vector<float> grad;
  const double loss = distill_objective(student, std::span(&t, 1), &grad);
  const auto lp = model::sequence_logprob(student, t.prompt, std::vector<int>{9, 10});
  EXPECT_NEAR(loss, -(-1.0 * lp[0] - 0.5 * lp[1]) / 2.0, 1e-6);
}

TEST(Distill, StepReducesReverseKlTowardsTeacher) {
  const auto& v = world().vocab;
  // A text-trained teacher puts little mass on item tokens, as a general model does.
  auto teacher = small_model(11);
  const auto text = build_general_samples(v, 400, options());
  SftConfig sft;
  sft.stage.steps = 200;
  sft.stage.peak_lr = 3e-3;
  sft.stage.min_lr = 3e-4;
  run_sft(teacher, text, sft, 2);
  auto student = teacher;
  Rng rng(1);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  for (auto& x : student.values) x += noise(rng);
  std::vector<std::vector<int>> prompts;
  for (std::size_t i = 0; i < 16; ++i) prompts.push_back(text[i].prompt);
  auto kl_on = [&](const model::Parameters<float>& m) {
    double k = 0;
    for (const auto& p : prompts) {
      const auto t = model::sample(teacher, p, 1.0, 12, 99, v.special(vocab::Special::eos));
      k += mean_reverse_kl(m, teacher, p, t.tokens);
    }
    return k / prompts.size();
  };
  const double before = kl_on(student);
  DistillConfig cfg;
  cfg.steps = 150;
  cfg.peak_lr = 1e-3;
  cfg.min_lr = 1e-4;
  cfg.max_new = 12;
  const auto rows = run_distill(student, teacher, v, prompts, cfg);
  EXPECT_EQ(rows.size(), 150u);
  const double after = kl_on(student);
  EXPECT_LT(after, 0.5 * before) << before << " -> " << after;
}

TEST(Distill, TraceAndDumpFiles) {
  const auto& v = world().vocab;
  const auto teacher = small_model(11);
  auto student = small_model(12);
  const std::vector<std::vector<int>> prompts{v.encode_text("the "), v.encode_text("a ")};
  DistillConfig cfg;
  cfg.steps = 3;
  cfg.prompts_per_step = 2;
  cfg.max_new = 6;
  testutil::TempDir dir("distill");
  const auto dump = dir.path() / "traj.jsonl";
  const auto rows = run_distill(student, teacher, v, prompts, cfg, &dump);
  write_align_trace(rows, dir.path() / "trace.csv");
  const auto text = testutil::slurp(dump);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 6);
  EXPECT_NE(text.find("\"rewards\""), std::string::npos);
  const auto csv = testutil::slurp(dir.path() / "trace.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,lr,mean_reward,mean_reverse_kl,hit_rate,kl_to_ref");
}

TEST(Distill, ItemicMassIsAProbability) {
  const auto p = small_model(3);
  const std::vector<std::vector<int>> prompts{{1, 2}, {3}};
  const double m = itemic_mass(p, world().vocab, prompts);
  EXPECT_GT(m, 0.0);
  EXPECT_LT(m, 1.0);
}

// ---------------------------------------------------------------- GRPO

TEST(HitReward, Cases) {
  const auto& v = world().vocab;
  const rq::ItemicCode target{{1, 2, 3}}, near{{1, 2, 4}};
  const std::vector<std::vector<int>> blocks{v.encode_code(target)};
  auto resp = v.encode_code(target);
  EXPECT_EQ(hit_reward(resp, blocks), 1.0);
  EXPECT_EQ(hit_reward(v.encode_code(near), blocks), 0.0);
  std::vector<int> padded{5, 6};
  padded.insert(padded.end(), resp.begin(), resp.end());
  padded.push_back(7);
  EXPECT_EQ(hit_reward(padded, blocks), 1.0);
  EXPECT_EQ(hit_reward({}, blocks), 0.0);
}

TEST(HitReward, MatchesNaiveSearch) {
  const auto& v = world().vocab;
  Rng rng(4);
  const int ib = v.special(vocab::Special::item_begin), ie = v.special(vocab::Special::item_end);
  for (int trial = 0; trial < 10000; ++trial) {
    const rq::ItemicCode target{{static_cast<int>(rng() % 2), static_cast<int>(rng() % 2), static_cast<int>(rng() % 2)}};
    const auto block = v.encode_code(target);
    std::vector<int> resp;
    const int n = static_cast<int>(rng() % 14);
    for (int i = 0; i < n; ++i) {
      const int kind = static_cast<int>(rng() % 4);
      const int level = static_cast<int>(rng() % 3);
      resp.push_back(kind == 0 ? ib : kind == 1 ? ie : v.token_of(level, static_cast<int>(rng() % 2)));
    }
    bool naive = false;
    for (std::size_t s = 0; s + block.size() <= resp.size() && !naive; ++s) {
      bool all = true;
      for (std::size_t j = 0; j < block.size(); ++j) all = all && resp[s + j] == block[j];
      naive = all;
    }
    const std::vector<std::vector<int>> blocks{block};
    ASSERT_EQ(hit_reward(resp, blocks), naive ? 1.0 : 0.0);
  }
}

TEST(GrpoAdvantages, Cases) {
  const std::vector<double> two{1.0, 0.0};
  EXPECT_EQ(grpo_advantages(two, 0.0), (std::vector<double>{1.0, -1.0}));
  const std::vector<double> flat(5, 0.5);
  for (double a : grpo_advantages(flat, 1e-6)) EXPECT_EQ(a, 0.0);
  const std::vector<double> tenth(7, 0.1);
  for (double a : grpo_advantages(tenth, 0.0)) EXPECT_EQ(a, 0.0);
  EXPECT_THROW(grpo_advantages(std::vector<double>{1.0}, 0.0), ConfigError);
}

TEST(GrpoAdvantages, MeanZeroAndPopulationStd) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int g = 2 + static_cast<int>(rng() % 15);
    std::vector<double> r(g);
    for (auto& x : r) x = (rng() % 2 == 0) ? std::floor(uniform01(rng) * 2) : uniform01(rng) * 10 - 5;
    const auto a = grpo_advantages(r, 1e-6);
    double sum = 0;
    for (double x : a) sum += x;
    ASSERT_NEAR(sum / g, 0.0, 1e-12);
    double m = 0;
    for (double x : r) m += x / g;
    double var = 0;
    for (double x : r) var += (x - m) * (x - m) / g;
    if (var > 0) {
      ASSERT_NEAR(a[0], (r[0] - m) / (std::sqrt(var) + 1e-6), 1e-9);
    }
  }
}

namespace {

struct GrpoFixture {
  TrieSet tries{world().catalog};
  std::vector<ChatSample> samples =
      build_task_samples(world().catalog, world().users(), Task::interactive_rec, options());
};

GrpoGroup two_item_group(const ChatSample& s, const TrieSet& tries) {
  GrpoGroup g;
  g.prompt = s.prompt;
  const auto& items = world().catalog.items();
  const auto hit = world().vocab.encode_code(s.targets.front());
  std::vector<int> miss;
  for (const auto& it : items) {
    if (std::find(s.targets.begin(), s.targets.end(), it.code) == s.targets.end()) {
      miss = world().vocab.encode_code(it.code);
      break;
    }
  }
  g.responses = {hit, miss};
  const std::vector<std::vector<int>> blocks{hit};
  g.rewards = {hit_reward(hit, blocks), hit_reward(miss, blocks)};
  g.advantages = grpo_advantages(g.rewards, 0.0);
  (void)tries;
  return g;
}

double masked_run_logprob(const model::Parameters<float>& p, const std::vector<int>& prompt,
                          const std::vector<int>& run, const model::ItemTrie& trie) {
  model::Decoder<float> dec(p);
  for (int t : prompt) dec.step(t);
  const auto allowed = trie.path_allowed(run);
  double lp = 0;
  for (std::size_t i = 0; i < run.size(); ++i) {
    const auto m = model::masked_log_softmax<float>(dec.logits(), allowed[i]);
    const auto k = std::lower_bound(allowed[i].begin(), allowed[i].end(), run[i]) - allowed[i].begin();
    lp += m[k];
    if (i + 1 < run.size()) dec.step(run[i]);
  }
  return lp;
}

}  // namespace

TEST(Grpo, SingleStepSignOracle) {
  GrpoFixture f;
  GrpoConfig cfg;
  cfg.kl_coefficient = 0.0;
  cfg.group_size = 2;
  for (int trial = 0; trial < 3; ++trial) {
    auto policy = small_model(20 + trial);
    const auto reference = policy;
    const auto& s = f.samples[trial];
    const auto g = two_item_group(s, f.tries);
    ASSERT_EQ(g.rewards, (std::vector<double>{1.0, 0.0}));
    const auto& trie = f.tries.for_domain(s.domain);
    const double hit0 = masked_run_logprob(policy, g.prompt, g.responses[0], trie);
    const double miss0 = masked_run_logprob(policy, g.prompt, g.responses[1], trie);
    std::vector<float> grad;
    const std::vector<GrpoGroup> groups{g};
    const std::vector<std::optional<corpus::Domain>> domains{s.domain};
    grpo_objective(policy, reference, groups, f.tries, domains, cfg, &grad);
    train::OptimizerState<float> st;
    train::adamw_step<float>(policy, grad, st, 1e-3, {}, train::TrainableMask::all(policy.layout));
    EXPECT_GT(masked_run_logprob(policy, g.prompt, g.responses[0], trie), hit0);
    EXPECT_LT(masked_run_logprob(policy, g.prompt, g.responses[1], trie), miss0);
  }
}

TEST(Grpo, ObjectiveMatchesMaskedLogprobs) {
  GrpoFixture f;
  const auto policy = small_model(31);
  const auto& s = f.samples[0];
  const auto g = two_item_group(s, f.tries);
  GrpoConfig cfg;
  cfg.kl_coefficient = 0.0;
  const std::vector<GrpoGroup> groups{g};
  const std::vector<std::optional<corpus::Domain>> domains{s.domain};
  const double loss = grpo_objective(policy, policy, groups, f.tries, domains, cfg, nullptr);
  const auto& trie = f.tries.for_domain(s.domain);
  const double expect = -(g.advantages[0] * masked_run_logprob(policy, g.prompt, g.responses[0], trie) +
                          g.advantages[1] * masked_run_logprob(policy, g.prompt, g.responses[1], trie)) /
                        2.0;
  EXPECT_NEAR(loss, expect, 1e-5);
}

TEST(Grpo, ConstantRewardsLeaveOnlyTheKlTerm) {
  GrpoFixture f;
  const auto reference = small_model(40);
  auto policy = reference;
  Rng rng(2);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  for (auto& x : policy.values) x += noise(rng);
  auto g = two_item_group(f.samples[1], f.tries);
  g.rewards = {1.0, 1.0};
  g.advantages = grpo_advantages(g.rewards, 1e-6);
  const std::vector<GrpoGroup> groups{g};
  const std::vector<std::optional<corpus::Domain>> domains{f.samples[1].domain};
  GrpoConfig cfg;
  cfg.kl_coefficient = 0.0;
  std::vector<float> grad;
  grpo_objective(policy, reference, groups, f.tries, domains, cfg, &grad);
  EXPECT_TRUE(std::all_of(grad.begin(), grad.end(), [](float x) { return x == 0.0f; }));

  cfg.kl_coefficient = 0.1;
  double kl = -1;
  grpo_objective(policy, reference, groups, f.tries, domains, cfg, &grad, &kl);
  EXPECT_GT(kl, 0.0);
  EXPECT_TRUE(std::any_of(grad.begin(), grad.end(), [](float x) { return x != 0.0f; }));
  // KL to itself vanishes.
  grpo_objective(reference, reference, groups, f.tries, domains, cfg, &grad, &kl);
  EXPECT_NEAR(kl, 0.0, 1e-12);
}

TEST(Grpo, StepSamplesInTrieAndKeepsReferenceFrozen) {
  GrpoFixture f;
  auto policy = small_model(50);
  const auto reference = small_model(50);
  const auto ref_copy = reference.values;
  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.prompts_per_step = 3;
  cfg.steps = 4;
  const auto rows = run_grpo(policy, reference, f.samples, f.tries, cfg);
  EXPECT_EQ(rows.size(), 4u);
  EXPECT_EQ(std::memcmp(reference.values.data(), ref_copy.data(), ref_copy.size() * sizeof(float)), 0);

  std::vector<const ChatSample*> batch{&f.samples[0], &f.samples[1]};
  train::OptimizerState<float> st;
  const auto r = grpo_step(policy, reference, batch, f.tries, cfg, st, 0.0, 9);
  for (const auto& g : r.groups) {
    ASSERT_EQ(g.responses.size(), 4u);
    for (const auto& resp : g.responses) EXPECT_GE(f.tries.all.find(resp), 0);
    double sum = 0;
    for (double a : g.advantages) sum += a;
    EXPECT_NEAR(sum, 0.0, 1e-12);
  }
  EXPECT_GE(r.hit_rate, 0.0);
  EXPECT_LE(r.hit_rate, 1.0);
  cfg.group_size = 1;
  EXPECT_THROW(grpo_step(policy, reference, batch, f.tries, cfg, st, 0.0, 9), ConfigError);
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluate, ReportsTheMetricsOfEachTask) {
  const auto p = small_model(60);
  const TrieSet tries(world().catalog);
  auto opt = options();
  std::vector<model::Parameters<float>> keep;
  for (auto task : kRecIfTasks) {
    auto samples = build_task_samples(world().catalog, world().users(), task, opt);
    samples.resize(std::min<std::size_t>(samples.size(), 12));
    const auto m = evaluate_task(p, world().catalog, tries, samples, {});
    if (is_rec_task(task)) {
      ASSERT_EQ(m.size(), 3u);
      EXPECT_LE(m.at("pass@1"), m.at("pass@32"));
      EXPECT_GE(m.at("recall@32"), 0.0);
    } else if (task == Task::label_prediction) {
      ASSERT_TRUE(m.count("auc"));
    } else {
      ASSERT_TRUE(m.count("judge_score"));
      EXPECT_GE(m.at("judge_score"), 0.0);
      EXPECT_LE(m.at("judge_score"), 1.0);
    }
  }
}

TEST(Evaluate, GreedyDecodeIsArgmax) {
  const auto p = small_model(61);
  const std::vector<int> prompt{3, 4, 5};
  const auto out = greedy_decode(p, prompt, 4, -1);
  ASSERT_EQ(out.size(), 4u);
  std::vector<int> seq = prompt;
  for (int t : out) {
    const auto logits = model::forward(p, seq);
    const auto row = logits.row(logits.rows - 1);
    EXPECT_EQ(t, std::max_element(row.begin(), row.end()) - row.begin());
    seq.push_back(t);
  }
}
