#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "onerec/generate.hpp"
#include "onerec/model.hpp"
#include "test_util.hpp"

using namespace onerec;
using namespace onerec::model;

namespace {

ModelConfig tiny(int vocab, bool tied, int d = 16) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = d;
  c.d_ff = 2 * d;
  c.context_len = 16;
  c.vocab_size = vocab;
  c.tied_embeddings = tied;
  c.seed = 3;
  return c;
}

/// Parameters with a larger spread than the training init so that every
/// gradient entry is well above finite-difference noise.
Parameters<double> spread_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = init_parameters<double>(cfg);
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 0.1);
  for (const auto& t : p.layout.tensors()) {
    double* v = p.values.data() + t.offset;
    for (std::size_t k = 0; k < t.size(); ++k) v[k] += g(rng);
  }
  return p;
}

struct GradCheck {
  std::map<ParamKind, double> worst;
};

// Relative error is measured per tensor as ||a - n|| / max(||a||, ||n||):
// entry-wise ratios are meaningless for entries whose true gradient is near
// zero, where the O(h^2) truncation error of the central difference dominates.
GradCheck check_gradient(Parameters<double> p, const std::vector<SequenceObjective>& batch) {
  const auto no_grad = static_cast<std::vector<double>*>(nullptr);
  std::vector<double> grad;
  evaluate(p, std::span<const SequenceObjective>(batch), &grad);
  const double h = 1e-3;
  GradCheck out;
  for (const auto& t : p.layout.tensors()) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t k = 0; k < t.size(); ++k) {
      const std::size_t i = t.offset + k;
      const double keep = p.values[i];
      p.values[i] = keep + h;
      const double up = evaluate(p, std::span<const SequenceObjective>(batch), no_grad).loss;
      p.values[i] = keep - h;
      const double down = evaluate(p, std::span<const SequenceObjective>(batch), no_grad).loss;
      p.values[i] = keep;
      const double numeric = (up - down) / (2 * h);
      diff += (numeric - grad[i]) * (numeric - grad[i]);
      na += grad[i] * grad[i];
      nn += numeric * numeric;
    }
    const double scale = std::sqrt(std::max(na, nn));
    double& worst = out.worst[t.kind];
    if (scale > 0) worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return out;
}

SequenceObjective nll_objective(std::vector<int> tokens) {
  SequenceObjective s;
  s.tokens = std::move(tokens);
  const double w = 1.0 / static_cast<double>(s.tokens.size() - 1);
  for (int i = 1; i < static_cast<int>(s.tokens.size()); ++i) s.terms.push_back(TokenTerm{i, w, {}, 0.0, {}});
  return s;
}

std::vector<int> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng() % vocab);
  return t;
}

}  // namespace

TEST(Model, LayoutCoversAllParameters) {
  const auto cfg = tiny(20, false);
  const ParamLayout lay(cfg);
  std::size_t total = 0;
  for (const auto& t : lay.tensors()) {
    EXPECT_EQ(t.offset, total);
    total += t.size();
  }
  EXPECT_EQ(total, lay.size());
  EXPECT_NE(lay.lm_head, ParamLayout::npos);
  EXPECT_EQ(ParamLayout(tiny(20, true)).lm_head, ParamLayout::npos);
}

TEST(Model, ConfigValidation) {
  auto c = tiny(10, true);
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny(10, true);
  c.context_len = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(ModelConfig::from_json(tiny(10, true).to_json()), tiny(10, true));
}

class GradientTest : public ::testing::TestWithParam<bool> {};

TEST_P(GradientTest, NllMatchesFiniteDifferences) {
  const auto cfg = tiny(12, GetParam());
  const auto p = spread_params(cfg, 7);
  Rng rng(1);
  std::vector<SequenceObjective> batch{nll_objective(random_tokens(rng, 7, 12)),
                                       nll_objective(random_tokens(rng, 5, 12))};
  const auto res = check_gradient(p, batch);
  for (const auto& [kind, err] : res.worst) {
    EXPECT_LT(err, 1e-4) << param_kind_name(kind);
  }
  EXPECT_EQ(res.worst.count(ParamKind::output_head), GetParam() ? 0u : 1u);
}

TEST_P(GradientTest, GeneralObjectiveMatchesFiniteDifferences) {
  // Packed segments, explicit positions, masked normalisation and KL terms.
  const auto cfg = tiny(12, GetParam());
  const auto p = spread_params(cfg, 9);
  static const std::vector<int> allowed{1, 4, 6, 9};
  SequenceObjective s;
  s.tokens = {3, 4, 7, 2, 9, 6, 1, 0};
  s.positions = {0, 1, 2, 3, 0, 1, 2, 3};
  s.segments = {0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<double> ref(12);
  for (int v = 0; v < 12; ++v) ref[v] = -std::log(12.0) + 0.1 * std::sin(v);
  s.terms.push_back(TokenTerm{1, 0.7, allowed, 0.0, {}});
  s.terms.push_back(TokenTerm{2, -0.4, {}, 0.3, ref});
  s.terms.push_back(TokenTerm{5, 1.1, allowed, 0.5, ref});
  s.terms.push_back(TokenTerm{7, 0.2, {}, 0.0, {}});
  const auto res = check_gradient(p, {s});
  for (const auto& [kind, err] : res.worst) EXPECT_LT(err, 1e-4) << param_kind_name(kind);
}

INSTANTIATE_TEST_SUITE_P(TiedAndUntied, GradientTest, ::testing::Values(true, false));

TEST(Model, PackedSegmentsMatchSeparateSequences) {
  const auto cfg = tiny(12, true);
  const auto p = init_parameters<double>(cfg);
  const std::vector<int> a{1, 2, 3}, b{4, 5, 6, 7};
  SequenceObjective packed;
  packed.tokens = {1, 2, 3, 4, 5, 6, 7};
  packed.positions = {0, 1, 2, 0, 1, 2, 3};
  packed.segments = {0, 0, 0, 1, 1, 1, 1};
  for (int i : {1, 2, 4, 5, 6}) packed.terms.push_back(TokenTerm{i, 1.0, {}, 0.0, {}});
  const auto r = evaluate(p, std::span<const SequenceObjective>(&packed, 1), static_cast<std::vector<double>*>(nullptr));
  const auto la = sequence_logprob(p, std::span<const int>(a).first(1), std::span<const int>(a).subspan(1));
  const auto lb = sequence_logprob(p, std::span<const int>(b).first(1), std::span<const int>(b).subspan(1));
  const std::vector<double> expect{la[0], la[1], lb[0], lb[1], lb[2]};
  for (std::size_t k = 0; k < expect.size(); ++k) EXPECT_NEAR(r.logprobs[0][k], expect[k], 1e-12);
}

TEST(Model, CausalMasking) {
  const auto cfg = tiny(30, true, 32);
  const auto p = init_parameters<double>(cfg);
  Rng rng(2);
  auto tokens = random_tokens(rng, 10, 30);
  const auto base = forward(p, tokens);
  for (int t = 0; t + 1 < 10; ++t) {
    auto changed = tokens;
    changed[t + 1] = (changed[t + 1] + 1) % 30;
    const auto other = forward(p, changed);
    for (int r = 0; r <= t; ++r) {
      for (int v = 0; v < 30; ++v) ASSERT_NEAR(other(r, v), base(r, v), 1e-9);
    }
  }
}

TEST(Model, SoftmaxRowsNormalisedAndEntropyNearUniformAtInit) {
  const auto cfg = tiny(455, true, 32);
  const auto p = init_parameters<float>(cfg);
  Rng rng(4);
  const auto logits = forward(p, random_tokens(rng, 12, 455));
  for (int r = 0; r < logits.rows; ++r) {
    const auto lp = log_softmax<float>(logits.row(r));
    double total = 0, entropy = 0;
    for (double x : lp) {
      total += std::exp(x);
      entropy -= std::exp(x) * x;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_NEAR(entropy, std::log(455.0), 0.1 * std::log(455.0));
  }
}

TEST(Model, BatchOfOneEqualsBatchRow) {
  const auto cfg = tiny(20, false);
  const auto p = init_parameters<float>(cfg);
  Rng rng(5);
  std::vector<SequenceObjective> batch;
  for (int b = 0; b < 4; ++b) batch.push_back(nll_objective(random_tokens(rng, 6 + b, 20)));
  std::vector<float> g_all;
  const auto all = evaluate(p, std::span<const SequenceObjective>(batch), &g_all);
  std::vector<float> g_sum(p.count(), 0.0f);
  for (int b = 0; b < 4; ++b) {
    std::vector<float> g;
    const auto one = evaluate(p, std::span<const SequenceObjective>(&batch[b], 1), &g);
    for (std::size_t k = 0; k < one.logprobs[0].size(); ++k) EXPECT_NEAR(one.logprobs[0][k], all.logprobs[b][k], 1e-6);
    for (std::size_t k = 0; k < g.size(); ++k) g_sum[k] += g[k];
  }
  for (std::size_t k = 0; k < g_sum.size(); ++k) ASSERT_NEAR(g_sum[k], g_all[k], 1e-6);
}

TEST(Model, ForcedDeterministicTargetHasZeroLoss) {
  auto cfg = tiny(10, false);
  auto p = init_parameters<double>(cfg);
  auto gain = p.tensor("lnf.gain");
  auto bias = p.tensor("lnf.bias");
  std::fill(gain.begin(), gain.end(), 0.0);
  std::fill(bias.begin(), bias.end(), 0.0);
  bias[0] = 1.0;
  auto head = p.tensor("lm_head");
  std::fill(head.begin(), head.end(), 0.0);
  head[7 * cfg.d_model + 0] = 100.0;
  const std::vector<int> tokens{1, 7};
  const std::vector<std::uint8_t> mask{0, 1};
  EXPECT_LT(nll_loss(p, tokens, mask, static_cast<std::vector<double>*>(nullptr)), 1e-40);
}

TEST(Model, NllRejectsDegenerateMask) {
  const auto p = init_parameters<float>(tiny(10, true));
  const std::vector<int> tokens{1, 2, 3};
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(nll_loss(p, tokens, none, static_cast<std::vector<float>*>(nullptr)), InputError);
  const std::vector<int> bad{1, 99};
  const std::vector<std::uint8_t> m{0, 1};
  EXPECT_THROW(nll_loss(p, bad, m, static_cast<std::vector<float>*>(nullptr)), InputError);
  std::vector<int> long_seq(17, 1);
  std::vector<std::uint8_t> long_mask(17, 1);
  long_mask[0] = 0;
  EXPECT_THROW(nll_loss(p, long_seq, long_mask, static_cast<std::vector<float>*>(nullptr)), InputError);
}

TEST(Model, UnsupervisedLastTokenHasNoEmbeddingGradient) {
  const auto cfg = tiny(10, false);
  const auto p = init_parameters<double>(cfg);
  const std::vector<int> tokens{1, 2, 3, 9};
  std::vector<double> g;
  nll_loss(p, tokens, std::vector<std::uint8_t>{0, 1, 1, 0}, &g);
  const std::size_t row9 = p.layout.tok_emb + 9 * cfg.d_model;
  for (int j = 0; j < cfg.d_model; ++j) EXPECT_EQ(g[row9 + j], 0.0);
  nll_loss(p, tokens, std::vector<std::uint8_t>{0, 1, 1, 1}, &g);
  const std::size_t head9 = p.layout.lm_head + 9 * cfg.d_model;
  double mag = 0;
  for (int j = 0; j < cfg.d_model; ++j) mag += std::abs(g[head9 + j]);
  EXPECT_GT(mag, 0.0);
}

TEST(Model, SequenceLogprobConsistentWithNll) {
  const auto p = init_parameters<double>(tiny(20, true));
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto tokens = random_tokens(rng, 10, 20);
    const auto lp = sequence_logprob(p, std::span<const int>(tokens).first(4), std::span<const int>(tokens).subspan(4));
    std::vector<std::uint8_t> mask(10, 0);
    for (int i = 4; i < 10; ++i) mask[i] = 1;
    const double nll = nll_loss(p, tokens, mask, static_cast<std::vector<double>*>(nullptr));
    EXPECT_NEAR(-std::accumulate(lp.begin(), lp.end(), 0.0), nll * 6, 1e-8);
  }
}

TEST(Model, DecoderMatchesForwardBitwise) {
  const auto p = init_parameters<float>(tiny(25, false, 32));
  Rng rng(6);
  const auto tokens = random_tokens(rng, 16, 25);
  const auto logits = forward(p, tokens);
  Decoder<float> dec(p);
  for (int t = 0; t < 16; ++t) {
    const auto z = dec.step(tokens[t]);
    for (int v = 0; v < 25; ++v) ASSERT_EQ(z[v], logits(t, v)) << "row " << t;
  }
  EXPECT_THROW(dec.step(1), InputError);
}

TEST(Sampling, ReportedLogprobsMatchTeacherForcing) {
  const auto p = init_parameters<float>(tiny(25, true, 32));
  const std::vector<int> prompt{1, 2, 3};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = sample(p, prompt, 1.5, 8, seed);
    const auto lp = sequence_logprob(p, prompt, s.tokens);
    ASSERT_EQ(lp.size(), s.logprobs.size());
    for (std::size_t k = 0; k < lp.size(); ++k) EXPECT_NEAR(lp[k], s.logprobs[k], 1e-8);
  }
}

TEST(Sampling, DeterministicAndGreedyLimit) {
  const auto p = spread_params(tiny(25, true), 3);
  const std::vector<int> prompt{4, 5};
  EXPECT_EQ(sample(p, prompt, 1.0, 10, 42).tokens, sample(p, prompt, 1.0, 10, 42).tokens);
  const auto cold = sample(p, prompt, 1e-6, 10, 1);
  std::vector<int> ctx = prompt;
  for (int k = 0; k < 10; ++k) {
    const auto logits = forward(p, ctx);
    const auto row = logits.row(logits.rows - 1);
    const int greedy = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    ASSERT_EQ(cold.tokens[k], greedy);
    ctx.push_back(greedy);
  }
  // Greedy continuation beats any substitution at the argmax step.
  const auto lp_row = log_softmax<double>(forward(p, prompt).row(1));
  for (int v = 0; v < 25; ++v) EXPECT_GE(cold.logprobs[0], lp_row[v]);
  EXPECT_THROW(sample(p, prompt, 0.0, 1, 1), ConfigError);
  EXPECT_THROW(sample(p, std::vector<int>(17, 1), 1.0, 1, 1), InputError);
}

TEST(Sampling, StopTokenEndsGeneration) {
  const auto p = init_parameters<float>(tiny(6, true));
  const auto s = sample(p, std::vector<int>{0}, 1.0, 15, 3, 2);
  ASSERT_FALSE(s.tokens.empty());
  for (std::size_t k = 0; k + 1 < s.tokens.size(); ++k) EXPECT_NE(s.tokens[k], 2);
  EXPECT_TRUE(s.tokens.back() == 2 || s.tokens.size() == 15u);
}

TEST(Sampling, SingleStepFrequenciesMatchSoftmax) {
  const auto p = spread_params(tiny(6, true), 12);
  const std::vector<int> prompt{1, 3};
  const double temperature = 1.3;
  const auto lp = log_softmax<double>(forward(p, prompt).row(1));
  std::vector<double> prob(6);
  double z = 0;
  for (int v = 0; v < 6; ++v) z += (prob[v] = std::exp(lp[v] / temperature));
  for (auto& x : prob) x /= z;
  const int draws = 100000;
  std::vector<double> counts(6, 0);
  for (int i = 0; i < draws; ++i) counts[sample(p, prompt, temperature, 1, static_cast<std::uint64_t>(i)).tokens[0]] += 1;
  for (int v = 0; v < 6; ++v) {
    const double sigma = std::sqrt(draws * prob[v] * (1 - prob[v]));
    EXPECT_LE(std::abs(counts[v] - draws * prob[v]), 3 * sigma) << "token " << v;
  }
}

namespace {

struct ToyCatalogue {
  vocab::Vocab vocab{8, {4, 5, 3}};
  std::vector<rq::ItemicCode> codes;
  std::vector<std::string> ids;
};

ToyCatalogue catalogue(int n_items, std::uint64_t seed) {
  ToyCatalogue c;
  std::set<rq::ItemicCode> used;
  Rng rng(seed);
  while (static_cast<int>(c.codes.size()) < n_items) {
    rq::ItemicCode code{{static_cast<int>(rng() % 4), static_cast<int>(rng() % 5), static_cast<int>(rng() % 3)}};
    if (!used.insert(code).second) continue;
    c.codes.push_back(code);
    c.ids.push_back("i" + std::to_string(c.codes.size()));
  }
  return c;
}

ModelConfig catalogue_model(const vocab::Vocab& v) {
  ModelConfig m = tiny(v.size(), true, 16);
  m.context_len = 24;
  return m;
}

}  // namespace

TEST(Trie, StructureAndLookup) {
  const auto cat = catalogue(20, 1);
  const ItemTrie trie(cat.vocab, cat.codes, cat.ids);
  EXPECT_EQ(trie.leaf_count(), 20u);
  EXPECT_EQ(trie.depth(), 5);
  ASSERT_EQ(trie.allowed(trie.root()).size(), 1u);
  EXPECT_EQ(trie.allowed(trie.root())[0], cat.vocab.special(vocab::Special::item_begin));
  for (std::size_t i = 0; i < cat.codes.size(); ++i) {
    const int leaf = trie.find(cat.vocab.encode_code(cat.codes[i]));
    ASSERT_GE(leaf, 0);
    EXPECT_EQ(trie.code_at(leaf), cat.codes[i]);
    EXPECT_EQ(trie.items_at(leaf)[0], cat.ids[i]);
  }
  EXPECT_TRUE(ItemTrie(cat.vocab, {}, {}).empty());
}

TEST(Trie, CollidingItemsShareALeaf) {
  const vocab::Vocab v(8, {2, 2});
  const std::vector<rq::ItemicCode> codes{rq::ItemicCode{{1, 0}}, rq::ItemicCode{{1, 0}}};
  const std::vector<std::string> ids{"a", "b"};
  const ItemTrie trie(v, codes, ids);
  EXPECT_EQ(trie.leaf_count(), 1u);
  const int leaf = trie.find(v.encode_code(codes[0]));
  EXPECT_EQ(trie.items_at(leaf).size(), 2u);
}

TEST(Generate, SingleItemTrie) {
  const auto cat = catalogue(1, 2);
  const ItemTrie trie(cat.vocab, cat.codes, cat.ids);
  const auto p = init_parameters<float>(catalogue_model(cat.vocab));
  for (auto strategy : {GenerationStrategy::beam, GenerationStrategy::sample}) {
    const auto out = generate_items(p, std::vector<int>{1, 2}, trie, GenerationOptions{strategy, 5, 1.0, 3});
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].code, cat.codes[0]);
  }
  EXPECT_THROW(generate_items(p, std::vector<int>{1}, ItemTrie(cat.vocab, {}, {}), GenerationOptions{}), ConfigError);
}

TEST(Generate, FullWidthBeamEqualsExhaustiveRanking) {
  const auto cat = catalogue(50, 3);
  const ItemTrie trie(cat.vocab, cat.codes, cat.ids);
  const auto p = spread_params(catalogue_model(cat.vocab), 5);
  const std::vector<int> prompt{3, 1, 4};
  const auto beam = generate_items(p, prompt, trie, GenerationOptions{GenerationStrategy::beam, 50, 1.0, 0});
  ASSERT_EQ(beam.size(), 50u);

  // Oracle: score every item independently with full forward passes.
  std::vector<std::pair<double, rq::ItemicCode>> oracle;
  for (const auto& code : cat.codes) {
    const auto run = cat.vocab.encode_code(code);
    std::vector<int> ctx = prompt;
    ctx.insert(ctx.end(), run.begin(), run.end());
    const auto logits = forward(p, ctx);
    const auto allowed = trie.path_allowed(run);
    double total = 0;
    for (std::size_t k = 0; k < run.size(); ++k) {
      const auto row = logits.row(static_cast<int>(prompt.size() + k - 1));
      double m = -1e300;
      for (int v : allowed[k]) m = std::max(m, row[v]);
      double s = 0;
      for (int v : allowed[k]) s += std::exp(row[v] - m);
      total += row[run[k]] - m - std::log(s);
    }
    oracle.emplace_back(total, code);
  }
  std::stable_sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; k < 50; ++k) {
    EXPECT_EQ(beam[k].code, oracle[k].second) << "rank " << k;
    EXPECT_NEAR(beam[k].logprob, oracle[k].first, 1e-9);
  }
}

TEST(Generate, SampledItemsAreAlwaysInCorpus) {
  const auto cat = catalogue(30, 4);
  const ItemTrie trie(cat.vocab, cat.codes, cat.ids);
  const auto p = spread_params(catalogue_model(cat.vocab), 6);
  std::set<rq::ItemicCode> corpus(cat.codes.begin(), cat.codes.end());
  int produced = 0;
  for (std::uint64_t seed = 0; produced < 10000; ++seed) {
    const std::vector<int> prompt{static_cast<int>(seed % 8), static_cast<int>((seed / 8) % 8)};
    const auto out = generate_items(p, prompt, trie, GenerationOptions{GenerationStrategy::sample, 25, 2.0, seed});
    std::set<rq::ItemicCode> distinct;
    for (std::size_t k = 0; k < out.size(); ++k) {
      ASSERT_TRUE(corpus.count(out[k].code));
      ASSERT_GE(trie.find(out[k].tokens), 0);
      ASSERT_TRUE(distinct.insert(out[k].code).second);
      if (k > 0) ASSERT_GE(out[k - 1].logprob, out[k].logprob);
    }
    produced += static_cast<int>(out.size());
  }
}

TEST(Generate, MaskedDistributionIgnoresOtherTokens) {
  const std::vector<float> logits{5.0f, -1.0f, 0.5f, 9.0f, 2.0f};
  const std::vector<int> allowed{1, 2, 4};
  const auto lp = masked_log_softmax<float>(logits, allowed);
  double total = 0;
  for (double x : lp) total += std::exp(x);
  EXPECT_NEAR(total, 1.0, 1e-12);
  auto changed = logits;
  changed[0] = 100.0f;
  changed[3] = -100.0f;
  EXPECT_EQ(masked_log_softmax<float>(changed, allowed), lp);
}

TEST(Checkpoint, RoundTripBitwise) {
  for (bool tied : {true, false}) {
    auto p = init_parameters<float>(tiny(30, tied));
    testutil::TempDir dir("ckpt");
    save_checkpoint(p, dir / "a.or1c", R"({"stage":"test"})");
    const auto ck = load_checkpoint(dir / "a.or1c");
    EXPECT_EQ(ck.params.config, p.config);
    EXPECT_EQ(ck.params.values, p.values);
    EXPECT_EQ(ck.provenance_json, R"({"stage":"test"})");
    save_checkpoint(ck.params, dir / "b.or1c", ck.provenance_json);
    EXPECT_EQ(testutil::slurp(dir / "a.or1c"), testutil::slurp(dir / "b.or1c"));
    EXPECT_EQ(testutil::slurp(dir / "a.or1c").substr(0, 4), "OR1C");
    std::filesystem::resize_file(dir / "a.or1c", 100);
    EXPECT_THROW(load_checkpoint(dir / "a.or1c"), ParseError);
  }
}
