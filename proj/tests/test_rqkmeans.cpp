#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <map>
#include <set>

#include "onerec/corpus.hpp"
#include "onerec/rqkmeans.hpp"
#include "test_util.hpp"

using namespace onerec;
using namespace onerec::rq;

namespace {

corpus::SyntheticCorpus mixture(std::uint64_t seed, int n_items = 512) {
  corpus::SyntheticConfig cfg;
  cfg.n_users = 0;
  cfg.n_items = n_items;
  cfg.seed = seed;
  return corpus::generate_synthetic_corpus(cfg);
}

double sq_dist(std::span<const float> x, std::span<const double> y) {
  double s = 0;
  for (std::size_t j = 0; j < x.size(); ++j) s += (x[j] - y[j]) * (x[j] - y[j]);
  return s;
}

}  // namespace

TEST(KMeans, ExactPointsGiveZeroError) {
  MatF pts(6, 3);
  Rng rng(1);
  std::normal_distribution<float> g;
  for (auto& v : pts.data) v = g(rng);
  const std::vector<int> sizes{6};
  const auto model = fit_tokenizer(pts, sizes, 3);
  const auto energy = residual_energy(model, pts);
  EXPECT_NEAR(energy.back(), 0.0, 1e-10);
}

TEST(KMeans, TooFewPointsIsFitError) {
  MatF pts(3, 2);
  const std::vector<int> sizes{4};
  EXPECT_THROW(fit_tokenizer(pts, sizes, 1), FitError);
}

TEST(KMeans, ObjectiveMatchesAssignment) {
  const auto sc = mixture(2, 200);
  const MatF x = embedding_matrix(sc.corpus.items);
  const auto km = kmeans(x, 8, 5);
  double obj = 0;
  for (int i = 0; i < x.rows; ++i) {
    double best = 1e300;
    for (int c = 0; c < 8; ++c) {
      double s = 0;
      for (int j = 0; j < x.cols; ++j) {
        const double d = static_cast<double>(x(i, j)) - km.centroids(c, j);
        s += d * d;
      }
      best = std::min(best, s);
    }
    obj += best;
  }
  EXPECT_NEAR(km.objective, obj, 1e-6 * obj);
}

TEST(Tokenizer, DeterministicGivenSeed) {
  const auto sc = mixture(4, 256);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{8, 16, 16};
  EXPECT_EQ(fit_tokenizer(x, sizes, 9), fit_tokenizer(x, sizes, 9));
}

TEST(Tokenizer, LevelOneRecoversLatentClusters) {
  double ari = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto sc = mixture(seed);
    const MatF x = embedding_matrix(sc.corpus.items);
    const std::vector<int> sizes{8, 32, 32};
    const auto model = fit_tokenizer(x, sizes, seed);
    std::vector<int> c1;
    for (const auto& code : encode_all(model, x)) c1.push_back(code[0]);
    ari += testutil::adjusted_rand_index(c1, sc.latent.item_l1) / 3.0;
  }
  EXPECT_GE(ari, 0.9);
}

TEST(Tokenizer, ResidualEnergyMonotone) {
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    const auto sc = mixture(seed, 300);
    const MatF x = embedding_matrix(sc.corpus.items);
    const std::vector<int> sizes{8, 16, 16};
    const auto energy = residual_energy(fit_tokenizer(x, sizes, seed), x);
    ASSERT_EQ(energy.size(), 4u);
    for (std::size_t l = 1; l < energy.size(); ++l) EXPECT_LE(energy[l], energy[l - 1]);
  }
}

TEST(Tokenizer, ReconstructionNoWorseThanLevelOne) {
  const auto sc = mixture(6, 400);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{8, 16, 16};
  const auto model = fit_tokenizer(x, sizes, 2);
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto row = x.row(static_cast<int>(rng() % x.rows));
    const std::vector<float> e(row.begin(), row.end());
    const auto code = encode(model, e);
    EXPECT_EQ(code, encode(model, e));
    const double err = sq_dist(e, decode(model, code));
    double best1 = 1e300;
    for (int c = 0; c < model.codebooks[0].size(); ++c) {
      const auto row = model.codebooks[0].centroids.row(c);
      std::vector<double> cd(row.begin(), row.end());
      best1 = std::min(best1, sq_dist(e, cd));
    }
    EXPECT_LE(err, best1 + 1e-9);
  }
}

TEST(Tokenizer, EncodeCentroidHasZeroLevelOneResidual) {
  const auto sc = mixture(7, 128);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{8, 8};
  const auto model = fit_tokenizer(x, sizes, 1);
  const auto c = model.codebooks[0].centroids.row(3);
  const auto code = encode(model, c);
  EXPECT_EQ(code[0], 3);
  // Residual is zero, so level 2 picks the centroid nearest the origin.
  int nearest = 0;
  double best = 1e300;
  for (int k = 0; k < 8; ++k) {
    double s = 0;
    for (float v : model.codebooks[1].centroids.row(k)) s += static_cast<double>(v) * v;
    if (s < best) best = s, nearest = k;
  }
  EXPECT_EQ(code[1], nearest);
}

TEST(Tokenizer, DecodeZeroCodeAndErrors) {
  const auto sc = mixture(8, 64);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{4, 4};
  const auto model = fit_tokenizer(x, sizes, 1);
  const auto v = decode(model, ItemicCode{{0, 0}});
  for (int j = 0; j < x.cols; ++j) {
    EXPECT_DOUBLE_EQ(v[j], static_cast<double>(model.codebooks[0].centroids(0, j)) + model.codebooks[1].centroids(0, j));
  }
  EXPECT_THROW(decode(model, ItemicCode{{4, 0}}), IndexError);
  EXPECT_THROW(decode(model, ItemicCode{{0}}), IndexError);
  std::vector<float> bad(x.cols, 0.0f);
  bad[0] = std::nanf("");
  EXPECT_THROW(encode(model, bad), InputError);
  EXPECT_THROW(encode(model, std::vector<float>(3)), InputError);
}

TEST(Fsq, ReducesCollisionsAndKeepsCodebooks) {
  const auto sc = mixture(5, 400);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{4, 4, 4};
  const auto base = fit_tokenizer(x, sizes, 3);
  const auto ext = fit_fsq_extension(base, x, 4, 4);
  ASSERT_EQ(ext.codebooks, base.codebooks);
  const auto c3 = encode_all(base, x);
  const auto c4 = encode_all(ext, x);
  EXPECT_LT(collision_rate(c4), collision_rate(c3));
  for (const auto& c : c4) {
    ASSERT_EQ(c.size(), 4u);
    EXPECT_GE(c[3], 0);
    EXPECT_LT(c[3], ext.fsq->code_space());
  }
  // Orthonormal projection rows.
  const auto& p = ext.fsq->projection;
  for (int a = 0; a < p.rows; ++a) {
    for (int b = 0; b < p.rows; ++b) {
      double s = 0;
      for (int j = 0; j < p.cols; ++j) s += p(a, j) * p(b, j);
      EXPECT_NEAR(s, a == b ? 1.0 : 0.0, 1e-8);
    }
  }
  // Reconstruction improves with the extra level.
  double e3 = 0, e4 = 0;
  for (int i = 0; i < x.rows; ++i) {
    e3 += sq_dist(x.row(i), decode(base, c3[i]));
    e4 += sq_dist(x.row(i), decode(ext, c4[i]));
  }
  EXPECT_LT(e4, e3);
}

TEST(Fsq, RejectsBadDimensions) {
  const auto sc = mixture(5, 64);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{4, 4, 4};
  const auto base = fit_tokenizer(x, sizes, 3);
  EXPECT_THROW(fit_fsq_extension(base, x, x.cols + 1, 4), ConfigError);
  EXPECT_THROW(fit_fsq_extension(base, x, 2, 1), ConfigError);
}

TEST(Collisions, Definition) {
  const ItemicCode a{{1, 2}}, b{{3, 4}};
  std::vector<ItemicCode> distinct{a, b};
  EXPECT_EQ(collision_rate(distinct), 0.0);
  std::vector<ItemicCode> same(5, a);
  EXPECT_EQ(collision_rate(same), 1.0);
  std::vector<ItemicCode> aab{a, a, b};
  EXPECT_DOUBLE_EQ(collision_rate(aab), 2.0 / 3.0);
}

TEST(Collisions, MonotoneInLevels) {
  const auto sc = mixture(9, 300);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{4, 4, 4};
  const auto codes = encode_all(fit_tokenizer(x, sizes, 1), x);
  double prev = 1.0;
  for (std::size_t l = 1; l <= 3; ++l) {
    std::vector<ItemicCode> prefix;
    for (const auto& c : codes) prefix.push_back(ItemicCode{{c.codes.begin(), c.codes.begin() + l}});
    const double r = collision_rate(prefix);
    EXPECT_LE(r, prev);
    prev = r;
  }
}

TEST(Popularity, TieBreakAndOracle) {
  corpus::Item x{"x", {}, "", 3}, m{"m", {}, "", 9}, z{"z", {}, "", 9};
  const std::vector<const corpus::Item*> cands{&x, &m, &z};
  const ItemicCode code{{1, 1, 1}};
  EXPECT_EQ(resolve_by_popularity(code, cands), "m");
  const std::vector<const corpus::Item*> one{&x};
  EXPECT_EQ(resolve_by_popularity(code, one), "x");
  EXPECT_THROW(resolve_by_popularity(code, {}), IndexError);

  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<corpus::Item> group(1 + rng() % 6);
    for (auto& it : group) {
      it.item_id = std::string(1, static_cast<char>('a' + rng() % 26)) + std::to_string(rng() % 100);
      it.popularity = static_cast<std::int64_t>(rng() % 5);
    }
    std::vector<const corpus::Item*> ptrs;
    for (auto& it : group) ptrs.push_back(&it);
    std::int64_t top = -1;
    for (auto& it : group) top = std::max(top, it.popularity);
    std::string expect = "~";
    for (auto& it : group) {
      if (it.popularity == top) expect = std::min(expect, it.item_id);
    }
    ASSERT_EQ(resolve_by_popularity(code, ptrs), expect);
  }
}

TEST(TokenString, LiteralExample) {
  EXPECT_EQ(serialize(ItemicCode{{5028, 6733, 2559}}),
            "<|item_begin|><item_a_5028><item_b_6733><item_c_2559><|item_end|>");
  EXPECT_EQ(serialize(ItemicCode{{1, 2, 3, 4}}), "<|item_begin|><item_a_1><item_b_2><item_c_3><item_d_4><|item_end|>");
}

TEST(TokenString, RoundTrip) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    ItemicCode c{{static_cast<int>(rng() % 8192), static_cast<int>(rng() % 8192), static_cast<int>(rng() % 8192)}};
    if (i % 2) c.codes.push_back(static_cast<int>(rng() % 100000));
    ASSERT_EQ(parse(serialize(c)), c);
  }
}

TEST(TokenString, MalformedReportsPosition) {
  try {
    parse("<|item_begin|><item_a_1>");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 24u);
  }
  EXPECT_THROW(parse("<|item_begin|><item_b_1><|item_end|>"), ParseError);
  EXPECT_THROW(parse("<|item_begin|><|item_end|>"), ParseError);
  EXPECT_THROW(parse("<item_a_1><|item_end|>"), ParseError);
  EXPECT_THROW(parse("<|item_begin|><item_a_x><|item_end|>"), ParseError);
  EXPECT_THROW(parse("<|item_begin|><item_a_1><|item_end|>!"), ParseError);
}

TEST(TextAugmented, ConstructionAndDisambiguation) {
  const ItemicCode c{{1, 2, 3}};
  const std::vector<std::string> kw{"red", "shoe"};
  const auto toks = text_augmented_tokens(c, kw);
  ASSERT_EQ(toks.size(), 3u);
  EXPECT_EQ(toks[0], serialize(c));
  EXPECT_EQ(toks[1], "red");
  EXPECT_EQ(toks[2], "shoe");
  EXPECT_EQ(text_augmented_tokens(c, {}), std::vector<std::string>{serialize(c)});

  // Colliding codes on a coarse tokenizer are separated by caption keywords.
  corpus::SyntheticConfig cfg;
  cfg.n_users = 0;
  cfg.n_items = 200;
  cfg.seed = 3;
  const auto sc = corpus::generate_synthetic_corpus(cfg);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{2, 2, 2};
  const auto codes = encode_all(fit_tokenizer(x, sizes, 1), x);
  std::map<ItemicCode, std::set<std::vector<std::string>>> by_code;
  std::map<ItemicCode, std::set<std::string>> captions;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto words = caption_keywords(sc.corpus.items[i].caption);
    by_code[codes[i]].insert(text_augmented_tokens(codes[i], words));
    captions[codes[i]].insert(sc.corpus.items[i].caption);
  }
  for (const auto& [code, seqs] : by_code) EXPECT_EQ(seqs.size(), captions[code].size());
}

TEST(TextAugmented, CaptionKeywords) {
  EXPECT_EQ(caption_keywords("the cat and the dog, cat"), (std::vector<std::string>{"cat", "dog"}));
  EXPECT_EQ(caption_keywords("a b c d e f g", 5).size(), 5u);
}

TEST(TokenizerIo, RoundTripBitwise) {
  const auto sc = mixture(3, 128);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{4, 8, 8};
  auto model = fit_fsq_extension(fit_tokenizer(x, sizes, 2), x, 3, 3);
  model.config_hash = 0x1234;
  testutil::TempDir dir("tok");
  save_tokenizer(model, dir / "t.rqkm");
  const auto loaded = load_tokenizer(dir / "t.rqkm");
  EXPECT_EQ(loaded, model);
  save_tokenizer(loaded, dir / "u.rqkm");
  EXPECT_EQ(testutil::slurp(dir / "t.rqkm"), testutil::slurp(dir / "u.rqkm"));
  EXPECT_EQ(testutil::slurp(dir / "t.rqkm").substr(0, 5), "RQKM1");
}

TEST(TokenizerIo, TruncatedFileIsParseError) {
  const auto sc = mixture(3, 64);
  const MatF x = embedding_matrix(sc.corpus.items);
  const std::vector<int> sizes{4};
  testutil::TempDir dir("tok_trunc");
  save_tokenizer(fit_tokenizer(x, sizes, 2), dir / "t.rqkm");
  std::filesystem::resize_file(dir / "t.rqkm", 40);
  EXPECT_THROW(load_tokenizer(dir / "t.rqkm"), ParseError);
}
