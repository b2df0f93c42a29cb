#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "onerec/common.hpp"
#include "onerec/corpus.hpp"

namespace onerec::rq {

/// Hierarchical discrete code of one item: one entry per tokenizer level.
struct ItemicCode {
  std::vector<int> codes;

  std::size_t size() const { return codes.size(); }
  int operator[](std::size_t l) const { return codes[l]; }
  auto operator<=>(const ItemicCode&) const = default;
};

struct ItemicCodeHash {
  std::size_t operator()(const ItemicCode& c) const noexcept;
};

struct Codebook {
  int level = 0;  // 0-based
  MatF centroids;  // K x d_emb

  int size() const { return centroids.rows; }
  bool operator==(const Codebook&) const = default;
};

/// Fourth-level extension: finite scalar quantization of the projected
/// level-3 residual.
struct FsqExtension {
  MatD projection;             // m x d_emb, orthonormal rows
  std::vector<double> bounds;  // per projected dimension
  int levels_per_dim = 2;

  int dims() const { return projection.rows; }
  std::int64_t code_space() const;
  bool operator==(const FsqExtension&) const = default;
};

struct TokenizerModel {
  int d_emb = 0;
  std::vector<Codebook> codebooks;
  std::optional<FsqExtension> fsq;
  std::uint64_t config_hash = 0;

  /// Number of code levels, including the FSQ level when present.
  int levels() const { return static_cast<int>(codebooks.size()) + (fsq ? 1 : 0); }
  /// Code range of each level.
  std::vector<std::int64_t> level_sizes() const;
  bool operator==(const TokenizerModel&) const = default;
};

/// Letter naming a level in token strings: a, b, c, d, ...
char level_letter(int level);

struct KMeansOptions {
  int max_iter = 100;
  double rel_tol = 1e-6;
  int restarts = 4;  // independent k-means++ seedings; the lowest objective wins
};

struct KMeansResult {
  MatF centroids;
  std::vector<int> assignment;
  double objective = 0.0;  // sum of squared distances to the assigned centroid
  int iterations = 0;
};

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// re-seeded from the point farthest from its centroid.
KMeansResult kmeans(const MatF& points, int k, std::uint64_t seed, const KMeansOptions& opts = {});

/// Residual k-means: level l is fit on what levels < l left unexplained.
TokenizerModel fit_tokenizer(const MatF& embeddings, std::span<const int> level_sizes, std::uint64_t seed,
                             const KMeansOptions& opts = {});

/// Greedy per-level nearest-centroid encoding.
ItemicCode encode(const TokenizerModel& model, std::span<const float> embedding);
std::vector<ItemicCode> encode_all(const TokenizerModel& model, const MatF& embeddings);

std::vector<double> decode(const TokenizerModel& model, const ItemicCode& code);

/// Per-level aggregate residual energy: entry l is sum_i ||x_i - sum_{j<=l} c_j||^2,
/// entry 0 being the raw energy.
std::vector<double> residual_energy(const TokenizerModel& model, const MatF& embeddings);

TokenizerModel fit_fsq_extension(const TokenizerModel& model, const MatF& embeddings, int m, int levels_per_dim);

/// Fraction of codes that are shared with at least one other entry.
double collision_rate(std::span<const ItemicCode> codes);

/// Most popular candidate, ties to the lexicographically smallest id.
std::string resolve_by_popularity(const ItemicCode& code, std::span<const corpus::Item* const> candidates);

std::string serialize(const ItemicCode& code);
ItemicCode parse(std::string_view text);

/// Item token string followed by one run per keyword.
std::vector<std::string> text_augmented_tokens(const ItemicCode& code, std::span<const std::string> keywords);

/// Top-TF keywords of a caption (ties by first occurrence), at most `max_keywords`.
std::vector<std::string> caption_keywords(std::string_view caption, std::size_t max_keywords = 5);

void save_tokenizer(const TokenizerModel& model, const std::filesystem::path& path);
TokenizerModel load_tokenizer(const std::filesystem::path& path);

/// Matrix view of corpus embeddings.
MatF embedding_matrix(std::span<const corpus::Item> items);

}  // namespace onerec::rq
