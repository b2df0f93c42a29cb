#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "onerec/common.hpp"

namespace onerec::corpus {

enum class Domain : std::uint8_t { video, ad, product };

std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view s);

/// Behavioural labels carried by an interaction, stored as a bit set.
enum class Label : std::uint8_t { effective_view = 0, like, follow, comment, dislike, click };
inline constexpr int kLabelCount = 6;

std::string_view label_name(Label l);
Label parse_label(std::string_view s);

class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::uint8_t bits) : bits_(bits) {}
  void insert(Label l) { bits_ |= static_cast<std::uint8_t>(1u << static_cast<int>(l)); }
  bool contains(Label l) const { return (bits_ >> static_cast<int>(l)) & 1u; }
  bool empty() const { return bits_ == 0; }
  std::uint8_t bits() const { return bits_; }
  std::vector<Label> labels() const;
  bool operator==(const LabelSet&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

struct Item {
  std::string item_id;
  std::vector<float> embedding;
  std::string caption;
  std::int64_t popularity = 0;

  bool operator==(const Item&) const = default;
};

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  LabelSet labels;
  Domain domain = Domain::video;

  bool operator==(const Interaction&) const = default;
};

struct UserRecord {
  std::string user_id;
  std::vector<Interaction> interactions;  // sorted by timestamp, stable

  bool operator==(const UserRecord&) const = default;
};

struct SplitSpec {
  double test_fraction = 0.2;
  std::int64_t split_timestamp = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticConfig {
  int n_users = 200;
  int n_items = 256;
  int d_emb = 32;
  int n_clusters_l1 = 8;
  int n_clusters_l2 = 32;
  double preference_sharpness = 6.0;
  std::pair<int, int> history_length_range{12, 20};
  std::uint64_t seed = 0;
  // Geometry of the two-level mixture (per-coordinate standard deviations).
  double l1_scale = 1.0;
  double l2_scale = 0.25;
  double noise_scale = 0.06;
  // Fraction of items assigned to the ad and product domains.
  double ad_fraction = 0.15;
  double product_fraction = 0.15;
  std::int64_t time_horizon = 10000;

  void validate() const;
};

/// Generator ground truth, kept out of the on-disk corpus.
struct LatentStructure {
  std::vector<int> item_l1;                 // per item
  std::vector<int> item_l2;                 // per item
  std::vector<Domain> item_domain;          // per item
  std::vector<std::vector<double>> user_affinity;  // per user, over level-2 clusters
};

struct Corpus {
  std::vector<Item> items;
  std::vector<UserRecord> users;

  bool operator==(const Corpus&) const = default;
};

struct SyntheticCorpus {
  Corpus corpus;
  LatentStructure latent;
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticConfig& cfg);

/// Topic and sub-topic words used in captions; exposed so prompt builders can
/// phrase queries in the same vocabulary.
std::string topic_word(int l1_cluster);
std::string subtopic_word(int l2_cluster);
std::string adjective_word(int k);
inline constexpr int kTopicWords = 16;
inline constexpr int kSubtopicWords = 64;
inline constexpr int kAdjectiveWords = 8;

/// User-based split. Both outputs keep the input order.
std::pair<std::vector<UserRecord>, std::vector<UserRecord>> split_users(const std::vector<UserRecord>& users,
                                                                        const SplitSpec& spec);

/// History = interactions with timestamp strictly below `split_timestamp`.
std::pair<std::vector<Interaction>, std::vector<Interaction>> split_temporal(const UserRecord& user,
                                                                             std::int64_t split_timestamp);

/// Writes `items.jsonl` and `interactions.jsonl` under `dir`. Users without
/// interactions have no on-disk representation.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

/// Item domain as observed in interactions (video when never interacted).
std::vector<Domain> item_domains(const Corpus& corpus);

}  // namespace onerec::corpus
