#include "onerec/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "binary_io.hpp"
#include "json.hpp"

namespace onerec::corpus {

namespace {

using nlohmann::json;

constexpr std::array<std::string_view, 3> kDomainNames{"video", "ad", "product"};
constexpr std::array<std::string_view, kLabelCount> kLabelNames{"effective_view", "like",    "follow",
                                                                "comment",        "dislike", "click"};

constexpr std::array<std::string_view, 16> kTopics{"cooking", "travel",  "music",  "sports", "gaming", "pets",
                                                   "fashion", "science", "comedy", "dance",  "cars",   "art",
                                                   "fitness", "news",    "movies", "nature"};

constexpr std::array<std::string_view, 64> kSubtopics{
    "pasta",  "sushi",  "baking", "grill",  "beach",  "alps",   "safari", "metro",  "guitar", "piano",  "drums",
    "opera",  "soccer", "tennis", "skiing", "boxing", "chess",  "racing", "puzzle", "arcade", "cats",   "dogs",
    "birds",  "horses", "denim",  "shoes",  "hats",   "silk",   "space",  "robots", "plants", "cells",  "standup",
    "pranks", "sketch", "parody", "salsa",  "ballet", "hiphop", "tango",  "trucks", "bikes",  "rally",  "drift",
    "paint",  "clay",   "ink",    "photo",  "yoga",   "lifts",  "runs",   "swim",   "stocks", "markets", "local",
    "world",  "drama",  "horror", "anime",  "docs",   "rivers", "forest", "desert", "ocean"};

constexpr std::array<std::string_view, 8> kAdjectives{"funny", "calm", "quick", "bright",
                                                      "retro", "cozy", "epic",  "tiny"};

std::string item_id_for(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "i%05d", i);
  return buf;
}

std::string user_id_for(int u) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "u%05d", u);
  return buf;
}

}  // namespace

std::string_view domain_name(Domain d) { return kDomainNames.at(static_cast<std::size_t>(d)); }

Domain parse_domain(std::string_view s) {
  for (std::size_t i = 0; i < kDomainNames.size(); ++i) {
    if (kDomainNames[i] == s) return static_cast<Domain>(i);
  }
  throw InputError("unknown domain '" + std::string(s) + "'");
}

std::string_view label_name(Label l) { return kLabelNames.at(static_cast<std::size_t>(l)); }

Label parse_label(std::string_view s) {
  for (std::size_t i = 0; i < kLabelNames.size(); ++i) {
    if (kLabelNames[i] == s) return static_cast<Label>(i);
  }
  throw InputError("unknown label '" + std::string(s) + "'");
}

std::vector<Label> LabelSet::labels() const {
  std::vector<Label> out;
  for (int i = 0; i < kLabelCount; ++i) {
    if (contains(static_cast<Label>(i))) out.push_back(static_cast<Label>(i));
  }
  return out;
}

void SplitSpec::validate() const {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("split.test_fraction must lie in (0, 1)");
  }
}

void SyntheticConfig::validate() const {
  if (n_users < 0 || n_items <= 0 || d_emb <= 0 || n_clusters_l1 <= 0 || n_clusters_l2 <= 0) {
    throw ConfigError("synthetic corpus sizes must be positive");
  }
  if (n_clusters_l2 < n_clusters_l1) throw ConfigError("n_clusters_l2 must be >= n_clusters_l1");
  if (n_items < n_clusters_l2) throw ConfigError("n_items must be >= n_clusters_l2");
  if (!(preference_sharpness >= 0.0)) throw ConfigError("preference_sharpness must be non-negative");
  if (history_length_range.first < 1 || history_length_range.second < history_length_range.first) {
    throw ConfigError("history_length_range must be a non-empty interval of positive lengths");
  }
  if (time_horizon < 1) throw ConfigError("time_horizon must be positive");
  if (ad_fraction < 0 || product_fraction < 0 || ad_fraction + product_fraction >= 1.0) {
    throw ConfigError("domain fractions must be non-negative and sum below 1");
  }
}

std::string topic_word(int l1_cluster) {
  if (l1_cluster < static_cast<int>(kTopics.size())) return std::string(kTopics[l1_cluster]);
  return "topic" + std::to_string(l1_cluster);
}

std::string adjective_word(int k) { return std::string(kAdjectives.at(static_cast<std::size_t>(k))); }

std::string subtopic_word(int l2_cluster) {
  if (l2_cluster < static_cast<int>(kSubtopics.size())) return std::string(kSubtopics[l2_cluster]);
  return "sub" + std::to_string(l2_cluster);
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int d = cfg.d_emb;

  MatD l1_centers(cfg.n_clusters_l1, d);
  for (double& v : l1_centers.data) v = cfg.l1_scale * gauss(rng);
  MatD l2_offsets(cfg.n_clusters_l2, d);
  for (double& v : l2_offsets.data) v = cfg.l2_scale * gauss(rng);
  // Level-2 clusters are split into contiguous blocks under each level-1 parent.
  auto parent_of = [&](int j) { return static_cast<int>(static_cast<std::int64_t>(j) * cfg.n_clusters_l1 / cfg.n_clusters_l2); };

  SyntheticCorpus out;
  auto& items = out.corpus.items;
  auto& latent = out.latent;
  items.resize(cfg.n_items);
  latent.item_l1.resize(cfg.n_items);
  latent.item_l2.resize(cfg.n_items);
  latent.item_domain.resize(cfg.n_items);

  for (int i = 0; i < cfg.n_items; ++i) {
    const int l2 = i < cfg.n_clusters_l2 ? i : static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.n_clusters_l2));
    const int l1 = parent_of(l2);
    latent.item_l2[i] = l2;
    latent.item_l1[i] = l1;
    Item& item = items[i];
    item.item_id = item_id_for(i);
    item.embedding.resize(d);
    for (int j = 0; j < d; ++j) {
      item.embedding[j] = static_cast<float>(l1_centers(l1, j) + l2_offsets(l2, j) + cfg.noise_scale * gauss(rng));
    }
    const double u = uniform01(rng);
    latent.item_domain[i] = u < cfg.ad_fraction                          ? Domain::ad
                            : u < cfg.ad_fraction + cfg.product_fraction ? Domain::product
                                                                         : Domain::video;
    const auto adj = kAdjectives[rng() % kAdjectives.size()];
    item.caption = topic_word(l1) + ", " + subtopic_word(l2) + ", " + std::string(adj);
  }

  constexpr int kFavoured = 3;
  const int n_fav = std::min(kFavoured, cfg.n_clusters_l2);
  auto& users = out.corpus.users;
  users.resize(cfg.n_users);
  latent.user_affinity.resize(cfg.n_users);
  std::vector<int> cluster_ids(cfg.n_clusters_l2);
  std::vector<double> item_weight(cfg.n_items);
  for (int u = 0; u < cfg.n_users; ++u) {
    std::iota(cluster_ids.begin(), cluster_ids.end(), 0);
    std::vector<double> score(cfg.n_clusters_l2, 0.0);
    for (int f = 0; f < n_fav; ++f) {
      const int pick = f + static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.n_clusters_l2 - f));
      std::swap(cluster_ids[f], cluster_ids[pick]);
      score[cluster_ids[f]] = 0.6 + 0.4 * uniform01(rng);
    }
    auto& affinity = latent.user_affinity[u];
    affinity.resize(cfg.n_clusters_l2);
    for (int j = 0; j < cfg.n_clusters_l2; ++j) affinity[j] = std::exp(cfg.preference_sharpness * score[j]);
    for (int i = 0; i < cfg.n_items; ++i) item_weight[i] = affinity[latent.item_l2[i]];
    std::discrete_distribution<int> pick_item(item_weight.begin(), item_weight.end());

    const int lo = cfg.history_length_range.first;
    const int hi = cfg.history_length_range.second;
    const int len = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    std::vector<std::int64_t> times(len);
    for (auto& t : times) t = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(cfg.time_horizon));
    std::sort(times.begin(), times.end());

    UserRecord& user = users[u];
    user.user_id = user_id_for(u);
    user.interactions.reserve(len);
    for (int k = 0; k < len; ++k) {
      const int i = pick_item(rng);
      const double s = score[latent.item_l2[i]];
      Interaction it;
      it.user_id = user.user_id;
      it.item_id = items[i].item_id;
      it.timestamp = times[k];
      it.domain = latent.item_domain[i];
      if (uniform01(rng) < 0.3 + 0.6 * s) it.labels.insert(Label::effective_view);
      if (uniform01(rng) < 0.05 + 0.45 * s) it.labels.insert(Label::like);
      if (uniform01(rng) < 0.05) it.labels.insert(Label::follow);
      if (uniform01(rng) < 0.1) it.labels.insert(Label::comment);
      if (uniform01(rng) < 0.15 * (1.0 - s)) it.labels.insert(Label::dislike);
      if (uniform01(rng) < 0.5 || it.labels.empty()) it.labels.insert(Label::click);
      ++items[i].popularity;
      user.interactions.push_back(std::move(it));
    }
  }
  return out;
}

std::pair<std::vector<UserRecord>, std::vector<UserRecord>> split_users(const std::vector<UserRecord>& users,
                                                                        const SplitSpec& spec) {
  spec.validate();
  if (users.empty()) throw InputError("split_users: empty user set");
  const std::size_t n = users.size();
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<char> is_test(n, 0);
  for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = 1;

  std::pair<std::vector<UserRecord>, std::vector<UserRecord>> out;
  out.first.reserve(n - n_test);
  out.second.reserve(n_test);
  for (std::size_t i = 0; i < n; ++i) (is_test[i] ? out.second : out.first).push_back(users[i]);
  return out;
}

std::pair<std::vector<Interaction>, std::vector<Interaction>> split_temporal(const UserRecord& user,
                                                                             std::int64_t split_timestamp) {
  std::pair<std::vector<Interaction>, std::vector<Interaction>> out;
  for (const auto& it : user.interactions) {
    (it.timestamp < split_timestamp ? out.first : out.second).push_back(it);
  }
  return out;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string items;
  for (const auto& item : corpus.items) {
    json j;
    j["item_id"] = item.item_id;
    j["embedding"] = item.embedding;
    j["caption"] = item.caption;
    j["popularity"] = item.popularity;
    items += j.dump();
    items += '\n';
  }
  std::string inter;
  for (const auto& user : corpus.users) {
    for (const auto& it : user.interactions) {
      json j;
      j["user_id"] = it.user_id;
      j["item_id"] = it.item_id;
      j["ts"] = it.timestamp;
      json labels = json::array();
      for (Label l : it.labels.labels()) labels.push_back(label_name(l));
      j["labels"] = std::move(labels);
      j["domain"] = domain_name(it.domain);
      inter += j.dump();
      inter += '\n';
    }
  }
  io::write_file_atomic(dir / "items.jsonl", items);
  io::write_file_atomic(dir / "interactions.jsonl", inter);
}

namespace {

template <typename F>
void for_each_record(const std::filesystem::path& path, F&& on_record) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  const std::string name = path.filename().string();
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      on_record(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError(name + " line " + std::to_string(lineno) + ": " + e.what(), lineno);
    } catch (const InputError& e) {
      throw ParseError(name + " line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
}

}  // namespace

Corpus read_corpus(const std::filesystem::path& dir) {
  Corpus corpus;
  std::size_t dim = 0;
  bool have_dim = false;
  for_each_record(dir / "items.jsonl", [&](const json& j) {
    Item item;
    item.item_id = j.at("item_id").get<std::string>();
    item.embedding = j.at("embedding").get<std::vector<float>>();
    item.caption = j.at("caption").get<std::string>();
    item.popularity = j.at("popularity").get<std::int64_t>();
    if (item.popularity < 0) throw InputError("negative popularity");
    if (!have_dim) {
      dim = item.embedding.size();
      have_dim = true;
    } else if (item.embedding.size() != dim) {
      throw InputError("embedding dimension " + std::to_string(item.embedding.size()) + " differs from " +
                       std::to_string(dim));
    }
    corpus.items.push_back(std::move(item));
  });

  std::unordered_map<std::string, std::size_t> user_index;
  for_each_record(dir / "interactions.jsonl", [&](const json& j) {
    Interaction it;
    it.user_id = j.at("user_id").get<std::string>();
    it.item_id = j.at("item_id").get<std::string>();
    it.timestamp = j.at("ts").get<std::int64_t>();
    for (const auto& l : j.at("labels")) it.labels.insert(parse_label(l.get<std::string>()));
    if (it.labels.empty()) throw InputError("interaction without labels");
    it.domain = parse_domain(j.at("domain").get<std::string>());
    auto [pos, inserted] = user_index.try_emplace(it.user_id, corpus.users.size());
    if (inserted) corpus.users.push_back(UserRecord{it.user_id, {}});
    auto& seq = corpus.users[pos->second].interactions;
    if (!seq.empty() && seq.back().timestamp > it.timestamp) throw InputError("interactions out of timestamp order");
    seq.push_back(std::move(it));
  });
  return corpus;
}

std::vector<Domain> item_domains(const Corpus& corpus) {
  std::unordered_map<std::string_view, std::size_t> index;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) index.emplace(corpus.items[i].item_id, i);
  std::vector<Domain> out(corpus.items.size(), Domain::video);
  for (const auto& user : corpus.users) {
    for (const auto& it : user.interactions) {
      if (auto f = index.find(it.item_id); f != index.end()) out[f->second] = it.domain;
    }
  }
  return out;
}

}  // namespace onerec::corpus
