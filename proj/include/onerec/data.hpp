#pragma once

// Item catalogue and pre-training example builders shared by the training
// and alignment stages.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "onerec/corpus.hpp"
#include "onerec/generate.hpp"
#include "onerec/rqkmeans.hpp"
#include "onerec/vocab.hpp"

namespace onerec::data {

struct CatalogItem {
  std::string item_id;
  rq::ItemicCode code;
  std::string caption;
  corpus::Domain domain = corpus::Domain::video;
  std::int64_t popularity = 0;
};

/// Corpus items with their codes and token runs.
class ItemCatalog {
 public:
  ItemCatalog() = default;
  ItemCatalog(const corpus::Corpus& corpus, const rq::TokenizerModel& tokenizer, const vocab::Vocab& vocab);

  const vocab::Vocab& vocab() const { return vocab_; }
  const std::vector<CatalogItem>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  /// Index of an item id; throws IndexError when unknown.
  int index_of(std::string_view item_id) const;
  const CatalogItem& at(std::string_view item_id) const { return items_[index_of(item_id)]; }
  /// [item_begin, codes..., item_end]
  const std::vector<int>& tokens(int index) const { return tokens_[index]; }
  const std::vector<int>& tokens(std::string_view item_id) const { return tokens_[index_of(item_id)]; }

  /// Trie over all items, or over one domain.
  model::ItemTrie trie(std::optional<corpus::Domain> domain = std::nullopt) const;

 private:
  vocab::Vocab vocab_;
  std::vector<CatalogItem> items_;
  std::vector<std::vector<int>> tokens_;
  std::unordered_map<std::string, int> index_;
};

enum class Source { dense_caption, user_behavior, persona_grounding, general_text };
inline constexpr int kSourceCount = 4;

std::string_view source_name(Source s);
Source parse_source(std::string_view s);

struct TrainExample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;  // supervised targets
  Source source = Source::general_text;
};

struct ExampleOptions {
  int context_len = 128;
  int general_count = 512;  // general_text only
  std::uint64_t seed = 0;
};

/// dense_caption: item run -> caption (loss on caption and eos).
/// user_behavior: history item runs -> next item run (loss on the target run);
///   histories are left-truncated to fit the context.
/// persona_grounding: keyword/item interleaving over a user's recent items (loss on all).
/// general_text: synthetic sentences (loss on all).
std::vector<TrainExample> build_examples(const ItemCatalog& catalog, std::span<const corpus::UserRecord> users,
                                         Source kind, const ExampleOptions& opts);

/// Synthetic general-domain sentence (template words plus a random letter run).
std::string general_sentence(Rng& rng);

/// Appends the byte tokens of `text`.
void append_text(std::vector<int>& out, const vocab::Vocab& vocab, std::string_view text);

/// Item runs of the most recent interactions that fit in `budget` tokens, oldest first.
std::vector<int> history_tokens(const ItemCatalog& catalog, std::span<const corpus::Interaction> history, int budget);

}  // namespace onerec::data
