#pragma once

// Trie-constrained item generation. Every emitted item is a root-to-leaf path
// of the trie, so generation can only produce items present in the corpus.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "onerec/model.hpp"
#include "onerec/rqkmeans.hpp"
#include "onerec/vocab.hpp"

namespace onerec::model {

/// Prefix tree over item token runs [item_begin, level tokens..., item_end].
/// Leaves carry the ids of all items sharing that code.
class ItemTrie {
 public:
  ItemTrie() = default;
  ItemTrie(const vocab::Vocab& vocab, std::span<const rq::ItemicCode> codes, std::span<const std::string> item_ids);

  bool empty() const { return leaves_ == 0; }
  std::size_t leaf_count() const { return leaves_; }
  /// Tokens per item run (levels + 2).
  int depth() const { return depth_; }
  int root() const { return 0; }

  /// Sorted child tokens of `node`.
  std::span<const int> allowed(int node) const { return nodes_.at(node).tokens; }
  /// Child reached through `token`, or -1.
  int child(int node, int token) const;
  bool is_leaf(int node) const { return nodes_.at(node).tokens.empty() && node != 0; }
  std::span<const std::string> items_at(int node) const { return nodes_.at(node).items; }
  const rq::ItemicCode& code_at(int node) const { return nodes_.at(node).code; }

  /// Leaf reached by a full token run, or -1 when the run is not an in-trie item.
  int find(std::span<const int> tokens) const;
  /// Allowed sets along a token run (one per token); throws if the run leaves the trie.
  std::vector<std::span<const int>> path_allowed(std::span<const int> tokens) const;

 private:
  struct Node {
    std::vector<int> tokens;
    std::vector<int> next;
    std::vector<std::string> items;
    rq::ItemicCode code;
  };
  std::vector<Node> nodes_;
  std::size_t leaves_ = 0;
  int depth_ = 0;
};

enum class GenerationStrategy { beam, sample };

struct GenerationOptions {
  GenerationStrategy strategy = GenerationStrategy::beam;
  int n = 32;
  double temperature = 1.0;  // sample strategy only
  std::uint64_t seed = 0;
};

struct GeneratedItem {
  rq::ItemicCode code;
  std::vector<int> tokens;  // full item run
  double logprob = 0.0;     // sum of trie-masked temperature-1 log-probabilities
  int leaf = -1;
};

/// Up to n distinct in-trie items ranked by logprob (ties: first generated).
template <typename T>
std::vector<GeneratedItem> generate_items(const Parameters<T>& params, std::span<const int> prompt,
                                          const ItemTrie& trie, const GenerationOptions& opts);

/// One trie-constrained sample continuing `state` (a decoder that has consumed the prompt).
template <typename T>
GeneratedItem sample_item(const Decoder<T>& state, const ItemTrie& trie, double temperature, Rng& rng);

/// Log-softmax restricted to `allowed`; entry k belongs to allowed[k].
template <typename T>
std::vector<double> masked_log_softmax(std::span<const T> logits, std::span<const int> allowed);

}  // namespace onerec::model
