#include "onerec/generate.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace onerec::model {

ItemTrie::ItemTrie(const vocab::Vocab& vocab, std::span<const rq::ItemicCode> codes,
                   std::span<const std::string> item_ids) {
  if (codes.size() != item_ids.size()) throw ConfigError("ItemTrie: codes and item ids differ in length");
  nodes_.emplace_back();
  depth_ = vocab.levels() + 2;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto run = vocab.encode_code(codes[i]);
    int node = 0;
    for (int tok : run) {
      Node& cur = nodes_[node];
      const auto it = std::lower_bound(cur.tokens.begin(), cur.tokens.end(), tok);
      const auto k = it - cur.tokens.begin();
      if (it != cur.tokens.end() && *it == tok) {
        node = cur.next[k];
        continue;
      }
      const int fresh = static_cast<int>(nodes_.size());
      cur.tokens.insert(it, tok);
      nodes_[node].next.insert(nodes_[node].next.begin() + k, fresh);
      nodes_.emplace_back();
      node = fresh;
    }
    if (nodes_[node].items.empty()) {
      ++leaves_;
      nodes_[node].code = codes[i];
    }
    nodes_[node].items.push_back(item_ids[i]);
  }
}

int ItemTrie::child(int node, int token) const {
  const Node& n = nodes_.at(node);
  const auto it = std::lower_bound(n.tokens.begin(), n.tokens.end(), token);
  if (it == n.tokens.end() || *it != token) return -1;
  return n.next[it - n.tokens.begin()];
}

int ItemTrie::find(std::span<const int> tokens) const {
  if (static_cast<int>(tokens.size()) != depth_ || nodes_.empty()) return -1;
  int node = 0;
  for (int tok : tokens) {
    node = child(node, tok);
    if (node < 0) return -1;
  }
  return is_leaf(node) ? node : -1;
}

std::vector<std::span<const int>> ItemTrie::path_allowed(std::span<const int> tokens) const {
  std::vector<std::span<const int>> out;
  int node = 0;
  for (int tok : tokens) {
    out.push_back(allowed(node));
    node = child(node, tok);
    if (node < 0) throw InputError("token run leaves the item trie");
  }
  return out;
}

template <typename T>
std::vector<double> masked_log_softmax(std::span<const T> logits, std::span<const int> allowed) {
  double m = -std::numeric_limits<double>::infinity();
  for (int v : allowed) m = std::max(m, static_cast<double>(logits[v]));
  double s = 0.0;
  for (int v : allowed) s += std::exp(static_cast<double>(logits[v]) - m);
  const double lse = m + std::log(s);
  std::vector<double> out;
  out.reserve(allowed.size());
  for (int v : allowed) out.push_back(static_cast<double>(logits[v]) - lse);
  return out;
}

template <typename T>
GeneratedItem sample_item(const Decoder<T>& state, const ItemTrie& trie, double temperature, Rng& rng) {
  if (trie.empty()) throw ConfigError("sample_item: empty item trie");
  if (!(temperature > 0.0)) throw ConfigError("sample_item: temperature must be > 0");
  Decoder<T> dec = state;
  GeneratedItem out;
  int node = trie.root();
  std::vector<double> w;
  for (int step = 0; step < trie.depth(); ++step) {
    const auto allowed = trie.allowed(node);
    const auto lp = masked_log_softmax(dec.logits(), allowed);
    int k = 0;
    if (allowed.size() > 1) {
      const double m = *std::max_element(lp.begin(), lp.end());
      w.resize(lp.size());
      double total = 0.0;
      for (std::size_t i = 0; i < lp.size(); ++i) total += (w[i] = std::exp((lp[i] - m) / temperature));
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        acc += w[i];
        k = static_cast<int>(i);
        if (acc > u) break;
      }
    }
    const int tok = allowed[k];
    out.tokens.push_back(tok);
    out.logprob += lp[k];
    node = trie.child(node, tok);
    if (!trie.is_leaf(node)) dec.step(tok);
  }
  out.leaf = node;
  out.code = trie.code_at(node);
  return out;
}

namespace {

template <typename T>
std::vector<GeneratedItem> beam_search(const Decoder<T>& start, const ItemTrie& trie, int width) {
  struct Beam {
    Decoder<T> dec;
    int node;
    double logprob;
    std::vector<int> tokens;
  };
  struct Cand {
    int beam;
    int token;
    int child;
    double logprob;
  };
  std::vector<Beam> beams{Beam{start, trie.root(), 0.0, {}}};
  for (int step = 0; step < trie.depth(); ++step) {
    std::vector<Cand> cands;
    for (int b = 0; b < static_cast<int>(beams.size()); ++b) {
      const auto allowed = trie.allowed(beams[b].node);
      const auto lp = masked_log_softmax(beams[b].dec.logits(), allowed);
      for (std::size_t k = 0; k < allowed.size(); ++k) {
        cands.push_back(Cand{b, allowed[k], trie.child(beams[b].node, allowed[k]), beams[b].logprob + lp[k]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.logprob > b.logprob; });
    if (static_cast<int>(cands.size()) > width) cands.resize(width);
    std::vector<Beam> next;
    next.reserve(cands.size());
    for (const Cand& c : cands) {
      Beam nb{beams[c.beam].dec, c.child, c.logprob, beams[c.beam].tokens};
      nb.tokens.push_back(c.token);
      if (!trie.is_leaf(c.child)) nb.dec.step(c.token);
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }
  std::vector<GeneratedItem> out;
  for (auto& b : beams) out.push_back(GeneratedItem{trie.code_at(b.node), std::move(b.tokens), b.logprob, b.node});
  return out;
}

}  // namespace

template <typename T>
std::vector<GeneratedItem> generate_items(const Parameters<T>& params, std::span<const int> prompt,
                                          const ItemTrie& trie, const GenerationOptions& opts) {
  if (trie.empty()) throw ConfigError("generate_items: empty item trie");
  if (opts.n < 1) throw ConfigError("generate_items: n must be >= 1");
  if (prompt.empty()) throw InputError("generate_items: prompt must be non-empty");
  if (static_cast<int>(prompt.size()) + trie.depth() - 1 > params.config.context_len) {
    throw InputError("generate_items: prompt too long for an item continuation");
  }
  Decoder<T> dec(params);
  for (int tok : prompt) dec.step(tok);

  if (opts.strategy == GenerationStrategy::beam) return beam_search(dec, trie, opts.n);

  Rng rng(opts.seed);
  std::vector<GeneratedItem> out;
  std::set<int> seen;
  const int budget = 8 * opts.n;
  for (int attempt = 0; attempt < budget && static_cast<int>(out.size()) < opts.n; ++attempt) {
    GeneratedItem g = sample_item(dec, trie, opts.temperature, rng);
    if (seen.insert(g.leaf).second) out.push_back(std::move(g));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const GeneratedItem& a, const GeneratedItem& b) { return a.logprob > b.logprob; });
  return out;
}

#define ONEREC_GENERATE_INSTANTIATE(T)                                                                      \
  template std::vector<GeneratedItem> generate_items<T>(const Parameters<T>&, std::span<const int>,         \
                                                        const ItemTrie&, const GenerationOptions&);         \
  template GeneratedItem sample_item<T>(const Decoder<T>&, const ItemTrie&, double, Rng&);                  \
  template std::vector<double> masked_log_softmax<T>(std::span<const T>, std::span<const int>);

ONEREC_GENERATE_INSTANTIATE(float)
ONEREC_GENERATE_INSTANTIATE(double)

}  // namespace onerec::model
