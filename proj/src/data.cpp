#include "onerec/data.hpp"

#include <algorithm>
#include <array>

namespace onerec::data {

using vocab::Special;

ItemCatalog::ItemCatalog(const corpus::Corpus& corpus, const rq::TokenizerModel& tokenizer, const vocab::Vocab& vocab)
    : vocab_(vocab) {
  const auto codes = rq::encode_all(tokenizer, rq::embedding_matrix(corpus.items));
  const auto domains = corpus::item_domains(corpus);
  items_.reserve(corpus.items.size());
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    const auto& item = corpus.items[i];
    if (!index_.emplace(item.item_id, static_cast<int>(i)).second) {
      throw InputError("catalog: duplicate item id " + item.item_id);
    }
    items_.push_back(CatalogItem{item.item_id, codes[i], item.caption, domains[i], item.popularity});
    tokens_.push_back(vocab_.encode_code(codes[i]));
  }
}

int ItemCatalog::index_of(std::string_view item_id) const {
  const auto it = index_.find(std::string(item_id));
  if (it == index_.end()) throw IndexError("catalog: unknown item " + std::string(item_id));
  return it->second;
}

model::ItemTrie ItemCatalog::trie(std::optional<corpus::Domain> domain) const {
  std::vector<rq::ItemicCode> codes;
  std::vector<std::string> ids;
  for (const auto& item : items_) {
    if (domain && item.domain != *domain) continue;
    codes.push_back(item.code);
    ids.push_back(item.item_id);
  }
  return model::ItemTrie(vocab_, codes, ids);
}

std::string_view source_name(Source s) {
  switch (s) {
    case Source::dense_caption: return "dense_caption";
    case Source::user_behavior: return "user_behavior";
    case Source::persona_grounding: return "persona_grounding";
    case Source::general_text: return "general_text";
  }
  return "?";
}

Source parse_source(std::string_view s) {
  for (int k = 0; k < kSourceCount; ++k) {
    if (source_name(static_cast<Source>(k)) == s) return static_cast<Source>(k);
  }
  throw ConfigError("unknown example source '" + std::string(s) + "'");
}

void append_text(std::vector<int>& out, const vocab::Vocab& vocab, std::string_view text) {
  const auto ids = vocab.encode_text(text);
  out.insert(out.end(), ids.begin(), ids.end());
}

std::vector<int> history_tokens(const ItemCatalog& catalog, std::span<const corpus::Interaction> history, int budget) {
  std::vector<const std::vector<int>*> runs;
  int used = 0;
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    const auto& run = catalog.tokens(it->item_id);
    if (used + static_cast<int>(run.size()) > budget) break;
    used += static_cast<int>(run.size());
    runs.push_back(&run);
  }
  std::vector<int> out;
  out.reserve(used);
  for (auto r = runs.rbegin(); r != runs.rend(); ++r) out.insert(out.end(), (*r)->begin(), (*r)->end());
  return out;
}

namespace {

constexpr std::array<std::string_view, 12> kNouns{"river", "garden", "market", "teacher", "engine", "window",
                                                  "letter", "forest", "song",   "bridge",  "city",   "lamp"};
constexpr std::array<std::string_view, 8> kVerbs{"finds", "opens", "follows", "builds", "sees", "keeps", "moves", "holds"};
constexpr std::array<std::string_view, 8> kAdjs{"quiet", "bright", "old", "small", "green", "busy", "cold", "kind"};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& words, Rng& rng) {
  return words[rng() % N];
}

std::string first_keyword(const std::string& caption) {
  const auto cut = caption.find(',');
  return caption.substr(0, cut);
}

void push_example(std::vector<TrainExample>& out, std::vector<int> tokens, std::size_t target_from, Source src,
                  int context_len) {
  if (tokens.size() < 2 || static_cast<int>(tokens.size()) > context_len) return;
  TrainExample ex;
  ex.tokens = std::move(tokens);
  ex.mask.assign(ex.tokens.size(), 0);
  for (std::size_t i = std::max<std::size_t>(target_from, 1); i < ex.tokens.size(); ++i) ex.mask[i] = 1;
  ex.source = src;
  out.push_back(std::move(ex));
}

}  // namespace

std::string general_sentence(Rng& rng) {
  // Half of the sentences mention catalogue vocabulary, the way general web
  // text mentions topics that also appear in item captions.
  std::string s;
  if (rng() % 2 == 0) {
    s = corpus::topic_word(static_cast<int>(rng() % corpus::kTopicWords)) + ", " +
        corpus::subtopic_word(static_cast<int>(rng() % corpus::kSubtopicWords)) + ", " +
        corpus::adjective_word(static_cast<int>(rng() % corpus::kAdjectiveWords)) + " and ";
    s += pick(kAdjs, rng);
    s += '.';
    return s;
  }
  s = "the ";
  s += pick(kAdjs, rng);
  s += ' ';
  s += pick(kNouns, rng);
  s += ' ';
  s += pick(kVerbs, rng);
  s += " the ";
  s += pick(kNouns, rng);
  s += " near ";
  const int letters = 3 + static_cast<int>(rng() % 5);
  for (int k = 0; k < letters; ++k) s += static_cast<char>('a' + rng() % 26);
  s += '.';
  return s;
}

std::vector<TrainExample> build_examples(const ItemCatalog& catalog, std::span<const corpus::UserRecord> users,
                                         Source kind, const ExampleOptions& opts) {
  if (opts.context_len < 8) throw ConfigError("build_examples: context_len too small");
  const auto& vocab = catalog.vocab();
  const int eos = vocab.special(Special::eos);
  std::vector<TrainExample> out;
  switch (kind) {
    case Source::dense_caption:
      for (std::size_t i = 0; i < catalog.size(); ++i) {
        std::vector<int> t = catalog.tokens(static_cast<int>(i));
        const std::size_t from = t.size();
        append_text(t, vocab, catalog.items()[i].caption);
        t.push_back(eos);
        push_example(out, std::move(t), from, kind, opts.context_len);
      }
      break;
    case Source::user_behavior:
      for (const auto& user : users) {
        const auto& seq = user.interactions;
        for (std::size_t k = 1; k < seq.size(); ++k) {
          const auto& target = catalog.tokens(seq[k].item_id);
          const int budget = opts.context_len - static_cast<int>(target.size());
          std::vector<int> t = history_tokens(catalog, std::span(seq).first(k), budget);
          if (t.empty()) continue;
          const std::size_t from = t.size();
          t.insert(t.end(), target.begin(), target.end());
          push_example(out, std::move(t), from, kind, opts.context_len);
        }
      }
      break;
    case Source::persona_grounding:
      for (const auto& user : users) {
        std::vector<int> t;
        append_text(t, vocab, "user likes");
        for (auto it = user.interactions.rbegin(); it != user.interactions.rend(); ++it) {
          std::vector<int> piece;
          append_text(piece, vocab, " " + first_keyword(catalog.at(it->item_id).caption) + " ");
          const auto& run = catalog.tokens(it->item_id);
          piece.insert(piece.end(), run.begin(), run.end());
          if (static_cast<int>(t.size() + piece.size()) + 1 > opts.context_len) break;
          t.insert(t.end(), piece.begin(), piece.end());
        }
        t.push_back(eos);
        push_example(out, std::move(t), 1, kind, opts.context_len);
      }
      break;
    case Source::general_text: {
      Rng rng(mix_seed(opts.seed, 0x67656e));
      for (int n = 0; n < opts.general_count; ++n) {
        std::string text = general_sentence(rng);
        const int extra = static_cast<int>(rng() % 3);
        for (int k = 0; k < extra; ++k) {
          const std::string more = " " + general_sentence(rng);
          if (static_cast<int>(text.size() + more.size()) + 1 > opts.context_len) break;
          text += more;
        }
        std::vector<int> t;
        append_text(t, vocab, text.substr(0, opts.context_len - 1));
        t.push_back(eos);
        push_example(out, std::move(t), 1, kind, opts.context_len);
      }
      break;
    }
  }
  return out;
}

}  // namespace onerec::data
