#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "onerec/common.hpp"
#include "onerec/rqkmeans.hpp"

namespace onerec::vocab {

enum class Special : int { item_begin = 0, item_end, bos, eos, pad, think_open, think_close };
inline constexpr int kSpecialCount = 7;

std::string_view special_text(Special s);

enum class TokenKind { text, itemic, special };

struct TokenInfo {
  TokenKind kind = TokenKind::text;
  int byte = -1;   // text tokens
  int level = -1;  // itemic tokens (0-based)
  int code = -1;   // itemic tokens
  Special special = Special::pad;
};

struct TextTokenizerSpec {
  int byte_tokens = 256;
};

/// Unified vocabulary. Layout: byte tokens, then one contiguous block per
/// item-code level, then the special tokens.
class Vocab {
 public:
  Vocab() = default;
  Vocab(int text_count, std::vector<int> level_sizes);

  int size() const { return size_; }
  int text_count() const { return text_count_; }
  int levels() const { return static_cast<int>(level_sizes_.size()); }
  int level_size(int level) const { return level_sizes_.at(level); }
  int level_offset(int level) const { return level_offsets_.at(level); }
  int special_offset() const { return special_offset_; }

  int token_of(int level, int code) const;
  int special(Special s) const { return special_offset_ + static_cast<int>(s); }
  TokenInfo info(int id) const;

  bool is_text(int id) const { return id >= 0 && id < text_count_; }
  bool is_itemic(int id) const { return id >= text_count_ && id < special_offset_; }
  bool is_special(int id) const { return id >= special_offset_ && id < size_; }
  /// Itemic tokens plus the item begin/end markers.
  bool is_item_token(int id) const {
    return is_itemic(id) || id == special(Special::item_begin) || id == special(Special::item_end);
  }

  /// [item_begin, level tokens..., item_end]
  std::vector<int> encode_code(const rq::ItemicCode& code) const;
  /// Inverse of encode_code; nullopt when `ids` is not exactly one item block.
  std::optional<rq::ItemicCode> decode_code(std::span<const int> ids) const;

  std::vector<int> encode_text(std::string_view s) const;
  /// Bytes for text tokens, token strings (e.g. "<item_a_5>") otherwise.
  std::string decode_text(std::span<const int> ids) const;
  std::string token_string(int id) const;

  std::string to_json() const;
  static Vocab from_json(std::string_view text);

  bool operator==(const Vocab&) const = default;

 private:
  int text_count_ = 0;
  std::vector<int> level_sizes_;
  std::vector<int> level_offsets_;
  int special_offset_ = 0;
  int size_ = 0;
};

Vocab build_vocab(const rq::TokenizerModel& tokenizer, const TextTokenizerSpec& text = {});

/// Re-initialises every non-text row of a V x cols embedding table with
/// independent draws from N(mu, Sigma), the sample moments of the text rows.
/// Text rows are left bitwise unchanged.
void init_itemic_embeddings(std::span<float> table, int cols, const Vocab& vocab, std::uint64_t seed);

}  // namespace onerec::vocab
