#include "onerec/vocab.hpp"

#include <Eigen/Dense>
#include <array>
#include <random>

#include "json.hpp"

namespace onerec::vocab {

namespace {

constexpr std::array<std::string_view, kSpecialCount> kSpecialText{
    "<|item_begin|>", "<|item_end|>", "<|bos|>", "<|eos|>", "<|pad|>", "<think>", "</think>"};

constexpr double kEigenFloor = 1e-10;

}  // namespace

std::string_view special_text(Special s) { return kSpecialText.at(static_cast<std::size_t>(s)); }

Vocab::Vocab(int text_count, std::vector<int> level_sizes)
    : text_count_(text_count), level_sizes_(std::move(level_sizes)) {
  if (text_count_ < 0) throw ConfigError("vocab: negative text token count");
  int offset = text_count_;
  for (int k : level_sizes_) {
    if (k < 1) throw ConfigError("vocab: empty item level");
    level_offsets_.push_back(offset);
    offset += k;
  }
  special_offset_ = offset;
  size_ = offset + kSpecialCount;
}

int Vocab::token_of(int level, int code) const {
  if (level < 0 || level >= levels()) throw IndexError("vocab: item level " + std::to_string(level) + " out of range");
  if (code < 0 || code >= level_sizes_[level]) {
    throw IndexError("vocab: code " + std::to_string(code) + " out of range at level " + std::to_string(level));
  }
  return level_offsets_[level] + code;
}

TokenInfo Vocab::info(int id) const {
  TokenInfo t;
  if (is_text(id)) {
    t.kind = TokenKind::text;
    t.byte = id;
  } else if (is_itemic(id)) {
    t.kind = TokenKind::itemic;
    int l = levels() - 1;
    while (id < level_offsets_[l]) --l;
    t.level = l;
    t.code = id - level_offsets_[l];
  } else if (is_special(id)) {
    t.kind = TokenKind::special;
    t.special = static_cast<Special>(id - special_offset_);
  } else {
    throw IndexError("vocab: token id " + std::to_string(id) + " outside [0, " + std::to_string(size_) + ")");
  }
  return t;
}

std::vector<int> Vocab::encode_code(const rq::ItemicCode& code) const {
  if (static_cast<int>(code.size()) != levels()) {
    throw IndexError("vocab: code has " + std::to_string(code.size()) + " levels, vocab has " +
                     std::to_string(levels()));
  }
  std::vector<int> ids{special(Special::item_begin)};
  for (int l = 0; l < levels(); ++l) ids.push_back(token_of(l, code[l]));
  ids.push_back(special(Special::item_end));
  return ids;
}

std::optional<rq::ItemicCode> Vocab::decode_code(std::span<const int> ids) const {
  if (static_cast<int>(ids.size()) != levels() + 2) return std::nullopt;
  if (ids.front() != special(Special::item_begin) || ids.back() != special(Special::item_end)) return std::nullopt;
  rq::ItemicCode code;
  for (int l = 0; l < levels(); ++l) {
    const int id = ids[l + 1];
    if (id < level_offsets_[l] || id >= level_offsets_[l] + level_sizes_[l]) return std::nullopt;
    code.codes.push_back(id - level_offsets_[l]);
  }
  return code;
}

std::vector<int> Vocab::encode_text(std::string_view s) const {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (char c : s) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string Vocab::token_string(int id) const {
  const TokenInfo t = info(id);
  switch (t.kind) {
    case TokenKind::text:
      return std::string(1, static_cast<char>(t.byte));
    case TokenKind::itemic:
      return std::string("<item_") + rq::level_letter(t.level) + "_" + std::to_string(t.code) + ">";
    case TokenKind::special:
      return std::string(special_text(t.special));
  }
  return {};
}

std::string Vocab::decode_text(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += token_string(id);
  return out;
}

std::string Vocab::to_json() const {
  nlohmann::json j;
  j["text_tokens"] = text_count_;
  j["item_levels"] = level_sizes_;
  j["item_offsets"] = level_offsets_;
  nlohmann::json specials = nlohmann::json::array();
  for (auto s : kSpecialText) specials.push_back(s);
  j["specials"] = specials;
  j["special_offset"] = special_offset_;
  j["size"] = size_;
  return j.dump(2);
}

Vocab Vocab::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Vocab v(j.at("text_tokens").get<int>(), j.at("item_levels").get<std::vector<int>>());
    if (j.at("size").get<int>() != v.size()) throw ParseError("vocab json: size disagrees with layout", 0);
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("vocab json: ") + e.what(), 0);
  }
}

Vocab build_vocab(const rq::TokenizerModel& tokenizer, const TextTokenizerSpec& text) {
  std::vector<int> sizes;
  for (auto k : tokenizer.level_sizes()) sizes.push_back(static_cast<int>(k));
  return Vocab(text.byte_tokens, std::move(sizes));
}

void init_itemic_embeddings(std::span<float> table, int cols, const Vocab& vocab, std::uint64_t seed) {
  if (cols <= 0 || table.size() != static_cast<std::size_t>(vocab.size()) * cols) {
    throw ConfigError("init_itemic_embeddings: table shape does not match vocabulary");
  }
  const int n_text = vocab.text_count();
  if (n_text < 2) throw InputError("init_itemic_embeddings: need at least 2 text rows for moment statistics");

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(cols);
  for (int i = 0; i < n_text; ++i) {
    for (int j = 0; j < cols; ++j) mean(j) += table[static_cast<std::size_t>(i) * cols + j];
  }
  mean /= n_text;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(cols, cols);
  Eigen::VectorXd centred(cols);
  for (int i = 0; i < n_text; ++i) {
    for (int j = 0; j < cols; ++j) centred(j) = table[static_cast<std::size_t>(i) * cols + j] - mean(j);
    cov.noalias() += centred * centred.transpose();
  }
  cov /= (n_text - 1);
  cov = 0.5 * (cov + cov.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw InputError("init_itemic_embeddings: covariance factorization failed");
  const Eigen::VectorXd scale = eig.eigenvalues().cwiseMax(kEigenFloor).cwiseSqrt();
  const Eigen::MatrixXd factor = eig.eigenvectors() * scale.asDiagonal();

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd z(cols);
  for (int i = n_text; i < vocab.size(); ++i) {
    for (int j = 0; j < cols; ++j) z(j) = gauss(rng);
    const Eigen::VectorXd x = mean + factor * z;
    for (int j = 0; j < cols; ++j) table[static_cast<std::size_t>(i) * cols + j] = static_cast<float>(x(j));
  }
}

}  // namespace onerec::vocab
