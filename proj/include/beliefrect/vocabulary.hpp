#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace beliefrect {

using TokenId = std::uint32_t;
using TokenSpan = std::span<const TokenId>;

/// Token ids plus the detokenized text they came from.
struct TokenSequence {
  std::vector<TokenId> tokens;
  std::string text;

  std::size_t size() const noexcept { return tokens.size(); }
  bool empty() const noexcept { return tokens.empty(); }
  operator TokenSpan() const noexcept { return tokens; }
};

/// Splits text into word-level tokens: runs of word characters, and every
/// other non-space character on its own ("gills?" -> "gills", "?").
std::vector<std::string> split_words(std::string_view text);

/// Inverse of split_words for canonical text (single spaces, no space before
/// closing punctuation, none after an opening parenthesis).
std::string join_words(std::span<const std::string> words);

/// Fixed word-level vocabulary. Ids 0..3 are reserved for <pad>, <bos>,
/// <eos> and <unk>; ordinary words follow in insertion order.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary();
  explicit Vocabulary(std::span<const std::string> words);

  /// Collects every distinct word of `texts` (in first-seen order).
  static Vocabulary from_texts(std::span<const std::string> texts);

  std::size_t size() const noexcept { return words_.size(); }
  TokenId add(std::string_view word);
  bool contains(std::string_view word) const;
  TokenId id(std::string_view word) const;  // kUnk when absent
  const std::string& word(TokenId id) const;
  const std::vector<std::string>& words() const noexcept { return words_; }

  TokenSequence encode(std::string_view text) const;
  std::string decode(TokenSpan tokens) const;
  /// Hex SHA-256 over the ordered word list.
  std::string hash() const;

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace beliefrect
