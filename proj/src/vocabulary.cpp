#include "beliefrect/vocabulary.hpp"

#include <cctype>

#include "beliefrect/error.hpp"
#include "beliefrect/hashing.hpp"

namespace beliefrect {
namespace {

bool is_word_char(unsigned char c) {
  return std::isalnum(c) || c == '_' || c == '\'' || c == '-' || c >= 0x80;
}

bool attaches_left(const std::string& w) {
  return w == "." || w == "," || w == "?" || w == "!" || w == ";" || w == ":" || w == ")";
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (is_word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    } else {
      out.emplace_back(1, text[i]);
      ++i;
    }
  }
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  bool after_open = true;
  for (const auto& w : words) {
    if (!after_open && !attaches_left(w)) out.push_back(' ');
    out += w;
    after_open = (w == "(");
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* w : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(w);
}

Vocabulary::Vocabulary(std::span<const std::string> words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

Vocabulary Vocabulary::from_texts(std::span<const std::string> texts) {
  Vocabulary v;
  for (const auto& t : texts)
    for (const auto& w : split_words(t)) v.add(w);
  return v;
}

TokenId Vocabulary::add(std::string_view word) {
  if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
  const auto id = static_cast<TokenId>(words_.size());
  words_.emplace_back(word);
  index_.emplace(words_.back(), id);
  return id;
}

bool Vocabulary::contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) fail(ErrorCode::InvalidConfig, "token id out of range: " + std::to_string(id));
  return words_[id];
}

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence seq;
  const auto words = split_words(text);
  seq.tokens.reserve(words.size());
  for (const auto& w : words) seq.tokens.push_back(id(w));
  seq.text = join_words(words);
  return seq;
}

std::string Vocabulary::decode(TokenSpan tokens) const {
  std::vector<std::string> words;
  words.reserve(tokens.size());
  for (auto t : tokens) words.push_back(word(t));
  return join_words(words);
}

std::string Vocabulary::hash() const {
  std::string joined;
  for (const auto& w : words_) {
    joined += w;
    joined.push_back('\n');
  }
  return sha256_hex(joined);
}

}  // namespace beliefrect
