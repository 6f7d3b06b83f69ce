#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace beliefrect {

/// Read-only index over a document collection. Substring queries are
/// byte-exact; n-gram queries work on the word tokenization and never
/// match across document boundaries.
class CorpusIndex {
 public:
  explicit CorpusIndex(std::vector<std::string> documents);

  const std::vector<std::string>& documents() const noexcept { return documents_; }
  std::size_t token_count() const noexcept { return tokens_.size(); }

  /// True iff `text` occurs verbatim inside some document.
  bool contains(std::string_view text) const;

  /// Length of the longest contiguous run of `words` that occurs verbatim
  /// (as consecutive words) in some document.
  std::size_t longest_match(const std::vector<std::string>& words) const;

 private:
  // Length of the longest prefix of `query` matched by some suffix.
  std::size_t longest_prefix_match(const std::vector<std::uint32_t>& query, std::size_t from) const;

  std::vector<std::string> documents_;
  std::string joined_;  // documents separated by '\n'
  std::unordered_map<std::string, std::uint32_t> ids_;
  std::vector<std::uint32_t> tokens_;  // 0 separates documents
  std::vector<std::uint32_t> suffixes_;
};

}  // namespace beliefrect
