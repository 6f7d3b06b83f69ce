#include "beliefrect/corpus_index.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "beliefrect/vocabulary.hpp"

namespace beliefrect {

CorpusIndex::CorpusIndex(std::vector<std::string> documents) : documents_(std::move(documents)) {
  for (const auto& d : documents_) {
    joined_ += d;
    joined_ += '\n';
    for (const auto& w : split_words(d)) {
      auto [it, inserted] = ids_.try_emplace(w, static_cast<std::uint32_t>(ids_.size() + 1));
      tokens_.push_back(it->second);
    }
    tokens_.push_back(0);
  }
  suffixes_.resize(tokens_.size());
  std::iota(suffixes_.begin(), suffixes_.end(), 0u);
  std::sort(suffixes_.begin(), suffixes_.end(), [this](std::uint32_t a, std::uint32_t b) {
    // Separators compare like any other id but end the comparison.
    while (a < tokens_.size() && b < tokens_.size()) {
      if (tokens_[a] != tokens_[b]) return tokens_[a] < tokens_[b];
      if (tokens_[a] == 0) return a < b;
      ++a, ++b;
    }
    return a > b;
  });
}

bool CorpusIndex::contains(std::string_view text) const {
  if (text.empty()) return true;
  if (text.find('\n') != std::string_view::npos) return false;
  const std::boyer_moore_horspool_searcher searcher(text.begin(), text.end());
  return std::search(joined_.begin(), joined_.end(), searcher) != joined_.end();
}

std::size_t CorpusIndex::longest_prefix_match(const std::vector<std::uint32_t>& query, std::size_t from) const {
  // Narrow [lo, hi) to suffixes agreeing with query[from, from + k) for growing k.
  std::size_t lo = 0, hi = suffixes_.size(), k = 0;
  while (from + k < query.size()) {
    const std::uint32_t want = query[from + k];
    if (want == 0) break;
    auto at = [&](std::uint32_t s) { return s + k < tokens_.size() ? tokens_[s + k] : 0u; };
    const auto first = std::partition_point(suffixes_.begin() + static_cast<std::ptrdiff_t>(lo),
                                            suffixes_.begin() + static_cast<std::ptrdiff_t>(hi),
                                            [&](std::uint32_t s) { return at(s) < want; });
    const auto last = std::partition_point(first, suffixes_.begin() + static_cast<std::ptrdiff_t>(hi),
                                           [&](std::uint32_t s) { return at(s) == want; });
    if (first == last) break;
    lo = static_cast<std::size_t>(first - suffixes_.begin());
    hi = static_cast<std::size_t>(last - suffixes_.begin());
    ++k;
  }
  return k;
}

std::size_t CorpusIndex::longest_match(const std::vector<std::string>& words) const {
  std::vector<std::uint32_t> query;
  query.reserve(words.size());
  for (const auto& w : words) {
    const auto it = ids_.find(w);
    query.push_back(it == ids_.end() ? 0u : it->second);
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < query.size() && query.size() - i > best; ++i)
    best = std::max(best, longest_prefix_match(query, i));
  return best;
}

}  // namespace beliefrect
