#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <set>
#include <span>
#include <vector>

#include "beliefrect/vocabulary.hpp"

namespace beliefrect {

/// Natural-log probability. Impossible events carry kNegInf.
using LogProb = double;
inline constexpr LogProb kNegInf = -std::numeric_limits<double>::infinity();

/// Incremental decoding state: the model has consumed a prefix and exposes
/// the next-token distribution. Sessions are independent once cloned.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  virtual void push(TokenId token) = 0;
  virtual const std::vector<LogProb>& logprobs() const = 0;
  /// Context tokens consumed so far (BOS excluded).
  virtual std::size_t length() const = 0;
  virtual std::unique_ptr<DecodeSession> clone() const = 0;
};

/// Autoregressive scorer. Implementations condition on an implicit BOS
/// followed by the context; next_token_logprobs must be normalized.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const Vocabulary& vocabulary() const = 0;
  /// Longest context the model can condition on.
  virtual std::size_t max_context() const = 0;
  /// Unchecked: callers go through the free next_token_logprobs().
  virtual std::vector<LogProb> logprobs_after(TokenSpan context) const = 0;
  /// Default session replays the whole context on every push.
  virtual std::unique_ptr<DecodeSession> open_session(TokenSpan context) const;
};

/// A model whose parameters live in one flat vector so that optimizers,
/// checkpoints and attribution can treat them uniformly.
class TrainableModel : public LanguageModel {
 public:
  virtual std::span<double> parameters() = 0;
  virtual std::span<const double> parameters() const = 0;
  /// Adds `scale` * d NLL(target | context) / d params into `grad` and
  /// returns the NLL, averaged over scored target tokens. `loss_mask` (one
  /// flag per target token, empty = all) excludes tokens from the loss while
  /// they still act as context.
  virtual double accumulate_gradient(TokenSpan context, TokenSpan target, double scale, std::span<double> grad,
                                     std::span<const std::uint8_t> loss_mask = {}) const = 0;
  virtual std::unique_ptr<TrainableModel> clone() const = 0;
};

/// Number of target tokens that contribute to the loss; throws EmptyField
/// if none do and LengthMismatch if a non-empty mask has the wrong size.
std::size_t scored_count(std::size_t target_len, std::span<const std::uint8_t> loss_mask);

std::vector<LogProb> next_token_logprobs(const LanguageModel& model, TokenSpan context);

/// Teacher-forced log P(continuation | context).
LogProb sequence_logprob(const LanguageModel& model, TokenSpan context, TokenSpan continuation);
/// Same, continuing from an already-open session (which is left untouched).
LogProb sequence_logprob(const DecodeSession& session, TokenSpan continuation, std::size_t max_context);

std::unique_ptr<DecodeSession> open_checked_session(const LanguageModel& model, TokenSpan context);

struct GreedyResult {
  std::vector<TokenId> tokens;  // stop token excluded
  LogProb logprob = 0.0;        // of the emitted tokens
  bool stopped = false;         // a stop token was produced
  bool truncated = false;       // max_len reached first
};

/// Index of the largest entry; ties go to the lowest id.
TokenId argmax_token(std::span<const LogProb> logprobs);
/// Indices of the k largest entries, descending, ties by lowest id.
std::vector<TokenId> top_k_tokens(std::span<const LogProb> logprobs, std::size_t k);

GreedyResult greedy_complete(const LanguageModel& model, TokenSpan context,
                             const std::set<TokenId>& stop_tokens, std::size_t max_len);
GreedyResult greedy_complete(const DecodeSession& session, const std::set<TokenId>& stop_tokens,
                             std::size_t max_len, std::size_t max_context);

/// Numerically stable log-sum-exp; kNegInf for an all-impossible vector.
double log_sum_exp(std::span<const double> values);
void log_softmax_inplace(std::span<double> logits);

}  // namespace beliefrect
