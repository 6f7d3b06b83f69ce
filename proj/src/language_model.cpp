#include "beliefrect/language_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "beliefrect/error.hpp"

namespace beliefrect {
namespace {

class ReplaySession final : public DecodeSession {
 public:
  ReplaySession(const LanguageModel& model, TokenSpan context)
      : model_(&model), context_(context.begin(), context.end()), logprobs_(model.logprobs_after(context_)) {}

  void push(TokenId token) override {
    context_.push_back(token);
    logprobs_ = model_->logprobs_after(context_);
  }
  const std::vector<LogProb>& logprobs() const override { return logprobs_; }
  std::size_t length() const override { return context_.size(); }
  std::unique_ptr<DecodeSession> clone() const override { return std::make_unique<ReplaySession>(*this); }

 private:
  const LanguageModel* model_;
  std::vector<TokenId> context_;
  std::vector<LogProb> logprobs_;
};

void check_context(std::size_t length, std::size_t max_context) {
  if (length > max_context)
    fail(ErrorCode::ContextTooLong,
         "context of " + std::to_string(length) + " tokens exceeds limit " + std::to_string(max_context));
}

}  // namespace

std::unique_ptr<DecodeSession> LanguageModel::open_session(TokenSpan context) const {
  return std::make_unique<ReplaySession>(*this, context);
}

std::size_t scored_count(std::size_t target_len, std::span<const std::uint8_t> loss_mask) {
  if (loss_mask.empty()) {
    if (target_len == 0) fail(ErrorCode::EmptyField, "target must be non-empty");
    return target_len;
  }
  if (loss_mask.size() != target_len) fail(ErrorCode::LengthMismatch, "loss mask length differs from target length");
  const auto n = static_cast<std::size_t>(std::count_if(loss_mask.begin(), loss_mask.end(), [](auto f) { return f != 0; }));
  if (n == 0) fail(ErrorCode::EmptyField, "loss mask excludes every target token");
  return n;
}

std::vector<LogProb> next_token_logprobs(const LanguageModel& model, TokenSpan context) {
  check_context(context.size(), model.max_context());
  return model.logprobs_after(context);
}

std::unique_ptr<DecodeSession> open_checked_session(const LanguageModel& model, TokenSpan context) {
  check_context(context.size(), model.max_context());
  return model.open_session(context);
}

LogProb sequence_logprob(const DecodeSession& session, TokenSpan continuation, std::size_t max_context) {
  if (continuation.empty()) return 0.0;
  check_context(session.length() + continuation.size() - 1, max_context);
  LogProb total = session.logprobs()[continuation[0]];
  if (continuation.size() == 1) return total;
  auto s = session.clone();
  for (std::size_t i = 1; i < continuation.size(); ++i) {
    s->push(continuation[i - 1]);
    total += s->logprobs()[continuation[i]];
  }
  return total;
}

LogProb sequence_logprob(const LanguageModel& model, TokenSpan context, TokenSpan continuation) {
  if (continuation.empty()) return 0.0;
  check_context(context.size() + continuation.size() - 1, model.max_context());
  auto session = model.open_session(context);
  return sequence_logprob(*session, continuation, model.max_context());
}

TokenId argmax_token(std::span<const LogProb> logprobs) {
  TokenId best = 0;
  for (TokenId i = 1; i < logprobs.size(); ++i)
    if (logprobs[i] > logprobs[best]) best = i;
  return best;
}

std::vector<TokenId> top_k_tokens(std::span<const LogProb> logprobs, std::size_t k) {
  std::vector<TokenId> ids(logprobs.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  k = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](TokenId a, TokenId b) {
                      return logprobs[a] != logprobs[b] ? logprobs[a] > logprobs[b] : a < b;
                    });
  ids.resize(k);
  return ids;
}

GreedyResult greedy_complete(const DecodeSession& session, const std::set<TokenId>& stop_tokens,
                             std::size_t max_len, std::size_t max_context) {
  if (max_len == 0) fail(ErrorCode::InvalidConfig, "greedy_complete needs max_len >= 1");
  GreedyResult out;
  auto s = session.clone();
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto& lp = s->logprobs();
    const TokenId next = argmax_token(lp);
    if (stop_tokens.count(next)) {
      out.stopped = true;
      return out;
    }
    out.tokens.push_back(next);
    out.logprob += lp[next];
    if (step + 1 == max_len && s->length() + 1 > max_context) break;
    check_context(s->length() + 1, max_context);
    s->push(next);
  }
  // A stop token right after the budget still counts as a clean stop.
  if (s->length() == session.length() + out.tokens.size() && stop_tokens.count(argmax_token(s->logprobs()))) {
    out.stopped = true;
    return out;
  }
  out.truncated = true;
  return out;
}

GreedyResult greedy_complete(const LanguageModel& model, TokenSpan context, const std::set<TokenId>& stop_tokens,
                             std::size_t max_len) {
  auto session = open_checked_session(model, context);
  return greedy_complete(*session, stop_tokens, max_len, model.max_context());
}

double log_sum_exp(std::span<const double> values) {
  double m = kNegInf;
  for (double v : values) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

void log_softmax_inplace(std::span<double> logits) {
  const double z = log_sum_exp(logits);
  for (double& v : logits) v -= z;
}

}  // namespace beliefrect
