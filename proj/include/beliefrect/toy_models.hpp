#pragma once

// Small hand-specified models used as oracles and fixtures. None of them is
// meant for experiments; the reference network lives in transformer.hpp.

#include <array>
#include <functional>
#include <map>

#include "beliefrect/language_model.hpp"

namespace beliefrect {

/// Every token equally likely, regardless of context.
class UniformModel final : public LanguageModel {
 public:
  explicit UniformModel(Vocabulary vocab, std::size_t max_context = 64);
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t max_context() const override { return max_context_; }
  std::vector<LogProb> logprobs_after(TokenSpan context) const override;

 private:
  Vocabulary vocab_;
  std::size_t max_context_;
};

/// Point-mass model: after token a the next token is successor(a) with
/// probability one. Tokens without a successor emit <eos>; the empty
/// context emits `start`.
class ChainModel final : public LanguageModel {
 public:
  ChainModel(Vocabulary vocab, std::map<TokenId, TokenId> successor, TokenId start,
             std::size_t max_context = 64);
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t max_context() const override { return max_context_; }
  std::vector<LogProb> logprobs_after(TokenSpan context) const override;

 private:
  Vocabulary vocab_;
  std::map<TokenId, TokenId> successor_;
  TokenId start_;
  std::size_t max_context_;
};

/// Arbitrary conditional table given as a callback returning unnormalized
/// log-weights (kNegInf allowed); the model normalizes them.
class TableModel final : public LanguageModel {
 public:
  using Table = std::function<std::vector<double>(TokenSpan context)>;
  TableModel(Vocabulary vocab, Table table, std::size_t max_context = 64);
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t max_context() const override { return max_context_; }
  std::vector<LogProb> logprobs_after(TokenSpan context) const override;

 private:
  Vocabulary vocab_;
  Table table_;
  std::size_t max_context_;
};

/// Two-parameter trainable model over {x, y, <eos}. With f the fraction of
/// x tokens in the context:
///   logit(x) = p0 + p1 * f,  logit(y) = 0.5 * p0 * p1,  logit(<eos>) = 0.
class TwoParamModel final : public TrainableModel {
 public:
  TwoParamModel(double p0, double p1);

  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t max_context() const override { return 64; }
  std::vector<LogProb> logprobs_after(TokenSpan context) const override;

  std::span<double> parameters() override { return params_; }
  std::span<const double> parameters() const override { return params_; }
  double accumulate_gradient(TokenSpan context, TokenSpan target, double scale, std::span<double> grad,
                             std::span<const std::uint8_t> loss_mask = {}) const override;
  std::unique_ptr<TrainableModel> clone() const override { return std::make_unique<TwoParamModel>(*this); }

  TokenId x() const { return vocab_.id("x"); }
  TokenId y() const { return vocab_.id("y"); }

 private:
  Vocabulary vocab_;
  std::array<double, 2> params_;
};

}  // namespace beliefrect
