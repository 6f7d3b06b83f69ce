#include "beliefrect/toy_models.hpp"

#include <cmath>

#include "beliefrect/error.hpp"

namespace beliefrect {

UniformModel::UniformModel(Vocabulary vocab, std::size_t max_context)
    : vocab_(std::move(vocab)), max_context_(max_context) {}

std::vector<LogProb> UniformModel::logprobs_after(TokenSpan) const {
  return std::vector<LogProb>(vocab_.size(), -std::log(static_cast<double>(vocab_.size())));
}

ChainModel::ChainModel(Vocabulary vocab, std::map<TokenId, TokenId> successor, TokenId start,
                       std::size_t max_context)
    : vocab_(std::move(vocab)), successor_(std::move(successor)), start_(start), max_context_(max_context) {}

std::vector<LogProb> ChainModel::logprobs_after(TokenSpan context) const {
  std::vector<LogProb> lp(vocab_.size(), kNegInf);
  TokenId next = start_;
  if (!context.empty()) {
    auto it = successor_.find(context.back());
    next = it == successor_.end() ? Vocabulary::kEos : it->second;
  }
  lp[next] = 0.0;
  return lp;
}

TableModel::TableModel(Vocabulary vocab, Table table, std::size_t max_context)
    : vocab_(std::move(vocab)), table_(std::move(table)), max_context_(max_context) {}

std::vector<LogProb> TableModel::logprobs_after(TokenSpan context) const {
  auto lp = table_(context);
  if (lp.size() != vocab_.size()) fail(ErrorCode::InvalidConfig, "table row has wrong width");
  log_softmax_inplace(lp);
  return lp;
}

namespace {

Vocabulary two_param_vocab() {
  const std::vector<std::string> words{"x", "y"};
  return Vocabulary(words);
}

}  // namespace

TwoParamModel::TwoParamModel(double p0, double p1) : vocab_(two_param_vocab()), params_{p0, p1} {}

std::vector<LogProb> TwoParamModel::logprobs_after(TokenSpan context) const {
  double nx = 0;
  for (auto t : context) nx += (t == x());
  const double f = context.empty() ? 0.0 : nx / static_cast<double>(context.size());
  std::vector<LogProb> lp(vocab_.size(), kNegInf);
  lp[x()] = params_[0] + params_[1] * f;
  lp[y()] = 0.5 * params_[0] * params_[1];
  lp[Vocabulary::kEos] = 0.0;
  log_softmax_inplace(lp);
  return lp;
}

double TwoParamModel::accumulate_gradient(TokenSpan context, TokenSpan target, double scale, std::span<double> grad,
                                          std::span<const std::uint8_t> loss_mask) const {
  if (target.empty()) fail(ErrorCode::EmptyField, "target must be non-empty");
  const double n = static_cast<double>(scored_count(target.size(), loss_mask));
  std::vector<TokenId> ctx(context.begin(), context.end());
  double nll = 0.0;
  std::array<double, 2> g{0.0, 0.0};
  for (std::size_t i = 0; i < target.size(); ++i) {
    const TokenId t = target[i];
    if (!loss_mask.empty() && !loss_mask[i]) {
      ctx.push_back(t);
      continue;
    }
    double nx = 0;
    for (auto c : ctx) nx += (c == x());
    const double f = ctx.empty() ? 0.0 : nx / static_cast<double>(ctx.size());
    const auto lp = logprobs_after(ctx);
    nll -= lp[t];
    // d(-log p_t)/d logit_j = p_j - [j == t]
    const double dx = std::exp(lp[x()]) - (t == x());
    const double dy = std::exp(lp[y()]) - (t == y());
    g[0] += dx + dy * 0.5 * params_[1];
    g[1] += dx * f + dy * 0.5 * params_[0];
    ctx.push_back(t);
  }
  grad[0] += scale * g[0] / n;
  grad[1] += scale * g[1] / n;
  return nll / n;
}

}  // namespace beliefrect
