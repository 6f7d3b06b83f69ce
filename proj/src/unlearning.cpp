#include "beliefrect/unlearning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>

namespace beliefrect {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<Belief> top_beliefs(std::vector<Belief> beliefs, std::size_t k) {
  std::stable_sort(beliefs.begin(), beliefs.end(), [](const Belief& a, const Belief& b) {
    return a.combined != b.combined ? a.combined > b.combined : a.tokens.tokens < b.tokens.tokens;
  });
  if (beliefs.size() > k) beliefs.resize(k);
  return beliefs;
}

WeightedExample suffix_example(const std::vector<TokenId>& x_pre, const Belief* belief, const AnswerSuffix& suf,
                               double weight) {
  WeightedExample ex;
  ex.context = x_pre;
  ex.weight = weight;
  if (belief) {
    ex.target = belief->tokens.tokens;
    ex.loss_mask.assign(ex.target.size(), 1);
  }
  ex.target.insert(ex.target.end(), suf.tokens.begin(), suf.tokens.end());
  ex.loss_mask.insert(ex.loss_mask.end(), suf.answer_mask.begin(), suf.answer_mask.end());
  return ex;
}

void keep_random_subset(std::vector<WeightedExample>& v, std::size_t n, std::mt19937_64& rng) {
  if (v.size() <= n) return;
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<WeightedExample> kept;
  kept.reserve(n);
  for (auto i : idx) kept.push_back(std::move(v[i]));
  v = std::move(kept);
}

double mean_or_nan(double sum, std::size_t n) { return n ? sum / static_cast<double>(n) : kNaN; }

}  // namespace

void UnlearnConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) fail(ErrorCode::InvalidConfig, "beta must be non-negative");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    fail(ErrorCode::InvalidConfig, "learning_rate must be positive");
  if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  if (top_k_beliefs < 1) fail(ErrorCode::InvalidConfig, "top_k_beliefs must be >= 1");
  if (suppress_nll_ceiling < 0.0) fail(ErrorCode::InvalidConfig, "suppress_nll_ceiling must be >= 0");
}

AnswerSuffix encode_answer_suffix(const PromptTemplate& tmpl, std::string_view answer, const Vocabulary& vocab) {
  const std::string full = tmpl.render_suffix(answer);
  const auto slot = tmpl.suffix_pattern.find(PromptTemplate::kOutput);
  const auto before = vocab.encode(tmpl.suffix_pattern.substr(0, slot)).tokens;
  const auto middle = vocab.encode(answer).tokens;
  const auto after = vocab.encode(tmpl.suffix_pattern.substr(slot + PromptTemplate::kOutput.size())).tokens;
  AnswerSuffix out;
  out.tokens = vocab.encode(full).tokens;
  std::vector<TokenId> pieces(before);
  pieces.insert(pieces.end(), middle.begin(), middle.end());
  pieces.insert(pieces.end(), after.begin(), after.end());
  if (pieces != out.tokens || middle.empty()) {
    // The answer merged with template text; score the whole suffix instead.
    out.answer_mask.assign(out.tokens.size(), 1);
    return out;
  }
  out.answer_mask.assign(out.tokens.size(), 0);
  std::fill_n(out.answer_mask.begin() + static_cast<std::ptrdiff_t>(before.size()), middle.size(), 1);
  return out;
}

std::vector<std::vector<WeightedExample>> make_batches(std::vector<WeightedExample> suppress,
                                                       std::vector<WeightedExample> enhance,
                                                       const UnlearnConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::erase_if(enhance, [](const WeightedExample& e) { return e.weight == 0.0; });
  if (config.beta == 0.0) enhance.clear();
  if (!enhance.empty()) {
    const std::size_t n = std::min(suppress.size(), enhance.size());
    keep_random_subset(suppress, n, rng);
    keep_random_subset(enhance, n, rng);
  }
  std::vector<WeightedExample> all = std::move(suppress);
  for (auto& e : enhance) all.push_back(std::move(e));
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::vector<WeightedExample>> batches;
  for (std::size_t i = 0; i < all.size(); i += config.batch_size) {
    const auto end = std::min(all.size(), i + config.batch_size);
    batches.emplace_back(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(i)),
                         std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(end)));
  }
  return batches;
}

std::vector<std::vector<WeightedExample>> build_unlearn_batches(const std::vector<RectificationPair>& pairs,
                                                                const PromptTemplate& tmpl,
                                                                const UnlearnConfig& config, const Vocabulary& vocab,
                                                                const std::vector<RectificationPair>& enhance_only) {
  config.validate();
  std::vector<WeightedExample> suppress, enhance;
  for (const auto& p : pairs) {
    if (p.spurious.empty() || p.true_beliefs.empty())
      fail(ErrorCode::MissingBeliefs, "pair " + p.instance.id + " lacks beliefs on one side");
    const auto x_pre = build_query(render_question(p.instance), p.y_inc, tmpl, vocab).x_pre.tokens;
    const auto inc = encode_answer_suffix(tmpl, p.y_inc, vocab);
    const auto cor = encode_answer_suffix(tmpl, p.y_cor, vocab);
    for (const auto& b : top_beliefs(p.spurious, config.top_k_beliefs))
      suppress.push_back(suffix_example(x_pre, &b, inc, -1.0));
    for (const auto& b : top_beliefs(p.true_beliefs, config.top_k_beliefs))
      enhance.push_back(suffix_example(x_pre, &b, cor, config.beta));
  }
  for (const auto& p : enhance_only) {
    if (p.true_beliefs.empty()) fail(ErrorCode::MissingBeliefs, "pair " + p.instance.id + " has no true beliefs");
    const auto x_pre = build_query(render_question(p.instance), p.y_cor, tmpl, vocab).x_pre.tokens;
    const auto cor = encode_answer_suffix(tmpl, p.y_cor, vocab);
    for (const auto& b : top_beliefs(p.true_beliefs, config.top_k_beliefs))
      enhance.push_back(suffix_example(x_pre, &b, cor, config.beta));
  }
  return make_batches(std::move(suppress), std::move(enhance), config);
}

std::vector<std::vector<WeightedExample>> answer_sr_sets(const std::vector<RectificationPair>& pairs,
                                                         const PromptTemplate& tmpl, const UnlearnConfig& config,
                                                         const Vocabulary& vocab,
                                                         const std::vector<RectificationPair>& enhance_only) {
  config.validate();
  std::vector<WeightedExample> suppress, enhance;
  for (const auto& p : pairs) {
    const auto x_pre = build_query(render_question(p.instance), p.y_inc, tmpl, vocab).x_pre.tokens;
    suppress.push_back(suffix_example(x_pre, nullptr, encode_answer_suffix(tmpl, p.y_inc, vocab), -1.0));
    enhance.push_back(suffix_example(x_pre, nullptr, encode_answer_suffix(tmpl, p.y_cor, vocab), config.beta));
  }
  for (const auto& p : enhance_only) {
    const auto x_pre = build_query(render_question(p.instance), p.y_cor, tmpl, vocab).x_pre.tokens;
    enhance.push_back(suffix_example(x_pre, nullptr, encode_answer_suffix(tmpl, p.y_cor, vocab), config.beta));
  }
  return make_batches(std::move(suppress), std::move(enhance), config);
}

KnowledgeSets knowledge_sr_sets(const RectificationPair& pair, const std::vector<EvidenceDoc>& pool,
                                const std::vector<AttributionScore>& ranked, const UnlearnConfig& config,
                                const Vocabulary& vocab) {
  config.validate();
  if (pool.empty() || ranked.empty()) fail(ErrorCode::EmptyPool, "no attributed documents for " + pair.instance.id);
  if (pair.instance.evidence.empty()) fail(ErrorCode::EmptyPool, "instance " + pair.instance.id + " has no evidence");
  std::map<std::string, const EvidenceDoc*> by_id;
  for (const auto& d : pool) by_id[d.id] = &d;
  KnowledgeSets out;
  for (std::size_t i = 0; i < ranked.size() && i < config.top_k_beliefs; ++i) {
    const auto it = by_id.find(ranked[i].doc_id);
    if (it == by_id.end()) fail(ErrorCode::EmptyPool, "attributed document " + ranked[i].doc_id + " not in pool");
    out.suppress.push_back({{}, vocab.encode(it->second->text).tokens, -1.0, {}});
  }
  for (const auto& text : pair.instance.evidence)
    out.enhance.push_back({{}, vocab.encode(text).tokens, config.beta, {}});
  return out;
}

void write_training_log(std::ostream& out, const TrainingLog& log) {
  char buf[128];
  for (const auto& r : log.records) {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g\n", r.step, r.suppress_nll, r.enhance_nll, r.objective);
    out << buf;
  }
  if (!log.stop_reason.empty()) out << "# stopped: " << log.stop_reason << '\n';
}

RectifyResult rectify_batches(const TrainableModel& model, const std::vector<std::vector<WeightedExample>>& batches,
                              const UnlearnConfig& config, const ProgressCheck& check) {
  config.validate();
  RectifyResult result;
  result.model = model.clone();
  if (config.epochs == 0) return result;
  if (batches.empty()) fail(ErrorCode::EmptyInput, "no training batches");

  TrainableModel& m = *result.model;
  AdamOptimizer opt(m.parameters().size());
  std::vector<double> grad(m.parameters().size());
  std::vector<double> losses;
  std::vector<double> last_good;
  if (check) last_good.assign(m.parameters().begin(), m.parameters().end());
  std::size_t step = 0, good_step = 0;
  // Runs the progress check; on failure restores the last passing state.
  auto checkpoint_ok = [&]() {
    if (auto why = check(m, step)) {
      std::copy(last_good.begin(), last_good.end(), m.parameters().begin());
      result.log.stop_reason = *why;
      result.kept_step = good_step;
      return false;
    }
    last_good.assign(m.parameters().begin(), m.parameters().end());
    good_step = step;
    return true;
  };
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& batch : batches) {
      TrainingRecord rec;
      rec.step = step + 1;
      try {
        rec.objective = signed_objective(m, batch, grad, losses);
        for (double g : grad)
          if (!std::isfinite(g)) fail(ErrorCode::NonFiniteLoss, "non-finite gradient");
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFiniteLoss) throw;
        result.error = e.code();
        result.log.stop_reason = e.what();
        return result;
      }
      double s_sum = 0.0, e_sum = 0.0;
      std::size_t s_n = 0, e_n = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].weight < 0) s_sum += losses[i], ++s_n;
        else e_sum += losses[i], ++e_n;
      }
      rec.suppress_nll = mean_or_nan(s_sum, s_n);
      rec.enhance_nll = mean_or_nan(e_sum, e_n);
      result.log.records.push_back(rec);
      if (config.suppress_nll_ceiling > 0.0 && s_n > 0 && rec.suppress_nll > config.suppress_nll_ceiling) {
        result.log.stop_reason = "suppress NLL above ceiling at step " + std::to_string(rec.step);
        return result;
      }
      opt.step(m.parameters(), grad, config.learning_rate);
      result.kept_step = ++step;
      if (check && config.check_interval > 0 && step % config.check_interval == 0 && !checkpoint_ok()) return result;
    }
    if (check && config.check_interval == 0 && !checkpoint_ok()) return result;
  }
  return result;
}

RectifyResult rectify(const TrainableModel& model, const std::vector<RectificationPair>& pairs,
                      const PromptTemplate& tmpl, const UnlearnConfig& config, const ProgressCheck& check) {
  if (pairs.empty()) fail(ErrorCode::EmptyInput, "no rectification pairs");
  return rectify_batches(model, build_unlearn_batches(pairs, tmpl, config, model.vocabulary()), config, check);
}

}  // namespace beliefrect
