#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "beliefrect/toy_models.hpp"
#include "beliefrect/transformer.hpp"
#include "beliefrect/unlearning.hpp"

using namespace beliefrect;

namespace {

template <class F>
ErrorCode error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::IoError;
}

Vocabulary world_vocab() {
  std::vector<std::string> words;
  for (const char* s : {"Does Q1 Q2 Q3 have gills? The concise fact to solve the problem is that . Therefore, the answer is",
                        "Yes No lives in water is a bird fish"})
    for (auto& w : split_words(s)) words.push_back(w);
  return Vocabulary(words);
}

Belief belief(const Vocabulary& v, const std::string& text, double score) {
  Belief b;
  b.tokens = v.encode(text);
  b.combined = score;
  return b;
}

RectificationPair pair_for(const Vocabulary& v, const std::string& name) {
  RectificationPair p;
  p.instance.id = name;
  p.instance.question = "Does " + name + " have gills?";
  p.instance.answer = "No";
  p.y_inc = "Yes";
  p.y_cor = "No";
  p.spurious = {belief(v, name + " lives in water", -1.0), belief(v, name + " is a fish", -2.0)};
  p.true_beliefs = {belief(v, name + " is a bird", -1.5)};
  return p;
}

std::size_t count_weight(const std::vector<std::vector<WeightedExample>>& batches, bool negative) {
  std::size_t n = 0;
  for (const auto& b : batches)
    for (const auto& e : b) n += negative ? e.weight < 0 : e.weight > 0;
  return n;
}

}  // namespace

TEST(AnswerSuffix, ScoresOnlyTheAnswerTokens) {
  const auto v = world_vocab();
  const auto s = encode_answer_suffix(PromptTemplate::standard(), "Yes", v);
  EXPECT_EQ(v.decode(s.tokens), ". Therefore, the answer is Yes.");
  ASSERT_EQ(s.answer_mask.size(), s.tokens.size());
  for (std::size_t i = 0; i < s.tokens.size(); ++i) EXPECT_EQ(s.answer_mask[i], s.tokens[i] == v.id("Yes")) << i;
}

TEST(BuildBatches, OnePairDefaultsGiveSuppressAndEnhance) {
  const auto v = world_vocab();
  const UnlearnConfig cfg;
  EXPECT_EQ(cfg.beta, 0.5);
  EXPECT_EQ(cfg.learning_rate, 5e-5);
  EXPECT_EQ(cfg.batch_size, 8u);
  EXPECT_EQ(cfg.top_k_beliefs, 1u);
  const auto batches = build_unlearn_batches({pair_for(v, "Q1")}, PromptTemplate::standard(), cfg, v);
  ASSERT_EQ(batches.size(), 1u);
  ASSERT_EQ(batches[0].size(), 2u);
  std::vector<double> weights{batches[0][0].weight, batches[0][1].weight};
  std::sort(weights.begin(), weights.end());
  EXPECT_EQ(weights, (std::vector<double>{-1.0, 0.5}));
  for (const auto& ex : batches[0]) {
    const std::string target = v.decode(ex.target);
    if (ex.weight < 0) {
      EXPECT_EQ(target, "Q1 lives in water. Therefore, the answer is Yes.");
    } else {
      EXPECT_EQ(target, "Q1 is a bird. Therefore, the answer is No.");
    }
    EXPECT_EQ(v.decode(ex.context), "Does Q1 have gills? The concise fact to solve the problem is that");
    // belief tokens and the answer are scored, template words are not
    std::string scored;
    for (std::size_t i = 0; i < ex.target.size(); ++i)
      if (ex.loss_mask[i]) scored += v.word(ex.target[i]) + " ";
    EXPECT_EQ(scored, ex.weight < 0 ? "Q1 lives in water Yes " : "Q1 is a bird No ");
  }
}

TEST(BuildBatches, ZeroBetaDropsEnhanceExamples) {
  const auto v = world_vocab();
  UnlearnConfig cfg;
  cfg.beta = 0.0;
  const auto batches = build_unlearn_batches({pair_for(v, "Q1")}, PromptTemplate::standard(), cfg, v);
  EXPECT_EQ(count_weight(batches, true), 1u);
  EXPECT_EQ(count_weight(batches, false), 0u);
}

TEST(BuildBatches, ThreePairsFitOneBatchDeterministically) {
  const auto v = world_vocab();
  const std::vector<RectificationPair> pairs{pair_for(v, "Q1"), pair_for(v, "Q2"), pair_for(v, "Q3")};
  UnlearnConfig cfg;
  cfg.seed = 17;
  const auto a = build_unlearn_batches(pairs, PromptTemplate::standard(), cfg, v);
  const auto b = build_unlearn_batches(pairs, PromptTemplate::standard(), cfg, v);
  ASSERT_EQ(a.size(), 1u);
  ASSERT_EQ(a[0].size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a[0][i].target, b[0][i].target);
    EXPECT_EQ(a[0][i].weight, b[0][i].weight);
  }
}

TEST(BuildBatches, MissingBeliefsRejected) {
  const auto v = world_vocab();
  auto p = pair_for(v, "Q1");
  p.true_beliefs.clear();
  EXPECT_EQ(error_of([&] { build_unlearn_batches({p}, PromptTemplate::standard(), UnlearnConfig{}, v); }),
            ErrorCode::MissingBeliefs);
}

TEST(BuildBatches, SuppressAndEnhanceCountsAlwaysBalance) {
  const auto v = world_vocab();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RectificationPair> pairs;
    const int n = 1 + static_cast<int>(rng() % 3);
    for (int i = 0; i < n; ++i) {
      auto p = pair_for(v, "Q" + std::to_string(1 + i));
      if (rng() % 2) p.true_beliefs.push_back(belief(v, p.instance.id + " is a fish", -3.0));
      pairs.push_back(p);
    }
    UnlearnConfig cfg;
    cfg.top_k_beliefs = 1 + rng() % 3;
    cfg.batch_size = 1 + rng() % 4;
    cfg.seed = rng();
    const auto batches = build_unlearn_batches(pairs, PromptTemplate::standard(), cfg, v);
    EXPECT_EQ(count_weight(batches, true), count_weight(batches, false));
    for (const auto& b : batches) EXPECT_LE(b.size(), cfg.batch_size);
  }
}

TEST(AnswerSr, TargetsAreAnswerSuffixesOnly) {
  const auto v = world_vocab();
  const auto batches = answer_sr_sets({pair_for(v, "Q1")}, PromptTemplate::standard(), UnlearnConfig{}, v);
  ASSERT_EQ(batches.size(), 1u);
  ASSERT_EQ(batches[0].size(), 2u);
  for (const auto& ex : batches[0]) {
    const auto suffix = encode_answer_suffix(PromptTemplate::standard(), ex.weight < 0 ? "Yes" : "No", v);
    EXPECT_EQ(ex.target, suffix.tokens);
    EXPECT_EQ(ex.weight, ex.weight < 0 ? -1.0 : 0.5);
  }
}

TEST(KnowledgeSr, CountsAndMissingEvidence) {
  const auto v = world_vocab();
  auto p = pair_for(v, "Q1");
  p.instance.evidence = {"Q1 is a bird."};
  const std::vector<EvidenceDoc> pool{{"d1", "Q1 lives in water.", std::nullopt}};
  const std::vector<AttributionScore> ranked{{"d1", AttributionMethod::GradDot, 3.0}};
  const auto sets = knowledge_sr_sets(p, pool, ranked, UnlearnConfig{}, v);
  ASSERT_EQ(sets.suppress.size(), 1u);
  ASSERT_EQ(sets.enhance.size(), 1u);
  EXPECT_EQ(sets.suppress[0].weight, -1.0);
  EXPECT_EQ(sets.enhance[0].weight, 0.5);
  EXPECT_TRUE(sets.suppress[0].context.empty());

  // evidence and top-scored document coincide: both signs present
  const std::vector<EvidenceDoc> same{{"d2", "Q1 is a bird.", std::nullopt}};
  const auto both = knowledge_sr_sets(p, same, {{"d2", AttributionMethod::GradDot, 1.0}}, UnlearnConfig{}, v);
  EXPECT_EQ(both.suppress[0].target, both.enhance[0].target);

  p.instance.evidence.clear();
  EXPECT_EQ(error_of([&] { knowledge_sr_sets(p, pool, ranked, UnlearnConfig{}, v); }), ErrorCode::EmptyPool);
}

// The optimized objective is -(E[L_s] - beta E[L_e]); compare its gradient
// with the one assembled from separate per-side gradients.
TEST(SignCorrectness, ObjectiveGradientMatchesUnlearningFormula) {
  TwoParamModel m(0.4, -0.9);
  const double beta = 0.5;
  const std::vector<WeightedExample> batch{{{m.x()}, {m.x(), m.y()}, -1.0, {}},
                                           {{m.y()}, {m.y(), m.x(), m.x()}, -1.0, {}},
                                           {{m.x(), m.y()}, {m.y()}, beta, {}}};
  std::vector<double> grad(2), losses;
  const double j = signed_objective(m, batch, grad, losses);

  std::vector<double> gs0(2), gs1(2), ge(2);
  const double l0 = m.accumulate_gradient(batch[0].context, batch[0].target, 1.0, gs0);
  const double l1 = m.accumulate_gradient(batch[1].context, batch[1].target, 1.0, gs1);
  const double le = m.accumulate_gradient(batch[2].context, batch[2].target, 1.0, ge);
  const double e_s = (l0 + l1) / 2.0, e_e = le;
  EXPECT_NEAR(j, -(e_s - beta * e_e), 1e-12);
  for (int i = 0; i < 2; ++i) {
    const double want = -((gs0[i] + gs1[i]) / 2.0 - beta * ge[i]);
    EXPECT_NEAR(grad[i], want, 1e-10);
  }
}

TEST(Rectify, ZeroEpochsReturnsIdenticalModel) {
  TwoParamModel m(0.2, 0.3);
  UnlearnConfig cfg;
  cfg.epochs = 0;
  const auto r = rectify_batches(m, {{{{m.x()}, {m.y()}, -1.0, {}}}}, cfg);
  ASSERT_TRUE(r.model);
  EXPECT_EQ(r.model->parameters()[0], 0.2);
  EXPECT_EQ(r.model->parameters()[1], 0.3);
  EXPECT_TRUE(r.log.records.empty());
}

TEST(Rectify, IsolatedReproducibleAndLogsEverySteps) {
  std::vector<std::string> words{"a", "b", "c", "d", "e"};
  TransformerConfig tc;
  tc.d_model = 16;
  tc.n_heads = 2;
  tc.d_ff = 32;
  tc.max_positions = 16;
  tc.seed = 2;
  TransformerLM m(Vocabulary(words), tc);
  const std::vector<double> before(m.parameters().begin(), m.parameters().end());
  std::vector<WeightedExample> suppress, enhance;
  for (TokenId t = 4; t < 9; ++t) {
    suppress.push_back({{t}, {static_cast<TokenId>(4 + (t + 1) % 5)}, -1.0, {}});
    enhance.push_back({{t}, {static_cast<TokenId>(4 + (t + 2) % 5)}, 0.5, {}});
  }
  UnlearnConfig cfg;
  cfg.batch_size = 3;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 9;
  const auto batches = make_batches(suppress, enhance, cfg);
  const auto a = rectify_batches(m, batches, cfg);
  const auto b = rectify_batches(m, batches, cfg);
  EXPECT_EQ(std::vector<double>(m.parameters().begin(), m.parameters().end()), before);
  EXPECT_EQ(std::vector<double>(a.model->parameters().begin(), a.model->parameters().end()),
            std::vector<double>(b.model->parameters().begin(), b.model->parameters().end()));
  EXPECT_NE(std::vector<double>(a.model->parameters().begin(), a.model->parameters().end()), before);
  EXPECT_EQ(a.log.records.size(), cfg.epochs * ((10 + cfg.batch_size - 1) / cfg.batch_size));
  EXPECT_TRUE(a.log.stop_reason.empty());
  std::ostringstream out;
  write_training_log(out, a.log);
  const std::string text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(a.log.records.size()));
}

TEST(Rectify, NonFiniteLossStopsWithPartialLog) {
  TwoParamModel m(0.2, 0.3);
  UnlearnConfig cfg;
  // <pad> has probability zero under this model, so its NLL is infinite.
  const auto r = rectify_batches(m, {{{{m.x()}, {Vocabulary::kPad}, -1.0, {}}}}, cfg);
  ASSERT_TRUE(r.error.has_value());
  EXPECT_EQ(*r.error, ErrorCode::NonFiniteLoss);
  EXPECT_FALSE(r.log.stop_reason.empty());
  EXPECT_EQ(r.model->parameters()[0], 0.2);
}

TEST(Rectify, FailedCheckStopsAndRollsBack) {
  TwoParamModel m(0.2, 0.3);
  UnlearnConfig cfg;
  cfg.epochs = 5;
  cfg.learning_rate = 1e-2;
  const std::vector<std::vector<WeightedExample>> batches{{{{m.x()}, {m.y()}, -1.0, {}}}};
  std::vector<double> after_one;
  const auto r = rectify_batches(m, batches, cfg, [&](const TrainableModel& cur, std::size_t step) -> std::optional<std::string> {
    if (step == 1) after_one.assign(cur.parameters().begin(), cur.parameters().end());
    if (step == 2) return "held-out accuracy dropped";
    return std::nullopt;
  });
  EXPECT_EQ(r.log.records.size(), 2u);
  EXPECT_EQ(r.log.stop_reason, "held-out accuracy dropped");
  EXPECT_EQ(r.kept_step, 1u);
  EXPECT_EQ(std::vector<double>(r.model->parameters().begin(), r.model->parameters().end()), after_one);

  // checked every step of a two-batch epoch; failing at once restores the input
  cfg.check_interval = 1;
  const std::vector<std::vector<WeightedExample>> two{batches[0], batches[0]};
  std::vector<std::size_t> seen;
  const auto r2 = rectify_batches(m, two, cfg, [&](const TrainableModel&, std::size_t step) -> std::optional<std::string> {
    seen.push_back(step);
    return "collapsed";
  });
  EXPECT_EQ(seen, std::vector<std::size_t>{1});
  EXPECT_EQ(r2.kept_step, 0u);
  EXPECT_EQ(r2.model->parameters()[0], 0.2);
  EXPECT_EQ(r2.model->parameters()[1], 0.3);
}

TEST(BuildBatches, EnhanceOnlyPairsAddEnhanceExamples) {
  const auto v = world_vocab();
  auto extra = pair_for(v, "Q2");
  extra.spurious.clear();
  extra.y_inc.clear();
  UnlearnConfig cfg;
  cfg.top_k_beliefs = 2;  // pair Q1 has 2 spurious but 1 true belief
  const auto batches = build_unlearn_batches({pair_for(v, "Q1")}, PromptTemplate::standard(), cfg, v, {extra});
  EXPECT_EQ(count_weight(batches, true), 2u);
  EXPECT_EQ(count_weight(batches, false), 2u);
  bool has_extra = false;
  for (const auto& b : batches)
    for (const auto& e : b) has_extra |= v.decode(e.target) == "Q2 is a bird. Therefore, the answer is No.";
  EXPECT_TRUE(has_extra);
  extra.true_beliefs.clear();
  EXPECT_EQ(error_of([&] { build_unlearn_batches({pair_for(v, "Q1")}, PromptTemplate::standard(), cfg, v, {extra}); }),
            ErrorCode::MissingBeliefs);
  const auto ans = answer_sr_sets({pair_for(v, "Q1")}, PromptTemplate::standard(), UnlearnConfig{}, v, {extra});
  EXPECT_EQ(count_weight(ans, true), 1u);
  EXPECT_EQ(count_weight(ans, false), 1u);
}

TEST(UnlearnConfig, Validation) {
  UnlearnConfig cfg;
  cfg.beta = -0.1;
  EXPECT_EQ(error_of([&] { cfg.validate(); }), ErrorCode::InvalidConfig);
  cfg = UnlearnConfig{};
  cfg.learning_rate = 0.0;
  EXPECT_EQ(error_of([&] { cfg.validate(); }), ErrorCode::InvalidConfig);
  cfg = UnlearnConfig{};
  cfg.batch_size = 0;
  EXPECT_EQ(error_of([&] { cfg.validate(); }), ErrorCode::InvalidConfig);
}
