#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "beliefrect/checkpoint.hpp"
#include "beliefrect/error.hpp"
#include "beliefrect/optimizer.hpp"
#include "beliefrect/toy_models.hpp"
#include "beliefrect/transformer.hpp"

using namespace beliefrect;

namespace {

Vocabulary words_vocab(std::initializer_list<std::string> ws) {
  std::vector<std::string> v(ws);
  return Vocabulary(v);
}

TransformerLM tiny_transformer(std::uint64_t seed, std::size_t vocab_words = 12) {
  std::vector<std::string> ws;
  for (std::size_t i = 0; i < vocab_words; ++i) ws.push_back("w" + std::to_string(i));
  TransformerConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_positions = 24;
  cfg.seed = seed;
  return TransformerLM(Vocabulary(ws), cfg);
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> d(Vocabulary::kReserved, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

// Independent oracle: stepwise sum over full-recompute next-token calls.
double stepwise_logprob(const LanguageModel& m, std::vector<TokenId> ctx, const std::vector<TokenId>& cont) {
  double total = 0.0;
  for (auto t : cont) {
    total += next_token_logprobs(m, ctx)[t];
    ctx.push_back(t);
  }
  return total;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-7}); }

}  // namespace

TEST(Tokenizer, SplitsPunctuationAndRoundTripsCanonicalText) {
  EXPECT_EQ(split_words("Do swallows have gills?"), (std::vector<std::string>{"Do", "swallows", "have", "gills", "?"}));
  const std::string text = "(A) a koala bear, (B) a horned viper. Therefore, the answer is Yes.";
  const auto words = split_words(text);
  EXPECT_EQ(join_words(words), text);
}

TEST(Tokenizer, RoundTripProperty) {
  const std::vector<std::string> pool{"alpha", "beta", "gamma", ".", ",", "?", "(", ")", "x-ray", "it's"};
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::string> ws;
    const auto n = rng() % 12;
    for (std::size_t i = 0; i < n; ++i) ws.push_back(pool[rng() % pool.size()]);
    // canonical text is whatever join_words produces; tokenizing it must give the words back
    // unless two word tokens touch, which join_words never produces
    const auto text = join_words(ws);
    const auto vocab = Vocabulary::from_texts(std::vector<std::string>{text});
    EXPECT_EQ(vocab.decode(vocab.encode(text).tokens), text);
  }
}

TEST(Vocabulary, ReservedIdsAndUnknownWords) {
  const auto v = words_vocab({"a", "b"});
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.word(Vocabulary::kBos), "<bos>");
  EXPECT_EQ(v.id("zzz"), Vocabulary::kUnk);
  EXPECT_NE(v.hash(), words_vocab({"b", "a"}).hash());
}

TEST(NextTokenLogprobs, UniformModel) {
  UniformModel m{Vocabulary{}};
  ASSERT_EQ(m.vocabulary().size(), 4u);
  for (double lp : next_token_logprobs(m, std::vector<TokenId>{1, 2, 3})) EXPECT_NEAR(lp, std::log(0.25), 1e-12);
}

TEST(NextTokenLogprobs, ChainModelIsPointMass) {
  auto v = words_vocab({"a", "b", "c"});
  const TokenId a = v.id("a"), b = v.id("b"), c = v.id("c");
  ChainModel m(v, {{a, b}, {b, c}}, a);
  const auto lp = next_token_logprobs(m, std::vector<TokenId>{a});
  for (TokenId t = 0; t < lp.size(); ++t) {
    if (t == b) EXPECT_EQ(lp[t], 0.0);
    else EXPECT_EQ(lp[t], kNegInf);
  }
}

TEST(NextTokenLogprobs, TrainedTransformerIsNormalized) {
  auto m = tiny_transformer(3);
  std::mt19937_64 rng(3);
  std::vector<std::vector<TokenId>> docs;
  for (int i = 0; i < 20; ++i) docs.push_back(random_tokens(rng, 8, m.vocabulary().size()));
  FitConfig fc;
  fc.epochs = 3;
  fc.batch_size = 4;
  fit(m, docs, fc);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ctx = random_tokens(rng, rng() % 20, m.vocabulary().size());
    const auto lp = next_token_logprobs(m, ctx);
    double sum = 0.0;
    for (double v : lp) sum += std::exp(v);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(NextTokenLogprobs, ContextTooLong) {
  auto m = tiny_transformer(1);
  std::vector<TokenId> ctx(m.max_context() + 1, Vocabulary::kReserved);
  try {
    next_token_logprobs(m, ctx);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ContextTooLong);
  }
  ctx.pop_back();
  EXPECT_NO_THROW(next_token_logprobs(m, ctx));
}

TEST(SequenceLogprob, EmptyContinuationIsZero) {
  auto m = tiny_transformer(1);
  EXPECT_EQ(sequence_logprob(m, std::vector<TokenId>{5}, std::vector<TokenId>{}), 0.0);
}

TEST(SequenceLogprob, UniformTwoTokens) {
  UniformModel m{Vocabulary{}};
  EXPECT_NEAR(sequence_logprob(m, std::vector<TokenId>{}, std::vector<TokenId>{1, 2}), 2 * std::log(0.25), 1e-12);
}

TEST(SequenceLogprob, MatchesStepwiseOracleOnRandomModels) {
  std::mt19937_64 rng(11);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto m = tiny_transformer(seed);
    const auto ctx = random_tokens(rng, 4, m.vocabulary().size());
    const auto cont = random_tokens(rng, 5, m.vocabulary().size());
    EXPECT_NEAR(sequence_logprob(m, ctx, cont), stepwise_logprob(m, ctx, cont), 1e-9);
  }
}

TEST(SequenceLogprob, ChainRuleProperty) {
  std::mt19937_64 rng(5);
  auto m = tiny_transformer(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto c = random_tokens(rng, rng() % 5, m.vocabulary().size());
    auto u = random_tokens(rng, rng() % 5, m.vocabulary().size());
    auto v = random_tokens(rng, rng() % 5, m.vocabulary().size());
    auto uv = u;
    uv.insert(uv.end(), v.begin(), v.end());
    auto cu = c;
    cu.insert(cu.end(), u.begin(), u.end());
    EXPECT_NEAR(sequence_logprob(m, c, uv), sequence_logprob(m, c, u) + sequence_logprob(m, cu, v), 1e-9);
  }
}

TEST(SequenceLogprob, DeterministicAcrossCalls) {
  auto m = tiny_transformer(4);
  auto m2 = tiny_transformer(4);
  const std::vector<TokenId> ctx{4, 5, 6}, cont{7, 8};
  const double a = sequence_logprob(m, ctx, cont);
  EXPECT_EQ(a, sequence_logprob(m, ctx, cont));
  EXPECT_EQ(a, sequence_logprob(m2, ctx, cont));
  EXPECT_EQ(next_token_logprobs(m, ctx), next_token_logprobs(m2, ctx));
}

TEST(DecodeSession, KvCacheAgreesWithFullForward) {
  std::mt19937_64 rng(2);
  auto m = tiny_transformer(2);
  const auto ctx = random_tokens(rng, 15, m.vocabulary().size());
  auto s = m.open_session({});
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    const auto full = next_token_logprobs(m, std::span(ctx).first(i));
    for (std::size_t t = 0; t < full.size(); ++t) EXPECT_NEAR(s->logprobs()[t], full[t], 1e-10);
    s->push(ctx[i]);
  }
}

TEST(GreedyComplete, ForcedChain) {
  auto v = words_vocab({"a", "b", "c"});
  const TokenId a = v.id("a"), b = v.id("b"), c = v.id("c");
  ChainModel m(v, {{a, b}, {b, c}}, a);  // c -> <eos>
  const auto r = greedy_complete(m, std::vector<TokenId>{a}, {Vocabulary::kEos}, 10);
  EXPECT_EQ(r.tokens, (std::vector<TokenId>{b, c}));
  EXPECT_TRUE(r.stopped);
  EXPECT_FALSE(r.truncated);
  EXPECT_EQ(r.logprob, 0.0);
}

TEST(GreedyComplete, TiesGoToLowestId) {
  auto v = words_vocab({"a", "b"});
  const TokenId a = v.id("a"), b = v.id("b");
  TableModel m(v, [&](TokenSpan) {
    std::vector<double> w(v.size(), kNegInf);
    w[a] = 0.0;
    w[b] = 0.0;
    return w;
  });
  const auto r = greedy_complete(m, std::vector<TokenId>{}, {Vocabulary::kEos}, 4);
  EXPECT_EQ(r.tokens, (std::vector<TokenId>(4, a)));
}

TEST(GreedyComplete, BudgetExhaustionSetsTruncation) {
  auto v = words_vocab({"a"});
  const TokenId a = v.id("a");
  ChainModel m(v, {{a, a}}, a);
  const auto r = greedy_complete(m, std::vector<TokenId>{}, {Vocabulary::kEos}, 3);
  EXPECT_EQ(r.tokens.size(), 3u);
  EXPECT_TRUE(r.truncated);
  EXPECT_FALSE(r.stopped);
}

// Central finite differences of the per-example NLL.
TEST(Gradient, TwoParamModelMatchesFiniteDifferences) {
  TwoParamModel m(0.3, -0.7);
  const std::vector<TokenId> ctx{m.x(), m.y()}, tgt{m.x(), m.x(), m.y(), Vocabulary::kEos};
  std::vector<double> grad(2, 0.0);
  m.accumulate_gradient(ctx, tgt, 1.0, grad);
  for (std::size_t i = 0; i < 2; ++i) {
    const double h = 1e-6;
    TwoParamModel plus = m, minus = m;
    plus.parameters()[i] += h;
    minus.parameters()[i] -= h;
    std::vector<double> scratch(2);
    const double fd = (plus.accumulate_gradient(ctx, tgt, 0.0, scratch) - minus.accumulate_gradient(ctx, tgt, 0.0, scratch)) / (2 * h);
    EXPECT_LT(relative_error(grad[i], fd), 1e-4) << "param " << i;
  }
}

TEST(Gradient, TransformerMatchesFiniteDifferences) {
  auto m = tiny_transformer(21);
  std::mt19937_64 rng(21);
  const auto ctx = random_tokens(rng, 5, m.vocabulary().size());
  const auto tgt = random_tokens(rng, 6, m.vocabulary().size());
  std::vector<double> grad(m.parameters().size(), 0.0);
  m.accumulate_gradient(ctx, tgt, 1.0, grad);
  std::vector<double> scratch(grad.size());
  std::uniform_int_distribution<std::size_t> pick(0, grad.size() - 1);
  for (int k = 0; k < 40; ++k) {
    const std::size_t i = pick(rng);
    const double h = 1e-5;
    const double orig = m.parameters()[i];
    m.parameters()[i] = orig + h;
    const double up = m.accumulate_gradient(ctx, tgt, 0.0, scratch);
    m.parameters()[i] = orig - h;
    const double down = m.accumulate_gradient(ctx, tgt, 0.0, scratch);
    m.parameters()[i] = orig;
    EXPECT_LT(relative_error(grad[i], (up - down) / (2 * h)), 1e-4) << "coordinate " << i;
  }
}

// Masked loss: value from the stepwise oracle over scored tokens only,
// gradient from finite differences of that oracle.
TEST(Gradient, MaskedLossMatchesStepwiseOracleAndFiniteDifferences) {
  auto m = tiny_transformer(33);
  std::mt19937_64 rng(33);
  const auto ctx = random_tokens(rng, 4, m.vocabulary().size());
  const auto tgt = random_tokens(rng, 6, m.vocabulary().size());
  const std::vector<std::uint8_t> mask{1, 0, 0, 1, 1, 0};
  auto masked_nll = [&](const LanguageModel& lm) {
    std::vector<TokenId> c = ctx;
    double total = 0.0;
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      if (mask[i]) total -= next_token_logprobs(lm, c)[tgt[i]];
      c.push_back(tgt[i]);
    }
    return total / 3.0;
  };
  std::vector<double> grad(m.parameters().size(), 0.0);
  EXPECT_NEAR(m.accumulate_gradient(ctx, tgt, 1.0, grad, mask), masked_nll(m), 1e-10);
  std::uniform_int_distribution<std::size_t> pick(0, grad.size() - 1);
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = pick(rng);
    const double h = 1e-5, orig = m.parameters()[i];
    m.parameters()[i] = orig + h;
    const double up = masked_nll(m);
    m.parameters()[i] = orig - h;
    const double down = masked_nll(m);
    m.parameters()[i] = orig;
    EXPECT_LT(relative_error(grad[i], (up - down) / (2 * h)), 1e-4) << "coordinate " << i;
  }
  std::vector<double> scratch(grad.size());
  const std::vector<std::uint8_t> none(6, 0), short_mask{1, 1};
  EXPECT_THROW(m.accumulate_gradient(ctx, tgt, 1.0, scratch, none), Error);
  EXPECT_THROW(m.accumulate_gradient(ctx, tgt, 1.0, scratch, short_mask), Error);

  TwoParamModel tp(0.4, 1.1);
  const std::vector<TokenId> tctx{tp.x()}, ttgt{tp.y(), tp.x(), tp.y()};
  const std::vector<std::uint8_t> tmask{0, 1, 1};
  std::vector<double> tg(2, 0.0);
  std::vector<TokenId> c = tctx;
  c.push_back(tp.y());
  const double want = -(sequence_logprob(tp, c, std::vector<TokenId>{tp.x(), tp.y()})) / 2.0;
  EXPECT_NEAR(tp.accumulate_gradient(tctx, ttgt, 1.0, tg, tmask), want, 1e-12);
}

TEST(TrainStep, PositiveWeightDescendsNegativeWeightAscends) {
  for (double w : {1.0, -1.0}) {
    auto m = tiny_transformer(8);
    const std::vector<TokenId> ctx{4, 5}, tgt{6, 7, 8};
    std::vector<double> scratch(m.parameters().size());
    const double before = m.accumulate_gradient(ctx, tgt, 0.0, scratch);
    AdamOptimizer opt(m.parameters().size());
    const std::vector<WeightedExample> batch{{ctx, tgt, w}};
    const auto r = train_step(m, opt, batch, 1e-4);
    EXPECT_DOUBLE_EQ(r.losses[0], before);
    const double after = m.accumulate_gradient(ctx, tgt, 0.0, scratch);
    if (w > 0) EXPECT_LT(after, before);
    else EXPECT_GT(after, before);
  }
}

TEST(TrainStep, NonFiniteLossAbortsWithoutUpdate) {
  TwoParamModel m(0.1, 0.2);
  AdamOptimizer opt(2);
  const std::vector<WeightedExample> batch{{{}, {Vocabulary::kPad}, 1.0}};
  try {
    train_step(m, opt, batch, 1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteLoss);
  }
  EXPECT_EQ(m.parameters()[0], 0.1);
  EXPECT_EQ(m.parameters()[1], 0.2);
}

TEST(TrainStep, RejectsBadInputs) {
  TwoParamModel m(0.1, 0.2);
  AdamOptimizer opt(2);
  const std::vector<WeightedExample> empty;
  EXPECT_THROW(train_step(m, opt, empty, 1e-3), Error);
  const std::vector<WeightedExample> zero_weight{{{}, {m.x()}, 0.0}};
  EXPECT_THROW(train_step(m, opt, zero_weight, 1e-3), Error);
  const std::vector<WeightedExample> ok{{{}, {m.x()}, 1.0}};
  EXPECT_THROW(train_step(m, opt, ok, 0.0), Error);
}

TEST(SignedObjective, GroupMeansMatchClosedForm) {
  TwoParamModel m(0.4, -0.2);
  const std::vector<WeightedExample> batch{
      {{m.x()}, {m.y(), m.y()}, -1.0}, {{}, {m.x()}, -1.0}, {{m.y()}, {m.x(), Vocabulary::kEos}, 0.5}};
  std::vector<double> grad(2), losses;
  const double j = signed_objective(m, batch, grad, losses);
  EXPECT_NEAR(j, -(losses[0] + losses[1]) / 2 + 0.5 * losses[2], 1e-12);
}

TEST(Checkpoint, RoundTripAndVocabularyMismatch) {
  const auto dir = std::filesystem::temp_directory_path() / "bsr_ckpt_test";
  std::filesystem::create_directories(dir);
  auto m = tiny_transformer(13);
  save_checkpoint(m, dir / "m.ckpt");
  const auto loaded = load_checkpoint(dir / "m.ckpt");
  EXPECT_TRUE(std::equal(m.parameters().begin(), m.parameters().end(), loaded.parameters().begin()));
  EXPECT_EQ(loaded.vocabulary(), m.vocabulary());
  EXPECT_NO_THROW(load_checkpoint(dir / "m.ckpt", m.vocabulary().hash()));
  try {
    load_checkpoint(dir / "m.ckpt", words_vocab({"other"}).hash());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CheckpointMismatch);
  }
  {
    std::ofstream junk(dir / "junk.ckpt");
    junk << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), Error);
}
