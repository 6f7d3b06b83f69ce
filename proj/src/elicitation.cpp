#include "beliefrect/elicitation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "beliefrect/error.hpp"

namespace beliefrect {
namespace {

std::size_t count_of(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string substitute(std::string_view pattern, std::string_view slot, std::string_view value) {
  std::string out(pattern);
  const auto pos = out.find(slot);
  out.replace(pos, slot.size(), value);
  return out;
}

TokenId terminator_id(const Vocabulary& vocab, const std::string& terminator) {
  if (!vocab.contains(terminator)) fail(ErrorCode::InvalidConfig, "terminator '" + terminator + "' not in vocabulary");
  return vocab.id(terminator);
}

// Rolls out greedily from `s` (consumed) and scores y_suf afterwards.
Lookahead rollout_and_score(DecodeSession& s, std::size_t belief_len, const ElicitationQuery& query,
                            TokenId terminator, std::size_t budget, std::size_t max_context) {
  Lookahead out;
  std::size_t generated = 0;
  for (;;) {
    const TokenId next = argmax_token(s.logprobs());
    if (next == terminator || next == Vocabulary::kEos) break;
    if (generated == budget) {
      out.est_total_len = belief_len + budget;
      return out;
    }
    if (s.length() + 1 > max_context) fail(ErrorCode::ContextTooLong, "lookahead rollout exceeds context");
    s.push(next);
    ++generated;
  }
  out.est_total_len = belief_len + generated;
  out.back_logprob = sequence_logprob(s, query.y_suf.tokens, max_context);
  return out;
}

struct Hypothesis {
  std::vector<TokenId> tokens;
  LogProb fwd = 0.0;
  std::unique_ptr<DecodeSession> session;  // positioned after x_pre + tokens
};

struct Proposal {
  std::size_t parent = 0;
  TokenId token = 0;
  std::vector<TokenId> key;  // parent tokens + proposed token, for tie-breaking
  bool completes = false;
  bool is_terminator = false;
  LogProb fwd = 0.0;  // forward score of the belief (terminator excluded)
  LogProb back = kNegInf;
  double score = kNegInf;
  std::unique_ptr<DecodeSession> session;  // only for proposals that stay live
};

bool better(double sa, const std::vector<TokenId>& ka, double sb, const std::vector<TokenId>& kb) {
  if (sa != sb) return sa > sb;
  return ka < kb;
}

}  // namespace

PromptTemplate PromptTemplate::standard() {
  return parse("{INPUT} The concise fact to solve the problem is that _____. Therefore, the answer is {OUTPUT}.");
}

PromptTemplate PromptTemplate::parse(std::string_view text) {
  const auto blank = text.find(kBlank);
  if (blank == std::string_view::npos || count_of(text, kBlank) != 1)
    fail(ErrorCode::PlaceholderMissing, "template needs exactly one blank marker " + std::string(kBlank));
  PromptTemplate t;
  t.prefix_pattern = trim(text.substr(0, blank));
  t.suffix_pattern = trim(text.substr(blank + kBlank.size()));
  if (count_of(t.prefix_pattern, kInput) != 1)
    fail(ErrorCode::PlaceholderMissing, "prefix must contain exactly one " + std::string(kInput));
  if (count_of(t.suffix_pattern, kOutput) != 1)
    fail(ErrorCode::PlaceholderMissing, "suffix must contain exactly one " + std::string(kOutput));
  return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open template " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(trim(ss.str()));
}

std::string PromptTemplate::render_prefix(std::string_view input) const {
  if (count_of(prefix_pattern, kInput) != 1) fail(ErrorCode::PlaceholderMissing, "prefix lacks " + std::string(kInput));
  return substitute(prefix_pattern, kInput, input);
}

std::string PromptTemplate::render_suffix(std::string_view output) const {
  if (count_of(suffix_pattern, kOutput) != 1) fail(ErrorCode::PlaceholderMissing, "suffix lacks " + std::string(kOutput));
  return substitute(suffix_pattern, kOutput, output);
}

ElicitationQuery build_query(std::string_view question, std::string_view answer, const PromptTemplate& tmpl,
                             const Vocabulary& vocab) {
  if (trim(question).empty()) fail(ErrorCode::EmptyField, "question is empty");
  if (trim(answer).empty()) fail(ErrorCode::EmptyField, "answer is empty");
  ElicitationQuery q;
  q.x_pre = vocab.encode(tmpl.render_prefix(trim(question)));
  q.y_suf = vocab.encode(tmpl.render_suffix(trim(answer)));
  return q;
}

void FBBSConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail(ErrorCode::InvalidConfig, "alpha must be positive");
  if (beam_n < 1) fail(ErrorCode::InvalidConfig, "beam_n must be >= 1");
  if (candidate_m < 1 || candidate_m > beam_n) fail(ErrorCode::InvalidConfig, "candidate_m must be in [1, beam_n]");
  if (lookahead_budget < 1) fail(ErrorCode::InvalidConfig, "lookahead_budget must be >= 1");
  if (terminator.empty()) fail(ErrorCode::InvalidConfig, "terminator must be set");
}

std::string_view to_string(Generator g) {
  switch (g) {
    case Generator::FBBS: return "fbbs";
    case Generator::FBS: return "fbs";
    case Generator::BBS: return "bbs";
    case Generator::PostHoc: return "posthoc";
  }
  return "unknown";
}

Generator generator_from_string(std::string_view name) {
  for (auto g : {Generator::FBBS, Generator::FBS, Generator::BBS, Generator::PostHoc})
    if (to_string(g) == name) return g;
  fail(ErrorCode::InvalidConfig, "unknown generator: " + std::string(name));
}

double lambda_weight(std::size_t t, std::size_t t_hat, double alpha) {
  const double ratio = 2.0 * static_cast<double>(t) / static_cast<double>(t_hat);
  return 1.0 / (1.0 + std::exp(alpha * (ratio - 1.0)));
}

double combined_score(LogProb fwd, LogProb back, std::size_t t, std::size_t t_hat, double alpha) {
  if (fwd == kNegInf || back == kNegInf) return kNegInf;
  const double lam = lambda_weight(t, t_hat, alpha);
  return lam * fwd + (1.0 - lam) * back;
}

Lookahead lookahead_backward(const LanguageModel& model, const ElicitationQuery& query, TokenSpan partial,
                             TokenId candidate, const FBBSConfig& config) {
  config.validate();
  if (partial.size() + 1 > config.max_belief_len)
    fail(ErrorCode::InvalidConfig, "partial belief already at max_belief_len");
  const TokenId term = terminator_id(model.vocabulary(), config.terminator);
  std::vector<TokenId> ctx(query.x_pre.tokens);
  ctx.insert(ctx.end(), partial.begin(), partial.end());
  ctx.push_back(candidate);
  auto s = open_checked_session(model, ctx);
  return rollout_and_score(*s, partial.size() + 1, query, term, config.lookahead_budget, model.max_context());
}

SearchResult belief_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config,
                           SearchScore mode) {
  config.validate();
  if (query.x_pre.empty() || query.y_suf.empty()) fail(ErrorCode::EmptyField, "query prompts must be non-empty");
  const TokenId term = terminator_id(model.vocabulary(), config.terminator);
  const std::size_t max_ctx = model.max_context();
  const Vocabulary& vocab = model.vocabulary();

  SearchResult result;
  std::vector<Hypothesis> beam;
  if (config.max_belief_len > 0) beam.push_back(Hypothesis{{}, 0.0, open_checked_session(model, query.x_pre.tokens)});

  auto make_belief = [&](std::vector<TokenId> tokens, LogProb fwd, LogProb back, double score) {
    Belief b;
    b.tokens.text = vocab.decode(tokens);
    b.tokens.tokens = std::move(tokens);
    b.fwd_logprob = fwd;
    b.back_logprob = back;
    b.combined = score;
    b.generator = mode == SearchScore::ForwardBackward ? Generator::FBBS
                  : mode == SearchScore::ForwardOnly   ? Generator::FBS
                                                       : Generator::BBS;
    return b;
  };

  for (std::size_t t = 1; t <= config.max_belief_len && !beam.empty(); ++t) {
    std::vector<Proposal> proposals;
    for (std::size_t h = 0; h < beam.size(); ++h) {
      const Hypothesis& hyp = beam[h];
      std::vector<LogProb> lp = hyp.session->logprobs();
      for (TokenId s = 0; s < Vocabulary::kReserved; ++s) lp[s] = kNegInf;
      for (TokenId tok : top_k_tokens(lp, config.beam_n)) {
        if (lp[tok] == kNegInf) continue;
        Proposal p;
        p.parent = h;
        p.token = tok;
        p.key = hyp.tokens;
        p.key.push_back(tok);
        if (tok == term) {
          if (hyp.tokens.empty()) continue;  // an empty fill is not a belief
          p.completes = p.is_terminator = true;
          p.fwd = hyp.fwd;
          p.back = sequence_logprob(*hyp.session, query.y_suf.tokens, max_ctx);
          const std::size_t len = hyp.tokens.size();
          p.score = mode == SearchScore::ForwardBackward ? combined_score(p.fwd, p.back, len, len, config.alpha)
                    : mode == SearchScore::ForwardOnly   ? p.fwd + lp[tok]
                                                         : p.back;
        } else {
          p.fwd = hyp.fwd + lp[tok];
          p.session = hyp.session->clone();
          if (p.session->length() + 1 > max_ctx) fail(ErrorCode::ContextTooLong, "belief exceeds model context");
          p.session->push(tok);
          if (t == config.max_belief_len) {
            p.completes = true;
            p.back = sequence_logprob(*p.session, query.y_suf.tokens, max_ctx);
            p.score = mode == SearchScore::ForwardBackward ? combined_score(p.fwd, p.back, t, t, config.alpha)
                      : mode == SearchScore::ForwardOnly   ? p.fwd
                                                           : p.back;
          } else if (mode == SearchScore::ForwardOnly) {
            p.score = p.fwd;
          } else {
            auto probe = p.session->clone();
            const auto la = rollout_and_score(*probe, t, query, term, config.lookahead_budget, max_ctx);
            p.back = la.back_logprob;
            p.score = mode == SearchScore::ForwardBackward
                          ? combined_score(p.fwd, la.back_logprob, t, la.est_total_len, config.alpha)
                          : la.back_logprob;
          }
        }
        if (p.completes && std::isfinite(p.score)) {
          auto tokens = hyp.tokens;
          if (!p.is_terminator) tokens.push_back(tok);
          result.pool.push_back(make_belief(std::move(tokens), p.fwd, p.back, p.score));
        }
        proposals.push_back(std::move(p));
      }
    }

    std::vector<std::size_t> order(proposals.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return better(proposals[a].score, proposals[a].key, proposals[b].score, proposals[b].key);
    });
    order.resize(std::min(order.size(), config.candidate_m));

    std::vector<Hypothesis> next;
    for (std::size_t i : order) {
      Proposal& p = proposals[i];
      if (p.completes) {
        if (!std::isfinite(p.score)) continue;
        auto tokens = beam[p.parent].tokens;
        if (!p.is_terminator) tokens.push_back(p.token);
        result.beliefs.push_back(make_belief(std::move(tokens), p.fwd, p.back, p.score));
      } else {
        auto tokens = beam[p.parent].tokens;
        tokens.push_back(p.token);
        next.push_back(Hypothesis{std::move(tokens), p.fwd, std::move(p.session)});
      }
    }
    beam = std::move(next);
  }

  auto rank = [](std::vector<Belief>& v) {
    std::stable_sort(v.begin(), v.end(), [](const Belief& a, const Belief& b) {
      return better(a.combined, a.tokens.tokens, b.combined, b.tokens.tokens);
    });
  };
  rank(result.beliefs);
  rank(result.pool);
  if (result.beliefs.size() > config.candidate_m) result.beliefs.resize(config.candidate_m);
  return result;
}

namespace {

std::vector<Belief> ranked_or_throw(SearchResult r) {
  if (r.beliefs.empty()) fail(ErrorCode::EmptyBeliefSpace, "no hypothesis completed");
  return std::move(r.beliefs);
}

}  // namespace

std::vector<Belief> fbbs_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config) {
  return ranked_or_throw(belief_search(model, query, config, SearchScore::ForwardBackward));
}

std::vector<Belief> fbs_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config) {
  return ranked_or_throw(belief_search(model, query, config, SearchScore::ForwardOnly));
}

std::vector<Belief> bbs_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config) {
  return ranked_or_throw(belief_search(model, query, config, SearchScore::BackwardOnly));
}

Belief posthoc_explain(const LanguageModel& model, const PromptTemplate& tmpl, std::string_view question,
                       std::string_view answer, std::size_t max_len, std::string_view terminator) {
  const Vocabulary& vocab = model.vocabulary();
  const auto query = build_query(question, answer, tmpl, vocab);
  const std::string prompt = substitute(substitute(kPostHocPattern, PromptTemplate::kInput, trim(question)),
                                        PromptTemplate::kOutput, trim(answer));
  const auto ctx = vocab.encode(prompt);
  const TokenId term = terminator_id(vocab, std::string(terminator));
  const auto g = greedy_complete(model, ctx.tokens, {term, Vocabulary::kEos, Vocabulary::kPad, Vocabulary::kBos}, max_len);
  if (g.tokens.empty()) fail(ErrorCode::EmptyBeliefSpace, "post-hoc explanation is empty");
  Belief b;
  b.tokens.tokens = g.tokens;
  b.tokens.text = vocab.decode(g.tokens);
  b.fwd_logprob = sequence_logprob(model, query.x_pre.tokens, g.tokens);
  std::vector<TokenId> full(query.x_pre.tokens);
  full.insert(full.end(), g.tokens.begin(), g.tokens.end());
  b.back_logprob = sequence_logprob(model, full, query.y_suf.tokens);
  b.combined = b.fwd_logprob + b.back_logprob;
  b.generator = Generator::PostHoc;
  return b;
}

std::vector<Belief> elicit_beliefs(const LanguageModel& model, const PromptTemplate& tmpl, std::string_view question,
                                   std::string_view answer, const FBBSConfig& config, Generator generator) {
  if (generator == Generator::PostHoc)
    return {posthoc_explain(model, tmpl, question, answer, config.max_belief_len, config.terminator)};
  const auto query = build_query(question, answer, tmpl, model.vocabulary());
  switch (generator) {
    case Generator::FBBS: return fbbs_search(model, query, config);
    case Generator::FBS: return fbs_search(model, query, config);
    default: return bbs_search(model, query, config);
  }
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') fail(ErrorCode::SchemaError, "bad number in belief dump: " + s);
  return v;
}

}  // namespace

void write_belief_records(std::ostream& out, const std::vector<BeliefRecord>& records) {
  for (const auto& r : records) {
    const Belief& b = r.belief;
    out << r.instance_id << '\t' << to_string(b.generator) << '\t' << b.tokens.text << '\t'
        << format_double(b.fwd_logprob) << '\t' << format_double(b.back_logprob) << '\t'
        << format_double(b.combined) << '\t';
    for (std::size_t i = 0; i < b.tokens.tokens.size(); ++i) out << (i ? " " : "") << b.tokens.tokens[i];
    out << '\n';
  }
}

std::vector<BeliefRecord> read_belief_records(std::istream& in) {
  std::vector<BeliefRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (auto pos = line.find('\t'); pos != std::string::npos; pos = line.find('\t', start)) {
      cols.push_back(line.substr(start, pos - start));
      start = pos + 1;
    }
    cols.push_back(line.substr(start));
    if (cols.size() != 7) fail(ErrorCode::SchemaError, "belief dump line " + std::to_string(lineno) + ": expected 7 columns");
    BeliefRecord r;
    r.instance_id = cols[0];
    r.belief.generator = generator_from_string(cols[1]);
    r.belief.tokens.text = cols[2];
    r.belief.fwd_logprob = parse_double(cols[3]);
    r.belief.back_logprob = parse_double(cols[4]);
    r.belief.combined = parse_double(cols[5]);
    std::istringstream ids(cols[6]);
    for (unsigned long id; ids >> id;) r.belief.tokens.tokens.push_back(static_cast<TokenId>(id));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace beliefrect
