#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "beliefrect/language_model.hpp"

namespace beliefrect {

/// Blank-filling prompt. The template text holds one {INPUT} before the
/// blank marker and one {OUTPUT} after it.
struct PromptTemplate {
  static constexpr std::string_view kInput = "{INPUT}";
  static constexpr std::string_view kOutput = "{OUTPUT}";
  static constexpr std::string_view kBlank = "_____";

  std::string prefix_pattern;
  std::string suffix_pattern;

  /// "{INPUT} The concise fact to solve the problem is that _____. Therefore, the answer is {OUTPUT}."
  static PromptTemplate standard();
  /// Splits a one-line template at the blank marker.
  static PromptTemplate parse(std::string_view text);
  static PromptTemplate load(const std::filesystem::path& path);

  std::string render_prefix(std::string_view input) const;
  std::string render_suffix(std::string_view output) const;
};

struct ElicitationQuery {
  TokenSequence x_pre;  // prefix prompt, ends right before the blank
  TokenSequence y_suf;  // suffix prompt, starts with the belief terminator
};

ElicitationQuery build_query(std::string_view question, std::string_view answer, const PromptTemplate& tmpl,
                             const Vocabulary& vocab);

struct FBBSConfig {
  double alpha = 0.3;
  std::size_t beam_n = 8;
  std::size_t candidate_m = 4;
  std::size_t max_belief_len = 12;
  std::size_t lookahead_budget = 12;
  std::string terminator = ".";

  /// Throws InvalidConfig. max_belief_len == 0 is allowed and simply
  /// yields no beliefs.
  void validate() const;
};

enum class Generator { FBBS, FBS, BBS, PostHoc };
std::string_view to_string(Generator g);
Generator generator_from_string(std::string_view name);

struct Belief {
  TokenSequence tokens;
  LogProb fwd_logprob = 0.0;   // log P(belief | x_pre)
  LogProb back_logprob = 0.0;  // log P(y_suf | x_pre, belief)
  double combined = 0.0;       // the generator's ranking score
  Generator generator = Generator::FBBS;
};

/// sigmoid schedule 1 / (1 + exp(alpha * (2t / T_hat - 1))).
double lambda_weight(std::size_t t, std::size_t t_hat, double alpha);
/// lambda * fwd + (1 - lambda) * back; kNegInf if either side is.
double combined_score(LogProb fwd, LogProb back, std::size_t t, std::size_t t_hat, double alpha);

struct Lookahead {
  LogProb back_logprob = kNegInf;
  std::size_t est_total_len = 0;
};

/// Greedy rollout after x_pre + partial + candidate until the terminator
/// (or <eos>) or the budget, then teacher-forced scoring of y_suf.
Lookahead lookahead_backward(const LanguageModel& model, const ElicitationQuery& query, TokenSpan partial,
                             TokenId candidate, const FBBSConfig& config);

/// Ranking signal used by the shared beam machinery.
enum class SearchScore { ForwardBackward, ForwardOnly, BackwardOnly };

struct SearchResult {
  std::vector<Belief> beliefs;  // ranked, at most candidate_m
  std::vector<Belief> pool;     // every completed candidate that was scored
};

/// Beam search over blank fills. Per step every live hypothesis proposes
/// its top beam_n next tokens, all proposals are scored and the global top
/// candidate_m survive; proposals that end the belief (terminator, or the
/// length cap) leave the beam. Special tokens are never proposed.
SearchResult belief_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config,
                           SearchScore score);

std::vector<Belief> fbbs_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config);
std::vector<Belief> fbs_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config);
std::vector<Belief> bbs_search(const LanguageModel& model, const ElicitationQuery& query, const FBBSConfig& config);

/// Post-hoc prompt: "{INPUT} The answer is {OUTPUT} because".
inline constexpr std::string_view kPostHocPattern = "{INPUT} The answer is {OUTPUT} because";

/// Greedy explanation generated with the answer already visible. Scores are
/// measured after the fact against the elicitation query of `tmpl`;
/// combined = fwd + back.
Belief posthoc_explain(const LanguageModel& model, const PromptTemplate& tmpl, std::string_view question,
                       std::string_view answer, std::size_t max_len, std::string_view terminator = ".");

/// Dispatch by generator tag.
std::vector<Belief> elicit_beliefs(const LanguageModel& model, const PromptTemplate& tmpl, std::string_view question,
                                   std::string_view answer, const FBBSConfig& config, Generator generator);

/// Belief dump: one tab-separated line per belief with columns
/// instance_id, generator, text, fwd, back, combined, token ids.
struct BeliefRecord {
  std::string instance_id;
  Belief belief;
};

void write_belief_records(std::ostream& out, const std::vector<BeliefRecord>& records);
std::vector<BeliefRecord> read_belief_records(std::istream& in);

}  // namespace beliefrect
