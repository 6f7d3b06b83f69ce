#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "beliefrect/attribution.hpp"
#include "beliefrect/dataset.hpp"
#include "beliefrect/elicitation.hpp"
#include "beliefrect/error.hpp"
#include "beliefrect/optimizer.hpp"

namespace beliefrect {

struct RectificationPair {
  QAInstance instance;
  std::string y_inc;
  std::string y_cor;
  std::vector<Belief> spurious;      // elicited with y_inc
  std::vector<Belief> true_beliefs;  // elicited with y_cor
};

struct UnlearnConfig {
  double beta = 0.5;
  double learning_rate = 5e-5;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  std::size_t top_k_beliefs = 1;
  std::uint64_t seed = 0;
  double suppress_nll_ceiling = 20.0;  // nats per token; 0 disables
  std::size_t check_interval = 0;      // steps between progress checks; 0: after each epoch

  void validate() const;
};

/// y_suf for `answer` with a mask that scores only the substituted answer
/// tokens; template words stay unscored context.
struct AnswerSuffix {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> answer_mask;
};
AnswerSuffix encode_answer_suffix(const PromptTemplate& tmpl, std::string_view answer, const Vocabulary& vocab);

/// Interleaves suppress (weight < 0) and enhance (weight > 0) examples:
/// drops zero-weight enhance examples, equalizes the two counts by seeded
/// truncation of the larger side, shuffles by seed and chunks into batches.
std::vector<std::vector<WeightedExample>> make_batches(std::vector<WeightedExample> suppress,
                                                       std::vector<WeightedExample> enhance,
                                                       const UnlearnConfig& config);

/// Belief-SR sets: target = belief ++ y_suf(answer), context = x_pre, loss
/// on belief and answer tokens. `enhance_only` pairs (correctly answered
/// instances) add enhance examples from their true beliefs alone. Throws
/// MissingBeliefs.
std::vector<std::vector<WeightedExample>> build_unlearn_batches(const std::vector<RectificationPair>& pairs,
                                                                const PromptTemplate& tmpl,
                                                                const UnlearnConfig& config, const Vocabulary& vocab,
                                                                const std::vector<RectificationPair>& enhance_only = {});

/// Answer-SR sets: target = y_suf(answer) with no belief in between.
std::vector<std::vector<WeightedExample>> answer_sr_sets(const std::vector<RectificationPair>& pairs,
                                                         const PromptTemplate& tmpl, const UnlearnConfig& config,
                                                         const Vocabulary& vocab,
                                                         const std::vector<RectificationPair>& enhance_only = {});

/// Knowledge-SR examples for one pair: the top_k_beliefs best-attributed
/// pool documents as suppress examples and the instance's own evidence as
/// enhance examples, documents as targets with empty context. Counts are
/// not yet equalized. Throws EmptyPool if either side is empty.
struct KnowledgeSets {
  std::vector<WeightedExample> suppress;
  std::vector<WeightedExample> enhance;
};
KnowledgeSets knowledge_sr_sets(const RectificationPair& pair, const std::vector<EvidenceDoc>& pool,
                                const std::vector<AttributionScore>& ranked, const UnlearnConfig& config,
                                const Vocabulary& vocab);

struct TrainingRecord {
  std::size_t step = 0;
  double suppress_nll = 0.0;  // NaN when the batch has no suppress example
  double enhance_nll = 0.0;   // NaN when the batch has no enhance example
  double objective = 0.0;
};

struct TrainingLog {
  std::vector<TrainingRecord> records;
  std::string stop_reason;  // empty when every planned step ran
};

/// Line-delimited log: "step suppress_nll enhance_nll objective".
void write_training_log(std::ostream& out, const TrainingLog& log);

struct RectifyResult {
  std::unique_ptr<TrainableModel> model;
  TrainingLog log;
  std::optional<ErrorCode> error;  // set when a step hit NonFiniteLoss
  std::size_t kept_step = 0;       // optimizer steps reflected in `model`
};

/// Called on the in-progress model every `check_interval` steps (or after
/// each epoch); returning a message stops training and rolls the model back
/// to the last state that passed (the input model if none did). Used for the
/// held-out collapse guard.
using ProgressCheck = std::function<std::optional<std::string>(const TrainableModel&, std::size_t step)>;

/// Trains a copy of `model` for epochs x batches Adam steps with fresh
/// moments. The input model is never modified.
RectifyResult rectify_batches(const TrainableModel& model, const std::vector<std::vector<WeightedExample>>& batches,
                              const UnlearnConfig& config, const ProgressCheck& check = {});

RectifyResult rectify(const TrainableModel& model, const std::vector<RectificationPair>& pairs,
                      const PromptTemplate& tmpl, const UnlearnConfig& config, const ProgressCheck& check = {});

}  // namespace beliefrect
