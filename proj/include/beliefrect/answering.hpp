#pragma once

#include <string>
#include <vector>

#include "beliefrect/corpus_index.hpp"
#include "beliefrect/dataset.hpp"
#include "beliefrect/language_model.hpp"

namespace beliefrect {

struct DecodeConfig {
  std::size_t beam_width = 4;
  std::size_t max_new_tokens = 32;
  std::string stop_word = ".";
  std::string prompt_suffix = "The answer is";
};

/// "{question}[ (A) x, (B) y] The answer is"
std::string answer_prompt(const QAInstance& inst, const DecodeConfig& config);

/// Beam search without length normalization; a hypothesis finishes at the
/// stop word or <eos> (neither is part of the output). Returns the best
/// finished hypothesis, or the best live one if none finished.
std::vector<TokenId> beam_decode(const LanguageModel& model, TokenSpan prompt, const DecodeConfig& config);

/// Decoded answer text, not yet normalized.
std::string decode_answer(const LanguageModel& model, const QAInstance& inst, const DecodeConfig& config);
/// Normalized prediction for one instance.
std::string answer_inference(const LanguageModel& model, const QAInstance& inst, const DecodeConfig& config);

struct Prediction {
  std::string id;
  std::string raw;        // as decoded, used as y_inc
  std::string predicted;  // normalized
  bool correct = false;
};

/// Predictions in input order; instances are decoded on `jobs` threads.
std::vector<Prediction> predict_all(const LanguageModel& model, const std::vector<QAInstance>& instances,
                                    const DecodeConfig& config, std::size_t jobs = 1);

struct IncorrectInstance {
  QAInstance instance;
  std::string y_inc;
};

struct Partition {
  std::vector<IncorrectInstance> incorrect;
  std::vector<QAInstance> correct;
};

Partition partition_by_correctness(const LanguageModel& model, const std::vector<QAInstance>& train,
                                   const DecodeConfig& config, std::size_t jobs = 1);
Partition partition_from_predictions(const std::vector<QAInstance>& train, const std::vector<Prediction>& preds);

struct MembershipSplit {
  std::vector<QAInstance> members;
  std::vector<QAInstance> non_members;
};

/// Member iff both the question and the answer occur byte-exactly in the
/// corpus.
MembershipSplit membership_filter(const std::vector<QAInstance>& instances, const CorpusIndex& corpus);

struct DatasetSplits {
  std::vector<QAInstance> train;
  std::vector<QAInstance> dev;
  std::vector<QAInstance> eval;
};

/// train = members; non-members shuffled by seed and halved (dev gets the
/// smaller half). Throws InsufficientData with fewer than two non-members.
DatasetSplits make_splits(std::vector<QAInstance> members, std::vector<QAInstance> non_members, std::uint64_t seed);

}  // namespace beliefrect
