#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "beliefrect/corpus_index.hpp"
#include "beliefrect/elicitation.hpp"

namespace beliefrect {

/// Fraction of positions where the normalized strings agree. Throws
/// LengthMismatch or EmptyInput.
double exact_match_accuracy(std::span<const std::string> predictions, std::span<const std::string> references);

struct BootstrapResult {
  double p_value = 1.0;
  bool significant = false;
};

struct BootstrapConfig {
  std::size_t iterations = 10000;
  double alpha = 0.01;
  std::uint64_t seed = 0;
};

/// One-sided paired bootstrap for "a is more accurate than b": instances
/// are resampled with replacement and p is the fraction of resamples where
/// accuracy(a) <= accuracy(b). Needs equal lengths >= 2 and at least 1000
/// iterations.
BootstrapResult paired_bootstrap(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b,
                                 const BootstrapConfig& config = {});

// ---------------------------------------------------------------------------
// corpus overlap

struct OverlapConfig {
  double threshold = 0.8;
  // 0: ratio is the longest matched span over the belief length. n > 0: ratio
  // is the fraction of the belief's n-grams found in the corpus.
  std::size_t fixed_n = 0;
};

struct OverlapResult {
  std::string belief_id;
  std::size_t belief_len = 0;
  std::size_t longest_match_len = 0;
  double ratio = 0.0;
  bool contained = false;
};

/// Words are taken from the belief text. Throws EmptyInput on an empty belief.
OverlapResult ngram_overlap(const TokenSequence& belief, const CorpusIndex& corpus, const OverlapConfig& config = {},
                            std::string belief_id = {});

struct OverlapRow {
  std::string group;  // generator name
  std::size_t beliefs = 0;
  std::size_t contained = 0;
  double percent() const { return beliefs ? 100.0 * static_cast<double>(contained) / static_cast<double>(beliefs) : 0.0; }
};

struct OverlapReport {
  std::vector<OverlapResult> per_belief;  // input order
  std::vector<OverlapRow> rows;           // one per generator, in enum order
};

/// Belief ids are "<instance id>#<k>" with k counting that instance's
/// records. Throws EmptyInput for an empty list.
OverlapReport overlap_report(const std::vector<BeliefRecord>& beliefs, const CorpusIndex& corpus,
                             const OverlapConfig& config = {});
/// Per-belief dump (tab-separated, with header) and the grouped table.
std::string render_overlap(const OverlapReport& report);

// ---------------------------------------------------------------------------
// accuracy reports

enum class Split { Incorrect, Correct, Train, Eval };
inline constexpr std::array<Split, 4> kSplits{Split::Incorrect, Split::Correct, Split::Train, Split::Eval};
/// "d_inc", "d_cor", "d_train", "d_eval"
std::string_view to_string(Split s);

struct SplitResult {
  std::vector<std::string> ids;
  std::vector<bool> correct;

  std::size_t size() const { return correct.size(); }
  std::size_t hits() const;
  /// NaN for an empty split.
  double accuracy() const;
};

struct EvalReport {
  std::string method;
  std::array<SplitResult, 4> splits;  // indexed by Split
  std::array<bool, 4> significant{};  // vs. the comparison method

  const SplitResult& at(Split s) const { return splits[static_cast<std::size_t>(s)]; }
  SplitResult& at(Split s) { return splits[static_cast<std::size_t>(s)]; }
};

/// The train split is the concatenation of the incorrect and correct splits.
EvalReport make_eval_report(std::string method, SplitResult incorrect, SplitResult correct, SplitResult eval);

/// Sets `significant` on every report other than `baseline` by a paired
/// bootstrap against it, per split. Splits must list the same ids in the
/// same order (LengthMismatch / SchemaError otherwise); empty splits are
/// never significant.
void mark_significance(std::vector<EvalReport>& reports, const std::string& baseline,
                       const BootstrapConfig& config = {});

struct RenderedReport {
  std::string tsv;       // machine-readable
  std::string markdown;  // human-readable
};

/// Table with one row per report and columns D✗, D✓, D_train, D_eval in
/// percent. Markdown bolds every cell whose one-decimal value equals the
/// column maximum (ties are all bold) and appends † to significant cells.
/// The TSV header is
///   method d_inc d_cor d_train d_eval n_inc n_cor n_train n_eval
///   sig_inc sig_cor sig_train sig_eval
/// with accuracies as fractions ("NA" when a split is empty).
RenderedReport render_report(const std::vector<EvalReport>& reports);

/// Generic labelled accuracy table used by the sweeps: rows x the four splits.
struct AccuracyTable {
  std::string row_header;
  std::vector<std::string> rows;
  std::vector<std::array<double, 4>> values;  // fractions, NaN when empty
};

AccuracyTable accuracy_table(std::string row_header, const std::vector<EvalReport>& reports);
RenderedReport render_table(const AccuracyTable& table);

}  // namespace beliefrect
