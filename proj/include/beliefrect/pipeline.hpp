#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beliefrect/analysis.hpp"
#include "beliefrect/answering.hpp"
#include "beliefrect/attribution.hpp"
#include "beliefrect/elicitation.hpp"
#include "beliefrect/error.hpp"
#include "beliefrect/optimizer.hpp"
#include "beliefrect/transformer.hpp"
#include "beliefrect/unlearning.hpp"
#include "beliefrect/world.hpp"

namespace beliefrect {

enum class Method { BeliefSR, AnswerSR, KnowledgeSR };
/// "belief-sr", "answer-sr", "knowledge-sr"
std::string_view to_string(Method m);
/// Also accepts attribution method names, which fail with NotImplemented
/// ("method not implemented: hif") rather than InvalidConfig.
Method method_from_string(std::string_view name);

struct ModelConfig {
  TransformerConfig transformer;
  FitConfig pretrain;
  std::string checkpoint;  // load this instead of pretraining when set
};

/// Everything a run depends on. `seed` is the master seed: world, model
/// init, pretraining, splits, unlearning and bootstrap seeds are all set
/// from it by resolve().
struct RunConfig {
  std::string dataset;        // JSON lines; unused when `world` is set
  std::string corpus;         // one document per line; unused when `world` is set
  std::string template_path;  // empty: the standard elicitation template
  std::optional<WorldConfig> world;
  ModelConfig model;
  DecodeConfig decode;
  FBBSConfig fbbs;
  Generator generator = Generator::FBBS;
  UnlearnConfig unlearn;
  Method method = Method::BeliefSR;
  AttributionMethod attribution = AttributionMethod::GradDot;
  // Also train on correctly answered instances as enhance-only pairs.
  bool enhance_correct = false;
  // Abort and roll back rectification when D✓ accuracy falls by more than
  // this fraction; 0 disables.
  double collapse_threshold = 0.10;
  BootstrapConfig bootstrap;
  OverlapConfig overlap;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string out = "runs/default";
  // Non-empty: method-dependent stages write under out/variants/<variant>,
  // sharing prepare and baseline-eval with the base run.
  std::string variant;

  /// Propagates the master seed and validates every section. Throws
  /// InvalidConfig naming the offending field.
  void resolve();
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Unknown keys are rejected with InvalidConfig naming the key.
void from_json(const nlohmann::json& j, RunConfig& c);

/// Environment overrides: every leaf key of the config JSON can be set with
/// BSR_<PATH>, the path upper-cased and joined with '_' (for example
/// BSR_UNLEARN_LEARNING_RATE, BSR_SEED, BSR_WORLD_FISH). Values are parsed
/// as the type of the existing leaf.
inline constexpr std::string_view kEnvPrefix = "BSR_";
void apply_env_overrides(nlohmann::json& config, char** envp);
std::vector<std::string> env_override_names(const nlohmann::json& config);

/// Reads a JSON config, applies environment overrides from `envp` when given
/// and resolves relative input paths against the config file's directory.
RunConfig load_run_config(const std::filesystem::path& path, char** envp = nullptr);

enum class Stage { Prepare, BaselineEval, Elicit, Rectify, Evaluate, Report };
inline constexpr Stage kAllStages[] = {Stage::Prepare, Stage::BaselineEval, Stage::Elicit,
                                       Stage::Rectify, Stage::Evaluate,     Stage::Report};
/// "prepare", "baseline-eval", "elicit", "rectify", "evaluate", "report"
std::string_view to_string(Stage s);

/// Error raised by a stage, tagged with its name.
class StageError : public Error {
 public:
  StageError(Stage stage, ErrorCode code, const std::string& message);
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

struct StageOutcome {
  Stage stage;
  bool skipped = false;  // outputs were already current
  std::string key;
};

/// Output directory layout (relative to `out`):
///   manifest.json                 resolved config, seed, stage keys and
///                                 output hashes
///   data/dataset.jsonl, data/corpus.txt, data/splits.json
///   model/vanilla.ckpt, model/pretrain_loss.tsv
///   eval/vanilla_predictions.tsv, eval/partition.json
/// and under the variant directory (out/ or out/variants/<variant>/):
///   manifest.json
///   beliefs/spurious.tsv, beliefs/true.tsv, beliefs/correct_true.tsv
///   attribution/scores.tsv        (knowledge-sr)
///   model/rectified.ckpt, rectify/training_log.tsv
///   eval/rectified_predictions.tsv
///   report/report.tsv, report/report.md
inline constexpr int kLayoutVersion = 1;

struct RunResult {
  std::filesystem::path rectified_checkpoint;
  std::filesystem::path spurious_beliefs;
  std::filesystem::path true_beliefs;
  std::filesystem::path report_tsv;
  std::filesystem::path report_md;
  std::vector<EvalReport> reports;  // vanilla first, then the method
  std::vector<StageOutcome> stages;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig config);

  const RunConfig& config() const { return config_; }
  std::filesystem::path base_dir() const;
  std::filesystem::path variant_dir() const;

  /// Runs one stage, first running any upstream stage whose outputs are not
  /// current. A stage whose key (config section plus upstream output hashes)
  /// matches the manifest and whose outputs still hash as recorded is
  /// skipped.
  StageOutcome run(Stage stage);
  RunResult run_all();

  /// Loads the reports written by the evaluate stage.
  std::vector<EvalReport> load_reports() const;

 private:
  struct Manifest;
  std::string stage_key(Stage stage) const;
  bool is_current(Stage stage, const std::string& key) const;
  void record(Stage stage, const std::string& key, const std::vector<std::filesystem::path>& outputs);
  std::filesystem::path dir_for(Stage stage) const;

  void do_prepare();
  void do_baseline_eval();
  void do_elicit();
  void do_rectify();
  void do_evaluate();
  void do_report();

  RunConfig config_;
  std::vector<StageOutcome> log_;
};

/// Convenience: Pipeline(config).run_all().
RunResult run_rectification(const RunConfig& config);

/// Accuracy matrix: row r, column c = accuracy of model r on eval set c.
/// The vanilla row comes last.
struct CrossEvalMatrix {
  std::vector<std::string> rows;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> values;
};

/// Models must share the vanilla model's vocabulary (CheckpointMismatch).
CrossEvalMatrix cross_evaluate(const TransformerLM& vanilla, const std::map<std::string, TransformerLM>& models,
                               const std::map<std::string, std::vector<QAInstance>>& eval_sets,
                               const DecodeConfig& decode, std::size_t jobs = 1);
/// Loads checkpoints from files and forwards.
CrossEvalMatrix cross_evaluate(const std::filesystem::path& vanilla,
                               const std::map<std::string, std::filesystem::path>& checkpoints,
                               const std::map<std::string, std::vector<QAInstance>>& eval_sets,
                               const DecodeConfig& decode, std::size_t jobs = 1);
RenderedReport render_cross_eval(const CrossEvalMatrix& m);

/// One pipeline variant per n with unlearn.top_k_beliefs = n. Every variant
/// elicits max(n) beliefs per side so the rows differ only in how many are
/// used.
AccuracyTable top_n_sweep(const RunConfig& config, const std::vector<std::size_t>& n_values = {1, 4, 8, 16});
/// One pipeline variant per belief generator.
AccuracyTable generator_comparison(const RunConfig& config,
                                   const std::vector<Generator>& generators = {Generator::FBBS, Generator::FBS,
                                                                               Generator::BBS, Generator::PostHoc});

/// Reads beliefs dumped by the elicit stage and measures corpus overlap.
OverlapReport overlap_analysis(const RunConfig& config);

}  // namespace beliefrect
