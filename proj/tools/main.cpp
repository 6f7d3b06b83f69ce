// bsr: command-line driver for the rectification pipeline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "beliefrect/checkpoint.hpp"
#include "beliefrect/hashing.hpp"
#include "beliefrect/pipeline.hpp"

extern char** environ;

using namespace beliefrect;
namespace fs = std::filesystem;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kStageFailed = 2;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> jobs;

  std::string method;
  std::string variant;
  std::string generator;

  std::vector<std::size_t> top_n{1, 4, 8, 16};
  std::vector<std::string> generators{"fbbs", "fbs", "bbs", "posthoc"};
  std::vector<std::string> checkpoints;  // name=path
  std::vector<std::string> eval_sets;    // name=path
  std::string vanilla;

  std::vector<double> lr, beta, alpha;
  std::vector<std::size_t> batch;
};

std::string bare(const Error& e) {
  std::string s = e.what();
  const std::string prefix = std::string(to_string(e.code())) + ": ";
  return s.starts_with(prefix) ? s.substr(prefix.size()) : s;
}

RunConfig build_config(const Options& o) {
  RunConfig c;
  try {
    c = load_run_config(o.config, environ);
  } catch (const Error& e) {
    throw ValidationError("--config: " + bare(e));
  }
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out = o.out;
  if (o.jobs) c.jobs = *o.jobs;
  if (!o.variant.empty()) c.variant = o.variant;
  try {
    if (!o.method.empty()) c.method = method_from_string(o.method);
  } catch (const Error& e) {
    throw ValidationError(e.code() == ErrorCode::NotImplemented ? bare(e) : "--method: " + bare(e));
  }
  try {
    if (!o.generator.empty()) c.generator = generator_from_string(o.generator);
  } catch (const Error& e) {
    throw ValidationError("--generator: " + bare(e));
  }
  try {
    c.resolve();
  } catch (const Error& e) {
    throw ValidationError(e.code() == ErrorCode::NotImplemented ? bare(e) : "--config: " + bare(e));
  }
  return c;
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

// Analyses write <name>.tsv, <name>.md and a manifest under out/analysis.
void emit(const RunConfig& c, const std::string& name, const RenderedReport& r) {
  const fs::path dir = fs::path(c.out) / "analysis";
  write_file(dir / (name + ".tsv"), r.tsv);
  write_file(dir / (name + ".md"), r.markdown);
  const nlohmann::json manifest = {{"analysis", name},
                                   {"seed", c.seed},
                                   {"config", c},
                                   {"outputs",
                                    {{name + ".tsv", sha256_file(dir / (name + ".tsv"))},
                                     {name + ".md", sha256_file(dir / (name + ".md"))}}}};
  write_file(dir / (name + ".manifest.json"), manifest.dump(2) + "\n");
  std::cout << r.markdown;
}

std::pair<std::string, std::string> name_path(const std::string& flag, const std::string& value) {
  const auto eq = value.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == value.size())
    throw ValidationError(flag + ": expected name=path, got '" + value + "'");
  return {value.substr(0, eq), value.substr(eq + 1)};
}

int run_stage(const Options& o, Stage stage) {
  const RunConfig c = build_config(o);
  Pipeline p(c);
  const auto outcome = p.run(stage);
  std::cout << to_string(stage) << (outcome.skipped ? ": up to date" : ": done") << " (" << p.variant_dir().string()
            << ")\n";
  if (stage == Stage::Report) std::cout << render_report(p.load_reports()).markdown;
  return kOk;
}

int run_sweep(const Options& o) {
  const RunConfig base = build_config(o);
  auto or_default = [](const auto& values, auto fallback) {
    using T = std::decay_t<decltype(fallback)>;
    return values.empty() ? std::vector<T>{fallback} : std::vector<T>(values.begin(), values.end());
  };
  AccuracyTable table;
  table.row_header = "Setting";
  for (double lr : or_default(o.lr, base.unlearn.learning_rate))
    for (std::size_t batch : or_default(o.batch, base.unlearn.batch_size))
      for (double beta : or_default(o.beta, base.unlearn.beta))
        for (double alpha : or_default(o.alpha, base.fbbs.alpha)) {
          RunConfig c = base;
          c.unlearn.learning_rate = lr;
          c.unlearn.batch_size = batch;
          c.unlearn.beta = beta;
          c.fbbs.alpha = alpha;
          char name[128];
          std::snprintf(name, sizeof name, "sweep-lr%g-batch%zu-beta%g-alpha%g", lr, batch, beta, alpha);
          c.variant = name;
          try {
            c.resolve();
          } catch (const Error& e) {
            throw ValidationError(std::string(name) + ": " + bare(e));
          }
          const auto reports = run_rectification(c).reports;
          table.rows.push_back(name + 6);
          const auto& r = reports.back();
          table.values.push_back({r.at(Split::Incorrect).accuracy(), r.at(Split::Correct).accuracy(),
                                  r.at(Split::Train).accuracy(), r.at(Split::Eval).accuracy()});
        }
  emit(base, "sweep", render_table(table));
  return kOk;
}

int run_analyze(const Options& o, const std::string& action) {
  const RunConfig c = build_config(o);
  if (action == "overlap") {
    const auto report = overlap_analysis(c);
    RenderedReport r;
    r.tsv = render_overlap(report);
    std::ostringstream md;
    md << "| Generator | Beliefs | Contained (%) |\n|---|---|---|\n";
    char pct[32];
    for (const auto& row : report.rows) {
      std::snprintf(pct, sizeof pct, "%.1f", row.percent());
      md << "| " << row.group << " | " << row.beliefs << " | " << pct << " |\n";
    }
    r.markdown = md.str();
    emit(c, "overlap", r);
  } else if (action == "sweep-n") {
    emit(c, "top_n", render_table(top_n_sweep(c, o.top_n)));
  } else if (action == "compare-generators") {
    std::vector<Generator> gens;
    for (const auto& g : o.generators) {
      try {
        gens.push_back(generator_from_string(g));
      } catch (const Error& e) {
        throw ValidationError("--generators: " + bare(e));
      }
    }
    emit(c, "generators", render_table(generator_comparison(c, gens)));
  } else if (action == "cross-eval") {
    if (o.checkpoints.empty()) throw ValidationError("--checkpoint: at least one is required");
    if (o.eval_sets.empty()) throw ValidationError("--eval-set: at least one is required");
    std::map<std::string, fs::path> checkpoints;
    for (const auto& v : o.checkpoints) checkpoints.insert(name_path("--checkpoint", v));
    std::map<std::string, std::vector<QAInstance>> sets;
    for (const auto& v : o.eval_sets) {
      const auto [name, path] = name_path("--eval-set", v);
      try {
        sets[name] = load_dataset(path);
      } catch (const Error& e) {
        throw ValidationError("--eval-set: " + bare(e));
      }
    }
    const fs::path vanilla = o.vanilla.empty() ? fs::path(c.out) / "model/vanilla.ckpt" : fs::path(o.vanilla);
    emit(c, "cross_eval", render_cross_eval(cross_evaluate(vanilla, checkpoints, sets, c.decode, c.jobs)));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Belief-space rectification experiments: elicit the beliefs behind a model's answers and unlearn the\n"
               "spurious ones. Config keys can also be set through BSR_<KEY> environment variables\n"
               "(for example BSR_UNLEARN_LEARNING_RATE); command-line flags take precedence.",
               "bsr"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "Run configuration (JSON); required")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Master seed, overrides the config");
  app.add_option("--out", o.out, "Output directory, overrides the config");
  app.add_option("--jobs", o.jobs, "Worker threads, overrides the config")->check(CLI::PositiveNumber);

  auto add_run_flags = [&](CLI::App* cmd) {
    cmd->add_option("--method", o.method, "belief-sr, answer-sr or knowledge-sr");
    cmd->add_option("--variant", o.variant, "Write method-dependent stages under out/variants/<name>");
    cmd->add_option("--generator", o.generator, "Belief generator: fbbs, fbs, bbs or posthoc");
  };

  const std::vector<std::pair<Stage, std::string>> stage_commands{
      {Stage::Prepare, "Build the data splits and the vanilla model"},
      {Stage::BaselineEval, "Answer the train and eval splits with the vanilla model"},
      {Stage::Elicit, "Elicit spurious and true beliefs (or attribution scores)"},
      {Stage::Rectify, "Train the rectified model"},
      {Stage::Evaluate, "Answer the train and eval splits with the rectified model"},
      {Stage::Report, "Write the accuracy report"}};
  std::map<CLI::App*, Stage> stage_of;
  for (const auto& [stage, help] : stage_commands) {
    auto* cmd = app.add_subcommand(std::string(to_string(stage)), help);
    add_run_flags(cmd);
    stage_of[cmd] = stage;
  }

  auto* sweep = app.add_subcommand("sweep", "Grid over unlearning and search hyperparameters");
  add_run_flags(sweep);
  sweep->add_option("--lr", o.lr, "Learning rates")->delimiter(',');
  sweep->add_option("--batch", o.batch, "Batch sizes")->delimiter(',');
  sweep->add_option("--beta", o.beta, "Enhance weights")->delimiter(',');
  sweep->add_option("--alpha", o.alpha, "Forward-backward mixing rates")->delimiter(',');

  auto* analyze = app.add_subcommand("analyze", "Analyses over pipeline runs");
  analyze->require_subcommand(1);
  auto* overlap = analyze->add_subcommand("overlap", "Corpus overlap of elicited beliefs");
  add_run_flags(overlap);
  auto* sweep_n = analyze->add_subcommand("sweep-n", "Accuracy for several top-n belief counts");
  add_run_flags(sweep_n);
  sweep_n->add_option("--n", o.top_n, "Belief counts (default 1,4,8,16)")->delimiter(',');
  auto* compare = analyze->add_subcommand("compare-generators", "Accuracy per belief generator");
  add_run_flags(compare);
  compare->add_option("--generators", o.generators, "Generators (default fbbs,fbs,bbs,posthoc)")->delimiter(',');
  auto* cross = analyze->add_subcommand("cross-eval", "Accuracy of several checkpoints on several eval sets");
  cross->add_option("--checkpoint", o.checkpoints, "name=path of a rectified checkpoint (repeatable)");
  cross->add_option("--eval-set", o.eval_sets, "name=path of a JSON-lines eval set (repeatable)");
  cross->add_option("--vanilla", o.vanilla, "Vanilla checkpoint (default out/model/vanilla.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "bsr: " << e.what() << "\n";
    return kInvalid;
  }

  std::string stage_name = "analyze";
  try {
    for (const auto& [cmd, stage] : stage_of)
      if (cmd->parsed()) {
        stage_name = std::string(to_string(stage));
        return run_stage(o, stage);
      }
    if (sweep->parsed()) {
      stage_name = "sweep";
      return run_sweep(o);
    }
    for (auto* sub : analyze->get_subcommands())
      if (sub->parsed()) return run_analyze(o, sub->get_name());
  } catch (const ValidationError& e) {
    std::cerr << "bsr: " << e.what() << "\n";
    return kInvalid;
  } catch (const StageError& e) {
    std::cerr << "bsr: stage " << to_string(e.stage()) << " failed: " << bare(e) << "\n";
    return kStageFailed;
  } catch (const std::exception& e) {
    std::cerr << "bsr: stage " << stage_name << " failed: " << e.what() << "\n";
    return kStageFailed;
  }
  return kOk;
}
