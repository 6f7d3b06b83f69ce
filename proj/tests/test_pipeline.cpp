#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "beliefrect/checkpoint.hpp"
#include "beliefrect/hashing.hpp"
#include "beliefrect/pipeline.hpp"
#include "beliefrect/toy_models.hpp"

using namespace beliefrect;
namespace fs = std::filesystem;

namespace {

ErrorCode error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::IoError;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("bsr_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

QAInstance qa(std::string id, std::string q, std::string a) { return {std::move(id), std::move(q), {}, std::move(a), {}}; }

// Small enough to run the whole pipeline in a few seconds.
RunConfig tiny_config(const fs::path& out) {
  RunConfig c;
  WorldConfig w;
  w.fish = 6;
  w.sky_birds = 4;
  w.water_birds = 4;
  w.land_mammals = 4;
  w.water_mammals = 4;
  c.world = w;
  c.model.transformer.d_model = 16;
  c.model.transformer.n_heads = 2;
  c.model.transformer.d_ff = 32;
  c.model.transformer.max_positions = 48;
  c.model.pretrain.epochs = 30;
  c.fbbs.beam_n = 2;
  c.fbbs.candidate_m = 2;
  c.fbbs.max_belief_len = 4;
  c.fbbs.lookahead_budget = 4;
  c.decode.max_new_tokens = 4;
  c.bootstrap.iterations = 1000;
  c.unlearn.learning_rate = 1e-3;
  c.collapse_threshold = 0.0;
  c.seed = 3;
  c.out = out.string();
  return c;
}

std::string file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// dataset, membership, splits

TEST(Dataset, ReadsValidFile) {
  std::istringstream in(
      R"({"id":"a","question":"Q1?","answer":"x"})"
      "\n"
      R"({"id":"b","question":"Q2?","answer":"y","evidence":["e"]})"
      "\n\n"
      R"({"id":"c","question":"Q3?","choices":["x","y"],"answer":"y"})"
      "\n");
  const auto v = read_dataset(in);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[2].choices[1].label, "B");
  EXPECT_EQ(v[1].evidence.size(), 1u);
}

TEST(Dataset, MissingAnswerNamesLine) {
  std::istringstream in(R"({"id":"a","question":"Q1?","answer":"x"})"
                        "\n"
                        R"({"id":"b","question":"Q2?"})"
                        "\n");
  try {
    read_dataset(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SchemaError);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Dataset, DuplicateId) {
  std::istringstream in(R"({"id":"a","question":"Q1?","answer":"x"})"
                        "\n"
                        R"({"id":"a","question":"Q2?","answer":"y"})"
                        "\n");
  EXPECT_EQ(error_of([&] { read_dataset(in); }), ErrorCode::DuplicateId);
}

TEST(Dataset, AnswerMustBeAChoice) {
  std::istringstream in(R"({"id":"a","question":"Q?","choices":["x","y"],"answer":"z"})");
  EXPECT_EQ(error_of([&] { read_dataset(in); }), ErrorCode::SchemaError);
}

TEST(Membership, ByteExactQuestionAndAnswer) {
  const CorpusIndex corpus({"Does tulo have gills? Yes.", "Does mipa have gills?"});
  const auto split = membership_filter({qa("in", "Does tulo have gills?", "Yes"), qa("no-answer", "Does mipa have gills?", "No"),
                                        qa("case", "does tulo have gills?", "Yes")},
                                       corpus);
  ASSERT_EQ(split.members.size(), 1u);
  EXPECT_EQ(split.members[0].id, "in");
  ASSERT_EQ(split.non_members.size(), 2u);
  EXPECT_EQ(split.non_members[0].id, "no-answer");
  EXPECT_EQ(split.non_members[1].id, "case");
}

TEST(Splits, HalvesNonMembers) {
  auto make = [](std::size_t n) {
    std::vector<QAInstance> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back(qa("n" + std::to_string(i), "q", "a"));
    return v;
  };
  const auto members = std::vector<QAInstance>{qa("m0", "q", "a"), qa("m1", "q", "a")};
  const auto s10 = make_splits(members, make(10), 1);
  EXPECT_EQ(s10.dev.size(), 5u);
  EXPECT_EQ(s10.eval.size(), 5u);
  EXPECT_EQ(s10.train, members);

  const auto s11 = make_splits(members, make(11), 1);
  EXPECT_EQ(std::set<std::size_t>({s11.dev.size(), s11.eval.size()}), (std::set<std::size_t>{5, 6}));
  const auto again = make_splits(members, make(11), 1);
  EXPECT_EQ(s11.dev, again.dev);
  EXPECT_EQ(s11.eval, again.eval);

  EXPECT_EQ(error_of([&] { make_splits(members, make(1), 1); }), ErrorCode::InsufficientData);
}

TEST(Splits, DisjointAndCoveringProperty) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::vector<QAInstance> members, non;
    for (std::size_t i = 0; i < seed % 5; ++i) members.push_back(qa("m" + std::to_string(i), "q", "a"));
    for (std::size_t i = 0; i < 2 + seed; ++i) non.push_back(qa("n" + std::to_string(i), "q", "a"));
    const auto s = make_splits(members, non, seed);
    std::set<std::string> ids;
    for (const auto* part : {&s.train, &s.dev, &s.eval})
      for (const auto& i : *part) EXPECT_TRUE(ids.insert(i.id).second) << i.id;
    EXPECT_EQ(ids.size(), members.size() + non.size());
    EXPECT_LE(s.eval.size() - s.dev.size(), 1u);
  }
}

// ---------------------------------------------------------------------------
// answering and partition

TEST(AnswerInference, DeterministicModel) {
  Vocabulary vocab(std::vector<std::string>{"What", "is", "the", "capital", "?", "The", "answer", "Paris", "."});
  const ChainModel model(vocab, {{vocab.id("is"), vocab.id("Paris")}, {vocab.id("Paris"), vocab.id(".")}},
                         vocab.id("What"));
  const QAInstance inst = qa("q", "What is the capital?", "paris");
  EXPECT_EQ(answer_inference(model, inst, DecodeConfig{}), "paris");
  EXPECT_EQ(answer_inference(model, inst, DecodeConfig{}), answer_inference(model, inst, DecodeConfig{}));
}

TEST(AnswerInference, MultipleChoiceRender) {
  QAInstance inst = qa("q", "Which animal lives in the desert?", "a horned viper");
  inst.choices = {{"A", "a koala bear"}, {"B", "a horned viper"}, {"C", "Gyrfalcon"}, {"D", "a sloth"}};
  const std::string prompt = answer_prompt(inst, DecodeConfig{});
  EXPECT_NE(prompt.find("(A) a koala bear, (B) a horned viper"), std::string::npos);
  EXPECT_TRUE(prompt.ends_with("The answer is"));
}

TEST(Partition, CountsAndRecordsWrongAnswer) {
  const std::vector<QAInstance> train{qa("a", "q", "yes"), qa("b", "q", "yes"), qa("c", "q", "no"), qa("d", "q", "yes")};
  Vocabulary vocab(std::vector<std::string>{"q", "The", "answer", "is", "Yes", "."});
  const ChainModel always_yes(vocab, {{vocab.id("is"), vocab.id("Yes")}, {vocab.id("Yes"), vocab.id(".")}}, vocab.id("q"));
  const auto part = partition_by_correctness(always_yes, train, DecodeConfig{});
  ASSERT_EQ(part.incorrect.size(), 1u);
  EXPECT_EQ(part.correct.size(), 3u);
  EXPECT_EQ(part.incorrect[0].instance.id, "c");
  EXPECT_EQ(part.incorrect[0].y_inc, "Yes");

  const std::vector<QAInstance> all_no{qa("a", "q", "no"), qa("b", "q", "no")};
  EXPECT_TRUE(partition_by_correctness(always_yes, all_no, DecodeConfig{}).correct.empty());
  EXPECT_TRUE(partition_by_correctness(always_yes, {qa("a", "q", "YES ")}, DecodeConfig{}).incorrect.empty());
}

TEST(Partition, ExhaustiveAndExclusiveProperty) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<QAInstance> train;
    std::vector<Prediction> preds;
    for (int i = 0; i < 1 + trial % 9; ++i) {
      const bool ok = rng() % 2;
      train.push_back(qa("i" + std::to_string(i), "q", "yes"));
      preds.push_back({train.back().id, ok ? "yes" : "no", ok ? "yes" : "no", ok});
    }
    const auto part = partition_from_predictions(train, preds);
    std::set<std::string> ids;
    for (const auto& i : part.incorrect) EXPECT_TRUE(ids.insert(i.instance.id).second);
    for (const auto& i : part.correct) EXPECT_TRUE(ids.insert(i.id).second);
    EXPECT_EQ(ids.size(), train.size());
  }
}

// ---------------------------------------------------------------------------
// world

TEST(World, ShapeAndPlantedConfound) {
  WorldConfig c;
  const World w = generate_world(c);
  EXPECT_EQ(w.entities.size(), c.entity_count());
  EXPECT_GE(w.entities.size(), 200u);
  ASSERT_EQ(w.instances.size(), w.entities.size());
  const CorpusIndex corpus(w.corpus);
  std::size_t members = 0;
  for (std::size_t i = 0; i < w.entities.size(); ++i) {
    const auto& e = w.entities[i];
    EXPECT_EQ(e.has_gills, e.kind == "fish");
    EXPECT_EQ(e.confounded, e.habitat == "water" && e.kind != "fish");
    const bool in_corpus = corpus.contains(w.instances[i].question) && corpus.contains(w.instances[i].answer);
    EXPECT_EQ(e.member, corpus.contains(w.instances[i].question)) << e.name;
    members += in_corpus;
  }
  EXPECT_GT(members, 0u);
  EXPECT_LT(members, w.entities.size());
  const World again = generate_world(c);
  EXPECT_EQ(again.corpus, w.corpus);
}

// ---------------------------------------------------------------------------
// config

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c = tiny_config("runs/x");
  c.method = Method::KnowledgeSR;
  c.generator = Generator::BBS;
  c.unlearn.beta = 0.1;
  const nlohmann::json j = c;
  const RunConfig back = j.get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.method, Method::KnowledgeSR);
  EXPECT_EQ(back.world->fish, 6u);
}

TEST(RunConfig, UnknownKeyRejected) {
  nlohmann::json j = {{"unlearn", {{"learning_rte", 1e-4}}}};
  try {
    j.get<RunConfig>();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
    EXPECT_NE(std::string(e.what()).find("unlearn.learning_rte"), std::string::npos);
  }
  EXPECT_EQ(error_of([] { nlohmann::json{{"seed", "zero"}}.get<RunConfig>(); }), ErrorCode::InvalidConfig);
}

TEST(RunConfig, AttributionMethodNamesAreNotImplemented) {
  EXPECT_EQ(method_from_string("belief-sr"), Method::BeliefSR);
  try {
    method_from_string("hif");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotImplemented);
    EXPECT_TRUE(std::string(e.what()).ends_with("method not implemented: hif"));
  }
  EXPECT_EQ(error_of([] { method_from_string("magic"); }), ErrorCode::InvalidConfig);
}

TEST(RunConfig, EnvironmentOverrides) {
  nlohmann::json j = RunConfig{};
  std::string a = "BSR_UNLEARN_LEARNING_RATE=0.001", b = "BSR_SEED=7", c = "BSR_WORLD_FISH=9", d = "PATH=/bin",
              e = "BSR_ENHANCE_CORRECT=true";
  char* env[] = {a.data(), b.data(), c.data(), d.data(), e.data(), nullptr};
  apply_env_overrides(j, env);
  const RunConfig r = j.get<RunConfig>();
  EXPECT_DOUBLE_EQ(r.unlearn.learning_rate, 0.001);
  EXPECT_EQ(r.seed, 7u);
  ASSERT_TRUE(r.world.has_value());
  EXPECT_EQ(r.world->fish, 9u);
  EXPECT_TRUE(r.enhance_correct);

  nlohmann::json untouched = RunConfig{};
  char* none[] = {d.data(), nullptr};
  apply_env_overrides(untouched, none);
  EXPECT_TRUE(untouched["world"].is_null());

  std::string bad = "BSR_UNLEARN_EPOCHS=-1", unknown = "BSR_NOPE=1";
  char* env_bad[] = {bad.data(), nullptr};
  char* env_unknown[] = {unknown.data(), nullptr};
  nlohmann::json k = RunConfig{};
  EXPECT_EQ(error_of([&] { apply_env_overrides(k, env_bad); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(error_of([&] { apply_env_overrides(k, env_unknown); }), ErrorCode::InvalidConfig);

  const auto names = env_override_names(RunConfig{});
  EXPECT_NE(std::find(names.begin(), names.end(), "BSR_FBBS_BEAM_N"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "BSR_MODEL_PRETRAIN_EPOCHS"), names.end());
}

TEST(RunConfig, ResolveValidates) {
  RunConfig c;
  EXPECT_EQ(error_of([&] { c.resolve(); }), ErrorCode::InvalidConfig);  // no dataset
  c = tiny_config("runs/x");
  c.fbbs.candidate_m = 5;
  EXPECT_EQ(error_of([&] { c.resolve(); }), ErrorCode::InvalidConfig);
  c = tiny_config("runs/x");
  c.variant = "../up";
  EXPECT_EQ(error_of([&] { c.resolve(); }), ErrorCode::InvalidConfig);
  c = tiny_config("runs/x");
  c.resolve();
  EXPECT_EQ(c.world->seed, 3u);
  EXPECT_EQ(c.unlearn.seed, 3u);
}

// ---------------------------------------------------------------------------
// orchestration

TEST(Pipeline, SmokeRunWritesLayoutAndReport) {
  const auto out = scratch("smoke");
  const RunResult r = run_rectification(tiny_config(out));
  for (const char* f : {"manifest.json", "data/dataset.jsonl", "data/corpus.txt", "data/splits.json", "model/vanilla.ckpt",
                        "model/pretrain_loss.tsv", "eval/vanilla_predictions.tsv", "eval/partition.json",
                        "beliefs/spurious.tsv", "beliefs/true.tsv", "model/rectified.ckpt", "rectify/training_log.tsv",
                        "rectify/summary.json", "eval/rectified_predictions.tsv", "report/report.tsv", "report/report.md"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  ASSERT_EQ(r.reports.size(), 2u);
  EXPECT_EQ(r.reports[0].method, "vanilla");
  EXPECT_EQ(r.reports[1].method, "belief-sr");
  // the report has the four accuracy columns for both rows
  std::istringstream tsv(file(r.report_tsv));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(tsv, line)) {
    std::vector<std::string> cols;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, '\t');) cols.push_back(c);
    rows.push_back(cols);
  }
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(std::vector<std::string>(rows[0].begin() + 1, rows[0].begin() + 5),
            (std::vector<std::string>{"d_inc", "d_cor", "d_train", "d_eval"}));
  for (const auto& row : rows) EXPECT_EQ(row.size(), 13u);
  // vanilla answers every D✓ instance correctly and every D✗ instance wrongly
  EXPECT_EQ(r.reports[0].at(Split::Correct).hits(), r.reports[0].at(Split::Correct).size());
  EXPECT_EQ(r.reports[0].at(Split::Incorrect).hits(), 0u);
  fs::remove_all(out);
}

TEST(Pipeline, ResumeIsNoOpAndConfigChangeReruns) {
  const auto out = scratch("resume");
  RunConfig c = tiny_config(out);
  const auto first = run_rectification(c);
  const std::string ckpt = sha256_file(first.rectified_checkpoint);
  const std::string manifest = file(out / "manifest.json");
  const auto second = run_rectification(c);
  for (const auto& s : second.stages) EXPECT_TRUE(s.skipped) << to_string(s.stage);
  EXPECT_EQ(sha256_file(second.rectified_checkpoint), ckpt);
  EXPECT_EQ(file(out / "manifest.json"), manifest);

  c.unlearn.beta = 0.1;
  const auto third = run_rectification(c);
  for (const auto& s : third.stages)
    EXPECT_EQ(s.skipped, s.stage == Stage::Prepare || s.stage == Stage::BaselineEval || s.stage == Stage::Elicit)
        << to_string(s.stage);

  // a tampered output is regenerated
  { std::ofstream(out / "report/report.tsv") << "junk"; }
  const auto fourth = run_rectification(c);
  EXPECT_FALSE(fourth.stages.back().skipped);
  EXPECT_NE(file(out / "report/report.tsv"), "junk");
  fs::remove_all(out);
}

TEST(Pipeline, AnswerSrSkipsElicitation) {
  const auto out = scratch("answer");
  RunConfig c = tiny_config(out);
  c.method = Method::AnswerSR;
  const auto r = run_rectification(c);
  EXPECT_FALSE(fs::exists(out / "beliefs"));
  ASSERT_EQ(r.reports.size(), 2u);
  EXPECT_EQ(r.reports[1].method, "answer-sr");
  fs::remove_all(out);
}

TEST(Pipeline, ZeroEpochsReportEqualsVanilla) {
  const auto out = scratch("zero");
  RunConfig c = tiny_config(out);
  c.unlearn.epochs = 0;
  const auto r = run_rectification(c);
  ASSERT_EQ(r.reports.size(), 2u);
  for (Split s : kSplits) EXPECT_EQ(r.reports[1].at(s).correct, r.reports[0].at(s).correct) << to_string(s);
  EXPECT_EQ(sha256_file(out / "model/rectified.ckpt"), sha256_file(out / "model/vanilla.ckpt"));
  fs::remove_all(out);
}

TEST(Pipeline, VariantsShareTheBaseRun) {
  const auto out = scratch("variant");
  RunConfig c = tiny_config(out);
  run_rectification(c);
  const std::string vanilla = sha256_file(out / "model/vanilla.ckpt");
  c.variant = "other";
  c.method = Method::KnowledgeSR;
  Pipeline p(c);
  const auto r = p.run_all();
  EXPECT_TRUE(r.stages[0].skipped);
  EXPECT_TRUE(r.stages[1].skipped);
  EXPECT_TRUE(fs::exists(out / "variants/other/attribution/scores.tsv"));
  EXPECT_TRUE(fs::exists(out / "variants/other/report/report.md"));
  EXPECT_EQ(sha256_file(out / "model/vanilla.ckpt"), vanilla);
  fs::remove_all(out);
}

TEST(Pipeline, CollapseGuardKeepsHeldOutAccuracy) {
  const auto out = scratch("guard");
  RunConfig c = tiny_config(out);
  c.unlearn.learning_rate = 3e-2;
  c.unlearn.epochs = 4;
  c.unlearn.check_interval = 1;
  c.collapse_threshold = 1e-9;
  const auto r = run_rectification(c);
  const auto& cor = r.reports[1].at(Split::Correct);
  ASSERT_GT(cor.size(), 0u);
  EXPECT_EQ(cor.hits(), cor.size());
  const auto summary = nlohmann::json::parse(file(out / "rectify/summary.json"));
  EXPECT_LT(summary["kept_step"].get<std::size_t>(), summary["planned_steps"].get<std::size_t>());
  EXPECT_NE(summary["stop_reason"].get<std::string>().find("held-out accuracy"), std::string::npos);
  fs::remove_all(out);
}

TEST(Pipeline, StageErrorsAreTagged) {
  const auto out = scratch("stage_error");
  RunConfig c = tiny_config(out);
  c.world.reset();
  std::ofstream(out / "data.jsonl") << R"({"id":"a","question":"Q?","answer":"x"})" << "\n";
  std::ofstream(out / "corpus.txt") << "nothing relevant here\n";
  c.dataset = (out / "data.jsonl").string();
  c.corpus = (out / "corpus.txt").string();
  c.out = (out / "run").string();
  try {
    Pipeline(c).run_all();
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), Stage::Prepare);
    EXPECT_TRUE(std::string(e.what()).find("prepare") != std::string::npos);
  }
  fs::remove_all(out);
}

TEST(Pipeline, RunsAreDeterministic) {
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  const auto ra = run_rectification(tiny_config(a));
  const auto rb = run_rectification(tiny_config(b));
  EXPECT_EQ(file(ra.report_tsv), file(rb.report_tsv));
  EXPECT_EQ(sha256_file(ra.rectified_checkpoint), sha256_file(rb.rectified_checkpoint));
  fs::remove_all(a);
  fs::remove_all(b);
}

// ---------------------------------------------------------------------------
// cross evaluation

TEST(CrossEvaluate, Shapes) {
  Vocabulary vocab(std::vector<std::string>{"q", "The", "answer", "is", "Yes", "No", "."});
  TransformerConfig tc;
  tc.d_model = 8;
  tc.n_heads = 2;
  tc.d_ff = 16;
  tc.max_positions = 16;
  const TransformerLM vanilla(vocab, tc);
  DecodeConfig dc;
  dc.max_new_tokens = 2;
  const std::vector<QAInstance> set{qa("a", "q", "yes"), qa("b", "q", "no")};

  const auto one = cross_evaluate(vanilla, {{"d1", vanilla}}, {{"d1", set}}, dc);
  EXPECT_EQ(one.rows, (std::vector<std::string>{"d1", "vanilla"}));
  ASSERT_EQ(one.values.size(), 2u);
  EXPECT_EQ(one.values[0].size(), 1u);
  EXPECT_EQ(one.values[0], one.values[1]);  // identical checkpoints give identical rows

  std::map<std::string, TransformerLM> models;
  std::map<std::string, std::vector<QAInstance>> sets;
  for (const char* d : {"d1", "d2", "d3"}) {
    tc.seed += 1;
    models.emplace(d, TransformerLM(vocab, tc));
    sets[d] = set;
  }
  const auto three = cross_evaluate(vanilla, models, sets, dc);
  ASSERT_EQ(three.values.size(), 4u);
  std::size_t cells = 0;
  for (const auto& row : three.values) cells += row.size();
  EXPECT_EQ(cells, 9u + 3u);
  EXPECT_EQ(three.rows.back(), "vanilla");
  const auto rendered = render_cross_eval(three);
  EXPECT_NE(rendered.markdown.find("| vanilla |"), std::string::npos);

  Vocabulary other(std::vector<std::string>{"q", "The", "answer", "is", "Yes", "No", ".", "extra"});
  std::map<std::string, TransformerLM> mismatched;
  mismatched.emplace("d1", TransformerLM(other, tc));
  EXPECT_EQ(error_of([&] { cross_evaluate(vanilla, mismatched, {{"d1", set}}, dc); }), ErrorCode::CheckpointMismatch);
}
