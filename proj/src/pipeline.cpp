#include "beliefrect/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "beliefrect/checkpoint.hpp"
#include "beliefrect/corpus_index.hpp"
#include "beliefrect/hashing.hpp"
#include "beliefrect/parallel.hpp"

namespace beliefrect {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Prepare: return "prepare";
    case Stage::BaselineEval: return "baseline-eval";
    case Stage::Elicit: return "elicit";
    case Stage::Rectify: return "rectify";
    case Stage::Evaluate: return "evaluate";
    case Stage::Report: return "report";
  }
  return "?";
}

StageError::StageError(Stage stage, ErrorCode code, const std::string& message)
    : Error(code, std::string(to_string(stage)) + ": " + message), stage_(stage) {}

namespace {

// ---------------------------------------------------------------------------
// files

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::SchemaError, path.string() + ": " + e.what());
  }
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return cols;
}

// ---------------------------------------------------------------------------
// data shared between stages

struct Data {
  std::vector<QAInstance> instances;
  std::map<std::string, const QAInstance*> by_id;
  std::vector<std::string> corpus;
  std::vector<QAInstance> train, dev, eval;
};

std::unique_ptr<Data> load_data(const fs::path& base) {
  auto d = std::make_unique<Data>();
  d->instances = load_dataset(base / "data/dataset.jsonl");
  for (const auto& inst : d->instances) d->by_id[inst.id] = &inst;
  d->corpus = read_lines(base / "data/corpus.txt");
  const json splits = read_json(base / "data/splits.json");
  for (auto [name, dst] : {std::pair{"train", &d->train}, {"dev", &d->dev}, {"eval", &d->eval}})
    for (const auto& id : splits.at(name)) {
      const auto it = d->by_id.find(id.get<std::string>());
      if (it == d->by_id.end()) fail(ErrorCode::SchemaError, "splits.json names unknown instance " + id.get<std::string>());
      dst->push_back(*it->second);
    }
  return d;
}

PromptTemplate load_template(const RunConfig& c) {
  return c.template_path.empty() ? PromptTemplate::standard() : PromptTemplate::load(c.template_path);
}

std::string template_hash(const RunConfig& c) {
  return c.template_path.empty() ? "standard" : sha256_file(c.template_path);
}

Vocabulary build_vocabulary(const std::vector<QAInstance>& instances, const std::vector<std::string>& corpus,
                            const PromptTemplate& tmpl, const DecodeConfig& decode) {
  std::vector<std::string> texts = corpus;
  for (const auto& inst : instances) {
    texts.push_back(render_question(inst));
    texts.push_back(inst.answer);
    for (const auto& e : inst.evidence) texts.push_back(e);
  }
  for (auto& w : prompt_words()) texts.push_back(std::move(w));
  texts.push_back(tmpl.render_prefix("") + " " + tmpl.render_suffix(""));
  texts.push_back(decode.prompt_suffix);
  texts.push_back(decode.stop_word);
  return Vocabulary::from_texts(texts);
}

// Predictions file: split, id, raw, predicted, correct.
void write_predictions(const fs::path& path, const std::vector<std::pair<std::string, std::vector<Prediction>>>& sets) {
  std::ostringstream out;
  out << "split\tid\traw\tpredicted\tcorrect\n";
  for (const auto& [split, preds] : sets)
    for (const auto& p : preds)
      out << split << '\t' << p.id << '\t' << p.raw << '\t' << p.predicted << '\t' << (p.correct ? 1 : 0) << '\n';
  write_text(path, out.str());
}

std::map<std::string, std::vector<Prediction>> read_predictions(const fs::path& path) {
  std::map<std::string, std::vector<Prediction>> sets;
  const auto lines = read_lines(path);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cols = split_tabs(lines[i]);
    if (cols.size() != 5) fail(ErrorCode::SchemaError, path.string() + ": bad line " + std::to_string(i + 1));
    sets[cols[0]].push_back({cols[1], cols[2], cols[3], cols[4] == "1"});
  }
  return sets;
}

struct PartitionIds {
  std::vector<std::pair<std::string, std::string>> incorrect;  // id, y_inc
  std::vector<std::string> correct;
};

PartitionIds read_partition(const fs::path& base) {
  const json j = read_json(base / "eval/partition.json");
  PartitionIds p;
  for (const auto& e : j.at("incorrect")) p.incorrect.emplace_back(e.at("id"), e.at("y_inc"));
  for (const auto& id : j.at("correct")) p.correct.push_back(id);
  return p;
}

std::vector<BeliefRecord> read_beliefs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return read_belief_records(in);
}

void write_beliefs(const fs::path& path, const std::vector<BeliefRecord>& records) {
  std::ostringstream out;
  write_belief_records(out, records);
  write_text(path, out.str());
}

std::map<std::string, std::vector<Belief>> group_beliefs(const std::vector<BeliefRecord>& records) {
  std::map<std::string, std::vector<Belief>> out;
  for (const auto& r : records) out[r.instance_id].push_back(r.belief);
  return out;
}

std::vector<EvidenceDoc> evidence_pool(const std::vector<std::string>& corpus, const std::vector<QAInstance>& instances) {
  std::map<std::string, std::string> source;
  for (const auto& inst : instances)
    for (const auto& e : inst.evidence) source.emplace(e, inst.id);
  std::vector<EvidenceDoc> pool;
  pool.reserve(corpus.size());
  char id[32];
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::snprintf(id, sizeof id, "doc-%06zu", i);
    EvidenceDoc d{id, corpus[i], std::nullopt};
    if (const auto it = source.find(corpus[i]); it != source.end()) d.source_instance = it->second;
    pool.push_back(std::move(d));
  }
  return pool;
}

AttributionQuery answer_query(const QAInstance& inst, const std::string& y_inc, const DecodeConfig& decode,
                              const Vocabulary& vocab) {
  AttributionQuery q;
  q.id = inst.id;
  q.context = vocab.encode(answer_prompt(inst, decode)).tokens;
  q.target = vocab.encode(y_inc).tokens;
  return q;
}

SplitResult split_result(const std::vector<std::string>& ids, const std::vector<Prediction>& preds,
                         const std::string& what) {
  std::map<std::string, bool> correct;
  for (const auto& p : preds) correct[p.id] = p.correct;
  SplitResult r;
  for (const auto& id : ids) {
    const auto it = correct.find(id);
    if (it == correct.end()) fail(ErrorCode::SchemaError, what + " has no prediction for " + id);
    r.ids.push_back(id);
    r.correct.push_back(it->second);
  }
  return r;
}

std::vector<std::string> ids_of(const std::vector<QAInstance>& v) {
  std::vector<std::string> ids;
  for (const auto& i : v) ids.push_back(i.id);
  return ids;
}

std::string bare_message(const Error& e) {
  std::string s = e.what();
  const std::string prefix = std::string(to_string(e.code())) + ": ";
  return s.starts_with(prefix) ? s.substr(prefix.size()) : s;
}

std::string rel(const fs::path& p, const fs::path& dir) { return p.lexically_relative(dir).generic_string(); }

}  // namespace

// ---------------------------------------------------------------------------
// manifest

struct Pipeline::Manifest {
  fs::path path;
  json doc;

  static Manifest load(const fs::path& dir) {
    Manifest m{dir / "manifest.json", json::object()};
    if (fs::exists(m.path)) {
      try {
        m.doc = json::parse(read_text(m.path));
      } catch (const json::parse_error&) {
        m.doc = json::object();  // unreadable: every stage reruns
      }
    }
    if (!m.doc.contains("stages") || !m.doc["stages"].is_object()) m.doc["stages"] = json::object();
    return m;
  }
  void save() const { write_text(path, doc.dump(2) + "\n"); }
  const json* stage(Stage s) const {
    const auto& st = doc["stages"];
    const auto it = st.find(std::string(to_string(s)));
    return it == st.end() ? nullptr : &*it;
  }
};

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)) { config_.resolve(); }

fs::path Pipeline::base_dir() const { return config_.out; }

fs::path Pipeline::variant_dir() const {
  return config_.variant.empty() ? base_dir() : base_dir() / "variants" / config_.variant;
}

fs::path Pipeline::dir_for(Stage stage) const {
  return stage == Stage::Prepare || stage == Stage::BaselineEval ? base_dir() : variant_dir();
}

std::string Pipeline::stage_key(Stage stage) const {
  const json cfg = config_;
  json section;
  switch (stage) {
    case Stage::Prepare:
      section = {{"dataset", config_.dataset.empty() || config_.world ? "" : sha256_file(config_.dataset)},
                 {"corpus", config_.corpus.empty() || config_.world ? "" : sha256_file(config_.corpus)},
                 {"world", cfg["world"]},
                 {"model", cfg["model"]},
                 {"checkpoint", config_.model.checkpoint.empty() ? "" : sha256_file(config_.model.checkpoint)},
                 {"decode", cfg["decode"]},
                 {"template", template_hash(config_)},
                 {"seed", config_.seed}};
      break;
    case Stage::BaselineEval:
      section = {{"decode", cfg["decode"]}};
      break;
    case Stage::Elicit:
      section = {{"method", cfg["method"]},
                 {"fbbs", cfg["fbbs"]},
                 {"generator", cfg["generator"]},
                 {"template", template_hash(config_)},
                 {"enhance_correct", config_.enhance_correct},
                 {"attribution", cfg["attribution"]},
                 {"top_k", config_.unlearn.top_k_beliefs},
                 {"decode", cfg["decode"]}};
      break;
    case Stage::Rectify:
      section = {{"unlearn", cfg["unlearn"]},
                 {"method", cfg["method"]},
                 {"enhance_correct", config_.enhance_correct},
                 {"collapse_threshold", config_.collapse_threshold},
                 {"template", template_hash(config_)},
                 {"decode", cfg["decode"]},
                 {"seed", config_.seed}};
      break;
    case Stage::Evaluate:
      section = {{"decode", cfg["decode"]}};
      break;
    case Stage::Report:
      section = {{"bootstrap", cfg["bootstrap"]}, {"method", cfg["method"]}, {"seed", config_.seed}};
      break;
  }
  json upstream = json::object();
  const auto pos = static_cast<std::size_t>(stage);
  if (pos > 0) {
    const Stage prev = kAllStages[pos - 1];
    const auto m = Manifest::load(dir_for(prev));
    if (const json* entry = m.stage(prev)) upstream = {{"key", (*entry)["key"]}, {"outputs", (*entry)["outputs"]}};
  }
  const json k = {{"stage", to_string(stage)}, {"layout", kLayoutVersion}, {"config", section}, {"upstream", upstream}};
  return sha256_hex(k.dump());
}

bool Pipeline::is_current(Stage stage, const std::string& key) const {
  const fs::path dir = dir_for(stage);
  const auto m = Manifest::load(dir);
  const json* entry = m.stage(stage);
  if (!entry || entry->value("key", "") != key) return false;
  for (const auto& [file, hash] : (*entry)["outputs"].items()) {
    const fs::path p = dir / file;
    if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
  }
  return true;
}

void Pipeline::record(Stage stage, const std::string& key, const std::vector<fs::path>& outputs) {
  const fs::path dir = dir_for(stage);
  auto m = Manifest::load(dir);
  json files = json::object();
  for (const auto& p : outputs) files[rel(p, dir)] = sha256_file(p);
  m.doc["layout_version"] = kLayoutVersion;
  m.doc["seed"] = config_.seed;
  m.doc["config"] = config_;
  m.doc["stages"][std::string(to_string(stage))] = {{"key", key}, {"outputs", files}};
  // downstream entries in this manifest are stale now; their keys will not match
  m.save();
}

StageOutcome Pipeline::run(Stage stage) {
  StageOutcome last{stage, false, {}};
  for (Stage s : kAllStages) {
    StageOutcome o{s, false, stage_key(s)};
    if (is_current(s, o.key)) {
      o.skipped = true;
    } else {
      try {
        switch (s) {
          case Stage::Prepare: do_prepare(); break;
          case Stage::BaselineEval: do_baseline_eval(); break;
          case Stage::Elicit: do_elicit(); break;
          case Stage::Rectify: do_rectify(); break;
          case Stage::Evaluate: do_evaluate(); break;
          case Stage::Report: do_report(); break;
        }
      } catch (const StageError&) {
        throw;
      } catch (const Error& e) {
        throw StageError(s, e.code(), bare_message(e));
      } catch (const std::exception& e) {
        throw StageError(s, ErrorCode::IoError, e.what());
      }
      o.key = stage_key(s);
    }
    log_.push_back(o);
    last = o;
    if (s == stage) break;
  }
  return last;
}

RunResult Pipeline::run_all() {
  log_.clear();
  run(Stage::Report);
  RunResult r;
  const fs::path v = variant_dir();
  r.rectified_checkpoint = v / "model/rectified.ckpt";
  if (config_.method == Method::BeliefSR) {
    r.spurious_beliefs = v / "beliefs/spurious.tsv";
    r.true_beliefs = v / "beliefs/true.tsv";
  }
  r.report_tsv = v / "report/report.tsv";
  r.report_md = v / "report/report.md";
  r.reports = load_reports();
  r.stages = log_;
  return r;
}

// ---------------------------------------------------------------------------
// stages

void Pipeline::do_prepare() {
  const fs::path base = base_dir();
  std::vector<QAInstance> instances;
  std::vector<std::string> corpus;
  if (config_.world) {
    auto w = generate_world(*config_.world);
    instances = std::move(w.instances);
    corpus = std::move(w.corpus);
  } else {
    instances = load_dataset(config_.dataset);
    corpus = read_lines(config_.corpus);
  }
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "corpus is empty");
  for (const auto& doc : corpus)
    if (doc.find('\n') != std::string::npos) fail(ErrorCode::SchemaError, "corpus documents must be single lines");

  const CorpusIndex index(corpus);
  auto membership = membership_filter(instances, index);
  auto splits = make_splits(std::move(membership.members), std::move(membership.non_members), config_.seed);
  if (splits.train.empty()) fail(ErrorCode::InsufficientData, "no instance occurs in the corpus");

  const PromptTemplate tmpl = load_template(config_);
  const Vocabulary vocab = build_vocabulary(instances, corpus, tmpl, config_.decode);

  std::vector<fs::path> outputs;
  fs::create_directories(base / "data");
  save_dataset(base / "data/dataset.jsonl", instances);
  outputs.push_back(base / "data/dataset.jsonl");
  {
    std::string text;
    for (const auto& d : corpus) text += d + "\n";
    write_text(base / "data/corpus.txt", text);
    outputs.push_back(base / "data/corpus.txt");
  }
  write_text(base / "data/splits.json",
             json{{"train", ids_of(splits.train)}, {"dev", ids_of(splits.dev)}, {"eval", ids_of(splits.eval)}}.dump(2) +
                 "\n");
  outputs.push_back(base / "data/splits.json");

  const fs::path ckpt = base / "model/vanilla.ckpt";
  fs::create_directories(ckpt.parent_path());
  std::ostringstream losses;
  losses << "epoch\tloss\n";
  if (!config_.model.checkpoint.empty()) {
    const TransformerLM model = load_checkpoint(config_.model.checkpoint, vocab.hash());
    save_checkpoint(model, ckpt);
  } else {
    TransformerLM model(vocab, config_.model.transformer);
    std::vector<std::vector<TokenId>> docs;
    docs.reserve(corpus.size());
    for (const auto& d : corpus) docs.push_back(vocab.encode(d).tokens);
    char line[64];
    fit(model, docs, config_.model.pretrain, [&](std::size_t epoch, double loss) {
      std::snprintf(line, sizeof line, "%zu\t%.6f\n", epoch + 1, loss);
      losses << line;
    });
    save_checkpoint(model, ckpt);
  }
  write_text(base / "model/pretrain_loss.tsv", losses.str());
  outputs.push_back(ckpt);
  outputs.push_back(base / "model/pretrain_loss.tsv");
  record(Stage::Prepare, stage_key(Stage::Prepare), outputs);
}

void Pipeline::do_baseline_eval() {
  const fs::path base = base_dir();
  const auto data = load_data(base);
  const TransformerLM model = load_checkpoint(base / "model/vanilla.ckpt");
  const auto train = predict_all(model, data->train, config_.decode, config_.jobs);
  const auto eval = predict_all(model, data->eval, config_.decode, config_.jobs);
  write_predictions(base / "eval/vanilla_predictions.tsv", {{"train", train}, {"eval", eval}});

  const Partition part = partition_from_predictions(data->train, train);
  json incorrect = json::array();
  for (const auto& i : part.incorrect) incorrect.push_back({{"id", i.instance.id}, {"y_inc", i.y_inc}});
  write_text(base / "eval/partition.json",
             json{{"incorrect", incorrect}, {"correct", ids_of(part.correct)}}.dump(2) + "\n");
  record(Stage::BaselineEval, stage_key(Stage::BaselineEval),
         {base / "eval/vanilla_predictions.tsv", base / "eval/partition.json"});
}

void Pipeline::do_elicit() {
  const fs::path base = base_dir();
  const fs::path dir = variant_dir();
  std::vector<fs::path> outputs;
  if (config_.method == Method::AnswerSR) {
    record(Stage::Elicit, stage_key(Stage::Elicit), outputs);
    return;
  }
  const auto data = load_data(base);
  const auto part = read_partition(base);
  const TransformerLM model = load_checkpoint(base / "model/vanilla.ckpt");

  if (config_.method == Method::KnowledgeSR) {
    const auto pool = evidence_pool(data->corpus, data->instances);
    std::vector<AttributionQuery> queries;
    for (const auto& [id, y_inc] : part.incorrect)
      if (!split_words(y_inc).empty())
        queries.push_back(answer_query(*data->by_id.at(id), y_inc, config_.decode, model.vocabulary()));
    std::ostringstream out;
    if (!queries.empty()) {
      const auto ranked = rank_pool_batch(model, pool, queries, config_.attribution, config_.unlearn.top_k_beliefs,
                                          config_.jobs);
      for (std::size_t i = 0; i < queries.size(); ++i) write_scores(out, queries[i].id, ranked[i]);
    }
    write_text(dir / "attribution/scores.tsv", out.str());
    outputs.push_back(dir / "attribution/scores.tsv");
    record(Stage::Elicit, stage_key(Stage::Elicit), outputs);
    return;
  }

  const PromptTemplate tmpl = load_template(config_);
  struct Job {
    const QAInstance* inst;
    std::string answer;
    int side;  // 0 spurious, 1 true, 2 true belief of a correct instance
  };
  std::vector<Job> jobs;
  for (const auto& [id, y_inc] : part.incorrect) {
    if (split_words(y_inc).empty()) continue;  // nothing to explain
    const QAInstance* inst = data->by_id.at(id);
    jobs.push_back({inst, y_inc, 0});
    jobs.push_back({inst, inst->answer, 1});
  }
  if (config_.enhance_correct)
    for (const auto& id : part.correct) jobs.push_back({data->by_id.at(id), data->by_id.at(id)->answer, 2});

  std::vector<std::vector<Belief>> found(jobs.size());
  parallel_for(jobs.size(), config_.jobs, [&](std::size_t i) {
    try {
      found[i] = elicit_beliefs(model, tmpl, render_question(*jobs[i].inst), jobs[i].answer, config_.fbbs,
                                config_.generator);
    } catch (const Error& e) {
      // an instance without any completed belief drops out of rectification
      if (e.code() != ErrorCode::EmptyBeliefSpace && e.code() != ErrorCode::ContextTooLong) throw;
    }
  });
  std::array<std::vector<BeliefRecord>, 3> records;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    for (auto& b : found[i]) records[static_cast<std::size_t>(jobs[i].side)].push_back({jobs[i].inst->id, std::move(b)});
  const char* names[] = {"beliefs/spurious.tsv", "beliefs/true.tsv", "beliefs/correct_true.tsv"};
  for (std::size_t s = 0; s < 3; ++s) {
    if (s == 2 && !config_.enhance_correct) continue;
    write_beliefs(dir / names[s], records[s]);
    outputs.push_back(dir / names[s]);
  }
  record(Stage::Elicit, stage_key(Stage::Elicit), outputs);
}

void Pipeline::do_rectify() {
  const fs::path base = base_dir();
  const fs::path dir = variant_dir();
  const auto data = load_data(base);
  const auto part = read_partition(base);
  const TransformerLM model = load_checkpoint(base / "model/vanilla.ckpt");
  const Vocabulary& vocab = model.vocabulary();
  const PromptTemplate tmpl = load_template(config_);

  std::vector<RectificationPair> pairs;
  std::vector<RectificationPair> enhance_only;
  std::vector<std::vector<WeightedExample>> batches;

  switch (config_.method) {
    case Method::BeliefSR: {
      auto spurious = group_beliefs(read_beliefs(dir / "beliefs/spurious.tsv"));
      auto truths = group_beliefs(read_beliefs(dir / "beliefs/true.tsv"));
      for (const auto& [id, y_inc] : part.incorrect) {
        if (!spurious.count(id) || !truths.count(id)) continue;
        const QAInstance& inst = *data->by_id.at(id);
        pairs.push_back({inst, y_inc, inst.answer, std::move(spurious[id]), std::move(truths[id])});
      }
      if (config_.enhance_correct) {
        auto cor = group_beliefs(read_beliefs(dir / "beliefs/correct_true.tsv"));
        for (const auto& id : part.correct)
          if (cor.count(id)) {
            const QAInstance& inst = *data->by_id.at(id);
            enhance_only.push_back({inst, {}, inst.answer, {}, std::move(cor[id])});
          }
      }
      if (!pairs.empty()) batches = build_unlearn_batches(pairs, tmpl, config_.unlearn, vocab, enhance_only);
      break;
    }
    case Method::AnswerSR: {
      for (const auto& [id, y_inc] : part.incorrect) {
        if (split_words(y_inc).empty()) continue;
        const QAInstance& inst = *data->by_id.at(id);
        pairs.push_back({inst, y_inc, inst.answer, {}, {}});
      }
      if (config_.enhance_correct)
        for (const auto& id : part.correct) {
          const QAInstance& inst = *data->by_id.at(id);
          enhance_only.push_back({inst, {}, inst.answer, {}, {}});
        }
      if (!pairs.empty()) batches = answer_sr_sets(pairs, tmpl, config_.unlearn, vocab, enhance_only);
      break;
    }
    case Method::KnowledgeSR: {
      const auto pool = evidence_pool(data->corpus, data->instances);
      std::map<std::string, std::vector<AttributionScore>> ranked;
      for (const auto& line : read_lines(dir / "attribution/scores.tsv")) {
        const auto cols = split_tabs(line);
        if (cols.size() != 4) fail(ErrorCode::SchemaError, "attribution/scores.tsv: expected 4 columns");
        ranked[cols[0]].push_back({cols[1], attribution_method_from_string(cols[2]), std::stod(cols[3])});
      }
      std::vector<WeightedExample> suppress, enhance;
      for (const auto& [id, y_inc] : part.incorrect) {
        const auto it = ranked.find(id);
        if (it == ranked.end()) continue;
        const QAInstance& inst = *data->by_id.at(id);
        RectificationPair p{inst, y_inc, inst.answer, {}, {}};
        try {
          auto sets = knowledge_sr_sets(p, pool, it->second, config_.unlearn, vocab);
          std::move(sets.suppress.begin(), sets.suppress.end(), std::back_inserter(suppress));
          std::move(sets.enhance.begin(), sets.enhance.end(), std::back_inserter(enhance));
          pairs.push_back(std::move(p));
        } catch (const Error& e) {
          if (e.code() != ErrorCode::EmptyPool) throw;
        }
      }
      if (!pairs.empty()) batches = make_batches(std::move(suppress), std::move(enhance), config_.unlearn);
      break;
    }
  }

  ProgressCheck guard;
  std::vector<QAInstance> correct;
  for (const auto& id : part.correct) correct.push_back(*data->by_id.at(id));
  if (config_.collapse_threshold > 0.0 && !correct.empty()) {
    guard = [&](const TrainableModel& current, std::size_t step) -> std::optional<std::string> {
      const auto preds = predict_all(current, correct, config_.decode, config_.jobs);
      const double acc = static_cast<double>(std::count_if(preds.begin(), preds.end(),
                                                           [](const Prediction& p) { return p.correct; })) /
                         static_cast<double>(preds.size());
      // every D✓ instance was answered correctly before rectification
      if (1.0 - acc > config_.collapse_threshold) {
        char msg[96];
        std::snprintf(msg, sizeof msg, "held-out accuracy fell to %.4f at step %zu", acc, step);
        return std::string(msg);
      }
      return std::nullopt;
    };
  }
  RectifyResult r;
  if (batches.empty()) {
    r.model = model.clone();  // nothing to rectify
  } else {
    r = rectify_batches(model, batches, config_.unlearn, guard);
  }
  if (r.error) throw StageError(Stage::Rectify, *r.error, r.log.stop_reason);
  const auto* rectified = dynamic_cast<const TransformerLM*>(r.model.get());
  if (!rectified) fail(ErrorCode::SchemaError, "rectified model is not a transformer");
  fs::create_directories(dir / "model");
  save_checkpoint(*rectified, dir / "model/rectified.ckpt");
  std::ostringstream log;
  write_training_log(log, r.log);
  write_text(dir / "rectify/training_log.tsv", log.str());
  const json summary = {{"pairs", pairs.size()},
                        {"enhance_only", enhance_only.size()},
                        {"planned_steps", batches.size() * config_.unlearn.epochs},
                        {"kept_step", r.kept_step},
                        {"stop_reason", r.log.stop_reason}};
  write_text(dir / "rectify/summary.json", summary.dump(2) + "\n");
  record(Stage::Rectify, stage_key(Stage::Rectify),
         {dir / "model/rectified.ckpt", dir / "rectify/training_log.tsv", dir / "rectify/summary.json"});
}

void Pipeline::do_evaluate() {
  const fs::path dir = variant_dir();
  const auto data = load_data(base_dir());
  const TransformerLM model = load_checkpoint(dir / "model/rectified.ckpt");
  const auto train = predict_all(model, data->train, config_.decode, config_.jobs);
  const auto eval = predict_all(model, data->eval, config_.decode, config_.jobs);
  write_predictions(dir / "eval/rectified_predictions.tsv", {{"train", train}, {"eval", eval}});
  record(Stage::Evaluate, stage_key(Stage::Evaluate), {dir / "eval/rectified_predictions.tsv"});
}

void Pipeline::do_report() {
  const fs::path dir = variant_dir();
  const auto reports = load_reports();
  const RenderedReport rendered = render_report(reports);
  write_text(dir / "report/report.tsv", rendered.tsv);
  write_text(dir / "report/report.md", rendered.markdown);
  record(Stage::Report, stage_key(Stage::Report), {dir / "report/report.tsv", dir / "report/report.md"});
}

std::vector<EvalReport> Pipeline::load_reports() const {
  const fs::path base = base_dir();
  const auto data = load_data(base);
  const auto part = read_partition(base);
  std::vector<std::string> inc;
  for (const auto& [id, y] : part.incorrect) inc.push_back(id);
  const auto eval_ids = ids_of(data->eval);

  std::vector<EvalReport> reports;
  for (const auto& [name, path] : {std::pair<std::string, fs::path>{"vanilla", base / "eval/vanilla_predictions.tsv"},
                                   {std::string(to_string(config_.method)), variant_dir() / "eval/rectified_predictions.tsv"}}) {
    auto preds = read_predictions(path);
    reports.push_back(make_eval_report(name, split_result(inc, preds["train"], path.string()),
                                       split_result(part.correct, preds["train"], path.string()),
                                       split_result(eval_ids, preds["eval"], path.string())));
  }
  mark_significance(reports, "vanilla", config_.bootstrap);
  return reports;
}

RunResult run_rectification(const RunConfig& config) { return Pipeline(config).run_all(); }

// ---------------------------------------------------------------------------
// analyses

CrossEvalMatrix cross_evaluate(const TransformerLM& vanilla, const std::map<std::string, TransformerLM>& models,
                               const std::map<std::string, std::vector<QAInstance>>& eval_sets,
                               const DecodeConfig& decode, std::size_t jobs) {
  if (eval_sets.empty()) fail(ErrorCode::EmptyInput, "no evaluation sets");
  CrossEvalMatrix m;
  for (const auto& [name, set] : eval_sets) m.columns.push_back(name);
  std::vector<std::pair<std::string, const TransformerLM*>> rows;
  for (const auto& [name, model] : models) {
    if (!(model.vocabulary() == vanilla.vocabulary()))
      fail(ErrorCode::CheckpointMismatch, "model '" + name + "' does not share the vanilla vocabulary");
    rows.emplace_back(name, &model);
  }
  rows.emplace_back("vanilla", &vanilla);
  for (const auto& [name, model] : rows) {
    m.rows.push_back(name);
    std::vector<double> accs;
    for (const auto& [set_name, set] : eval_sets) {
      if (set.empty()) fail(ErrorCode::EmptyInput, "evaluation set '" + set_name + "' is empty");
      const auto preds = predict_all(*model, set, decode, jobs);
      const auto hits = std::count_if(preds.begin(), preds.end(), [](const Prediction& p) { return p.correct; });
      accs.push_back(static_cast<double>(hits) / static_cast<double>(preds.size()));
    }
    m.values.push_back(std::move(accs));
  }
  return m;
}

CrossEvalMatrix cross_evaluate(const fs::path& vanilla, const std::map<std::string, fs::path>& checkpoints,
                               const std::map<std::string, std::vector<QAInstance>>& eval_sets,
                               const DecodeConfig& decode, std::size_t jobs) {
  const TransformerLM base = load_checkpoint(vanilla);
  std::map<std::string, TransformerLM> models;
  for (const auto& [name, path] : checkpoints) models.emplace(name, load_checkpoint(path, base.vocabulary().hash()));
  return cross_evaluate(base, models, eval_sets, decode, jobs);
}

RenderedReport render_cross_eval(const CrossEvalMatrix& m) {
  RenderedReport out;
  std::ostringstream tsv, md;
  tsv << "model";
  md << "| Model |";
  for (const auto& c : m.columns) {
    tsv << '\t' << c;
    md << ' ' << c << " |";
  }
  tsv << '\n';
  md << "\n|---|";
  for (std::size_t c = 0; c < m.columns.size(); ++c) md << "---|";
  md << '\n';
  char buf[32];
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    tsv << m.rows[r];
    md << "| " << m.rows[r] << " |";
    for (double v : m.values[r]) {
      std::snprintf(buf, sizeof buf, "%.6f", v);
      tsv << '\t' << buf;
      std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
      md << ' ' << buf << " |";
    }
    tsv << '\n';
    md << '\n';
  }
  out.tsv = tsv.str();
  out.markdown = md.str();
  return out;
}

AccuracyTable top_n_sweep(const RunConfig& config, const std::vector<std::size_t>& n_values) {
  if (n_values.empty()) fail(ErrorCode::InvalidConfig, "top-n sweep needs at least one n");
  const std::size_t max_n = *std::max_element(n_values.begin(), n_values.end());
  if (max_n == 0) fail(ErrorCode::InvalidConfig, "top-n values must be >= 1");
  std::vector<EvalReport> rows;
  for (std::size_t n : n_values) {
    if (n == 0) fail(ErrorCode::InvalidConfig, "top-n values must be >= 1");
    RunConfig c = config;
    c.variant = "top-n-" + std::to_string(n);
    c.unlearn.top_k_beliefs = n;
    c.fbbs.candidate_m = std::max(c.fbbs.candidate_m, max_n);
    c.fbbs.beam_n = std::max(c.fbbs.beam_n, c.fbbs.candidate_m);
    auto reports = run_rectification(c).reports;
    reports.back().method = std::to_string(n);
    rows.push_back(std::move(reports.back()));
  }
  return accuracy_table("Top-n", rows);
}

AccuracyTable generator_comparison(const RunConfig& config, const std::vector<Generator>& generators) {
  if (generators.empty()) fail(ErrorCode::InvalidConfig, "generator comparison needs at least one generator");
  std::vector<EvalReport> rows;
  for (Generator g : generators) {
    RunConfig c = config;
    c.method = Method::BeliefSR;
    c.generator = g;
    c.variant = "generator-" + std::string(to_string(g));
    auto reports = run_rectification(c).reports;
    reports.back().method = std::string(to_string(g));
    rows.push_back(std::move(reports.back()));
  }
  return accuracy_table("Generator", rows);
}

OverlapReport overlap_analysis(const RunConfig& config) {
  RunConfig c = config;
  c.method = Method::BeliefSR;
  Pipeline p(c);
  p.run(Stage::Elicit);
  std::vector<BeliefRecord> beliefs = read_beliefs(p.variant_dir() / "beliefs/spurious.tsv");
  auto truths = read_beliefs(p.variant_dir() / "beliefs/true.tsv");
  std::move(truths.begin(), truths.end(), std::back_inserter(beliefs));
  const CorpusIndex corpus(read_lines(p.base_dir() / "data/corpus.txt"));
  return overlap_report(beliefs, corpus, c.overlap);
}

}  // namespace beliefrect
