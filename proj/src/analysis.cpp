#include "beliefrect/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "beliefrect/dataset.hpp"
#include "beliefrect/error.hpp"

namespace beliefrect {

double exact_match_accuracy(std::span<const std::string> predictions, std::span<const std::string> references) {
  if (predictions.size() != references.size())
    fail(ErrorCode::LengthMismatch, "predictions and references differ in length");
  if (predictions.empty()) fail(ErrorCode::EmptyInput, "no predictions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    hits += normalize_answer(predictions[i]) == normalize_answer(references[i]);
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

BootstrapResult paired_bootstrap(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b,
                                 const BootstrapConfig& config) {
  if (correct_a.size() != correct_b.size()) fail(ErrorCode::LengthMismatch, "bootstrap inputs differ in length");
  if (correct_a.size() < 2) fail(ErrorCode::EmptyInput, "bootstrap needs at least two instances");
  if (config.iterations < 1000) fail(ErrorCode::InvalidConfig, "bootstrap needs at least 1000 iterations");
  if (!(config.alpha > 0.0 && config.alpha < 1.0)) fail(ErrorCode::InvalidConfig, "alpha must be in (0, 1)");

  const std::size_t n = correct_a.size();
  std::vector<int> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = static_cast<int>(correct_a[i]) - static_cast<int>(correct_b[i]);

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t not_better = 0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    long sum = 0;
    for (std::size_t k = 0; k < n; ++k) sum += diff[pick(rng)];
    not_better += sum <= 0;
  }
  BootstrapResult r;
  r.p_value = static_cast<double>(not_better) / static_cast<double>(config.iterations);
  r.significant = r.p_value < config.alpha;
  return r;
}

OverlapResult ngram_overlap(const TokenSequence& belief, const CorpusIndex& corpus, const OverlapConfig& config,
                            std::string belief_id) {
  const auto words = split_words(belief.text);
  if (words.empty()) fail(ErrorCode::EmptyInput, "empty belief");
  OverlapResult r;
  r.belief_id = std::move(belief_id);
  r.belief_len = words.size();
  r.longest_match_len = corpus.longest_match(words);
  if (config.fixed_n == 0) {
    r.ratio = static_cast<double>(r.longest_match_len) / static_cast<double>(words.size());
  } else {
    const std::size_t n = std::min(config.fixed_n, words.size());
    const std::size_t grams = words.size() - n + 1;
    std::size_t found = 0;
    for (std::size_t i = 0; i < grams; ++i) {
      const std::vector<std::string> gram(words.begin() + static_cast<std::ptrdiff_t>(i),
                                          words.begin() + static_cast<std::ptrdiff_t>(i + n));
      found += corpus.longest_match(gram) == n;
    }
    r.ratio = static_cast<double>(found) / static_cast<double>(grams);
  }
  r.contained = r.ratio >= config.threshold;
  return r;
}

OverlapReport overlap_report(const std::vector<BeliefRecord>& beliefs, const CorpusIndex& corpus,
                             const OverlapConfig& config) {
  if (beliefs.empty()) fail(ErrorCode::EmptyInput, "no beliefs to analyze");
  OverlapReport report;
  std::map<std::string, std::size_t> seen;
  std::map<Generator, OverlapRow> rows;
  for (const auto& rec : beliefs) {
    const std::string id = rec.instance_id + "#" + std::to_string(seen[rec.instance_id]++);
    auto r = ngram_overlap(rec.belief.tokens, corpus, config, id);
    auto& row = rows[rec.belief.generator];
    row.group = std::string(to_string(rec.belief.generator));
    row.beliefs += 1;
    row.contained += r.contained;
    report.per_belief.push_back(std::move(r));
  }
  for (auto& [g, row] : rows) report.rows.push_back(row);
  return report;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string render_overlap(const OverlapReport& report) {
  std::ostringstream out;
  out << "belief_id\tbelief_len\tlongest_match_len\tratio\tcontained\n";
  for (const auto& r : report.per_belief)
    out << r.belief_id << '\t' << r.belief_len << '\t' << r.longest_match_len << '\t' << fmt("%.6f", r.ratio) << '\t'
        << (r.contained ? 1 : 0) << '\n';
  out << "\n| Generator | Beliefs | Contained (%) |\n|---|---|---|\n";
  for (const auto& row : report.rows)
    out << "| " << row.group << " | " << row.beliefs << " | " << fmt("%.1f", row.percent()) << " |\n";
  return out.str();
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Incorrect: return "d_inc";
    case Split::Correct: return "d_cor";
    case Split::Train: return "d_train";
    case Split::Eval: return "d_eval";
  }
  return "?";
}

std::size_t SplitResult::hits() const { return static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true)); }

double SplitResult::accuracy() const {
  if (correct.empty()) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(hits()) / static_cast<double>(correct.size());
}

EvalReport make_eval_report(std::string method, SplitResult incorrect, SplitResult correct, SplitResult eval) {
  for (const SplitResult* s : {&incorrect, &correct, &eval})
    if (s->ids.size() != s->correct.size()) fail(ErrorCode::LengthMismatch, "split ids and results differ in length");
  EvalReport r;
  r.method = std::move(method);
  SplitResult train = incorrect;
  train.ids.insert(train.ids.end(), correct.ids.begin(), correct.ids.end());
  train.correct.insert(train.correct.end(), correct.correct.begin(), correct.correct.end());
  r.at(Split::Incorrect) = std::move(incorrect);
  r.at(Split::Correct) = std::move(correct);
  r.at(Split::Train) = std::move(train);
  r.at(Split::Eval) = std::move(eval);
  return r;
}

void mark_significance(std::vector<EvalReport>& reports, const std::string& baseline, const BootstrapConfig& config) {
  const auto base = std::find_if(reports.begin(), reports.end(), [&](const EvalReport& r) { return r.method == baseline; });
  if (base == reports.end()) fail(ErrorCode::InvalidConfig, "no report for baseline method '" + baseline + "'");
  const EvalReport ref = *base;
  for (auto& r : reports) {
    r.significant.fill(false);
    if (r.method == baseline) continue;
    for (Split s : kSplits) {
      const auto& a = r.at(s);
      const auto& b = ref.at(s);
      if (a.size() != b.size()) fail(ErrorCode::LengthMismatch, std::string(to_string(s)) + " sizes differ");
      if (a.ids != b.ids) fail(ErrorCode::SchemaError, std::string(to_string(s)) + " instance ids differ");
      if (a.size() < 2) continue;
      r.significant[static_cast<std::size_t>(s)] = paired_bootstrap(a.correct, b.correct, config).significant;
    }
  }
}

namespace {

std::string percent_cell(double fraction) { return std::isnan(fraction) ? "-" : fmt("%.1f", 100.0 * fraction); }
std::string fraction_cell(double fraction) { return std::isnan(fraction) ? "NA" : fmt("%.6f", fraction); }

std::string markdown_table(const std::string& row_header, const std::vector<std::string>& rows,
                           const std::vector<std::array<double, 4>>& values,
                           const std::vector<std::array<bool, 4>>& significant) {
  std::array<std::string, 4> best;
  for (std::size_t c = 0; c < 4; ++c) {
    double m = -1.0;
    for (const auto& v : values)
      if (!std::isnan(v[c])) m = std::max(m, std::stod(percent_cell(v[c])));
    if (m >= 0.0) best[c] = fmt("%.1f", m);
  }
  std::ostringstream out;
  out << "| " << row_header << " | D✗ | D✓ | D_train | D_eval |\n|---|---|---|---|---|\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out << "| " << rows[r];
    for (std::size_t c = 0; c < 4; ++c) {
      std::string cell = percent_cell(values[r][c]);
      if (cell == best[c]) cell = "**" + cell + "**";
      if (!significant.empty() && significant[r][c]) cell += "†";
      out << " | " << cell;
    }
    out << " |\n";
  }
  return out.str();
}

}  // namespace

RenderedReport render_report(const std::vector<EvalReport>& reports) {
  RenderedReport out;
  std::ostringstream tsv;
  tsv << "method\td_inc\td_cor\td_train\td_eval\tn_inc\tn_cor\tn_train\tn_eval\tsig_inc\tsig_cor\tsig_train\tsig_eval\n";
  std::vector<std::string> rows;
  std::vector<std::array<double, 4>> values;
  std::vector<std::array<bool, 4>> sig;
  for (const auto& r : reports) {
    tsv << r.method;
    for (Split s : kSplits) tsv << '\t' << fraction_cell(r.at(s).accuracy());
    for (Split s : kSplits) tsv << '\t' << r.at(s).size();
    for (bool b : r.significant) tsv << '\t' << (b ? 1 : 0);
    tsv << '\n';
    rows.push_back(r.method);
    values.push_back({r.at(Split::Incorrect).accuracy(), r.at(Split::Correct).accuracy(), r.at(Split::Train).accuracy(),
                      r.at(Split::Eval).accuracy()});
    sig.push_back(r.significant);
  }
  out.tsv = tsv.str();
  out.markdown = markdown_table("Method", rows, values, sig);
  return out;
}

AccuracyTable accuracy_table(std::string row_header, const std::vector<EvalReport>& reports) {
  AccuracyTable t;
  t.row_header = std::move(row_header);
  for (const auto& r : reports) {
    t.rows.push_back(r.method);
    t.values.push_back({r.at(Split::Incorrect).accuracy(), r.at(Split::Correct).accuracy(),
                        r.at(Split::Train).accuracy(), r.at(Split::Eval).accuracy()});
  }
  return t;
}

RenderedReport render_table(const AccuracyTable& table) {
  RenderedReport out;
  std::ostringstream tsv;
  tsv << table.row_header << "\td_inc\td_cor\td_train\td_eval\n";
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    tsv << table.rows[r];
    for (double v : table.values[r]) tsv << '\t' << fraction_cell(v);
    tsv << '\n';
  }
  out.tsv = tsv.str();
  out.markdown = markdown_table(table.row_header, table.rows, table.values, {});
  return out;
}

}  // namespace beliefrect
