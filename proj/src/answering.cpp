#include "beliefrect/answering.hpp"

#include <algorithm>
#include <random>

#include "beliefrect/error.hpp"
#include "beliefrect/parallel.hpp"

namespace beliefrect {

std::string answer_prompt(const QAInstance& inst, const DecodeConfig& config) {
  return render_question(inst) + " " + config.prompt_suffix;
}

std::vector<TokenId> beam_decode(const LanguageModel& model, TokenSpan prompt, const DecodeConfig& config) {
  if (config.beam_width == 0 || config.max_new_tokens == 0)
    fail(ErrorCode::InvalidConfig, "beam width and token budget must be positive");
  const Vocabulary& vocab = model.vocabulary();
  const TokenId stop = vocab.contains(config.stop_word) ? vocab.id(config.stop_word) : Vocabulary::kEos;

  struct Hyp {
    std::vector<TokenId> tokens;
    double score = 0.0;
    std::unique_ptr<DecodeSession> session;
  };
  struct Cand {
    std::size_t parent;
    TokenId token;
    double score;
    std::vector<TokenId> key;
  };
  auto better = [](double sa, const std::vector<TokenId>& ka, double sb, const std::vector<TokenId>& kb) {
    return sa != sb ? sa > sb : ka < kb;
  };

  std::vector<Hyp> live;
  live.push_back({{}, 0.0, open_checked_session(model, prompt)});
  std::vector<std::pair<double, std::vector<TokenId>>> finished;
  for (std::size_t step = 0; step < config.max_new_tokens && !live.empty(); ++step) {
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto& lp = live[h].session->logprobs();
      for (TokenId t : top_k_tokens(lp, config.beam_width)) {
        if (lp[t] == kNegInf) continue;
        Cand c{h, t, live[h].score + lp[t], live[h].tokens};
        c.key.push_back(t);
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(),
              [&](const Cand& a, const Cand& b) { return better(a.score, a.key, b.score, b.key); });
    if (cands.size() > config.beam_width) cands.resize(config.beam_width);
    std::vector<Hyp> next;
    for (auto& c : cands) {
      if (c.token == stop || c.token == Vocabulary::kEos) {
        finished.emplace_back(c.score, live[c.parent].tokens);
        continue;
      }
      Hyp h{std::move(c.key), c.score, live[c.parent].session->clone()};
      if (h.session->length() + 1 > model.max_context()) continue;
      h.session->push(c.token);
      next.push_back(std::move(h));
    }
    live = std::move(next);
    // Scores only decrease, so once every live hypothesis trails the best
    // finished one the result is settled.
    if (!finished.empty()) {
      double best_finished = kNegInf, best_live = kNegInf;
      for (const auto& f : finished) best_finished = std::max(best_finished, f.first);
      for (const auto& h : live) best_live = std::max(best_live, h.score);
      if (best_live < best_finished) break;
    }
  }
  if (finished.empty()) {
    for (const auto& h : live) finished.emplace_back(h.score, h.tokens);
    if (finished.empty()) return {};
  }
  return std::min_element(finished.begin(), finished.end(), [&](const auto& a, const auto& b) {
           return better(a.first, a.second, b.first, b.second);
         })->second;
}

std::string decode_answer(const LanguageModel& model, const QAInstance& inst, const DecodeConfig& config) {
  const auto prompt = model.vocabulary().encode(answer_prompt(inst, config));
  return model.vocabulary().decode(beam_decode(model, prompt.tokens, config));
}

std::string answer_inference(const LanguageModel& model, const QAInstance& inst, const DecodeConfig& config) {
  return normalize_answer(decode_answer(model, inst, config));
}

std::vector<Prediction> predict_all(const LanguageModel& model, const std::vector<QAInstance>& instances,
                                    const DecodeConfig& config, std::size_t jobs) {
  std::vector<Prediction> out(instances.size());
  parallel_for(instances.size(), jobs, [&](std::size_t i) {
    out[i].id = instances[i].id;
    out[i].raw = decode_answer(model, instances[i], config);
    out[i].predicted = normalize_answer(out[i].raw);
    out[i].correct = out[i].predicted == normalize_answer(instances[i].answer);
  });
  return out;
}

Partition partition_from_predictions(const std::vector<QAInstance>& train, const std::vector<Prediction>& preds) {
  if (train.size() != preds.size()) fail(ErrorCode::LengthMismatch, "one prediction per instance required");
  Partition p;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (preds[i].id != train[i].id) fail(ErrorCode::LengthMismatch, "prediction order differs from instances");
    if (preds[i].correct) p.correct.push_back(train[i]);
    else p.incorrect.push_back({train[i], preds[i].raw});
  }
  return p;
}

Partition partition_by_correctness(const LanguageModel& model, const std::vector<QAInstance>& train,
                                   const DecodeConfig& config, std::size_t jobs) {
  return partition_from_predictions(train, predict_all(model, train, config, jobs));
}

MembershipSplit membership_filter(const std::vector<QAInstance>& instances, const CorpusIndex& corpus) {
  MembershipSplit s;
  for (const auto& inst : instances)
    (corpus.contains(inst.question) && corpus.contains(inst.answer) ? s.members : s.non_members).push_back(inst);
  return s;
}

DatasetSplits make_splits(std::vector<QAInstance> members, std::vector<QAInstance> non_members, std::uint64_t seed) {
  if (non_members.size() < 2) fail(ErrorCode::InsufficientData, "need at least two non-member instances");
  std::mt19937_64 rng(seed);
  std::shuffle(non_members.begin(), non_members.end(), rng);
  DatasetSplits s;
  s.train = std::move(members);
  const auto half = static_cast<std::ptrdiff_t>(non_members.size() / 2);
  s.dev.assign(non_members.begin(), non_members.begin() + half);
  s.eval.assign(non_members.begin() + half, non_members.end());
  return s;
}

}  // namespace beliefrect
