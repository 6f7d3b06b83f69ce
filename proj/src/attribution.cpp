#include "beliefrect/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "beliefrect/error.hpp"
#include "beliefrect/parallel.hpp"

namespace beliefrect {
namespace {

constexpr double kMinNorm = 1e-12;

class GradDot final : public Attributor {
 public:
  AttributionMethod method() const override { return AttributionMethod::GradDot; }
  double score(std::span<const double> d, std::span<const double> q) const override { return dot(d, q); }
};

class GradCos final : public Attributor {
 public:
  AttributionMethod method() const override { return AttributionMethod::GradCos; }
  double score(std::span<const double> d, std::span<const double> q) const override { return cosine(d, q); }
};

}  // namespace

std::string_view to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::GradDot: return "grad-dot";
    case AttributionMethod::GradCos: return "grad-cos";
    case AttributionMethod::HIF: return "hif";
    case AttributionMethod::UnTrac: return "untrac";
    case AttributionMethod::UnTracInv: return "untrac-inv";
  }
  return "unknown";
}

AttributionMethod attribution_method_from_string(std::string_view name) {
  for (auto m : {AttributionMethod::GradDot, AttributionMethod::GradCos, AttributionMethod::HIF,
                 AttributionMethod::UnTrac, AttributionMethod::UnTracInv})
    if (to_string(m) == name) return m;
  fail(ErrorCode::InvalidConfig, "unknown attribution method: " + std::string(name));
}

std::vector<double> example_gradient(const TrainableModel& model, TokenSpan context, TokenSpan target,
                                     std::span<const std::uint8_t> loss_mask) {
  if (target.empty()) fail(ErrorCode::EmptyField, "target must be non-empty");
  std::vector<double> grad(model.parameters().size(), 0.0);
  const double loss = model.accumulate_gradient(context, target, 1.0, grad, loss_mask);
  if (!std::isfinite(loss)) fail(ErrorCode::NonFiniteLoss, "non-finite loss");
  for (double g : grad)
    if (!std::isfinite(g)) fail(ErrorCode::NonFiniteLoss, "non-finite gradient");
  return grad;
}

std::vector<double> document_gradient(const TrainableModel& model, const EvidenceDoc& doc) {
  if (doc.text.empty()) fail(ErrorCode::EmptyField, "evidence document " + doc.id + " is empty");
  const auto tokens = model.vocabulary().encode(doc.text);
  return example_gradient(model, {}, tokens.tokens);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorCode::LengthMismatch, "gradient sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na <= kMinNorm || nb <= kMinNorm) fail(ErrorCode::DegenerateGradient, "gradient norm too small for cosine");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

AttributionScore grad_dot(const TrainableModel& model, const EvidenceDoc& doc, const AttributionQuery& query) {
  const auto q = example_gradient(model, query.context, query.target, query.loss_mask);
  return {doc.id, AttributionMethod::GradDot, dot(document_gradient(model, doc), q)};
}

AttributionScore grad_cos(const TrainableModel& model, const EvidenceDoc& doc, const AttributionQuery& query) {
  const auto q = example_gradient(model, query.context, query.target, query.loss_mask);
  return {doc.id, AttributionMethod::GradCos, cosine(document_gradient(model, doc), q)};
}

std::unique_ptr<Attributor> make_attributor(AttributionMethod method) {
  switch (method) {
    case AttributionMethod::GradDot: return std::make_unique<GradDot>();
    case AttributionMethod::GradCos: return std::make_unique<GradCos>();
    default: fail(ErrorCode::NotImplemented, "method not implemented: " + std::string(to_string(method)));
  }
}

namespace {

void sort_and_truncate(std::vector<AttributionScore>& scores, std::size_t top_k) {
  std::sort(scores.begin(), scores.end(), [](const AttributionScore& a, const AttributionScore& b) {
    return a.value != b.value ? a.value > b.value : a.doc_id < b.doc_id;
  });
  if (scores.size() > top_k) scores.resize(top_k);
}

}  // namespace

std::vector<AttributionScore> rank_pool(const TrainableModel& model, const std::vector<EvidenceDoc>& pool,
                                        const AttributionQuery& query, AttributionMethod method, std::size_t top_k,
                                        std::size_t jobs) {
  return rank_pool_batch(model, pool, {query}, method, top_k, jobs).front();
}

std::vector<std::vector<AttributionScore>> rank_pool_batch(const TrainableModel& model,
                                                           const std::vector<EvidenceDoc>& pool,
                                                           const std::vector<AttributionQuery>& queries,
                                                           AttributionMethod method, std::size_t top_k,
                                                           std::size_t jobs) {
  if (pool.empty()) fail(ErrorCode::EmptyPool, "evidence pool is empty");
  const auto attributor = make_attributor(method);
  std::vector<std::vector<double>> q(queries.size());
  parallel_for(queries.size(), jobs, [&](std::size_t i) {
    q[i] = example_gradient(model, queries[i].context, queries[i].target, queries[i].loss_mask);
  });
  std::vector<std::vector<AttributionScore>> scores(queries.size(), std::vector<AttributionScore>(pool.size()));
  parallel_for(pool.size(), jobs, [&](std::size_t d) {
    const auto g = document_gradient(model, pool[d]);
    for (std::size_t i = 0; i < queries.size(); ++i) scores[i][d] = {pool[d].id, method, attributor->score(g, q[i])};
  });
  for (auto& s : scores) sort_and_truncate(s, top_k);
  return scores;
}

void write_scores(std::ostream& out, const std::string& query_id, const std::vector<AttributionScore>& scores) {
  char buf[40];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.17g", s.value);
    out << query_id << '\t' << s.doc_id << '\t' << to_string(s.method) << '\t' << buf << '\n';
  }
}

}  // namespace beliefrect
