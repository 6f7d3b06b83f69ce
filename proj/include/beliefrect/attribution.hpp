#pragma once

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "beliefrect/language_model.hpp"

namespace beliefrect {

struct EvidenceDoc {
  std::string id;
  std::string text;
  std::optional<std::string> source_instance;
};

enum class AttributionMethod { GradDot, GradCos, HIF, UnTrac, UnTracInv };
std::string_view to_string(AttributionMethod m);
AttributionMethod attribution_method_from_string(std::string_view name);

struct AttributionScore {
  std::string doc_id;
  AttributionMethod method = AttributionMethod::GradDot;
  double value = 0.0;
};

/// The example whose behaviour is being attributed.
struct AttributionQuery {
  std::string id;
  std::vector<TokenId> context;
  std::vector<TokenId> target;
  std::vector<std::uint8_t> loss_mask;
};

/// Gradient of the mean target-token NLL, in the model's flat parameter
/// order. Throws EmptyField for an empty target and NonFiniteLoss.
std::vector<double> example_gradient(const TrainableModel& model, TokenSpan context, TokenSpan target,
                                     std::span<const std::uint8_t> loss_mask = {});

/// Training document as an example: empty context, the text as target.
std::vector<double> document_gradient(const TrainableModel& model, const EvidenceDoc& doc);

double dot(std::span<const double> a, std::span<const double> b);
/// Throws DegenerateGradient if either norm is at most 1e-12.
double cosine(std::span<const double> a, std::span<const double> b);

AttributionScore grad_dot(const TrainableModel& model, const EvidenceDoc& doc, const AttributionQuery& query);
AttributionScore grad_cos(const TrainableModel& model, const EvidenceDoc& doc, const AttributionQuery& query);

/// Extension point: a method scores one document gradient against the query
/// gradient.
class Attributor {
 public:
  virtual ~Attributor() = default;
  virtual AttributionMethod method() const = 0;
  virtual double score(std::span<const double> doc_grad, std::span<const double> query_grad) const = 0;
};

/// Throws NotImplemented ("method not implemented: hif") for methods whose
/// definitions are out of scope.
std::unique_ptr<Attributor> make_attributor(AttributionMethod method);

/// Scores every pool document and returns the best min(top_k, |pool|) in
/// descending order, ties by doc id. Throws EmptyPool on an empty pool.
/// Documents are scored on `jobs` threads; the result does not depend on it.
std::vector<AttributionScore> rank_pool(const TrainableModel& model, const std::vector<EvidenceDoc>& pool,
                                        const AttributionQuery& query, AttributionMethod method, std::size_t top_k,
                                        std::size_t jobs = 1);

/// rank_pool for several queries; each document gradient is computed once.
std::vector<std::vector<AttributionScore>> rank_pool_batch(const TrainableModel& model,
                                                           const std::vector<EvidenceDoc>& pool,
                                                           const std::vector<AttributionQuery>& queries,
                                                           AttributionMethod method, std::size_t top_k,
                                                           std::size_t jobs = 1);

/// Scores dump: tab-separated (query id, doc id, method, value) per line.
void write_scores(std::ostream& out, const std::string& query_id, const std::vector<AttributionScore>& scores);

}  // namespace beliefrect
