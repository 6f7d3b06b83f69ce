#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "beliefrect/language_model.hpp"

namespace beliefrect {

/// One term of a signed training objective: weight * NLL(target | context).
/// Negative weights push the NLL up (unlearning), positive weights down.
struct WeightedExample {
  std::vector<TokenId> context;
  std::vector<TokenId> target;
  double weight = 1.0;
  std::vector<std::uint8_t> loss_mask;  // per target token; empty scores all
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::size_t n_params, AdamConfig config = {});
  void step(std::span<double> params, std::span<const double> grad, double learning_rate);
  void reset();
  std::uint64_t steps() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

/// Objective minimized by train_step. Examples are grouped by the sign of
/// their weight and each group contributes the mean of weight * NLL:
///   J = mean_{w<0}(w * NLL) + mean_{w>0}(w * NLL)
/// With weights (-1, +beta) this is -(E[L_suppress] - beta * E[L_enhance]).
/// Fills `grad` (overwritten) and per-example NLLs; returns J.
double signed_objective(const TrainableModel& model, std::span<const WeightedExample> batch,
                        std::span<double> grad, std::vector<double>& losses);

struct StepResult {
  double objective = 0.0;
  std::vector<double> losses;  // per-example mean target-token NLL, before the update
};

/// One Adam update on the signed objective. Throws NonFiniteLoss (without
/// touching the parameters) if any loss is not finite.
StepResult train_step(TrainableModel& model, AdamOptimizer& optimizer, std::span<const WeightedExample> batch,
                      double learning_rate);

struct FitConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  double min_learning_rate = 3e-4;  // cosine decay floor
  double clip_norm = 1.0;           // 0 disables clipping
  std::uint64_t seed = 0;
};

/// Plain maximum-likelihood training on documents (weight +1, empty
/// context, target = document followed by <eos>). Returns mean NLL per epoch.
std::vector<double> fit(TrainableModel& model, std::span<const std::vector<TokenId>> documents,
                        const FitConfig& config,
                        const std::function<void(std::size_t epoch, double loss)>& on_epoch = {});

}  // namespace beliefrect
