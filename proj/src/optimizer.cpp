#include "beliefrect/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "beliefrect/error.hpp"

namespace beliefrect {

AdamOptimizer::AdamOptimizer(std::size_t n_params, AdamConfig config)
    : config_(config), m_(n_params, 0.0), v_(n_params, 0.0) {}

void AdamOptimizer::reset() {
  std::fill(m_.begin(), m_.end(), 0.0);
  std::fill(v_.begin(), v_.end(), 0.0);
  t_ = 0;
}

void AdamOptimizer::step(std::span<double> params, std::span<const double> grad, double learning_rate) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    fail(ErrorCode::InvalidConfig, "optimizer state does not match parameter count");
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grad[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
    params[i] -= learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.eps);
  }
}

double signed_objective(const TrainableModel& model, std::span<const WeightedExample> batch,
                        std::span<double> grad, std::vector<double>& losses) {
  if (batch.empty()) fail(ErrorCode::EmptyInput, "empty batch");
  std::size_t n_neg = 0, n_pos = 0;
  for (const auto& ex : batch) {
    if (ex.target.empty()) fail(ErrorCode::EmptyField, "example target must be non-empty");
    if (!std::isfinite(ex.weight) || ex.weight == 0.0)
      fail(ErrorCode::InvalidConfig, "example weight must be finite and nonzero");
    (ex.weight < 0 ? n_neg : n_pos) += 1;
  }
  std::fill(grad.begin(), grad.end(), 0.0);
  losses.assign(batch.size(), 0.0);
  double objective = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    const double group = static_cast<double>(ex.weight < 0 ? n_neg : n_pos);
    const double scale = ex.weight / group;
    losses[i] = model.accumulate_gradient(ex.context, ex.target, scale, grad, ex.loss_mask);
    if (!std::isfinite(losses[i])) fail(ErrorCode::NonFiniteLoss, "non-finite loss in example " + std::to_string(i));
    objective += scale * losses[i];
  }
  return objective;
}

StepResult train_step(TrainableModel& model, AdamOptimizer& optimizer, std::span<const WeightedExample> batch,
                      double learning_rate) {
  if (!(learning_rate > 0.0)) fail(ErrorCode::InvalidConfig, "learning rate must be positive");
  std::vector<double> grad(model.parameters().size());
  StepResult r;
  r.objective = signed_objective(model, batch, grad, r.losses);
  for (double g : grad)
    if (!std::isfinite(g)) fail(ErrorCode::NonFiniteLoss, "non-finite gradient");
  optimizer.step(model.parameters(), grad, learning_rate);
  return r;
}

std::vector<double> fit(TrainableModel& model, std::span<const std::vector<TokenId>> documents,
                        const FitConfig& config, const std::function<void(std::size_t, double)>& on_epoch) {
  if (documents.empty()) fail(ErrorCode::EmptyInput, "no training documents");
  if (config.batch_size == 0) fail(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  std::vector<WeightedExample> examples;
  examples.reserve(documents.size());
  for (const auto& doc : documents) {
    WeightedExample ex;
    ex.target = doc;
    ex.target.push_back(Vocabulary::kEos);
    examples.push_back(std::move(ex));
  }
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed);
  AdamOptimizer opt(model.parameters().size());
  std::vector<double> grad(model.parameters().size());
  std::vector<double> losses;
  std::vector<WeightedExample> batch;
  const std::size_t steps_per_epoch = (examples.size() + config.batch_size - 1) / config.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * config.epochs);
  std::size_t step = 0;
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + config.batch_size); ++i)
        batch.push_back(examples[order[i]]);
      const double obj = signed_objective(model, batch, grad, losses);
      sum += obj * static_cast<double>(batch.size());
      if (config.clip_norm > 0.0) {
        const double norm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));
        if (norm > config.clip_norm)
          for (double& g : grad) g *= config.clip_norm / norm;
      }
      const double progress = static_cast<double>(step) / std::max(1.0, total_steps);
      const double lr = config.min_learning_rate +
                        0.5 * (config.learning_rate - config.min_learning_rate) * (1.0 + std::cos(M_PI * progress));
      opt.step(model.parameters(), grad, lr);
      ++step;
    }
    history.push_back(sum / static_cast<double>(examples.size()));
    if (on_epoch) on_epoch(epoch, history.back());
  }
  return history;
}

}  // namespace beliefrect
