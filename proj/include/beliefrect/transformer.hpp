#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>

#include "beliefrect/language_model.hpp"

namespace beliefrect {

struct TransformerConfig {
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_positions = 64;  // BOS included
  double init_scale = 1.0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

/// Pre-norm decoder-only transformer (RMSNorm, multi-head causal attention,
/// tanh-GELU MLP, learned positions, untied output projection).
///
/// Flat parameter order:
///   tok_emb[V x d], pos_emb[P x d],
///   per layer: norm1[d], Wq[d x d], Wk[d x d], Wv[d x d], Wo[d x d],
///              norm2[d], W1[d x F], b1[F], W2[F x d], b2[d],
///   norm_f[d], W_out[d x V], b_out[V]
/// Matrices are row-major; activations are row vectors (x * W).
class TransformerLM final : public TrainableModel {
 public:
  TransformerLM(Vocabulary vocab, TransformerConfig config);
  TransformerLM(Vocabulary vocab, TransformerConfig config, std::vector<double> params);

  const Vocabulary& vocabulary() const override { return vocab_; }
  std::size_t max_context() const override { return config_.max_positions - 1; }
  std::vector<LogProb> logprobs_after(TokenSpan context) const override;
  std::unique_ptr<DecodeSession> open_session(TokenSpan context) const override;

  std::span<double> parameters() override { return params_; }
  std::span<const double> parameters() const override { return params_; }
  double accumulate_gradient(TokenSpan context, TokenSpan target, double scale, std::span<double> grad,
                             std::span<const std::uint8_t> loss_mask = {}) const override;
  std::unique_ptr<TrainableModel> clone() const override { return std::make_unique<TransformerLM>(*this); }

  const TransformerConfig& config() const noexcept { return config_; }

  struct Layout {
    std::size_t tok_emb, pos_emb, norm_f, w_out, b_out, total;
    struct Layer {
      std::size_t norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
    };
    std::vector<Layer> layers;
  };
  const Layout& layout() const noexcept { return layout_; }

 private:
  friend class TransformerSession;
  void initialize();

  Vocabulary vocab_;
  TransformerConfig config_;
  Layout layout_;
  std::vector<double> params_;
};

}  // namespace beliefrect
