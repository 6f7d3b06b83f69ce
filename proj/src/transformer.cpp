#include "beliefrect/transformer.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "beliefrect/error.hpp"

namespace beliefrect {

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},         {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
                     {"max_positions", c.max_positions}, {"init_scale", c.init_scale},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.init_scale = j.value("init_scale", 1.0);
  c.seed = j.value("seed", std::uint64_t{0});
}

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;
using Vec = Eigen::VectorXd;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;
using CRowMap = Eigen::Map<const RowVec>;
using MRowMap = Eigen::Map<RowVec>;

constexpr double kNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

// Row-wise RMSNorm; returns per-row rms in `rms`.
Mat rms_norm(const Mat& x, const CRowMap& gain, Vec& rms) {
  rms.resize(x.rows());
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    rms(i) = std::sqrt(x.row(i).squaredNorm() / static_cast<double>(x.cols()) + kNormEps);
    y.row(i) = x.row(i).cwiseProduct(gain) / rms(i);
  }
  return y;
}

Mat rms_norm_backward(const Mat& dy, const Mat& x, const Vec& rms, const CRowMap& gain, MRowMap dgain) {
  const double d = static_cast<double>(x.cols());
  Mat dx(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowVec gdy = dy.row(i).cwiseProduct(gain);
    dgain += dy.row(i).cwiseProduct(x.row(i)) / rms(i);
    const double dot = gdy.dot(x.row(i));
    dx.row(i) = gdy / rms(i) - x.row(i) * (dot / (d * rms(i) * rms(i) * rms(i)));
  }
  return dx;
}

void log_softmax_rows(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    const double z = mx + std::log((m.row(i).array() - mx).exp().sum());
    m.row(i).array() -= z;
  }
}

struct LayerCache {
  Mat x_in, a1, q, k, v, o, x_mid, a2, u, z;
  Vec r1, r2;
  std::vector<Mat> probs;
};

struct ForwardCache {
  Mat x0;
  std::vector<LayerCache> layers;
  Mat x_last, f;
  Vec rf;
  Mat logp;
};

}  // namespace

// Parameter views shared by the batch forward pass and the decode session.
struct Views {
  const TransformerLM::Layout& L;
  const double* p;
  std::size_t d, ff, V, P;

  CMap mat(std::size_t off, std::size_t r, std::size_t c) const {
    return CMap(p + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  CRowMap row(std::size_t off, std::size_t n) const { return CRowMap(p + off, static_cast<Eigen::Index>(n)); }
};

namespace {

Views views_of(const TransformerLM& m, const TransformerLM::Layout& layout, const double* p) {
  return Views{layout, p, m.config().d_model, m.config().d_ff, m.vocabulary().size(), m.config().max_positions};
}

ForwardCache forward(const TransformerLM& model, const TransformerLM::Layout& layout, const double* params,
                     std::span<const TokenId> input, std::size_t n_heads) {
  const Views w = views_of(model, layout, params);
  const auto n = static_cast<Eigen::Index>(input.size());
  const auto d = static_cast<Eigen::Index>(w.d);
  const auto dh = d / static_cast<Eigen::Index>(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache c;
  c.x0.resize(n, d);
  const CMap tok = w.mat(layout.tok_emb, w.V, w.d);
  const CMap pos = w.mat(layout.pos_emb, w.P, w.d);
  for (Eigen::Index i = 0; i < n; ++i) c.x0.row(i) = tok.row(input[static_cast<std::size_t>(i)]) + pos.row(i);

  Mat x = c.x0;
  for (const auto& lo : layout.layers) {
    LayerCache lc;
    lc.x_in = x;
    lc.a1 = rms_norm(x, w.row(lo.norm1, w.d), lc.r1);
    lc.q = lc.a1 * w.mat(lo.wq, w.d, w.d);
    lc.k = lc.a1 * w.mat(lo.wk, w.d, w.d);
    lc.v = lc.a1 * w.mat(lo.wv, w.d, w.d);
    lc.o = Mat::Zero(n, d);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      Mat s = lc.q.middleCols(c0, dh) * lc.k.middleCols(c0, dh).transpose() * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) s(i, j) = kNegInf;
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) z += (s(i, j) = std::exp(s(i, j) - mx));
        s.row(i).head(i + 1) /= z;
        for (Eigen::Index j = i + 1; j < n; ++j) s(i, j) = 0.0;
      }
      lc.o.middleCols(c0, dh) = s * lc.v.middleCols(c0, dh);
      lc.probs.push_back(std::move(s));
    }
    x += lc.o * w.mat(lo.wo, w.d, w.d);
    lc.x_mid = x;
    lc.a2 = rms_norm(x, w.row(lo.norm2, w.d), lc.r2);
    lc.u = lc.a2 * w.mat(lo.w1, w.d, w.ff);
    lc.u.rowwise() += w.row(lo.b1, w.ff);
    lc.z = lc.u.unaryExpr([](double v) { return gelu(v); });
    x += lc.z * w.mat(lo.w2, w.ff, w.d);
    x.rowwise() += w.row(lo.b2, w.d);
    c.layers.push_back(std::move(lc));
  }
  c.x_last = x;
  c.f = rms_norm(x, w.row(layout.norm_f, w.d), c.rf);
  c.logp = c.f * w.mat(layout.w_out, w.d, w.V);
  c.logp.rowwise() += w.row(layout.b_out, w.V);
  log_softmax_rows(c.logp);
  return c;
}

}  // namespace

TransformerLM::TransformerLM(Vocabulary vocab, TransformerConfig config)
    : vocab_(std::move(vocab)), config_(config) {
  initialize();
  std::mt19937_64 rng(config_.seed);
  auto fill = [&](std::size_t off, std::size_t count, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev * config_.init_scale);
    for (std::size_t i = 0; i < count; ++i) params_[off + i] = dist(rng);
  };
  const std::size_t d = config_.d_model, ff = config_.d_ff, V = vocab_.size();
  const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  fill(layout_.tok_emb, V * d, 0.3);
  fill(layout_.pos_emb, config_.max_positions * d, 0.1);
  for (const auto& lo : layout_.layers) {
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(lo.norm1), d, 1.0);
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(lo.norm2), d, 1.0);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    fill(lo.wq, d * d, s);
    fill(lo.wk, d * d, s);
    fill(lo.wv, d * d, s);
    fill(lo.wo, d * d, s * depth);
    fill(lo.w1, d * ff, s);
    fill(lo.w2, ff * d, depth / std::sqrt(static_cast<double>(ff)));
  }
  std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(layout_.norm_f), d, 1.0);
  fill(layout_.w_out, d * V, 1.0 / std::sqrt(static_cast<double>(d)));
}

TransformerLM::TransformerLM(Vocabulary vocab, TransformerConfig config, std::vector<double> params)
    : vocab_(std::move(vocab)), config_(config) {
  initialize();
  if (params.size() != params_.size())
    fail(ErrorCode::CheckpointMismatch, "expected " + std::to_string(params_.size()) + " parameters, got " +
                                            std::to_string(params.size()));
  params_ = std::move(params);
}

void TransformerLM::initialize() {
  const std::size_t d = config_.d_model, ff = config_.d_ff, V = vocab_.size();
  if (d == 0 || config_.n_heads == 0 || d % config_.n_heads != 0 || config_.n_layers == 0 ||
      config_.max_positions < 2 || ff == 0)
    fail(ErrorCode::InvalidConfig, "invalid transformer shape");
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    const std::size_t at = off;
    off += n;
    return at;
  };
  layout_.tok_emb = take(V * d);
  layout_.pos_emb = take(config_.max_positions * d);
  layout_.layers.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Layout::Layer lo{};
    lo.norm1 = take(d);
    lo.wq = take(d * d);
    lo.wk = take(d * d);
    lo.wv = take(d * d);
    lo.wo = take(d * d);
    lo.norm2 = take(d);
    lo.w1 = take(d * ff);
    lo.b1 = take(ff);
    lo.w2 = take(ff * d);
    lo.b2 = take(d);
    layout_.layers.push_back(lo);
  }
  layout_.norm_f = take(d);
  layout_.w_out = take(d * V);
  layout_.b_out = take(V);
  layout_.total = off;
  params_.assign(off, 0.0);
}

std::vector<LogProb> TransformerLM::logprobs_after(TokenSpan context) const {
  std::vector<TokenId> input;
  input.reserve(context.size() + 1);
  input.push_back(Vocabulary::kBos);
  input.insert(input.end(), context.begin(), context.end());
  const auto c = forward(*this, layout_, params_.data(), input, config_.n_heads);
  const auto last = c.logp.row(c.logp.rows() - 1);
  return std::vector<LogProb>(last.data(), last.data() + last.size());
}

double TransformerLM::accumulate_gradient(TokenSpan context, TokenSpan target, double scale, std::span<double> grad,
                                          std::span<const std::uint8_t> loss_mask) const {
  if (target.empty()) fail(ErrorCode::EmptyField, "target must be non-empty");
  const std::size_t scored = scored_count(target.size(), loss_mask);
  if (grad.size() != params_.size()) fail(ErrorCode::InvalidConfig, "gradient buffer has wrong size");
  if (context.size() + target.size() > config_.max_positions)
    fail(ErrorCode::ContextTooLong, "example of " + std::to_string(context.size() + target.size()) +
                                        " tokens exceeds " + std::to_string(config_.max_positions - 1));

  std::vector<TokenId> input;
  input.push_back(Vocabulary::kBos);
  input.insert(input.end(), context.begin(), context.end());
  input.insert(input.end(), target.begin(), target.end() - 1);
  const auto c = forward(*this, layout_, params_.data(), input, config_.n_heads);

  const Views w = views_of(*this, layout_, params_.data());
  const auto n = static_cast<Eigen::Index>(input.size());
  const auto d = static_cast<Eigen::Index>(w.d);
  const auto first = static_cast<Eigen::Index>(context.size());
  const double inv_t = 1.0 / static_cast<double>(scored);

  double nll = 0.0;
  Mat dlogits = Mat::Zero(n, static_cast<Eigen::Index>(w.V));
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!loss_mask.empty() && !loss_mask[i]) continue;
    const auto row = first + static_cast<Eigen::Index>(i);
    nll -= c.logp(row, target[i]);
    dlogits.row(row) = c.logp.row(row).array().exp();
    dlogits(row, target[i]) -= 1.0;
  }
  if (!std::isfinite(nll)) fail(ErrorCode::NonFiniteLoss, "non-finite NLL");
  dlogits *= scale * inv_t;

  auto gmat = [&](std::size_t off, std::size_t r, std::size_t cc) {
    return MMap(grad.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cc));
  };
  auto grow = [&](std::size_t off, std::size_t len) {
    return MRowMap(grad.data() + off, static_cast<Eigen::Index>(len));
  };

  gmat(layout_.w_out, w.d, w.V).noalias() += c.f.transpose() * dlogits;
  grow(layout_.b_out, w.V) += dlogits.colwise().sum();
  Mat df = dlogits * w.mat(layout_.w_out, w.d, w.V).transpose();
  Mat dx = rms_norm_backward(df, c.x_last, c.rf, w.row(layout_.norm_f, w.d), grow(layout_.norm_f, w.d));

  const auto dh = d / static_cast<Eigen::Index>(config_.n_heads);
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = layout_.layers.size(); l-- > 0;) {
    const auto& lo = layout_.layers[l];
    const auto& lc = c.layers[l];
    // MLP block
    gmat(lo.w2, w.ff, w.d).noalias() += lc.z.transpose() * dx;
    grow(lo.b2, w.d) += dx.colwise().sum();
    Mat du = (dx * w.mat(lo.w2, w.ff, w.d).transpose()).cwiseProduct(lc.u.unaryExpr([](double v) {
      return gelu_grad(v);
    }));
    gmat(lo.w1, w.d, w.ff).noalias() += lc.a2.transpose() * du;
    grow(lo.b1, w.ff) += du.colwise().sum();
    Mat da2 = du * w.mat(lo.w1, w.d, w.ff).transpose();
    dx += rms_norm_backward(da2, lc.x_mid, lc.r2, w.row(lo.norm2, w.d), grow(lo.norm2, w.d));
    // attention block
    gmat(lo.wo, w.d, w.d).noalias() += lc.o.transpose() * dx;
    Mat d_o = dx * w.mat(lo.wo, w.d, w.d).transpose();
    Mat dq(n, d), dk(n, d), dv(n, d);
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      const Mat& p = lc.probs[h];
      const Mat doh = d_o.middleCols(c0, dh);
      Mat dp = doh * lc.v.middleCols(c0, dh).transpose();
      dv.middleCols(c0, dh) = p.transpose() * doh;
      Mat ds = p.cwiseProduct(dp);
      const Vec rowdot = ds.rowwise().sum();
      ds -= p.cwiseProduct(rowdot.replicate(1, n));
      ds *= att_scale;
      dq.middleCols(c0, dh) = ds * lc.k.middleCols(c0, dh);
      dk.middleCols(c0, dh) = ds.transpose() * lc.q.middleCols(c0, dh);
    }
    gmat(lo.wq, w.d, w.d).noalias() += lc.a1.transpose() * dq;
    gmat(lo.wk, w.d, w.d).noalias() += lc.a1.transpose() * dk;
    gmat(lo.wv, w.d, w.d).noalias() += lc.a1.transpose() * dv;
    Mat da1 = dq * w.mat(lo.wq, w.d, w.d).transpose() + dk * w.mat(lo.wk, w.d, w.d).transpose() +
              dv * w.mat(lo.wv, w.d, w.d).transpose();
    dx += rms_norm_backward(da1, lc.x_in, lc.r1, w.row(lo.norm1, w.d), grow(lo.norm1, w.d));
  }
  MMap dtok = gmat(layout_.tok_emb, w.V, w.d);
  MMap dpos = gmat(layout_.pos_emb, w.P, w.d);
  for (Eigen::Index i = 0; i < n; ++i) {
    dtok.row(input[static_cast<std::size_t>(i)]) += dx.row(i);
    dpos.row(i) += dx.row(i);
  }
  return nll * inv_t;
}

/// KV-cached incremental decoder. Keys and values of every consumed position
/// are kept per layer, so each push costs one position of work.
class TransformerSession final : public DecodeSession {
 public:
  explicit TransformerSession(const TransformerLM& model) : model_(&model) {
    keys_.resize(model.layout_.layers.size());
    values_.resize(model.layout_.layers.size());
    step(Vocabulary::kBos);
  }

  void push(TokenId token) override {
    if (positions_ >= model_->config_.max_positions)
      fail(ErrorCode::ContextTooLong, "decode session exceeded " + std::to_string(model_->max_context()));
    step(token);
  }
  const std::vector<LogProb>& logprobs() const override { return logprobs_; }
  std::size_t length() const override { return positions_ - 1; }
  std::unique_ptr<DecodeSession> clone() const override { return std::make_unique<TransformerSession>(*this); }

 private:
  void step(TokenId token) {
    const auto& layout = model_->layout_;
    const Views w = views_of(*model_, layout, model_->params_.data());
    const auto d = static_cast<Eigen::Index>(w.d);
    const std::size_t heads = model_->config_.n_heads;
    const auto dh = d / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto pos = static_cast<Eigen::Index>(positions_);

    RowVec x = w.mat(layout.tok_emb, w.V, w.d).row(token) + w.mat(layout.pos_emb, w.P, w.d).row(pos);
    for (std::size_t l = 0; l < layout.layers.size(); ++l) {
      const auto& lo = layout.layers[l];
      const RowVec a1 = norm(x, w.row(lo.norm1, w.d));
      const RowVec q = a1 * w.mat(lo.wq, w.d, w.d);
      const RowVec k = a1 * w.mat(lo.wk, w.d, w.d);
      const RowVec v = a1 * w.mat(lo.wv, w.d, w.d);
      keys_[l].insert(keys_[l].end(), k.data(), k.data() + d);
      values_[l].insert(values_[l].end(), v.data(), v.data() + d);
      const CMap K(keys_[l].data(), pos + 1, d);
      const CMap Vm(values_[l].data(), pos + 1, d);
      RowVec o(d);
      for (std::size_t h = 0; h < heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h) * dh;
        Vec s = K.middleCols(c0, dh) * q.segment(c0, dh).transpose() * scale;
        const double mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        o.segment(c0, dh) = s.transpose() * Vm.middleCols(c0, dh);
      }
      x += o * w.mat(lo.wo, w.d, w.d);
      const RowVec a2 = norm(x, w.row(lo.norm2, w.d));
      RowVec u = a2 * w.mat(lo.w1, w.d, w.ff) + w.row(lo.b1, w.ff);
      u = u.unaryExpr([](double v) { return gelu(v); });
      x += u * w.mat(lo.w2, w.ff, w.d) + w.row(lo.b2, w.d);
    }
    const RowVec f = norm(x, w.row(layout.norm_f, w.d));
    RowVec logits = f * w.mat(layout.w_out, w.d, w.V) + w.row(layout.b_out, w.V);
    const double mx = logits.maxCoeff();
    const double z = mx + std::log((logits.array() - mx).exp().sum());
    logprobs_.assign(logits.data(), logits.data() + logits.size());
    for (auto& lp : logprobs_) lp -= z;
    ++positions_;
  }

  static RowVec norm(const RowVec& x, const CRowMap& gain) {
    const double r = std::sqrt(x.squaredNorm() / static_cast<double>(x.size()) + kNormEps);
    return x.cwiseProduct(gain) / r;
  }

  const TransformerLM* model_;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<LogProb> logprobs_;
  std::size_t positions_ = 0;
};

std::unique_ptr<DecodeSession> TransformerLM::open_session(TokenSpan context) const {
  auto s = std::make_unique<TransformerSession>(*this);
  for (auto t : context) s->push(t);
  return s;
}

}  // namespace beliefrect
