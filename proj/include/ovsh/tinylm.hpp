#pragma once

// Tiny causal transformer with exact reverse-mode gradients.
//
// Layout: token embedding + learned positions, `layers` pre-LN blocks
// (multi-head causal attention, GELU MLP with 4x expansion), final LayerNorm,
// untied output projection. All parameters live in one flat buffer with named
// segments; the same buffer layout is used for gradients, optimizer state and
// checkpoints.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovsh/common.hpp"
#include "ovsh/synthdata.hpp"

namespace ovsh {

struct ModelConfig {
  std::int32_t vocab_size = 1000;
  std::int32_t embed_dim = 64;
  std::int32_t context_len = 128;
  std::int32_t layers = 1;
  std::int32_t heads = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || context_len < 1 || layers < 1 || heads < 1)
      throw ConfigError("model config values must all be positive");
    if (embed_dim % heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                        std::to_string(heads));
  }
  std::int32_t head_dim() const noexcept { return embed_dim / heads; }
  std::int32_t mlp_dim() const noexcept { return 4 * embed_dim; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"context_len", c.context_len},
          {"layers", c.layers},         {"heads", c.heads},         {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::int32_t>();
  c.embed_dim = j.at("embed_dim").get<std::int32_t>();
  c.context_len = j.at("context_len").get<std::int32_t>();
  c.layers = j.at("layers").get<std::int32_t>();
  c.heads = j.at("heads").get<std::int32_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

/// A named slice of the flat parameter buffer, viewed as a rows x cols matrix.
struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::int32_t rows = 0;
  std::int32_t cols = 0;
  bool decays = false;  // matrices and embeddings take weight decay; gains and biases do not
  std::size_t size() const noexcept { return std::size_t(rows) * std::size_t(cols); }
};

/// Segment table, a pure function of the config.
class ParamLayout {
 public:
  struct Block {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  explicit ParamLayout(const ModelConfig& cfg) {
    cfg.validate();
    const auto V = cfg.vocab_size, d = cfg.embed_dim, T = cfg.context_len, h = cfg.mlp_dim();
    tok_emb = add("tok_emb", V, d, true);
    pos_emb = add("pos_emb", T, d, true);
    for (std::int32_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      Block b{};
      b.ln1_g = add(p + "ln1.gain", 1, d, false);
      b.ln1_b = add(p + "ln1.bias", 1, d, false);
      b.wq = add(p + "attn.wq", d, d, true);
      b.wk = add(p + "attn.wk", d, d, true);
      b.wv = add(p + "attn.wv", d, d, true);
      b.wo = add(p + "attn.wo", d, d, true);
      b.ln2_g = add(p + "ln2.gain", 1, d, false);
      b.ln2_b = add(p + "ln2.bias", 1, d, false);
      b.w1 = add(p + "mlp.w1", d, h, true);
      b.b1 = add(p + "mlp.b1", 1, h, false);
      b.w2 = add(p + "mlp.w2", h, d, true);
      b.b2 = add(p + "mlp.b2", 1, d, false);
      blocks.push_back(b);
    }
    lnf_g = add("lnf.gain", 1, d, false);
    lnf_b = add("lnf.bias", 1, d, false);
    out_w = add("out.w", d, V, true);
    out_b = add("out.b", 1, V, false);
  }

  const std::vector<ParamSegment>& segments() const noexcept { return segments_; }
  std::size_t total() const noexcept { return total_; }
  const ParamSegment& segment(std::size_t idx) const { return segments_[idx]; }

  std::size_t tok_emb, pos_emb, lnf_g, lnf_b, out_w, out_b;
  std::vector<Block> blocks;

 private:
  std::size_t add(std::string name, std::int32_t rows, std::int32_t cols, bool decays) {
    segments_.push_back({std::move(name), total_, rows, cols, decays});
    total_ += segments_.back().size();
    return segments_.size() - 1;
  }

  std::vector<ParamSegment> segments_;
  std::size_t total_ = 0;
};

/// Next-token probability source consumed by metrics, detection and decoding.
class ProbOracle {
 public:
  virtual ~ProbOracle() = default;
  virtual std::vector<double> next_dist(std::span<const TokenId> prefix) const = 0;
  virtual std::int32_t vocab_size() const = 0;
  virtual std::size_t max_prefix() const { return std::numeric_limits<std::size_t>::max(); }
};

namespace detail {

template <class T>
T gelu(T u) {
  constexpr T c = T(0.7978845608028654);
  return T(0.5) * u * (T(1) + std::tanh(c * (u + T(0.044715) * u * u * u)));
}

template <class T>
T gelu_grad(T u) {
  constexpr T c = T(0.7978845608028654);
  const T t = std::tanh(c * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * u * u);
}

}  // namespace detail

/// The next-token predictor. `T` is float for training/inference and double
/// for gradient checks.
/// Parameter-sized storage. Eigen's vectorized reductions peel according to
/// the buffer address, so results are only bit-reproducible on aligned storage.
template <class T>
using ParamBuffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
class Transformer {
 public:
  using Scalar = T;
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;
  using RowMap = Eigen::Map<const RowVec>;

  explicit Transformer(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg), params_(layout_.total(), T(0)) {}

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }

  std::uint64_t step = 0;  // optimizer steps taken

  ConstMatMap view(std::size_t seg) const {
    const auto& s = layout_.segment(seg);
    return ConstMatMap(params_.data() + s.offset, s.rows, s.cols);
  }
  MatMap view(std::size_t seg) {
    const auto& s = layout_.segment(seg);
    return MatMap(params_.data() + s.offset, s.rows, s.cols);
  }

  template <class U>
  Transformer<U> cast() const {
    Transformer<U> out(cfg_);
    std::transform(params_.begin(), params_.end(), out.params().begin(), [](T v) { return U(v); });
    out.step = step;
    return out;
  }

  // -------------------------------------------------------------------------
  // Forward / backward

  /// Intermediate activations of one sequence, kept for the backward pass.
  struct Tape {
    struct Layer {
      std::vector<std::int32_t> rows;  // query rows computed in this layer (positions)
      Mat x_in;                        // all input rows (n x d)
      Mat xhat1;                       // LN1 normalized (n x d)
      RowVec rstd1;
      Mat h1;                          // LN1 output (n x d)
      Mat q, k, v;                     // q: (|rows| x d), k/v: (n x d)
      std::vector<Mat> probs;          // per head (|rows| x n), causal
      Mat concat;                      // (|rows| x d)
      Mat xhat2;
      RowVec rstd2;
      Mat h2;                          // LN2 output (|rows| x d)
      Mat u;                           // MLP pre-activation (|rows| x 4d)
      Mat g;                           // GELU(u)
    };
    TokenSeq tokens;
    std::vector<Layer> layers;
    std::vector<std::int32_t> out_rows;
    Mat y_last;   // last block output on out_rows
    Mat xhatf;
    RowVec rstdf;
    Mat hf;       // final LN output (|out_rows| x d)
    Mat logits;   // (|out_rows| x V)
  };

  /// Computes logits at the positions listed in `out_rows` (sorted, unique).
  /// Only the last block is restricted to those rows; earlier blocks run over
  /// every position since later keys and values depend on them.
  Mat forward(std::span<const TokenId> tokens, std::span<const std::int32_t> out_rows, Tape* tape = nullptr) const {
    check_tokens(tokens);
    const auto n = static_cast<std::int32_t>(tokens.size());
    const auto d = cfg_.embed_dim;

    Tape local;
    Tape& tp = tape ? *tape : local;
    tp.tokens.assign(tokens.begin(), tokens.end());
    tp.out_rows.assign(out_rows.begin(), out_rows.end());
    tp.layers.resize(std::size_t(cfg_.layers));

    Mat x(n, d);
    auto tok = view(layout_.tok_emb);
    auto pos = view(layout_.pos_emb);
    for (std::int32_t i = 0; i < n; ++i) x.row(i) = tok.row(tokens[std::size_t(i)]) + pos.row(i);

    std::vector<std::int32_t> all_rows(static_cast<std::size_t>(n));
    std::iota(all_rows.begin(), all_rows.end(), 0);
    for (std::int32_t l = 0; l < cfg_.layers; ++l) {
      const bool last = l + 1 == cfg_.layers;
      auto& L = tp.layers[std::size_t(l)];
      L.rows = last ? tp.out_rows : all_rows;
      L.x_in = std::move(x);
      x = block_forward(layout_.blocks[std::size_t(l)], L);
    }

    tp.y_last = x;
    layer_norm(x, view(layout_.lnf_g), view(layout_.lnf_b), tp.xhatf, tp.rstdf, tp.hf);
    tp.logits = tp.hf * view(layout_.out_w);
    tp.logits.rowwise() += view(layout_.out_b).row(0);
    return tp.logits;
  }

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
  void backward(const Tape& tp, const Mat& dlogits, std::span<T> grad) const {
    auto gview = [&](std::size_t seg) {
      const auto& s = layout_.segment(seg);
      return MatMap(grad.data() + s.offset, s.rows, s.cols);
    };

    gview(layout_.out_w).noalias() += tp.hf.transpose() * dlogits;
    gview(layout_.out_b).row(0) += dlogits.colwise().sum();
    Mat dhf = dlogits * view(layout_.out_w).transpose();
    Mat dy = layer_norm_backward(dhf, tp.xhatf, tp.rstdf, view(layout_.lnf_g), gview(layout_.lnf_g),
                                 gview(layout_.lnf_b));

    for (std::int32_t l = cfg_.layers - 1; l >= 0; --l)
      dy = block_backward(layout_.blocks[std::size_t(l)], tp.layers[std::size_t(l)], dy, gview);

    // dy now holds d(loss)/d(embedding sum) for every position.
    auto dtok = gview(layout_.tok_emb);
    auto dpos = gview(layout_.pos_emb);
    for (std::int32_t i = 0; i < dy.rows(); ++i) {
      dtok.row(tp.tokens[std::size_t(i)]) += dy.row(i);
      dpos.row(i) += dy.row(i);
    }
  }

  /// Logits for the token following `prefix`.
  std::vector<T> forward_logits(std::span<const TokenId> prefix) const {
    if (prefix.empty()) throw InputError("empty prefix");
    const std::int32_t last = static_cast<std::int32_t>(prefix.size()) - 1;
    Mat logits = forward(prefix, std::span<const std::int32_t>(&last, 1));
    return std::vector<T>(logits.data(), logits.data() + logits.cols());
  }

  /// Probability distribution over the next token, computed in double.
  std::vector<double> next_dist(std::span<const TokenId> prefix) const {
    auto logits = forward_logits(prefix);
    std::vector<double> p(logits.size());
    const double mx = double(*std::max_element(logits.begin(), logits.end()));
    double sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) sum += p[i] = std::exp(double(logits[i]) - mx);
    for (auto& v : p) v /= sum;
    return p;
  }

  void check_tokens(std::span<const TokenId> tokens) const {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (tokens.size() > std::size_t(cfg_.context_len))
      throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds context " +
                       std::to_string(cfg_.context_len));
    for (auto t : tokens)
      if (t < 0 || t >= cfg_.vocab_size) throw InputError("token id " + std::to_string(t) + " out of range");
  }

 private:
  static constexpr T kLnEps = T(1e-5);

  static void layer_norm(const Mat& x, const ConstMatMap& gain, const ConstMatMap& bias, Mat& xhat, RowVec& rstd,
                         Mat& out) {
    const auto rows = x.rows(), d = x.cols();
    xhat.resize(rows, d);
    rstd.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const T mean = x.row(i).mean();
      const T var = (x.row(i).array() - mean).square().mean();
      rstd(i) = T(1) / std::sqrt(var + kLnEps);
      xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
    }
    out = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  }

  static Mat layer_norm_backward(const Mat& dout, const Mat& xhat, const RowVec& rstd, const ConstMatMap& gain,
                                 MatMap dgain, MatMap dbias) {
    dgain.row(0) += (dout.array() * xhat.array()).colwise().sum().matrix();
    dbias.row(0) += dout.colwise().sum();
    Mat dxhat = dout.array().rowwise() * gain.row(0).array();
    Mat dx(dout.rows(), dout.cols());
    for (Eigen::Index i = 0; i < dout.rows(); ++i) {
      const T m1 = dxhat.row(i).mean();
      const T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
      dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
    }
    return dx;
  }

  static Mat gather_rows(const Mat& m, const std::vector<std::int32_t>& rows) {
    if (std::int64_t(rows.size()) == m.rows()) return m;  // rows are always the identity when full
    Mat out(Eigen::Index(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(Eigen::Index(i)) = m.row(rows[i]);
    return out;
  }

  Mat block_forward(const ParamLayout::Block& b, typename Tape::Layer& L) const {
    const auto d = cfg_.embed_dim, H = cfg_.heads, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));
    const auto n = L.x_in.rows();
    const auto q = Eigen::Index(L.rows.size());

    layer_norm(L.x_in, view(b.ln1_g), view(b.ln1_b), L.xhat1, L.rstd1, L.h1);
    Mat h1q = gather_rows(L.h1, L.rows);
    L.q.noalias() = h1q * view(b.wq);
    L.k.noalias() = L.h1 * view(b.wk);
    L.v.noalias() = L.h1 * view(b.wv);

    L.probs.assign(std::size_t(H), Mat());
    L.concat.setZero(q, d);
    for (std::int32_t h = 0; h < H; ++h) {
      Mat& P = L.probs[std::size_t(h)];
      P.noalias() = (L.q.middleCols(h * dh, dh) * L.k.middleCols(h * dh, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < q; ++i) {
        const auto p = L.rows[std::size_t(i)];
        const auto span = p + 1;
        auto row = P.row(i);
        const T mx = row.head(span).maxCoeff();
        row.head(span) = (row.head(span).array() - mx).exp();
        row.head(span) /= row.head(span).sum();
        if (span < n) row.tail(n - span).setZero();
      }
      L.concat.middleCols(h * dh, dh).noalias() = P * L.v.middleCols(h * dh, dh);
    }

    Mat r = gather_rows(L.x_in, L.rows);
    r.noalias() += L.concat * view(b.wo);
    layer_norm(r, view(b.ln2_g), view(b.ln2_b), L.xhat2, L.rstd2, L.h2);
    L.u.noalias() = L.h2 * view(b.w1);
    L.u.rowwise() += view(b.b1).row(0);
    L.g = L.u.unaryExpr([](T v) { return detail::gelu(v); });
    r.noalias() += L.g * view(b.w2);
    r.rowwise() += view(b.b2).row(0);
    return r;
  }

  template <class GView>
  Mat block_backward(const ParamLayout::Block& b, const typename Tape::Layer& L, const Mat& dy, GView&& gview) const {
    const auto H = cfg_.heads, dh = cfg_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));
    const auto n = L.x_in.rows();

    // MLP branch
    gview(b.w2).noalias() += L.g.transpose() * dy;
    gview(b.b2).row(0) += dy.colwise().sum();
    Mat du = (dy * view(b.w2).transpose()).array() * L.u.unaryExpr([](T v) { return detail::gelu_grad(v); }).array();
    gview(b.w1).noalias() += L.h2.transpose() * du;
    gview(b.b1).row(0) += du.colwise().sum();
    Mat dh2 = du * view(b.w1).transpose();
    Mat dr = dy + layer_norm_backward(dh2, L.xhat2, L.rstd2, view(b.ln2_g), gview(b.ln2_g), gview(b.ln2_b));

    // Attention branch
    Mat dx_in = Mat::Zero(n, L.x_in.cols());
    for (std::size_t i = 0; i < L.rows.size(); ++i) dx_in.row(L.rows[i]) += dr.row(Eigen::Index(i));

    Mat h1q = gather_rows(L.h1, L.rows);
    gview(b.wo).noalias() += L.concat.transpose() * dr;
    Mat dconcat = dr * view(b.wo).transpose();
    Mat dq(L.q.rows(), L.q.cols()), dk = Mat::Zero(n, L.k.cols()), dv = Mat::Zero(n, L.v.cols());
    for (std::int32_t h = 0; h < H; ++h) {
      const Mat& P = L.probs[std::size_t(h)];
      auto dc = dconcat.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() += P.transpose() * dc;
      Mat dP = dc * L.v.middleCols(h * dh, dh).transpose();
      Mat dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
      dS *= scale;
      dq.middleCols(h * dh, dh).noalias() = dS * L.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() += dS.transpose() * L.q.middleCols(h * dh, dh);
    }
    gview(b.wq).noalias() += h1q.transpose() * dq;
    gview(b.wk).noalias() += L.h1.transpose() * dk;
    gview(b.wv).noalias() += L.h1.transpose() * dv;
    Mat dh1 = dk * view(b.wk).transpose();
    dh1.noalias() += dv * view(b.wv).transpose();
    Mat dh1q = dq * view(b.wq).transpose();
    for (std::size_t i = 0; i < L.rows.size(); ++i) dh1.row(L.rows[i]) += dh1q.row(Eigen::Index(i));

    dx_in += layer_norm_backward(dh1, L.xhat1, L.rstd1, view(b.ln1_g), gview(b.ln1_g), gview(b.ln1_b));
    return dx_in;
  }

  ModelConfig cfg_;
  ParamLayout layout_;
  ParamBuffer<T> params_;
};

using NextTokenPredictor = Transformer<float>;

template <class T = float>
Transformer<T> init_model(const ModelConfig& cfg) {
  cfg.validate();
  Transformer<T> m(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto p = m.params();
  for (const auto& seg : m.layout().segments()) {
    const bool gain = seg.name.ends_with(".gain") || seg.name == "lnf.gain";
    for (std::size_t i = 0; i < seg.size(); ++i) {
      auto& v = p[seg.offset + i];
      if (gain) v = T(1);
      else if (seg.decays) v = T(normal(rng));
      else v = T(0);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Token layout of one training example: the model consumes `inputs` and is
/// scored at `rows`, where rows[i] predicts labels[i].
struct LossSites {
  TokenSeq inputs;
  std::vector<std::int32_t> rows;
  TokenSeq labels;
};

inline LossSites loss_sites(const Sample& s, bool full_sequence) {
  if (s.prompt.empty() || s.target.empty()) throw InputError("sample needs a prompt and a target");
  LossSites out;
  TokenSeq seq = s.prompt;
  seq.insert(seq.end(), s.target.begin(), s.target.end());
  out.inputs.assign(seq.begin(), seq.end() - 1);
  const auto first = full_sequence ? std::size_t(0) : s.prompt.size() - 1;
  for (std::size_t i = first; i + 1 < seq.size(); ++i) {
    out.rows.push_back(static_cast<std::int32_t>(i));
    out.labels.push_back(seq[i + 1]);
  }
  return out;
}

/// Mean -log p(label) over the loss sites; when `grad` is non-empty,
/// accumulates `weight` times the gradient of that mean into it.
template <class T>
double sample_loss(const Transformer<T>& m, const Sample& s, bool full_sequence, std::span<T> grad = {},
                   T weight = T(1)) {
  auto sites = loss_sites(s, full_sequence);
  typename Transformer<T>::Tape tape;
  auto logits = m.forward(sites.inputs, sites.rows, grad.empty() ? nullptr : &tape);
  const auto count = logits.rows();
  double loss = 0;
  typename Transformer<T>::Mat dlogits(count, logits.cols());
  for (Eigen::Index i = 0; i < count; ++i) {
    auto row = logits.row(i);
    const T mx = row.maxCoeff();
    auto e = (row.array() - mx).exp();
    const T sum = e.sum();
    const auto label = sites.labels[std::size_t(i)];
    loss += -(double(row(label)) - double(mx) - std::log(double(sum)));
    if (!grad.empty()) {
      dlogits.row(i) = e / sum;
      dlogits(i, label) -= T(1);
    }
  }
  loss /= double(count);
  if (!grad.empty()) {
    dlogits *= weight / T(count);
    m.backward(tape, dlogits, grad);
  }
  return loss;
}

template <class T>
double ntp_loss(const Transformer<T>& m, const Sample& s, bool full_sequence = false) {
  return sample_loss(m, s, full_sequence);
}

/// Gradient of the mean batch loss. Returns the mean loss.
template <class T>
double grad(const Transformer<T>& m, std::span<const Sample> batch, std::span<T> out, bool full_sequence = false) {
  if (batch.empty()) throw InputError("empty batch");
  std::fill(out.begin(), out.end(), T(0));
  const T w = T(1) / T(batch.size());
  double loss = 0;
  for (const auto& s : batch) loss += sample_loss(m, s, full_sequence, out, w);
  return loss / double(batch.size());
}

template <class T>
ParamBuffer<T> grad(const Transformer<T>& m, std::span<const Sample> batch, bool full_sequence = false) {
  ParamBuffer<T> g(m.param_count());
  grad(m, batch, std::span<T>(g), full_sequence);
  return g;
}

/// Relative error with the |a|+|b|+1e-8 guard.
inline double relative_error(double a, double b) { return std::abs(a - b) / (std::abs(a) + std::abs(b) + 1e-8); }

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst_param;
};

/// Compares analytic gradients with central differences on a random subset of
/// parameters. The subset is drawn from parameters the sample actually touches
/// (non-zero analytic gradient), so the check is not dominated by unused rows.
/// Runs in double precision regardless of `T`.
template <class T>
GradCheckResult grad_check(const Transformer<T>& model, const Sample& s, double eps, std::uint64_t seed = 0,
                           std::size_t subset = 100, bool full_sequence = false) {
  if (!(eps >= 1e-6 && eps <= 1e-2)) throw InputError("grad_check eps must lie in [1e-6, 1e-2]");
  auto m = model.template cast<double>();
  ParamBuffer<double> g(m.param_count(), 0.0);
  sample_loss(m, s, full_sequence, std::span<double>(g));

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] != 0.0) candidates.push_back(i);
  std::mt19937_64 rng(seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  if (candidates.size() > subset) candidates.resize(subset);

  GradCheckResult res;
  auto p = m.params();
  for (auto idx : candidates) {
    const double orig = p[idx];
    p[idx] = orig + eps;
    const double lp = sample_loss(m, s, full_sequence);
    p[idx] = orig - eps;
    const double lm = sample_loss(m, s, full_sequence);
    p[idx] = orig;
    const double fd = (lp - lm) / (2 * eps);
    const double err = relative_error(g[idx], fd);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      for (const auto& seg : m.layout().segments())
        if (idx >= seg.offset && idx < seg.offset + seg.size())
          res.worst_param = seg.name + "[" + std::to_string(idx - seg.offset) + "]";
    }
    ++res.checked;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Training

enum class Optimizer { sgd, adam };

struct TrainConfig {
  double lr = 0.1;
  double weight_decay = 0.0;
  std::int32_t epochs = 40;
  std::int32_t steps = 800;  // optimizer-step budget; overrides epochs when > 0
  std::int32_t batch_size = 32;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::sgd;
  bool full_sequence_loss = false;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("learning rate must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"optimizer", c.optimizer == Optimizer::adam ? "adam" : "sgd"},
          {"full_sequence_loss", c.full_sequence_loss}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  auto opt = j.value("optimizer", std::string(c.optimizer == Optimizer::adam ? "adam" : "sgd"));
  if (opt == "adam") c.optimizer = Optimizer::adam;
  else if (opt == "sgd") c.optimizer = Optimizer::sgd;
  else throw ConfigError("unknown optimizer '" + opt + "'");
  c.full_sequence_loss = j.value("full_sequence_loss", c.full_sequence_loss);
  return c;
}

struct TrainLog {
  std::vector<double> epoch_loss;  // mean sample loss per epoch (pre-update, as seen by each batch)
  std::vector<double> step_loss;   // mean batch loss per optimizer step

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

/// Optional per-epoch hook (epoch index, model) for monitoring.
template <class T>
using EpochHook = std::function<void(std::int32_t, const Transformer<T>&)>;

template <class T>
TrainLog train(Transformer<T>& m, std::span<const Sample> data, const TrainConfig& tc, EpochHook<T> hook = {}) {
  tc.validate();
  if (data.empty()) throw InputError("empty training set");
  for (const auto& s : data)
    if (s.prompt.size() + s.target.size() - 1 > std::size_t(m.config().context_len))
      throw InputError("sample does not fit the model context");

  const std::size_t P = m.param_count();
  ParamBuffer<T> g(P);
  std::vector<T> m1, m2;
  if (tc.optimizer == Optimizer::adam) {
    m1.assign(P, T(0));
    m2.assign(P, T(0));
  }
  std::vector<std::uint8_t> decays(P, 0);
  for (const auto& seg : m.layout().segments())
    if (seg.decays) std::fill_n(decays.begin() + std::ptrdiff_t(seg.offset), seg.size(), std::uint8_t(1));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(tc.seed);
  std::vector<Sample> batch;
  TrainLog log;
  constexpr double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

  std::int64_t taken = 0;
  auto done = [&] { return tc.steps > 0 && taken >= tc.steps; };
  for (std::int32_t epoch = 0; tc.steps > 0 ? !done() : epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size() && !done(); start += std::size_t(tc.batch_size)) {
      const auto end = std::min(order.size(), start + std::size_t(tc.batch_size));
      batch.clear();
      for (auto i = start; i < end; ++i) batch.push_back(data[order[i]]);
      const double loss = grad(m, std::span<const Sample>(batch), std::span<T>(g), tc.full_sequence_loss);
      if (!std::isfinite(loss)) throw TrainingError("training diverged at epoch " + std::to_string(epoch));
      log.step_loss.push_back(loss);
      epoch_sum += loss * double(batch.size());
      seen += batch.size();

      ++taken;
      ++m.step;
      auto p = m.params();
      const T lr = T(tc.lr), decay = T(tc.lr * tc.weight_decay);
      if (tc.optimizer == Optimizer::adam) {
        const T c1 = T(1.0 / (1.0 - std::pow(b1, double(m.step))));
        const T c2 = T(1.0 / (1.0 - std::pow(b2, double(m.step))));
        for (std::size_t i = 0; i < P; ++i) {
          m1[i] = T(b1) * m1[i] + T(1 - b1) * g[i];
          m2[i] = T(b2) * m2[i] + T(1 - b2) * g[i] * g[i];
          if (decays[i]) p[i] -= decay * p[i];
          p[i] -= lr * (m1[i] * c1) / (std::sqrt(m2[i] * c2) + T(adam_eps));
        }
      } else {
        for (std::size_t i = 0; i < P; ++i) {
          if (decays[i]) p[i] -= decay * p[i];
          p[i] -= lr * g[i];
        }
      }
    }
    log.epoch_loss.push_back(epoch_sum / double(seen));
    if (hook) hook(epoch, m);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Oracle adapter

template <class T>
class ModelOracle final : public ProbOracle {
 public:
  explicit ModelOracle(const Transformer<T>& m) : m_(m) {}
  std::vector<double> next_dist(std::span<const TokenId> prefix) const override { return m_.next_dist(prefix); }
  std::int32_t vocab_size() const override { return m_.config().vocab_size; }
  std::size_t max_prefix() const override { return std::size_t(m_.config().context_len); }

 private:
  const Transformer<T>& m_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "OVSHLM01" | u32 version | u32 len + JSON header |
// sections of (u32 name len, name, u64 count, f32[count]), all little-endian.

inline constexpr char kCheckpointMagic[8] = {'O', 'V', 'S', 'H', 'L', 'M', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U)))
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write_checkpoint(const NextTokenPredictor& m, std::ostream& os) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  nlohmann::json header = {{"config", to_json(m.config())}, {"step", m.step}};
  const auto text = header.dump();
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), std::streamsize(text.size()));
  auto p = m.params();
  for (const auto& seg : m.layout().segments()) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(seg.name.size()));
    os.write(seg.name.data(), std::streamsize(seg.name.size()));
    detail::put_le<std::uint64_t>(os, seg.size());
    for (std::size_t i = 0; i < seg.size(); ++i) {
      std::uint32_t bits;
      const float f = p[seg.offset + i];
      std::memcpy(&bits, &f, sizeof bits);
      detail::put_le<std::uint32_t>(os, bits);
    }
  }
}

inline NextTokenPredictor read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError("not a checkpoint: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint", version, kCheckpointVersion);
  const auto hlen = detail::get_le<std::uint32_t>(is, "header length");
  std::string text(hlen, '\0');
  if (!is.read(text.data(), hlen)) throw CheckpointError("checkpoint truncated in header");
  ModelConfig cfg;
  std::uint64_t step = 0;
  try {
    auto header = nlohmann::json::parse(text);
    cfg = model_config_from_json(header.at("config"));
    step = header.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  NextTokenPredictor m(cfg);
  m.step = step;
  auto p = m.params();
  for (const auto& seg : m.layout().segments()) {
    const auto nlen = detail::get_le<std::uint32_t>(is, "section name length");
    if (nlen > 4096) throw CheckpointError("checkpoint section name too long");
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw CheckpointError("checkpoint truncated in section name");
    if (name != seg.name)
      throw CheckpointError("checkpoint section '" + name + "' does not match config (expected '" + seg.name + "')");
    const auto count = detail::get_le<std::uint64_t>(is, "section length");
    if (count != seg.size())
      throw CheckpointError("checkpoint section '" + name + "' has " + std::to_string(count) +
                               " values, config implies " + std::to_string(seg.size()));
    for (std::size_t i = 0; i < seg.size(); ++i) {
      const auto bits = detail::get_le<std::uint32_t>(is, "parameter payload");
      float f;
      std::memcpy(&f, &bits, sizeof f);
      p[seg.offset + i] = f;
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint payload");
  return m;
}

inline void save_checkpoint(const NextTokenPredictor& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(m, os);
  if (!os) throw CheckpointError("write failed: " + path);
}

inline NextTokenPredictor load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace ovsh
