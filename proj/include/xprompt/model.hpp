#pragma once

// Micro decoder-only transformer over the unified text/image vocabulary.
//
// Pre-norm blocks (LayerNorm -> masked multi-head attention -> residual,
// LayerNorm -> GELU MLP -> residual), learned absolute positions, a separate
// learnable table for XP slots, and an output head tied to the token
// embeddings. Forward and backward are written out by hand; everything is
// templated on the scalar so verification runs in double and training in
// float.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "layout.hpp"
#include "mask.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace xprompt {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 4;
  int vocab = 0;
  int max_len = 512;
  int num_xp = 16;
  int mlp_ratio = 4;
  std::uint64_t seed = 0;
  // Rows of the optional cell-index table (image width*height + 2); 0 disables it.
  int image_span = 0;

  int head_dim() const { return d_model / n_heads; }
  int hidden() const { return d_model * mlp_ratio; }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || vocab <= 0 || max_len <= 0 || mlp_ratio <= 0)
      throw ConfigError("model dimensions must be positive");
    if (num_xp < 0) throw ConfigError("num_xp must be non-negative");
    if (image_span < 0) throw ConfigError("image_span must be non-negative");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerParams {
  Mat<T> ln1_g, ln1_b;
  Mat<T> wq, wk, wv, wo;
  Mat<T> bq, bk, bv, bo;
  Mat<T> ln2_g, ln2_b;
  Mat<T> w1, b1, w2, b2;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Mat<T> tok_emb;  // V x C, also the output projection
  Mat<T> pos_emb;  // L_max x C
  Mat<T> xp_emb;   // S x C
  Mat<T> cell_emb; // image_span x C, empty when disabled
  std::vector<LayerParams<T>> layers;
  Mat<T> lnf_g, lnf_b;

  // Visits every tensor in a fixed order. The order defines checkpoint layout
  // and initialization draws.
  template <typename F>
  void visit(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    f("xp_emb", xp_emb);
    f("cell_emb", cell_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "wq", L.wq);
      f(p + "bq", L.bq);
      f(p + "wk", L.wk);
      f(p + "bk", L.bk);
      f(p + "wv", L.wv);
      f(p + "bv", L.bv);
      f(p + "wo", L.wo);
      f(p + "bo", L.bo);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "w1", L.w1);
      f(p + "b1", L.b1);
      f(p + "w2", L.w2);
      f(p + "b2", L.b2);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit([&](const std::string& name, Mat<T>& m) { f(name, std::as_const(m)); });
  }

  std::size_t count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  // Same shapes, all zeros. Used for gradient accumulators and optimizer moments.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.visit([](const std::string&, Mat<T>& m) { m.setZero(); });
    return z;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.layers.resize(layers.size());
    std::vector<const Mat<T>*> src;
    visit([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
    std::size_t k = 0;
    out.visit([&](const std::string&, Mat<U>& m) { m = src[k++]->template cast<U>(); });
    return out;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const Mat<T>& m) { ok = ok && m.allFinite(); });
    return ok;
  }
};

// Parameter count in closed form.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t C = static_cast<std::size_t>(c.d_model);
  const std::size_t H = static_cast<std::size_t>(c.hidden());
  const std::size_t per_layer = 4 * C * C + 4 * C + 2 * C * H + H + C + 4 * C;
  return static_cast<std::size_t>(c.vocab + c.max_len + c.num_xp + c.image_span) * C + static_cast<std::size_t>(c.n_layers) * per_layer +
         2 * C;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config) {
  config.validate();
  const int C = config.d_model;
  const int H = config.hidden();
  ModelParams<T> p;
  p.config = config;
  p.tok_emb = Mat<T>::Zero(config.vocab, C);
  p.pos_emb = Mat<T>::Zero(config.max_len, C);
  p.xp_emb = Mat<T>::Zero(config.num_xp, C);
  p.cell_emb = Mat<T>::Zero(config.image_span, C);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& L : p.layers) {
    L.ln1_g = Mat<T>::Ones(1, C);
    L.ln1_b = Mat<T>::Zero(1, C);
    L.wq = Mat<T>::Zero(C, C);
    L.wk = Mat<T>::Zero(C, C);
    L.wv = Mat<T>::Zero(C, C);
    L.wo = Mat<T>::Zero(C, C);
    L.bq = Mat<T>::Zero(1, C);
    L.bk = Mat<T>::Zero(1, C);
    L.bv = Mat<T>::Zero(1, C);
    L.bo = Mat<T>::Zero(1, C);
    L.ln2_g = Mat<T>::Ones(1, C);
    L.ln2_b = Mat<T>::Zero(1, C);
    L.w1 = Mat<T>::Zero(C, H);
    L.b1 = Mat<T>::Zero(1, H);
    L.w2 = Mat<T>::Zero(H, C);
    L.b2 = Mat<T>::Zero(1, C);
  }
  p.lnf_g = Mat<T>::Ones(1, C);
  p.lnf_b = Mat<T>::Zero(1, C);

  Rng rng(config.seed);
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * config.n_layers);
  p.visit([&](const std::string& name, Mat<T>& m) {
    const bool is_weight = name.ends_with("emb") || name.ends_with("wq") || name.ends_with("wk") ||
                           name.ends_with("wv") || name.ends_with("wo") || name.ends_with("w1") ||
                           name.ends_with("w2");
    if (!is_weight) return;
    const double sd = (name.ends_with("wo") || name.ends_with("w2")) ? residual : base;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(sd * rng.normal());
  });
  return p;
}

namespace detail {

template <typename T>
struct NormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, NormCache<T>* cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index c = x.cols();
  Mat<T> y(n, c);
  if (cache) {
    cache->xhat.resize(n, c);
    cache->rstd.resize(static_cast<std::size_t>(n));
  }
  const T eps = static_cast<T>(1e-5);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T rstd = T(1) / std::sqrt(var + eps);
    RowVec<T> xh = (x.row(i).array() - mean) * rstd;
    y.row(i) = xh.cwiseProduct(g) + b;
    if (cache) {
      cache->xhat.row(i) = xh;
      cache->rstd[static_cast<std::size_t>(i)] = rstd;
    }
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const NormCache<T>& cache, const Mat<T>& g, Mat<T>& dg, Mat<T>& db) {
  const Eigen::Index n = dy.rows();
  const T inv_c = T(1) / static_cast<T>(dy.cols());
  Mat<T> dx(n, dy.cols());
  dg += dy.cwiseProduct(cache.xhat).colwise().sum();
  db += dy.colwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    RowVec<T> dxh = dy.row(i).cwiseProduct(g);
    const T m1 = dxh.sum() * inv_c;
    const T m2 = dxh.cwiseProduct(cache.xhat.row(i)).sum() * inv_c;
    dx.row(i) = (dxh.array() - m1 - cache.xhat.row(i).array() * m2) * cache.rstd[static_cast<std::size_t>(i)];
  }
  return dx;
}

template <typename T>
constexpr T gelu_k() {
  return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

template <typename T>
T gelu(T u) {
  const T t = std::tanh(gelu_k<T>() * (u + T(0.044715) * u * u * u));
  return T(0.5) * u * (T(1) + t);
}

template <typename T>
T gelu_grad(T u) {
  const T t = std::tanh(gelu_k<T>() * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * gelu_k<T>() * (T(1) + T(3) * T(0.044715) * u * u);
}

// Slot index inside its XP run for every XP position, -1 elsewhere.
inline std::vector<int> xp_slots(const SequenceLayout& layout) {
  std::vector<int> slots(static_cast<std::size_t>(layout.size()), -1);
  int run = 0;
  for (int i = 0; i < layout.size(); ++i) {
    if (layout.role(i) == Role::Xp) {
      slots[static_cast<std::size_t>(i)] = run++;
    } else {
      run = 0;
    }
  }
  return slots;
}

inline bool is_image_role(Role r) { return r == Role::IeImage || r == Role::QueryImage || r == Role::TdImage; }

// Offset inside the current image span for image-role positions (BOI is 0),
// -1 elsewhere. Adjacent images of one role are split every `span` positions.
inline std::vector<int> cell_slots(const SequenceLayout& layout, int span) {
  std::vector<int> slots(static_cast<std::size_t>(layout.size()), -1);
  if (span <= 0) return slots;
  int run = 0;
  for (int i = 0; i < layout.size(); ++i) {
    const Role r = layout.role(i);
    if (!is_image_role(r)) continue;
    run = (i > 0 && layout.role(i - 1) == r) ? run + 1 : 0;
    slots[static_cast<std::size_t>(i)] = run % span;
  }
  return slots;
}

template <typename T>
void row_softmax_inplace(Eigen::Ref<RowVec<T>> row) {
  const T m = row.maxCoeff();
  row = (row.array() - m).exp();
  row /= row.sum();
}

}  // namespace detail

template <typename T>
struct LayerTrace {
  Mat<T> x_in;
  detail::NormCache<T> ln1;
  Mat<T> h, q, k, v;
  std::vector<Mat<T>> probs;  // per head, L x L
  Mat<T> attn;                // concatenated head outputs, L x C
  Mat<T> x_mid;
  detail::NormCache<T> ln2;
  Mat<T> h2, u, g;
};

template <typename T>
struct ForwardTrace {
  TokenSeq tokens;
  SequenceLayout layout;
  AttentionMask mask;
  std::vector<int> slots;
  std::vector<int> cells;
  std::vector<LayerTrace<T>> layers;
  Mat<T> x_final;
  detail::NormCache<T> lnf;
  Mat<T> hf;
  Mat<T> logits;  // L x V
};

namespace detail {

inline void check_inputs(const ModelConfig& cfg, const TokenSeq& tokens, const SequenceLayout& layout,
                         const VocabSpec* vocab) {
  if (tokens.empty()) throw ConfigError("empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_len)
    throw ConfigError("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                      std::to_string(cfg.max_len));
  if (static_cast<int>(tokens.size()) != layout.size()) throw ConfigError("layout does not match token count");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg.vocab) throw ConfigError("token id out of vocabulary range");
    if (vocab && (layout.roles[i] == Role::Xp) != (tokens[i] == vocab->xp()))
      throw ConfigError("XP placeholder ids and XP roles disagree at position " + std::to_string(i));
  }
}

}  // namespace detail

template <typename T>
ForwardTrace<T> forward(const ModelParams<T>& params, const TokenSeq& tokens, const SequenceLayout& layout,
                        const AttentionMask& mask, const VocabSpec* vocab = nullptr) {
  const auto& cfg = params.config;
  detail::check_inputs(cfg, tokens, layout, vocab);
  if (mask.size() != layout.size()) throw ConfigError("mask does not match layout");
  const int L = layout.size();
  const int C = cfg.d_model;
  const int dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  ForwardTrace<T> tr;
  tr.tokens = tokens;
  tr.layout = layout;
  tr.mask = mask;
  tr.slots = detail::xp_slots(layout);
  tr.cells = detail::cell_slots(layout, cfg.image_span);
  if (cfg.image_span > 0 && layout.image_width > 0 &&
      layout.image_width * layout.image_height + 2 != cfg.image_span)
    throw ConfigError("image size does not match the model's image_span");

  Mat<T> x(L, C);
  for (int p = 0; p < L; ++p) {
    const int slot = tr.slots[static_cast<std::size_t>(p)];
    if (slot >= 0) {
      if (slot >= cfg.num_xp) throw ConfigError("XP run longer than the XP table");
      x.row(p) = params.xp_emb.row(slot) + params.pos_emb.row(p);
    } else {
      x.row(p) = params.tok_emb.row(tokens[static_cast<std::size_t>(p)]) + params.pos_emb.row(p);
    }
    if (const int c = tr.cells[static_cast<std::size_t>(p)]; c >= 0) x.row(p) += params.cell_emb.row(c);
  }

  const T neg = std::numeric_limits<T>::lowest();
  tr.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& P = params.layers[l];
    auto& lt = tr.layers[l];
    lt.x_in = x;
    lt.h = detail::layer_norm(x, P.ln1_g, P.ln1_b, &lt.ln1);
    lt.q = (lt.h * P.wq).rowwise() + P.bq.row(0);
    lt.k = (lt.h * P.wk).rowwise() + P.bk.row(0);
    lt.v = (lt.h * P.wv).rowwise() + P.bv.row(0);
    lt.attn.resize(L, C);
    lt.probs.resize(static_cast<std::size_t>(cfg.n_heads));
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const auto qh = lt.q.middleCols(hd * dh, dh);
      const auto kh = lt.k.middleCols(hd * dh, dh);
      const auto vh = lt.v.middleCols(hd * dh, dh);
      Mat<T> s = (qh * kh.transpose()) * scale;
      for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j)
          if (!mask(i, j)) s(i, j) = neg;
        const T m = s.row(i).maxCoeff();
        for (int j = 0; j < L; ++j) s(i, j) = mask(i, j) ? std::exp(s(i, j) - m) : T(0);
        s.row(i) /= s.row(i).sum();
      }
      lt.attn.middleCols(hd * dh, dh) = s * vh;
      lt.probs[static_cast<std::size_t>(hd)] = std::move(s);
    }
    lt.x_mid = x + ((lt.attn * P.wo).rowwise() + P.bo.row(0));
    lt.h2 = detail::layer_norm(lt.x_mid, P.ln2_g, P.ln2_b, &lt.ln2);
    lt.u = (lt.h2 * P.w1).rowwise() + P.b1.row(0);
    lt.g = lt.u.unaryExpr([](T a) { return detail::gelu(a); });
    x = lt.x_mid + ((lt.g * P.w2).rowwise() + P.b2.row(0));
  }
  tr.x_final = x;
  tr.hf = detail::layer_norm(x, params.lnf_g, params.lnf_b, &tr.lnf);
  tr.logits = tr.hf * params.tok_emb.transpose();
  return tr;
}

template <typename T>
ForwardTrace<T> forward(const ModelParams<T>& params, const TokenSeq& tokens, const SequenceLayout& layout,
                        const MaskOptions& opts = {}, const VocabSpec* vocab = nullptr) {
  return forward(params, tokens, layout, build_mask(layout, opts), vocab);
}

struct LossOptions {
  // Relative weight of TD_TEXT targets against TD_IMAGE targets.
  double text_weight = 1.0;
  // Also predict query-instruction and query-image tokens.
  bool include_query = false;

  friend bool operator==(const LossOptions&, const LossOptions&) = default;
};

// Per-position target weights; position p is predicted from logits[p - 1].
inline std::vector<double> target_weights(const SequenceLayout& layout, const LossOptions& opts = {}) {
  std::vector<double> w(static_cast<std::size_t>(layout.size()), 0.0);
  for (int p = 1; p < layout.size(); ++p) {
    const Role r = layout.role(p);
    if (layout.loss_mask[static_cast<std::size_t>(p)]) {
      w[static_cast<std::size_t>(p)] = (r == Role::TdText) ? opts.text_weight : 1.0;
    } else if (opts.include_query && is_query(r)) {
      w[static_cast<std::size_t>(p)] = 1.0;
    }
  }
  return w;
}

template <typename T>
struct LossSum {
  T total = 0;    // weighted negative log-likelihood
  T weight = 0;   // sum of weights
  int count = 0;  // number of targets
  int correct = 0;  // argmax hits among targets
};

template <typename T>
T log_softmax_at(const Eigen::Ref<const RowVec<T>>& row, int idx) {
  const T m = row.maxCoeff();
  const T lse = m + std::log((row.array() - m).exp().sum());
  return row(idx) - lse;
}

template <typename T>
LossSum<T> loss_sum(const ForwardTrace<T>& tr, const LossOptions& opts = {}) {
  const auto w = target_weights(tr.layout, opts);
  LossSum<T> s;
  for (int p = 1; p < tr.layout.size(); ++p) {
    const double wp = w[static_cast<std::size_t>(p)];
    if (wp == 0.0) continue;
    const int tgt = tr.tokens[static_cast<std::size_t>(p)];
    const RowVec<T> row = tr.logits.row(p - 1);
    s.total -= static_cast<T>(wp) * log_softmax_at<T>(row, tgt);
    s.weight += static_cast<T>(wp);
    ++s.count;
    Eigen::Index arg;
    row.maxCoeff(&arg);
    s.correct += (arg == tgt);
  }
  return s;
}

// Mean cross-entropy over the TD targets of one sequence.
template <typename T>
T loss(const ForwardTrace<T>& tr, const LossOptions& opts = {}) {
  const auto s = loss_sum(tr, opts);
  if (s.count == 0) throw ConfigError("loss mask is empty");
  return s.total / s.weight;
}

// Accumulates scale * d(weighted NLL sum)/d(params) into grads.
template <typename T>
void backward_into(const ForwardTrace<T>& tr, const ModelParams<T>& params, ModelParams<T>& grads, T scale,
                   const LossOptions& opts = {}) {
  const auto& cfg = params.config;
  const int L = tr.layout.size();
  const int dh = cfg.head_dim();
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
  const auto w = target_weights(tr.layout, opts);

  Mat<T> dlogits = Mat<T>::Zero(L, cfg.vocab);
  for (int p = 1; p < L; ++p) {
    const double wp = w[static_cast<std::size_t>(p)];
    if (wp == 0.0) continue;
    RowVec<T> pr = tr.logits.row(p - 1);
    detail::row_softmax_inplace<T>(pr);
    pr(tr.tokens[static_cast<std::size_t>(p)]) -= T(1);
    dlogits.row(p - 1) = pr * (scale * static_cast<T>(wp));
  }

  grads.tok_emb.noalias() += dlogits.transpose() * tr.hf;
  Mat<T> dhf = dlogits * params.tok_emb;
  Mat<T> dx = detail::layer_norm_backward(dhf, tr.lnf, params.lnf_g, grads.lnf_g, grads.lnf_b);

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& P = params.layers[li];
    auto& G = grads.layers[li];
    const auto& lt = tr.layers[li];

    // MLP branch
    G.w2.noalias() += lt.g.transpose() * dx;
    G.b2 += dx.colwise().sum();
    Mat<T> du = (dx * P.w2.transpose()).cwiseProduct(lt.u.unaryExpr([](T a) { return detail::gelu_grad(a); }));
    G.w1.noalias() += lt.h2.transpose() * du;
    G.b1 += du.colwise().sum();
    Mat<T> dh2 = du * P.w1.transpose();
    Mat<T> dx_mid = dx + detail::layer_norm_backward(dh2, lt.ln2, P.ln2_g, G.ln2_g, G.ln2_b);

    // attention branch
    G.wo.noalias() += lt.attn.transpose() * dx_mid;
    G.bo += dx_mid.colwise().sum();
    Mat<T> dattn = dx_mid * P.wo.transpose();
    Mat<T> dq(L, cfg.d_model), dk(L, cfg.d_model), dv(L, cfg.d_model);
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const Mat<T>& pr = lt.probs[static_cast<std::size_t>(hd)];
      const auto da = dattn.middleCols(hd * dh, dh);
      Mat<T> dp = da * lt.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh) = pr.transpose() * da;
      Mat<T> ds = pr.cwiseProduct(dp);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = ds.rowwise().sum();
      ds -= pr.cwiseProduct(rs.replicate(1, L));
      ds *= att_scale;
      dq.middleCols(hd * dh, dh) = ds * lt.k.middleCols(hd * dh, dh);
      dk.middleCols(hd * dh, dh) = ds.transpose() * lt.q.middleCols(hd * dh, dh);
    }
    G.wq.noalias() += lt.h.transpose() * dq;
    G.wk.noalias() += lt.h.transpose() * dk;
    G.wv.noalias() += lt.h.transpose() * dv;
    G.bq += dq.colwise().sum();
    G.bk += dk.colwise().sum();
    G.bv += dv.colwise().sum();
    Mat<T> dh = dq * P.wq.transpose() + dk * P.wk.transpose() + dv * P.wv.transpose();
    dx = dx_mid + detail::layer_norm_backward(dh, lt.ln1, P.ln1_g, G.ln1_g, G.ln1_b);
  }

  for (int p = 0; p < L; ++p) {
    const int slot = tr.slots[static_cast<std::size_t>(p)];
    if (slot >= 0) {
      grads.xp_emb.row(slot) += dx.row(p);
    } else {
      grads.tok_emb.row(tr.tokens[static_cast<std::size_t>(p)]) += dx.row(p);
    }
    grads.pos_emb.row(p) += dx.row(p);
    if (const int c = tr.cells[static_cast<std::size_t>(p)]; c >= 0) grads.cell_emb.row(c) += dx.row(p);
  }
}

// Gradient of loss(tr) (the per-sequence mean) with respect to every parameter.
template <typename T>
ModelParams<T> backward(const ForwardTrace<T>& tr, const ModelParams<T>& params, const LossOptions& opts = {}) {
  const auto s = loss_sum(tr, opts);
  if (s.count == 0) throw ConfigError("loss mask is empty");
  ModelParams<T> g = params.zeros_like();
  backward_into(tr, params, g, T(1) / s.weight, opts);
  return g;
}

}  // namespace xprompt
