#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "gspt/error.hpp"
#include "gspt/rng.hpp"

namespace gspt {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Architecture of the encoder stack.
struct ModelShape {
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t max_len = 20;  // rows of the positional table

  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) throw ConfigError("hidden_dim must be a positive multiple of n_heads");
    if (ffn_dim == 0 || max_len == 0) throw ConfigError("ffn_dim and sequence length must be positive");
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

template <class T>
struct LayerParams {
  Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Mat<T> w1, b1, w2, b2;
  Mat<T> ln1_g, ln1_b, ln2_g, ln2_b;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "attn.wq", self.wq);
    f(prefix + "attn.bq", self.bq);
    f(prefix + "attn.wk", self.wk);
    f(prefix + "attn.bk", self.bk);
    f(prefix + "attn.wv", self.wv);
    f(prefix + "attn.bv", self.bv);
    f(prefix + "attn.wo", self.wo);
    f(prefix + "attn.bo", self.bo);
    f(prefix + "ffn.w1", self.w1);
    f(prefix + "ffn.b1", self.b1);
    f(prefix + "ffn.w2", self.w2);
    f(prefix + "ffn.b2", self.b2);
    f(prefix + "ln1.g", self.ln1_g);
    f(prefix + "ln1.b", self.ln1_b);
    f(prefix + "ln2.g", self.ln2_g);
    f(prefix + "ln2.b", self.ln2_b);
  }
};

/// All encoder parameters. Vectors are stored as 1 x n matrices so that every
/// tensor has the same type; `visit` enumerates them in declaration order,
/// which is also the checkpoint order.
template <class T>
struct ModelParams {
  ModelShape shape;
  Mat<T> pos_emb;   // max_len x dim
  Mat<T> mask_emb;  // 1 x dim
  std::vector<LayerParams<T>> layers;
  Mat<T> lnf_g, lnf_b;

  /// Every tensor sized for `shape` and zero-filled. Used for gradients.
  static ModelParams zeros(const ModelShape& shape) {
    shape.validate();
    ModelParams p;
    p.shape = shape;
    const auto d = static_cast<Eigen::Index>(shape.dim);
    const auto f = static_cast<Eigen::Index>(shape.ffn_dim);
    p.pos_emb = Mat<T>::Zero(static_cast<Eigen::Index>(shape.max_len), d);
    p.mask_emb = Mat<T>::Zero(1, d);
    p.layers.resize(shape.layers);
    for (auto& l : p.layers) {
      l.wq = l.wk = l.wv = l.wo = Mat<T>::Zero(d, d);
      l.bq = l.bk = l.bv = l.bo = Mat<T>::Zero(1, d);
      l.w1 = Mat<T>::Zero(d, f);
      l.b1 = Mat<T>::Zero(1, f);
      l.w2 = Mat<T>::Zero(f, d);
      l.b2 = Mat<T>::Zero(1, d);
      l.ln1_g = l.ln1_b = l.ln2_g = l.ln2_b = Mat<T>::Zero(1, d);
    }
    p.lnf_g = p.lnf_b = Mat<T>::Zero(1, d);
    return p;
  }

  /// Truncated-normal(0.02) weights and positional table, zero biases and
  /// [MASK] vector, unit layer-norm gains.
  static ModelParams init(const ModelShape& shape, std::uint64_t seed) {
    ModelParams p = zeros(shape);
    Rng rng(derive_key(seed, "model-init"));
    auto fill = [&](Mat<T>& m) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.truncated_normal(0.02));
    };
    fill(p.pos_emb);
    for (auto& l : p.layers) {
      fill(l.wq);
      fill(l.wk);
      fill(l.wv);
      fill(l.wo);
      fill(l.w1);
      fill(l.w2);
      l.ln1_g.setOnes();
      l.ln2_g.setOnes();
    }
    p.lnf_g.setOnes();
    return p;
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(shape);
    std::vector<const Mat<T>*> src;
    visit([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("pos_emb"), self.pos_emb);
    f(std::string("mask_emb"), self.mask_emb);
    for (std::size_t i = 0; i < self.layers.size(); ++i)
      LayerParams<T>::visit(self.layers[i], "layer" + std::to_string(i) + ".", f);
    f(std::string("lnf.g"), self.lnf_g);
    f(std::string("lnf.b"), self.lnf_b);
  }
};

struct DropoutConfig {
  double emb = 0.0;
  double attention = 0.0;
  double hidden = 0.0;
};

enum class Mode { train, eval };

template <class T>
struct LayerCache {
  Mat<T> input;
  Mat<T> q, k, v;
  Mat<T> probs;      // (batch*heads*len) x len softmax, before dropout
  Mat<T> attn_mask;  // same shape, scaled keep mask; empty without dropout
  Mat<T> context;
  Mat<T> attn_out_mask;
  Mat<T> ln1_xhat, ln1_rstd;
  Mat<T> y1;
  Mat<T> f1, g;
  Mat<T> ffn_out_mask;
  Mat<T> ln2_xhat, ln2_rstd;
};

template <class T>
struct ForwardCache {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  Mat<T> emb_mask;
  std::vector<LayerCache<T>> layers;
  Mat<T> lnf_xhat, lnf_rstd;
};

/// Receives the last layer's attention averaged over heads:
/// (batch*len) x len, row s*len+i holds position i's weights in sequence s.
template <class T>
struct AttentionTap {
  Mat<T> weights;
};

namespace nn {

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

template <class T>
void layer_norm(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, Mat<T>& y, Mat<T>* xhat_out, Mat<T>* rstd_out) {
  const auto n = x.rows();
  const auto d = x.cols();
  Mat<T> xhat(n, d);
  Mat<T> rstd(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    rstd(r, 0) = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r, 0);
  }
  y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (xhat_out) *xhat_out = std::move(xhat);
  if (rstd_out) *rstd_out = std::move(rstd);
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Mat<T>& rstd, const Mat<T>& gain, Mat<T>& dgain, Mat<T>& dbias) {
  dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  Mat<T> dxhat = dy.array().rowwise() * gain.row(0).array();
  Mat<T> dx(dy.rows(), dy.cols());
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_dxhat = dxhat.row(r).sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.row(r).dot(xhat.row(r)) * inv_d;
    dx.row(r) = rstd(r, 0) * (dxhat.row(r).array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
  }
  return dx;
}

/// Scaled keep-mask (0 or 1/(1-rate)).
template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Mat<T> m(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform01() < rate ? T(0) : keep;
  return m;
}

template <class T>
void check_finite(const Mat<T>& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError("non-finite activation in " + where);
}

}  // namespace nn

/// Runs the post-norm encoder stack on `h0` ((batch*seq_len) x dim, sequences
/// stacked contiguously). Each layer: bidirectional multi-head attention,
/// residual, layer norm, GELU feed-forward, residual, layer norm. A final
/// layer norm follows a non-empty stack. Dropout is active only in train
/// mode with a non-null rng. `cache` is filled for `backward`; `tap`
/// receives the last layer's head-averaged attention.
template <class T>
Mat<T> forward(const ModelParams<T>& P, const Mat<T>& h0, std::size_t seq_len, const DropoutConfig& drop, Mode mode, Rng* rng,
               std::type_identity_t<ForwardCache<T>>* cache = nullptr, std::type_identity_t<AttentionTap<T>>* tap = nullptr) {
  const ModelShape& s = P.shape;
  const auto d = static_cast<Eigen::Index>(s.dim);
  if (h0.cols() != d) throw DataError("forward: input width " + std::to_string(h0.cols()) + " != hidden_dim " + std::to_string(s.dim));
  if (seq_len == 0 || h0.rows() % static_cast<Eigen::Index>(seq_len) != 0) throw DataError("forward: rows not a multiple of sequence length");
  if (seq_len > s.max_len) throw DataError("forward: sequence longer than positional table");
  const auto l = static_cast<Eigen::Index>(seq_len);
  const auto batch = h0.rows() / l;
  const auto heads = static_cast<Eigen::Index>(s.heads);
  const auto dh = static_cast<Eigen::Index>(s.head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const bool dropping = mode == Mode::train && rng != nullptr;
  auto use = [&](double rate) { return dropping && rate > 0.0; };

  if (cache) {
    cache->batch = static_cast<std::size_t>(batch);
    cache->seq_len = seq_len;
    cache->layers.assign(s.layers, {});
    cache->emb_mask.resize(0, 0);
  }

  Mat<T> h = h0;
  if (use(drop.emb)) {
    Mat<T> m = nn::dropout_mask<T>(h.rows(), h.cols(), drop.emb, *rng);
    h.array() *= m.array();
    if (cache) cache->emb_mask = std::move(m);
  }

  for (std::size_t li = 0; li < s.layers; ++li) {
    const auto& L = P.layers[li];
    LayerCache<T> local;
    LayerCache<T>& c = cache ? cache->layers[li] : local;
    c.input = h;
    c.q = (h * L.wq).rowwise() + L.bq.row(0);
    c.k = (h * L.wk).rowwise() + L.bk.row(0);
    c.v = (h * L.wv).rowwise() + L.bv.row(0);
    c.probs.resize(batch * heads * l, l);
    c.context.resize(h.rows(), d);
    if (use(drop.attention)) c.attn_mask = nn::dropout_mask<T>(c.probs.rows(), l, drop.attention, *rng);
    const bool last = li + 1 == s.layers;
    if (tap && last) tap->weights = Mat<T>::Zero(batch * l, l);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index hd = 0; hd < heads; ++hd) {
        const Eigen::Index pr = (b * heads + hd) * l;
        auto Q = c.q.block(b * l, hd * dh, l, dh);
        auto K = c.k.block(b * l, hd * dh, l, dh);
        auto V = c.v.block(b * l, hd * dh, l, dh);
        auto A = c.probs.block(pr, 0, l, l);
        A.noalias() = (Q * K.transpose()) * scale;
        for (Eigen::Index i = 0; i < l; ++i) {
          const T mx = A.row(i).maxCoeff();
          A.row(i) = (A.row(i).array() - mx).exp();
          A.row(i) /= A.row(i).sum();
        }
        if (tap && last) tap->weights.block(b * l, 0, l, l) += A / static_cast<T>(heads);
        if (c.attn_mask.size() > 0) {
          Mat<T> Ad = A.array() * c.attn_mask.block(pr, 0, l, l).array();
          c.context.block(b * l, hd * dh, l, dh).noalias() = Ad * V;
        } else {
          c.context.block(b * l, hd * dh, l, dh).noalias() = A * V;
        }
      }
    }
    Mat<T> o = (c.context * L.wo).rowwise() + L.bo.row(0);
    if (use(drop.hidden)) {
      c.attn_out_mask = nn::dropout_mask<T>(o.rows(), o.cols(), drop.hidden, *rng);
      o.array() *= c.attn_out_mask.array();
    }
    Mat<T> r1 = h + o;
    nn::layer_norm(r1, L.ln1_g, L.ln1_b, c.y1, &c.ln1_xhat, &c.ln1_rstd);
    c.f1 = (c.y1 * L.w1).rowwise() + L.b1.row(0);
    c.g = c.f1.unaryExpr([](T x) { return nn::gelu(x); });
    Mat<T> f2 = (c.g * L.w2).rowwise() + L.b2.row(0);
    if (use(drop.hidden)) {
      c.ffn_out_mask = nn::dropout_mask<T>(f2.rows(), f2.cols(), drop.hidden, *rng);
      f2.array() *= c.ffn_out_mask.array();
    }
    Mat<T> r2 = c.y1 + f2;
    nn::layer_norm(r2, L.ln2_g, L.ln2_b, h, &c.ln2_xhat, &c.ln2_rstd);
    nn::check_finite(h, "layer " + std::to_string(li));
  }

  if (s.layers == 0) return h;
  Mat<T> out;
  if (cache)
    nn::layer_norm(h, P.lnf_g, P.lnf_b, out, &cache->lnf_xhat, &cache->lnf_rstd);
  else
    nn::layer_norm<T>(h, P.lnf_g, P.lnf_b, out, nullptr, nullptr);
  return out;
}

/// Accumulates parameter gradients into `grads` given dL/d(output) and
/// returns dL/d(h0).
template <class T>
Mat<T> backward(const ModelParams<T>& P, const ForwardCache<T>& c, const Mat<T>& d_out, ModelParams<T>& grads) {
  const ModelShape& s = P.shape;
  const auto l = static_cast<Eigen::Index>(c.seq_len);
  const auto batch = static_cast<Eigen::Index>(c.batch);
  const auto heads = static_cast<Eigen::Index>(s.heads);
  const auto dh = static_cast<Eigen::Index>(s.head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> dh_cur = s.layers == 0 ? d_out : nn::layer_norm_backward(d_out, c.lnf_xhat, c.lnf_rstd, P.lnf_g, grads.lnf_g, grads.lnf_b);

  for (std::size_t li = s.layers; li-- > 0;) {
    const auto& L = P.layers[li];
    auto& G = grads.layers[li];
    const auto& lc = c.layers[li];

    Mat<T> dr2 = nn::layer_norm_backward(dh_cur, lc.ln2_xhat, lc.ln2_rstd, L.ln2_g, G.ln2_g, G.ln2_b);
    Mat<T> df2 = dr2;
    if (lc.ffn_out_mask.size() > 0) df2.array() *= lc.ffn_out_mask.array();
    G.b2 += df2.colwise().sum();
    G.w2.noalias() += lc.g.transpose() * df2;
    Mat<T> df1 = (df2 * L.w2.transpose()).array() * lc.f1.unaryExpr([](T x) { return nn::gelu_grad(x); }).array();
    G.b1 += df1.colwise().sum();
    G.w1.noalias() += lc.y1.transpose() * df1;
    Mat<T> dy1 = dr2;
    dy1.noalias() += df1 * L.w1.transpose();

    Mat<T> dr1 = nn::layer_norm_backward(dy1, lc.ln1_xhat, lc.ln1_rstd, L.ln1_g, G.ln1_g, G.ln1_b);
    Mat<T> dout = dr1;
    if (lc.attn_out_mask.size() > 0) dout.array() *= lc.attn_out_mask.array();
    G.bo += dout.colwise().sum();
    G.wo.noalias() += lc.context.transpose() * dout;
    Mat<T> dctx = dout * L.wo.transpose();

    Mat<T> dq(lc.q.rows(), lc.q.cols()), dk(lc.k.rows(), lc.k.cols()), dv(lc.v.rows(), lc.v.cols());
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index hd = 0; hd < heads; ++hd) {
        const Eigen::Index pr = (b * heads + hd) * l;
        auto Q = lc.q.block(b * l, hd * dh, l, dh);
        auto K = lc.k.block(b * l, hd * dh, l, dh);
        auto V = lc.v.block(b * l, hd * dh, l, dh);
        auto dC = dctx.block(b * l, hd * dh, l, dh);
        const auto A = lc.probs.block(pr, 0, l, l);
        Mat<T> dA = dC * V.transpose();
        if (lc.attn_mask.size() > 0) {
          Mat<T> Ad = A.array() * lc.attn_mask.block(pr, 0, l, l).array();
          dv.block(b * l, hd * dh, l, dh).noalias() = Ad.transpose() * dC;
          dA.array() *= lc.attn_mask.block(pr, 0, l, l).array();
        } else {
          dv.block(b * l, hd * dh, l, dh).noalias() = A.transpose() * dC;
        }
        Mat<T> dS(l, l);
        for (Eigen::Index i = 0; i < l; ++i) {
          const T dot = A.row(i).dot(dA.row(i));
          dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
        }
        dq.block(b * l, hd * dh, l, dh).noalias() = (dS * K) * scale;
        dk.block(b * l, hd * dh, l, dh).noalias() = (dS.transpose() * Q) * scale;
      }
    }
    G.bq += dq.colwise().sum();
    G.bk += dk.colwise().sum();
    G.bv += dv.colwise().sum();
    G.wq.noalias() += lc.input.transpose() * dq;
    G.wk.noalias() += lc.input.transpose() * dk;
    G.wv.noalias() += lc.input.transpose() * dv;
    dh_cur = dr1;
    dh_cur.noalias() += dq * L.wq.transpose();
    dh_cur.noalias() += dk * L.wk.transpose();
    dh_cur.noalias() += dv * L.wv.transpose();
  }
  if (c.emb_mask.size() > 0) dh_cur.array() *= c.emb_mask.array();
  return dh_cur;
}

template <class T>
void check_finite_grads(const ModelParams<T>& g) {
  g.visit([](const std::string& name, const Mat<T>& m) {
    if (!m.allFinite()) throw NumericError("non-finite gradient for " + name);
  });
}

}  // namespace gspt
