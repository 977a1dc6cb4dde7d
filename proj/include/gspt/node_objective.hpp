#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "gspt/graph.hpp"
#include "gspt/sequencer.hpp"
#include "gspt/transformer.hpp"

namespace gspt {

/// Builds H0 for a batch: x(input node) + pos[t], or mask_emb + pos[t] at
/// MASK positions. All sequences must share one length.
template <class T>
Mat<T> embed_sequences(const ModelParams<T>& P, std::span<const MaskedSequence> seqs, const FeatureMatrix& X) {
  if (X.cols() != P.shape.dim) throw DataError("feature dimension " + std::to_string(X.cols()) + " != hidden_dim " + std::to_string(P.shape.dim));
  if (seqs.empty()) return Mat<T>(0, static_cast<Eigen::Index>(P.shape.dim));
  const std::size_t l = seqs.front().length();
  const auto d = static_cast<Eigen::Index>(P.shape.dim);
  Mat<T> h0(static_cast<Eigen::Index>(seqs.size() * l), d);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    if (seqs[s].length() != l) throw DataError("embed_sequences: ragged batch");
    for (std::size_t t = 0; t < l; ++t) {
      const auto r = static_cast<Eigen::Index>(s * l + t);
      if (seqs[s].kinds[t] == TokenKind::mask) {
        h0.row(r) = P.mask_emb.row(0);
      } else {
        auto x = X.row(seqs[s].input_ids[t]);
        for (Eigen::Index c = 0; c < d; ++c) h0(r, c) = static_cast<T>(x[static_cast<std::size_t>(c)]);
      }
      h0.row(r) += P.pos_emb.row(static_cast<Eigen::Index>(t));
    }
  }
  return h0;
}

/// Routes dL/dH0 into the positional table and the [MASK] vector.
template <class T>
void embed_backward(std::span<const MaskedSequence> seqs, const Mat<T>& dh0, ModelParams<T>& grads) {
  if (seqs.empty()) return;
  const std::size_t l = seqs.front().length();
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    for (std::size_t t = 0; t < l; ++t) {
      const auto r = static_cast<Eigen::Index>(s * l + t);
      grads.pos_emb.row(static_cast<Eigen::Index>(t)) += dh0.row(r);
      if (seqs[s].kinds[t] == TokenKind::mask) grads.mask_emb.row(0) += dh0.row(r);
    }
  }
}

/// Per-node mean of output rows within one sequence. Nodes appear in order
/// of first occurrence.
template <class T>
struct PooledNodes {
  std::vector<NodeId> nodes;
  std::vector<std::vector<std::uint32_t>> positions;
  Mat<T> vectors;

  std::ptrdiff_t index_of(NodeId v) const {
    auto it = std::find(nodes.begin(), nodes.end(), v);
    return it == nodes.end() ? -1 : it - nodes.begin();
  }
};

/// `rows` is the len x dim output block of one sequence.
template <class T, class Rows>
PooledNodes<T> pool_nodes(const Rows& rows, std::span<const NodeId> node_ids) {
  PooledNodes<T> out;
  for (std::size_t t = 0; t < node_ids.size(); ++t) {
    auto idx = out.index_of(node_ids[t]);
    if (idx < 0) {
      out.nodes.push_back(node_ids[t]);
      out.positions.push_back({static_cast<std::uint32_t>(t)});
    } else {
      out.positions[static_cast<std::size_t>(idx)].push_back(static_cast<std::uint32_t>(t));
    }
  }
  out.vectors = Mat<T>::Zero(static_cast<Eigen::Index>(out.nodes.size()), rows.cols());
  for (std::size_t i = 0; i < out.nodes.size(); ++i) {
    for (auto t : out.positions[i]) out.vectors.row(static_cast<Eigen::Index>(i)) += rows.row(t);
    out.vectors.row(static_cast<Eigen::Index>(i)) /= static_cast<T>(out.positions[i].size());
  }
  return out;
}

struct ReconLoss {
  double loss = 0.0;
  std::vector<double> cosines;  // one per target position
  std::size_t degenerate = 0;   // zero-norm terms scored as cos = 0
};

/// cos(h, x) and, when requested, d(1 - cos)/dh. Zero-norm inputs give
/// cos = 0 with zero gradient; `degenerate` reports that case.
template <class T, class H>
double cosine_term(const H& h, std::span<const float> x, Eigen::Matrix<T, 1, Eigen::Dynamic>* grad, bool& degenerate) {
  double hx = 0, hh = 0, xx = 0;
  for (Eigen::Index c = 0; c < h.size(); ++c) {
    const double hv = static_cast<double>(h(c));
    const double xv = static_cast<double>(x[static_cast<std::size_t>(c)]);
    hx += hv * xv;
    hh += hv * hv;
    xx += xv * xv;
  }
  degenerate = hh == 0.0 || xx == 0.0;
  if (degenerate) {
    if (grad) grad->setZero(h.size());
    return 0.0;
  }
  const double hn = std::sqrt(hh), xn = std::sqrt(xx);
  const double cosv = hx / (hn * xn);
  if (grad) {
    grad->resize(h.size());
    for (Eigen::Index c = 0; c < h.size(); ++c)
      (*grad)(c) = static_cast<T>(-(static_cast<double>(x[static_cast<std::size_t>(c)]) / (hn * xn) - cosv * static_cast<double>(h(c)) / hh));
  }
  return cosv;
}

/// Mean over target positions of (1 - cos(h_node, x_node)) using the true
/// features of the ground-truth node. If `d_pooled` is given it receives
/// dLoss/d(pooled vectors), same shape as pooled.vectors.
template <class T>
ReconLoss recon_loss(const PooledNodes<T>& pooled, const MaskedSequence& seq, const FeatureMatrix& X, Mat<T>* d_pooled = nullptr) {
  ReconLoss out;
  if (d_pooled) *d_pooled = Mat<T>::Zero(pooled.vectors.rows(), pooled.vectors.cols());
  const double m = static_cast<double>(seq.targets.size());
  Eigen::Matrix<T, 1, Eigen::Dynamic> g;
  for (auto t : seq.targets) {
    const NodeId v = seq.node_ids[t];
    const auto idx = pooled.index_of(v);
    if (idx < 0) throw DataError("recon_loss: target node missing from pooled set");
    bool degenerate = false;
    const double c = cosine_term<T>(pooled.vectors.row(idx), X.row(v), d_pooled ? &g : nullptr, degenerate);
    out.degenerate += degenerate ? 1 : 0;
    out.cosines.push_back(c);
    out.loss += (1.0 - c) / m;
    if (d_pooled) d_pooled->row(idx) += g / static_cast<T>(m);
  }
  return out;
}

struct NodeBatchLoss {
  double loss = 0.0;  // mean over sequences of the per-sequence reconstruction loss
  std::size_t degenerate = 0;
};

/// Full node-track objective for a batch of masked sequences. When `grads`
/// is non-null it is accumulated with dLoss/dParams.
template <class T>
NodeBatchLoss node_objective(const ModelParams<T>& P, std::span<const MaskedSequence> seqs, const FeatureMatrix& X, const DropoutConfig& drop,
                             Mode mode, Rng* dropout_rng, ModelParams<T>* grads) {
  NodeBatchLoss result;
  if (seqs.empty()) return result;
  const std::size_t l = seqs.front().length();
  Mat<T> h0 = embed_sequences(P, seqs, X);
  ForwardCache<T> cache;
  Mat<T> out = forward(P, h0, l, drop, mode, dropout_rng, grads ? &cache : nullptr);
  Mat<T> d_out;
  if (grads) d_out = Mat<T>::Zero(out.rows(), out.cols());
  const T inv_b = T(1) / static_cast<T>(seqs.size());
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto rows = out.middleRows(static_cast<Eigen::Index>(s * l), static_cast<Eigen::Index>(l));
    auto pooled = pool_nodes<T>(rows, seqs[s].node_ids);
    Mat<T> d_pooled;
    auto r = recon_loss(pooled, seqs[s], X, grads ? &d_pooled : nullptr);
    result.loss += r.loss / static_cast<double>(seqs.size());
    result.degenerate += r.degenerate;
    if (grads) {
      for (std::size_t i = 0; i < pooled.nodes.size(); ++i) {
        const T share = inv_b / static_cast<T>(pooled.positions[i].size());
        for (auto t : pooled.positions[i]) d_out.row(static_cast<Eigen::Index>(s * l + t)) += d_pooled.row(static_cast<Eigen::Index>(i)) * share;
      }
    }
  }
  if (!std::isfinite(result.loss)) throw NumericError("non-finite reconstruction loss");
  if (grads) {
    Mat<T> dh0 = backward(P, cache, d_out, *grads);
    embed_backward(seqs, dh0, *grads);
  }
  return result;
}

}  // namespace gspt
