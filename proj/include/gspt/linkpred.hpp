#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspt/checkpoint.hpp"
#include "gspt/dataset.hpp"
#include "gspt/graph.hpp"
#include "gspt/node_objective.hpp"
#include "gspt/optimizer.hpp"
#include "gspt/parallel.hpp"
#include "gspt/pretrain.hpp"
#include "gspt/sequencer.hpp"
#include "gspt/transformer.hpp"

namespace gspt {

using Edge = std::pair<NodeId, NodeId>;

// ---------------------------------------------------------------------------
// Edge splits and negatives

struct EdgeSplit {
  std::vector<Edge> train, valid, test;
  std::vector<std::vector<NodeId>> valid_neg, test_neg;  // tails (u, w) per positive
};

inline constexpr std::size_t kEvalNegatives = 200;

/// `count` tails w for head u with w != u and (u, w) not an edge of `g`.
inline std::vector<NodeId> sample_negatives(const Graph& g, NodeId u, std::size_t count, Rng& rng) {
  const std::size_t n = g.num_nodes();
  if (g.degree(u) + 1 >= n) throw DataError("node " + std::to_string(u) + " is adjacent to every other node; no negatives exist");
  std::vector<NodeId> out;
  out.reserve(count);
  while (out.size() < count) {
    const auto w = static_cast<NodeId>(rng.uniform_index(n));
    if (w != u && !g.has_edge(u, w)) out.push_back(w);
  }
  return out;
}

/// Shuffles the undirected edges and splits them 80/10/10. Returns the graph
/// of train edges alongside the split.
inline std::pair<Graph, EdgeSplit> split_edges(const Graph& g, std::uint64_t seed, std::size_t negatives = kEvalNegatives) {
  auto edges = g.edge_list();
  const std::size_t m = edges.size();
  if (m < 10) throw DataError("link prediction needs at least 10 edges, graph has " + std::to_string(m));
  Rng rng(derive_key(seed, "edge-split"));
  for (std::size_t i = m; i > 1; --i) std::swap(edges[i - 1], edges[rng.uniform_index(i)]);
  const std::size_t n_test = m / 10, n_valid = m / 10;
  EdgeSplit s;
  s.test.assign(edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.valid.assign(edges.begin() + static_cast<std::ptrdiff_t>(n_test), edges.begin() + static_cast<std::ptrdiff_t>(n_test + n_valid));
  s.train.assign(edges.begin() + static_cast<std::ptrdiff_t>(n_test + n_valid), edges.end());
  Rng neg(derive_key(seed, "eval-negatives"));
  for (auto [u, v] : s.valid) s.valid_neg.push_back(sample_negatives(g, u, negatives, neg));
  for (auto [u, v] : s.test) s.test_neg.push_back(sample_negatives(g, u, negatives, neg));
  return {Graph::from_edges(g.num_nodes(), s.train), std::move(s)};
}

inline void write_split_files(const std::filesystem::path& split_path, const std::filesystem::path& neg_path, const EdgeSplit& s) {
  {
    auto out = detail::open_out(split_path);
    for (auto [u, v] : s.train) out << u << '\t' << v << "\ttrain\n";
    for (auto [u, v] : s.valid) out << u << '\t' << v << "\tvalid\n";
    for (auto [u, v] : s.test) out << u << '\t' << v << "\ttest\n";
  }
  auto out = detail::open_out(neg_path);
  auto rows = [&](const std::vector<Edge>& pos, const std::vector<std::vector<NodeId>>& neg) {
    for (std::size_t i = 0; i < pos.size(); ++i) {
      out << pos[i].first << '\t' << pos[i].second;
      for (NodeId w : neg[i]) out << '\t' << w;
      out << '\n';
    }
  };
  rows(s.valid, s.valid_neg);
  rows(s.test, s.test_neg);
}

inline EdgeSplit read_split_files(const std::filesystem::path& split_path, const std::filesystem::path& neg_path, std::size_t num_nodes) {
  EdgeSplit s;
  detail::for_each_record(split_path, [&](const std::vector<std::string>& f, std::size_t line) {
    const std::string where = split_path.string() + ":" + std::to_string(line);
    if (f.size() != 3) throw DataError(where + ": expected u, v, phase");
    const Edge e{static_cast<NodeId>(detail::parse_id(f[0], where)), static_cast<NodeId>(detail::parse_id(f[1], where))};
    if (e.first >= num_nodes || e.second >= num_nodes) throw DataError(where + ": node id >= n");
    if (f[2] == "train") s.train.push_back(e);
    else if (f[2] == "valid") s.valid.push_back(e);
    else if (f[2] == "test") s.test.push_back(e);
    else throw DataError(where + ": unknown phase '" + f[2] + "'");
  });
  std::size_t row = 0;
  detail::for_each_record(neg_path, [&](const std::vector<std::string>& f, std::size_t line) {
    const std::string where = neg_path.string() + ":" + std::to_string(line);
    const bool valid = row < s.valid.size();
    const auto& pos = valid ? s.valid : s.test;
    const std::size_t i = valid ? row : row - s.valid.size();
    if (i >= pos.size() || f.size() < 3) throw DataError(where + ": negatives do not line up with the split file");
    if (detail::parse_id(f[0], where) != pos[i].first || detail::parse_id(f[1], where) != pos[i].second)
      throw DataError(where + ": negatives do not line up with the split file");
    std::vector<NodeId> negs;
    for (std::size_t k = 2; k < f.size(); ++k) negs.push_back(static_cast<NodeId>(detail::parse_id(f[k], where)));
    (valid ? s.valid_neg : s.test_neg).push_back(std::move(negs));
    ++row;
  });
  if (s.valid_neg.size() != s.valid.size() || s.test_neg.size() != s.test.size()) throw DataError(neg_path.string() + ": missing negative rows");
  return s;
}

// ---------------------------------------------------------------------------
// Ranking

/// Pessimistic rank of a positive among its negatives: ties count against it.
inline std::size_t pessimistic_rank(double pos, std::span<const double> neg) {
  return 1 + static_cast<std::size_t>(std::count_if(neg.begin(), neg.end(), [&](double s) { return s >= pos; }));
}

/// scores[i][0] is the positive, the rest are its negatives.
inline double mean_reciprocal_rank(const std::vector<std::vector<double>>& scores) {
  if (scores.empty()) return 0.0;
  double acc = 0;
  for (const auto& row : scores) acc += 1.0 / static_cast<double>(pessimistic_rank(row.front(), std::span<const double>(row).subspan(1)));
  return acc / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Hop tokens

template <class T>
Mat<T> spmm(const NormAdjacency& adj, const Mat<T>& x) {
  const std::size_t n = adj.row_ptr.size() - 1;
  if (static_cast<std::size_t>(x.rows()) != n) throw DataError("spmm: adjacency has " + std::to_string(n) + " rows, matrix has " + std::to_string(x.rows()));
  Mat<T> y(x.rows(), x.cols());
  Eigen::Matrix<double, 1, Eigen::Dynamic> acc(x.cols());
  for (std::size_t u = 0; u < n; ++u) {
    acc.setZero();
    for (std::size_t k = adj.row_ptr[u]; k < adj.row_ptr[u + 1]; ++k) acc += adj.weight[k] * x.row(adj.col_idx[k]).template cast<double>();
    y.row(static_cast<Eigen::Index>(u)) = acc.cast<T>();
  }
  return y;
}

/// Stacked hop features: row k*n + i holds (Â^k X)[i].
struct HopTable {
  std::size_t nodes = 0;
  std::size_t hops = 0;
  FeatureMatrix rows;

  NodeId id(NodeId node, std::size_t k) const { return static_cast<NodeId>(k * nodes + node); }
};

inline HopTable hop_table(const Graph& g, const FeatureMatrix& X, std::size_t hops) {
  if (hops == 0) throw ConfigError("n_hops must be >= 1");
  if (X.rows() != g.num_nodes()) throw DataError("feature rows != node count");
  const auto adj = build_norm_adjacency(g);
  HopTable t{g.num_nodes(), hops, FeatureMatrix((hops + 1) * g.num_nodes(), X.cols())};
  DenseMatrix<double> cur = X.cast<double>();
  for (std::size_t k = 0; k <= hops; ++k) {
    if (k > 0) cur = spmm(adj, cur);
    for (std::size_t i = 0; i < cur.data().size(); ++i) t.rows.data()[k * X.data().size() + i] = static_cast<float>(cur.data()[i]);
  }
  return t;
}

/// Tokens of one node: row k is its aggregated k-hop feature.
inline FeatureMatrix hop2token(const Graph& g, const FeatureMatrix& X, NodeId node, std::size_t hops) {
  const auto t = hop_table(g, X, hops);
  FeatureMatrix out(hops + 1, X.cols());
  for (std::size_t k = 0; k <= hops; ++k) std::ranges::copy(t.rows.row(t.id(node, k)), out.row(k).begin());
  return out;
}

/// One hop sequence per node, in node order, optionally masked.
inline std::vector<MaskedSequence> hop_sequences(const HopTable& t, const MaskingConfig* masking, std::uint64_t key) {
  std::vector<MaskedSequence> seqs(t.nodes);
  std::vector<NodeId> ids(t.hops + 1);
  for (NodeId i = 0; i < t.nodes; ++i) {
    for (std::size_t k = 0; k <= t.hops; ++k) ids[k] = t.id(i, k);
    if (masking) {
      Rng rng(derive_key({key, i}));
      seqs[i] = apply_masking(DistractedWalk{ids, 0, std::nullopt}, *masking, t.rows.rows(), rng);
    } else {
      seqs[i] = plain_sequence(ids);
    }
  }
  return seqs;
}

/// Nodes whose center token is a reconstruction target.
inline std::vector<NodeId> masked_centers(const std::vector<MaskedSequence>& seqs) {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < seqs.size(); ++i)
    if (!seqs[i].targets.empty() && seqs[i].targets.front() == 0) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Encoder, pooling and graph-convolution decoder

/// Encoder plus a 2d -> d pooling projection and the decoder weight.
template <class T>
struct LinkParams {
  ModelParams<T> encoder;
  Mat<T> pool_w, pool_b, dec_w;

  static LinkParams zeros(const ModelShape& s) {
    LinkParams p;
    p.encoder = ModelParams<T>::zeros(s);
    const auto d = static_cast<Eigen::Index>(s.dim);
    p.pool_w = Mat<T>::Zero(2 * d, d);
    p.pool_b = Mat<T>::Zero(1, d);
    p.dec_w = Mat<T>::Zero(d, d);
    return p;
  }

  /// Projection starts as [I; I]/2 (center and hop halves averaged); the
  /// decoder starts as the identity.
  static LinkParams init(const ModelShape& s, std::uint64_t seed) {
    LinkParams p = zeros(s);
    p.encoder = ModelParams<T>::init(s, derive_key(seed, "link-encoder"));
    const auto d = static_cast<Eigen::Index>(s.dim);
    p.pool_w.topRows(d).setIdentity();
    p.pool_w.bottomRows(d).setIdentity();
    p.pool_w *= T(0.5);
    p.dec_w.setIdentity();
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
  LinkParams<U> cast() const {
    LinkParams<U> out;
    out.encoder = encoder.template cast<U>();
    out.pool_w = pool_w.template cast<U>();
    out.pool_b = pool_b.template cast<U>();
    out.dec_w = dec_w.template cast<U>();
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    self.encoder.visit([&](const std::string& name, auto& m) { f("encoder." + name, m); });
    f(std::string("pool.w"), self.pool_w);
    f(std::string("pool.b"), self.pool_b);
    f(std::string("decoder.w"), self.dec_w);
  }
};

template <class T>
struct LinkCache {
  ForwardCache<T> encoder;
  Mat<T> pooled;  // n x 2d
  Mat<T> node;    // n x d
  std::size_t len = 0;
};

/// H^D = Â (pool(TRM(H0)) W_dec) for every node of the graph.
template <class T>
Mat<T> link_embed(const LinkParams<T>& P, const NormAdjacency& adj, const HopTable& t, const std::vector<MaskedSequence>& seqs, const DropoutConfig& drop,
                  Mode mode, Rng* rng, LinkCache<T>* cache = nullptr) {
  if (seqs.size() != t.nodes) throw DataError("link_embed: one sequence per node required");
  const std::size_t len = t.hops + 1;
  const auto d = static_cast<Eigen::Index>(P.encoder.shape.dim);
  LinkCache<T> local;
  LinkCache<T>& c = cache ? *cache : local;
  c.len = len;
  Mat<T> out = forward(P.encoder, embed_sequences(P.encoder, std::span<const MaskedSequence>(seqs), t.rows), len, drop, mode, rng,
                       cache ? &c.encoder : nullptr);
  const auto n = static_cast<Eigen::Index>(t.nodes);
  c.pooled.resize(n, 2 * d);
  const T inv_h = T(1) / static_cast<T>(t.hops);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index base = i * static_cast<Eigen::Index>(len);
    c.pooled.row(i).head(d) = out.row(base);
    c.pooled.row(i).tail(d) = out.middleRows(base + 1, static_cast<Eigen::Index>(t.hops)).colwise().sum() * inv_h;
  }
  c.node = (c.pooled * P.pool_w).rowwise() + P.pool_b.row(0);
  return spmm(adj, Mat<T>(c.node * P.dec_w));
}

/// Accumulates dLoss/dParams given dLoss/dH^D.
template <class T>
void link_embed_backward(const LinkParams<T>& P, const NormAdjacency& adj, const std::vector<MaskedSequence>& seqs, const LinkCache<T>& c,
                         const Mat<T>& d_hd, LinkParams<T>& grads) {
  const auto d = static_cast<Eigen::Index>(P.encoder.shape.dim);
  const Mat<T> dm = spmm(adj, d_hd);  // Â is symmetric
  grads.dec_w += c.node.transpose() * dm;
  const Mat<T> d_node = dm * P.dec_w.transpose();
  grads.pool_w += c.pooled.transpose() * d_node;
  grads.pool_b += d_node.colwise().sum();
  const Mat<T> d_pooled = d_node * P.pool_w.transpose();
  const auto len = static_cast<Eigen::Index>(c.len);
  const auto hops = len - 1;
  Mat<T> d_out = Mat<T>::Zero(d_pooled.rows() * len, d);
  const T inv_h = T(1) / static_cast<T>(hops);
  for (Eigen::Index i = 0; i < d_pooled.rows(); ++i) {
    d_out.row(i * len) = d_pooled.row(i).head(d);
    for (Eigen::Index k = 1; k < len; ++k) d_out.row(i * len + k) = d_pooled.row(i).tail(d) * inv_h;
  }
  const Mat<T> dh0 = backward(P.encoder, c.encoder, d_out, grads.encoder);
  embed_backward(std::span<const MaskedSequence>(seqs), dh0, grads.encoder);
}

/// Mean over `targets` of 1 - cos(h^D_i, x_i).
template <class T>
double link_recon_loss(const LinkParams<T>& P, const NormAdjacency& adj, const HopTable& t, const FeatureMatrix& X, const std::vector<MaskedSequence>& seqs,
                       const std::vector<NodeId>& targets, const DropoutConfig& drop, Mode mode, Rng* rng, LinkParams<T>* grads) {
  if (targets.empty()) return 0.0;
  LinkCache<T> cache;
  const Mat<T> hd = link_embed(P, adj, t, seqs, drop, mode, rng, grads ? &cache : nullptr);
  Mat<T> d_hd;
  if (grads) d_hd = Mat<T>::Zero(hd.rows(), hd.cols());
  const double m = static_cast<double>(targets.size());
  double loss = 0;
  Eigen::Matrix<T, 1, Eigen::Dynamic> g;
  for (NodeId i : targets) {
    bool degenerate = false;
    const double c = cosine_term<T>(hd.row(i), X.row(i), grads ? &g : nullptr, degenerate);
    loss += (1.0 - c) / m;
    if (grads) d_hd.row(i) += g / static_cast<T>(m);
  }
  if (!std::isfinite(loss)) throw NumericError("non-finite link reconstruction loss");
  if (grads) link_embed_backward(P, adj, seqs, cache, d_hd, *grads);
  return loss;
}

// ---------------------------------------------------------------------------
// Edge scorer

template <class T>
struct ScorerParams {
  std::vector<Mat<T>> w, b;

  /// `layers` linear maps: d -> hidden -> ... -> 1, ReLU between them.
  static ScorerParams init(std::size_t dim, std::size_t hidden, std::size_t layers, std::uint64_t seed) {
    if (layers == 0 || hidden == 0) throw ConfigError("projector_layers and projector_dim must be positive");
    ScorerParams s;
    Rng rng(derive_key(seed, "scorer-init"));
    std::size_t in = dim;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t out = l + 1 == layers ? 1 : hidden;
      Mat<T> w(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
      const double std = std::sqrt(2.0 / static_cast<double>(in));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(std * rng.normal());
      s.w.push_back(std::move(w));
      s.b.push_back(Mat<T>::Zero(1, static_cast<Eigen::Index>(out)));
      in = out;
    }
    return s;
  }

  ScorerParams zeros_like() const {
    ScorerParams z;
    for (const auto& m : w) z.w.push_back(Mat<T>::Zero(m.rows(), m.cols()));
    for (const auto& m : b) z.b.push_back(Mat<T>::Zero(m.rows(), m.cols()));
    return z;
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t l = 0; l < self.w.size(); ++l) {
      f("scorer.w" + std::to_string(l), self.w[l]);
      f("scorer.b" + std::to_string(l), self.b[l]);
    }
  }
};

template <class T>
struct ScorerCache {
  std::vector<Mat<T>> acts;  // input of each layer
};

/// Logits for rows of `x` (one edge per row).
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> score_rows(const ScorerParams<T>& S, const Mat<T>& x, ScorerCache<T>* cache = nullptr) {
  Mat<T> a = x;
  if (cache) cache->acts.clear();
  for (std::size_t l = 0; l < S.w.size(); ++l) {
    if (cache) cache->acts.push_back(a);
    Mat<T> z = (a * S.w[l]).rowwise() + S.b[l].row(0);
    if (l + 1 < S.w.size()) z = z.cwiseMax(T(0));
    a = std::move(z);
  }
  return a.col(0);
}

/// Accumulates parameter gradients and returns dLoss/dx.
template <class T>
Mat<T> score_rows_backward(const ScorerParams<T>& S, const ScorerCache<T>& c, const Eigen::Matrix<T, Eigen::Dynamic, 1>& d_logit, ScorerParams<T>& grads) {
  Mat<T> g = d_logit;
  for (std::size_t l = S.w.size(); l-- > 0;) {
    grads.w[l] += c.acts[l].transpose() * g;
    grads.b[l] += g.colwise().sum();
    g = g * S.w[l].transpose();
    if (l > 0) g = g.cwiseProduct((c.acts[l].array() > T(0)).template cast<T>().matrix());
  }
  return g;
}

struct LinkModel {
  LinkParams<float> link;
  ScorerParams<float> scorer;

  template <class F>
  void visit(F&& f) {
    link.visit(f);
    scorer.visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    link.visit(f);
    scorer.visit(f);
  }
};

/// Logits for (u, v) pairs from node representations h.
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> score_pairs(const ScorerParams<T>& S, const Mat<T>& h, std::span<const Edge> pairs, ScorerCache<T>* cache = nullptr) {
  Mat<T> x(static_cast<Eigen::Index>(pairs.size()), h.cols());
  for (std::size_t i = 0; i < pairs.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = h.row(pairs[i].first).cwiseProduct(h.row(pairs[i].second));
  return score_rows(S, x, cache);
}

/// MRR over fixed negatives using precomputed node representations.
inline double evaluate_mrr(const ScorerParams<float>& S, const Mat<float>& h, const std::vector<Edge>& pos, const std::vector<std::vector<NodeId>>& neg,
                           unsigned threads = 1) {
  std::vector<std::vector<double>> scores(pos.size());
  parallel_for(pos.size(), threads, [&](std::size_t i) {
    std::vector<Edge> pairs{pos[i]};
    for (NodeId w : neg[i]) pairs.emplace_back(pos[i].first, w);
    const auto s = score_pairs(S, h, pairs);
    scores[i].assign(s.data(), s.data() + s.size());
  });
  return mean_reciprocal_rank(scores);
}

// ---------------------------------------------------------------------------
// Link pretraining

struct LinkPretrainConfig {
  ModelShape shape{384, 2, 8, 768, 4};
  std::size_t n_hops = 3;
  std::size_t epochs = 100;
  ScheduleConfig schedule{1e-3, 1e-4, 100};
  double weight_decay = 0.0;
  MaskingConfig masking{0.5, 0.0, 0.0};
  DropoutConfig dropout{0.0, 0.1, 0.1};
  std::uint64_t seed = 0;

  void validate() const {
    shape.validate();
    schedule.validate();
    masking.validate();
    if (n_hops == 0) throw ConfigError("n_hops must be >= 1");
    if (shape.max_len < n_hops + 1) throw ConfigError("positional table shorter than n_hops + 1");
    if (epochs == 0) throw ConfigError("epochs must be positive");
  }
};

inline nlohmann::json to_json(const LinkPretrainConfig& c) {
  return {{"arch", shape_to_json(c.shape)},
          {"n_hops", c.n_hops},
          {"epochs", c.epochs},
          {"peak_lr", c.schedule.peak_lr},
          {"end_lr", c.schedule.end_lr},
          {"warmup_updates", c.schedule.warmup_updates},
          {"weight_decay", c.weight_decay},
          {"mask_rate", c.masking.mask_rate},
          {"p_random", c.masking.p_random},
          {"p_unchanged", c.masking.p_unchanged},
          {"emb_dropout", c.dropout.emb},
          {"attention_dropout", c.dropout.attention},
          {"dropout", c.dropout.hidden},
          {"seed", c.seed}};
}

struct LinkPretrainResult {
  LinkParams<float> params;
  std::vector<StepRecord> history;
  std::vector<double> epoch_loss;
};

/// Each step reconstructs one whole graph of the corpus so the decoder sees
/// its complete adjacency. Graph order is reshuffled every epoch.
inline LinkPretrainResult link_pretrain(const LinkPretrainConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  if (corpus.parts.empty()) throw DataError("empty corpus");
  if (corpus.dim() != cfg.shape.dim) throw ConfigError("hidden_dim must equal the feature dimension");
  std::vector<HopTable> tables;
  std::vector<NormAdjacency> adjs;
  for (const auto& p : corpus.parts) {
    tables.push_back(hop_table(p.graph, p.features, cfg.n_hops));
    adjs.push_back(build_norm_adjacency(p.graph));
  }
  const std::size_t total = cfg.epochs * corpus.parts.size();
  lr_at_step(cfg.schedule, 0, total);

  LinkPretrainResult res;
  res.params = LinkParams<float>::init(cfg.shape, cfg.seed);
  auto grads = LinkParams<float>::zeros(cfg.shape);
  const auto prefs = tensor_refs<float>(res.params);
  const auto grefs = tensor_refs<float>(grads);
  AdamW<float> opt({.weight_decay = cfg.weight_decay});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(corpus.parts.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_key({cfg.seed, hash_string("link-order"), epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double sum = 0;
    for (auto k : order) {
      ++step;
      const auto seqs = hop_sequences(tables[k], &cfg.masking, derive_key({cfg.seed, hash_string("link-mask"), step}));
      for (auto& g : grefs) g.tensor->setZero();
      Rng drop(derive_key({cfg.seed, hash_string("link-dropout"), step}));
      const double loss = link_recon_loss<float>(res.params, adjs[k], tables[k], corpus.parts[k].features, seqs, masked_centers(seqs), cfg.dropout,
                                                 Mode::train, &drop, &grads);
      grads.visit([](const std::string& name, const Mat<float>& m) {
        if (!m.allFinite()) throw NumericError("non-finite gradient in " + name);
      });
      const double lr = lr_at_step(cfg.schedule, step, total);
      opt.step(prefs, grefs, lr);
      res.history.push_back({step, k, loss, lr});
      sum += loss;
    }
    res.epoch_loss.push_back(sum / static_cast<double>(order.size()));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneConfig {
  double lr = 1e-3;
  std::size_t epochs = 1000;
  std::size_t patience = 20;
  std::size_t batch_size = 4096;  // edges per step, half positive
  std::size_t projector_layers = 3;
  std::size_t projector_dim = 256;
  std::size_t n_hops = 3;
  DropoutConfig dropout{0.0, 0.1, 0.1};
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("finetune_lr must be positive");
    if (epochs == 0 || batch_size < 2) throw ConfigError("finetune epochs must be positive and batch_size >= 2");
    if (n_hops == 0) throw ConfigError("n_hops must be >= 1");
  }
};

struct FinetuneResult {
  LinkModel model;
  double best_valid = 0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::vector<double> valid_history;
};

/// Representations used for scoring: H^D in eval mode on the train graph.
inline Mat<float> link_representations(const LinkParams<float>& P, const NormAdjacency& adj, const HopTable& t) {
  return link_embed(P, adj, t, hop_sequences(t, nullptr, 0), {}, Mode::eval, nullptr);
}

/// Fresh scorer plus either a fresh or a pretrained encoder.
inline LinkModel make_link_model(const ModelShape& shape, const FinetuneConfig& cfg, const LinkParams<float>* pretrained) {
  LinkModel m;
  m.link = pretrained ? *pretrained : LinkParams<float>::init(shape, derive_key(cfg.seed, "link-scratch"));
  m.scorer = ScorerParams<float>::init(shape.dim, cfg.projector_dim, cfg.projector_layers, derive_key(cfg.seed, "scorer"));
  return m;
}

/// Binary cross-entropy on train edges against per-epoch resampled tails,
/// constant learning rate, early stopping on validation MRR. Returns the
/// best-validation model.
inline FinetuneResult finetune(LinkModel model, const Graph& train_g, const FeatureMatrix& X, const EdgeSplit& split, const FinetuneConfig& cfg) {
  cfg.validate();
  if (split.train.empty()) throw DataError("no train edges");
  const auto table = hop_table(train_g, X, cfg.n_hops);
  const auto adj = build_norm_adjacency(train_g);
  const auto plain = hop_sequences(table, nullptr, 0);
  LinkModel grads{LinkParams<float>::zeros(model.link.encoder.shape), model.scorer.zeros_like()};
  const auto prefs = tensor_refs<float>(model);
  const auto grefs = tensor_refs<float>(grads);
  AdamW<float> opt({.weight_decay = 0.0});

  FinetuneResult res;
  res.model = model;
  res.best_valid = -1;
  const std::size_t half = cfg.batch_size / 2;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto pos = split.train;
    Rng rng(derive_key({cfg.seed, hash_string("finetune-epoch"), epoch}));
    for (std::size_t i = pos.size(); i > 1; --i) std::swap(pos[i - 1], pos[rng.uniform_index(i)]);
    for (std::size_t b = 0; b < pos.size(); b += half) {
      const std::size_t e = std::min(pos.size(), b + half);
      std::vector<Edge> pairs(pos.begin() + static_cast<std::ptrdiff_t>(b), pos.begin() + static_cast<std::ptrdiff_t>(e));
      const std::size_t n_pos = pairs.size();
      pairs.reserve(2 * n_pos);
      for (std::size_t i = 0; i < n_pos; ++i) pairs.emplace_back(pairs[i].first, sample_negatives(train_g, pairs[i].first, 1, rng).front());
      ++step;
      for (auto& g : grefs) g.tensor->setZero();
      Rng drop(derive_key({cfg.seed, hash_string("finetune-dropout"), step}));
      LinkCache<float> lc;
      const Mat<float> h = link_embed(model.link, adj, table, plain, cfg.dropout, Mode::train, &drop, &lc);
      ScorerCache<float> sc;
      const auto logits = score_pairs(model.scorer, h, pairs, &sc);
      Eigen::VectorXf d_logit(logits.size());
      double loss = 0;
      const double inv = 1.0 / static_cast<double>(pairs.size());
      for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double z = logits(i);
        const double y = static_cast<std::size_t>(i) < n_pos ? 1.0 : 0.0;
        loss += (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)))) * inv;
        d_logit(i) = static_cast<float>((1.0 / (1.0 + std::exp(-z)) - y) * inv);
      }
      if (!std::isfinite(loss)) throw NumericError("fine-tuning diverged (non-finite loss) at epoch " + std::to_string(epoch));
      const Mat<float> dx = score_rows_backward(model.scorer, sc, d_logit, grads.scorer);
      Mat<float> d_h = Mat<float>::Zero(h.rows(), h.cols());
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto [u, v] = pairs[i];
        d_h.row(u) += dx.row(static_cast<Eigen::Index>(i)).cwiseProduct(h.row(v));
        d_h.row(v) += dx.row(static_cast<Eigen::Index>(i)).cwiseProduct(h.row(u));
      }
      link_embed_backward(model.link, adj, plain, lc, d_h, grads.link);
      opt.step(prefs, grefs, cfg.lr);
    }
    const double valid = evaluate_mrr(model.scorer, link_representations(model.link, adj, table), split.valid, split.valid_neg, cfg.threads);
    res.valid_history.push_back(valid);
    res.epochs_run = epoch + 1;
    if (valid > res.best_valid) {
      res.best_valid = valid;
      res.best_epoch = epoch;
      res.model = model;
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }
  return res;
}

struct MrrPair {
  double valid = 0;
  double test = 0;
};

inline MrrPair evaluate_link_model(const LinkModel& m, const Graph& train_g, const FeatureMatrix& X, const EdgeSplit& split, std::size_t n_hops,
                                   unsigned threads = 1) {
  const auto table = hop_table(train_g, X, n_hops);
  const auto h = link_representations(m.link, build_norm_adjacency(train_g), table);
  return {evaluate_mrr(m.scorer, h, split.valid, split.valid_neg, threads), evaluate_mrr(m.scorer, h, split.test, split.test_neg, threads)};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Checkpoint link_checkpoint(const LinkParams<float>& P, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  ck.meta["arch"] = shape_to_json(P.encoder.shape);
  ck.add(P);
  return ck;
}

inline LinkParams<float> link_params_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("arch")) throw DataError("checkpoint: no architecture block");
  if (!ck.find("pool.w")) throw DataError("checkpoint has no link-track tensors (pool.w); was it written by link-pretrain?");
  auto P = LinkParams<float>::zeros(shape_from_json(ck.meta.at("arch")));
  ck.load(P);
  return P;
}

/// Fine-tuned model: link parameters plus the scorer, whose depth and width
/// are recorded in the metadata.
inline Checkpoint link_model_checkpoint(const LinkModel& m, nlohmann::json meta = nlohmann::json::object()) {
  auto ck = link_checkpoint(m.link, std::move(meta));
  ck.meta["projector_layers"] = m.scorer.w.size();
  ck.meta["projector_dim"] = m.scorer.w.size() > 1 ? m.scorer.w.front().cols() : 1;
  ck.add(m.scorer);
  return ck;
}

inline LinkModel link_model_from_checkpoint(const Checkpoint& ck) {
  LinkModel m;
  m.link = link_params_from_checkpoint(ck);
  if (!ck.meta.contains("projector_layers") || !ck.find("scorer.w0")) throw DataError("checkpoint has no edge scorer; run link-finetune first");
  const auto layers = ck.meta.at("projector_layers").get<std::size_t>();
  const auto hidden = ck.meta.at("projector_dim").get<std::size_t>();
  m.scorer = ScorerParams<float>::init(m.link.encoder.shape.dim, hidden, layers, 0);
  ck.load(m.scorer);
  return m;
}

}  // namespace gspt
