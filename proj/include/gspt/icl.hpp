#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gspt/dataset.hpp"
#include "gspt/error.hpp"
#include "gspt/graph.hpp"
#include "gspt/node_objective.hpp"
#include "gspt/parallel.hpp"
#include "gspt/transformer.hpp"
#include "gspt/walker.hpp"

namespace gspt {

/// Class-node features: zero vectors or class-description rows.
enum class ClassInit { zeros, description };

inline ClassInit parse_class_init(const std::string& s) {
  if (s == "void") return ClassInit::zeros;
  if (s == "desc") return ClassInit::description;
  throw ConfigError("mode must be void or desc, got '" + s + "'");
}

inline const char* class_init_name(ClassInit m) { return m == ClassInit::zeros ? "void" : "desc"; }

struct IclTask {
  std::vector<std::int32_t> classes;         // ascending
  std::vector<std::vector<NodeId>> support;  // support[i] belongs to classes[i]
  std::vector<NodeId> queries;               // ascending
};

inline std::uint64_t template_key(std::uint64_t seed, std::uint64_t template_index) {
  return derive_key({seed, hash_string("icl-template"), template_index});
}

/// N classes among those with at least K train nodes, K supports per class
/// from the train split, and every test node of the chosen classes as a query.
inline IclTask sample_task(const Dataset& ds, std::size_t n_way, std::size_t k_shot, std::uint64_t seed, std::uint64_t template_index) {
  if (!ds.has_labels() || ds.splits.empty()) throw DataError("in-context evaluation needs labels and splits");
  if (n_way == 0 || k_shot == 0) throw ConfigError("n_way and k_shot must be positive");
  const std::size_t c_total = ds.num_classes();
  std::vector<std::vector<NodeId>> train(c_total);
  for (NodeId v = 0; v < ds.num_nodes(); ++v)
    if (ds.labels[v] >= 0 && ds.splits[v] == Split::train) train[static_cast<std::size_t>(ds.labels[v])].push_back(v);
  std::vector<std::int32_t> eligible;
  for (std::size_t c = 0; c < c_total; ++c)
    if (train[c].size() >= k_shot) eligible.push_back(static_cast<std::int32_t>(c));
  if (eligible.size() < n_way)
    throw DataError("only " + std::to_string(eligible.size()) + " classes have >= " + std::to_string(k_shot) + " train nodes; need " +
                    std::to_string(n_way));

  Rng rng(template_key(seed, template_index));
  for (std::size_t i = 0; i < n_way; ++i) std::swap(eligible[i], eligible[i + rng.uniform_index(eligible.size() - i)]);
  IclTask task;
  task.classes.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n_way));
  std::sort(task.classes.begin(), task.classes.end());
  for (auto c : task.classes) {
    auto pool = train[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < k_shot; ++i) std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
    pool.resize(k_shot);
    std::sort(pool.begin(), pool.end());
    task.support.push_back(std::move(pool));
  }
  for (NodeId v = 0; v < ds.num_nodes(); ++v)
    if (ds.splits[v] == Split::test && std::binary_search(task.classes.begin(), task.classes.end(), ds.labels[v])) task.queries.push_back(v);
  return task;
}

struct AugmentedGraph {
  Graph graph;
  FeatureMatrix features;
  std::size_t base_nodes = 0;

  NodeId class_node(std::size_t i) const { return static_cast<NodeId>(base_nodes + i); }
};

inline AugmentedGraph build_augmented_graph(const Dataset& ds, const IclTask& task, ClassInit mode) {
  if (mode == ClassInit::description && !ds.class_desc) throw DataError("desc mode requested but the dataset has no class descriptions");
  const std::size_t n = ds.num_nodes(), N = task.classes.size(), d = ds.features.cols();
  auto edges = ds.graph.edge_list();
  for (std::size_t i = 0; i < N; ++i)
    for (NodeId s : task.support[i]) edges.emplace_back(s, static_cast<NodeId>(n + i));
  AugmentedGraph aug;
  aug.base_nodes = n;
  aug.graph = Graph::from_edges(n + N, edges);
  aug.features = FeatureMatrix(n + N, d);
  std::ranges::copy(ds.features.data(), aug.features.data().begin());
  if (mode == ClassInit::description)
    for (std::size_t i = 0; i < N; ++i) std::ranges::copy(ds.class_desc->row(static_cast<std::size_t>(task.classes[i])), aug.features.row(n + i).begin());
  return aug;
}

namespace detail {

inline constexpr std::size_t kEvalChunk = 256;

/// Eval-mode forward of plain walk sequences, pooled per sequence.
inline std::vector<PooledNodes<float>> pool_walks(const ModelParams<float>& P, const FeatureMatrix& X, const std::vector<std::vector<NodeId>>& walks,
                                                  unsigned threads) {
  std::vector<PooledNodes<float>> out(walks.size());
  const std::size_t chunks = (walks.size() + kEvalChunk - 1) / kEvalChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t b = c * kEvalChunk, e = std::min(walks.size(), b + kEvalChunk);
    std::vector<MaskedSequence> seqs;
    for (std::size_t i = b; i < e; ++i) seqs.push_back(plain_sequence(walks[i]));
    const std::size_t l = seqs.front().length();
    Mat<float> h = forward(P, embed_sequences(P, std::span<const MaskedSequence>(seqs), X), l, {}, Mode::eval, nullptr);
    for (std::size_t i = b; i < e; ++i)
      out[i] = pool_nodes<float>(h.middleRows(static_cast<Eigen::Index>((i - b) * l), static_cast<Eigen::Index>(l)), seqs[i - b].node_ids);
  });
  return out;
}

inline void accumulate(const PooledNodes<float>& p, Mat<double>& sum, std::vector<std::uint32_t>& count) {
  for (std::size_t i = 0; i < p.nodes.size(); ++i) {
    sum.row(p.nodes[i]) += p.vectors.row(static_cast<Eigen::Index>(i)).cast<double>();
    ++count[p.nodes[i]];
  }
}

inline Mat<double> finish_mean(Mat<double> sum, const std::vector<std::uint32_t>& count) {
  for (Eigen::Index v = 0; v < sum.rows(); ++v) {
    if (count[static_cast<std::size_t>(v)] == 0) throw DataError("node " + std::to_string(v) + " never visited");
    sum.row(v) /= static_cast<double>(count[static_cast<std::size_t>(v)]);
  }
  return sum;
}

inline std::uint64_t embed_walk_seed(std::uint64_t seed) { return derive_key(seed, "icl-walks"); }

}  // namespace detail

/// Node embeddings on the augmented graph: `repeats` rounds of one walk per
/// node, eval mode, each node averaged over every sequence containing it.
inline Mat<double> embed_augmented(const ModelParams<float>& P, const AugmentedGraph& aug, const WalkConfig& cfg, std::size_t repeats,
                                   std::uint64_t seed, unsigned threads = 1) {
  if (aug.features.cols() != P.shape.dim) throw DataError("checkpoint width does not match feature dimension");
  if (repeats == 0) throw ConfigError("walk_repeats must be positive");
  const std::size_t n = aug.graph.num_nodes();
  Mat<double> sum = Mat<double>::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(P.shape.dim));
  std::vector<std::uint32_t> count(n, 0);
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto ws = generate_epoch_walks(aug.graph, cfg, detail::embed_walk_seed(seed), r, threads);
    std::vector<std::vector<NodeId>> walks(n);
    for (std::size_t v = 0; v < n; ++v) walks[v].assign(ws.walk(v).begin(), ws.walk(v).end());
    for (const auto& p : detail::pool_walks(P, aug.features, walks, threads)) detail::accumulate(p, sum, count);
  }
  return detail::finish_mean(std::move(sum), count);
}

/// Cosine with the zero-norm convention: -1 if either side vanishes.
template <class A, class B>
double cosine_or_minus_one(const A& a, const B& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return -1.0;
  return a.dot(b) / (na * nb);
}

/// Index of the best-matching prototype row; the lowest index wins ties.
template <class V>
std::size_t argmax_cosine(const V& t, const Mat<double>& prototypes) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < prototypes.rows(); ++i) {
    const double s = cosine_or_minus_one(t, prototypes.row(i));
    if (s > best_score) {
      best_score = s;
      best = static_cast<std::size_t>(i);
    }
  }
  return best;
}

/// Class index (into task.classes) per query, by cosine to the class-node
/// embeddings.
inline std::vector<std::size_t> predict(const Mat<double>& emb, const AugmentedGraph& aug, const IclTask& task) {
  Mat<double> protos(static_cast<Eigen::Index>(task.classes.size()), emb.cols());
  for (std::size_t i = 0; i < task.classes.size(); ++i) protos.row(static_cast<Eigen::Index>(i)) = emb.row(aug.class_node(i));
  std::vector<std::size_t> out;
  out.reserve(task.queries.size());
  for (NodeId q : task.queries) out.push_back(argmax_cosine(emb.row(q), protos));
  return out;
}

inline double task_accuracy(const Dataset& ds, const IclTask& task, const std::vector<std::size_t>& pred) {
  if (task.queries.empty()) throw DataError("task has no queries");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < task.queries.size(); ++i) hit += task.classes[pred[i]] == ds.labels[task.queries[i]];
  return static_cast<double>(hit) / static_cast<double>(task.queries.size());
}

/// X' = Â^k X.
inline FeatureMatrix propagate_features(const Dataset& ds, std::size_t hops) {
  if (hops == 0) return ds.features;
  const auto adj = build_norm_adjacency(ds.graph);
  DenseMatrix<double> x = ds.features.cast<double>();
  for (std::size_t k = 0; k < hops; ++k) x = spmm(adj, x);
  return x.cast<float>();
}

/// Nearest class centroid of the support rows by cosine.
inline std::vector<std::size_t> prototype_classify(const FeatureMatrix& X, const IclTask& task) {
  Mat<double> protos = Mat<double>::Zero(static_cast<Eigen::Index>(task.classes.size()), static_cast<Eigen::Index>(X.cols()));
  for (std::size_t i = 0; i < task.classes.size(); ++i) {
    for (NodeId s : task.support[i])
      for (std::size_t c = 0; c < X.cols(); ++c) protos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) += X(s, c);
    protos.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(task.support[i].size());
  }
  std::vector<std::size_t> out;
  Eigen::Matrix<double, 1, Eigen::Dynamic> t(X.cols());
  for (NodeId q : task.queries) {
    for (std::size_t c = 0; c < X.cols(); ++c) t(static_cast<Eigen::Index>(c)) = X(q, c);
    out.push_back(argmax_cosine(t, protos));
  }
  return out;
}

struct IclConfig {
  std::size_t n_way = 5;
  std::size_t k_shot = 3;
  std::size_t templates = 100;
  std::size_t repeats = 10;  // walk rounds per embedding
  WalkConfig walk;
  ClassInit mode = ClassInit::zeros;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct IclReport {
  std::vector<double> accuracy;  // one per template
  double mean = 0;
  double stddev = 0;
};

inline IclReport summarize(std::vector<double> acc) {
  IclReport r;
  r.accuracy = std::move(acc);
  if (r.accuracy.empty()) return r;
  r.mean = std::accumulate(r.accuracy.begin(), r.accuracy.end(), 0.0) / static_cast<double>(r.accuracy.size());
  double ss = 0;
  for (double a : r.accuracy) ss += (a - r.mean) * (a - r.mean);
  r.stddev = r.accuracy.size() > 1 ? std::sqrt(ss / static_cast<double>(r.accuracy.size() - 1)) : 0.0;
  return r;
}

/// Reuses base-graph sequences across templates. A walk from a base node is
/// unchanged by augmentation unless it steps off a support node, so only
/// those walks and the class-node walks are recomputed per template. Results
/// match `embed_augmented` up to float summation order.
class IclEmbedder {
 public:
  IclEmbedder(const ModelParams<float>& P, const Dataset& ds, const WalkConfig& walk, std::size_t repeats, std::uint64_t seed, unsigned threads)
      : P_(P), ds_(ds), walk_(walk), repeats_(repeats), seed_(seed), threads_(threads) {
    if (ds.features.cols() != P.shape.dim) throw DataError("checkpoint width does not match feature dimension");
    if (repeats == 0) throw ConfigError("walk_repeats must be positive");
    const std::size_t n = ds.num_nodes();
    for (std::size_t r = 0; r < repeats; ++r) {
      auto ws = generate_epoch_walks(ds.graph, walk, detail::embed_walk_seed(seed), r, threads);
      std::vector<std::vector<NodeId>> walks(n);
      for (std::size_t v = 0; v < n; ++v) walks[v].assign(ws.walk(v).begin(), ws.walk(v).end());
      pooled_.push_back(detail::pool_walks(P, ds.features, walks, threads));
      walks_.push_back(std::move(ws));
    }
  }

  Mat<double> embed(const AugmentedGraph& aug) const {
    const std::size_t n = ds_.num_nodes(), total = aug.graph.num_nodes();
    std::vector<char> is_support(n, 0);
    for (NodeId v = 0; v < n; ++v) is_support[v] = aug.graph.degree(v) != ds_.graph.degree(v);
    Mat<double> sum = Mat<double>::Zero(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(P_.shape.dim));
    std::vector<std::uint32_t> count(total, 0);
    for (std::size_t r = 0; r < repeats_; ++r) {
      std::vector<NodeId> redo;
      for (NodeId v = 0; v < n; ++v) {
        auto w = walks_[r].walk(v);
        if (std::any_of(w.begin(), w.end() - 1, [&](NodeId u) { return is_support[u] != 0; })) redo.push_back(v);
      }
      for (std::size_t v = n; v < total; ++v) redo.push_back(static_cast<NodeId>(v));
      std::vector<std::vector<NodeId>> fresh(redo.size(), std::vector<NodeId>(walk_.length));
      parallel_for(redo.size(), threads_, [&](std::size_t i) {
        thread_local std::vector<double> scratch;
        generate_walk_into(aug.graph, redo[i], walk_, walk_key(detail::embed_walk_seed(seed_), r, redo[i]), fresh[i], scratch);
      });
      const auto redone = detail::pool_walks(P_, aug.features, fresh, threads_);
      std::size_t j = 0;
      for (NodeId v = 0; v < total; ++v) {
        if (j < redo.size() && redo[j] == v) {
          detail::accumulate(redone[j++], sum, count);
        } else {
          detail::accumulate(pooled_[r][v], sum, count);
        }
      }
    }
    return detail::finish_mean(std::move(sum), count);
  }

 private:
  const ModelParams<float>& P_;
  const Dataset& ds_;
  WalkConfig walk_;
  std::size_t repeats_;
  std::uint64_t seed_;
  unsigned threads_;
  std::vector<WalkSet> walks_;
  std::vector<std::vector<PooledNodes<float>>> pooled_;
};

/// Mean accuracy of the class-node method over `templates` sampled tasks.
inline IclReport evaluate_icl(const ModelParams<float>& P, const Dataset& ds, const IclConfig& cfg) {
  IclEmbedder embedder(P, ds, cfg.walk, cfg.repeats, cfg.seed, cfg.threads);
  std::vector<double> acc;
  for (std::size_t t = 0; t < cfg.templates; ++t) {
    const auto task = sample_task(ds, cfg.n_way, cfg.k_shot, cfg.seed, t);
    const auto aug = build_augmented_graph(ds, task, cfg.mode);
    acc.push_back(task_accuracy(ds, task, predict(embedder.embed(aug), aug, task)));
  }
  return summarize(std::move(acc));
}

/// Prototype baseline on Â^hops X over the same task templates.
inline IclReport evaluate_prototype(const Dataset& ds, std::size_t hops, const IclConfig& cfg) {
  const FeatureMatrix X = propagate_features(ds, hops);
  std::vector<double> acc;
  for (std::size_t t = 0; t < cfg.templates; ++t) {
    const auto task = sample_task(ds, cfg.n_way, cfg.k_shot, cfg.seed, t);
    acc.push_back(task_accuracy(ds, task, prototype_classify(X, task)));
  }
  return summarize(std::move(acc));
}

/// Last-layer attention from class-node positions to labeled base nodes,
/// bucketed by (class of the class node, label of the attended node).
struct AttentionStats {
  std::map<std::pair<std::int32_t, std::int32_t>, std::pair<double, std::size_t>> buckets;

  void add(std::int32_t cls, std::int32_t ctx, double w) {
    auto& b = buckets[{cls, ctx}];
    b.first += w;
    ++b.second;
  }

  double mean(bool same) const {
    double s = 0;
    std::size_t c = 0;
    for (const auto& [k, v] : buckets)
      if ((k.first == k.second) == same) {
        s += v.first;
        c += v.second;
      }
    return c == 0 ? 0.0 : s / static_cast<double>(c);
  }

  double ratio() const {
    const double diff = mean(false);
    return diff == 0.0 ? 0.0 : mean(true) / diff;
  }
};

inline void collect_attention(const ModelParams<float>& P, const Dataset& ds, const AugmentedGraph& aug, const IclTask& task, const WalkConfig& cfg,
                              std::size_t repeats, std::uint64_t seed, AttentionStats& stats) {
  const std::size_t n = aug.base_nodes;
  const std::size_t l = cfg.length;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto ws = generate_epoch_walks(aug.graph, cfg, detail::embed_walk_seed(seed), r);
    std::vector<MaskedSequence> seqs;
    for (std::size_t v = 0; v < ws.size(); ++v) {
      auto w = ws.walk(v);
      if (std::any_of(w.begin(), w.end(), [&](NodeId u) { return u >= n; })) seqs.push_back(plain_sequence(w));
    }
    for (std::size_t b = 0; b < seqs.size(); b += detail::kEvalChunk) {
      const std::size_t e = std::min(seqs.size(), b + detail::kEvalChunk);
      std::span<const MaskedSequence> chunk(seqs.data() + b, e - b);
      AttentionTap<float> tap;
      forward(P, embed_sequences(P, chunk, aug.features), l, {}, Mode::eval, nullptr, nullptr, &tap);
      for (std::size_t s = 0; s < chunk.size(); ++s) {
        const auto& ids = chunk[s].node_ids;
        for (std::size_t i = 0; i < l; ++i) {
          if (ids[i] < n) continue;
          const std::int32_t cls = task.classes[ids[i] - n];
          for (std::size_t j = 0; j < l; ++j) {
            if (ids[j] >= n || ds.labels[ids[j]] < 0) continue;
            stats.add(cls, ds.labels[ids[j]], static_cast<double>(tap.weights(static_cast<Eigen::Index>(s * l + i), static_cast<Eigen::Index>(j))));
          }
        }
      }
    }
  }
}

inline void write_icl_csv(const std::filesystem::path& p, const std::string& dataset, const IclConfig& cfg, const IclReport& rep) {
  auto out = detail::open_out(p);
  out << "dataset,N,K,mode,template,accuracy\n";
  char buf[64];
  auto row = [&](const std::string& tmpl, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out << dataset << ',' << cfg.n_way << ',' << cfg.k_shot << ',' << class_init_name(cfg.mode) << ',' << tmpl << ',' << buf << '\n';
  };
  for (std::size_t t = 0; t < rep.accuracy.size(); ++t) row(std::to_string(t), rep.accuracy[t]);
  row("mean", rep.mean);
  row("std", rep.stddev);
}

inline void write_attention_csv(const std::filesystem::path& p, const AttentionStats& s) {
  auto out = detail::open_out(p);
  out << "class,context_class,mean_attention\n";
  char buf[64];
  for (const auto& [k, v] : s.buckets) {
    std::snprintf(buf, sizeof buf, "%.8f", v.first / static_cast<double>(v.second));
    out << k.first << ',' << k.second << ',' << buf << '\n';
  }
}

}  // namespace gspt
