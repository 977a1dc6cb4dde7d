#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "gspt/dataset.hpp"
#include "gspt/error.hpp"
#include "gspt/rng.hpp"

namespace gspt {

/// Stochastic block model with Gaussian class-conditional features.
struct SynthSpec {
  std::size_t nodes = 1000;
  std::size_t classes = 5;
  std::size_t dim = 32;
  double p_in = 0.02;
  double p_out = 0.002;
  double sigma = 0.5;       // per-coordinate noise std
  double separation = 1.0;  // norm of every class mean
  std::uint64_t family = 0; // graphs sharing a family share class means

  void validate() const {
    if (nodes == 0 || classes == 0 || dim == 0) throw ConfigError("synth: nodes, classes and dim must be positive");
    if (classes > nodes) throw ConfigError("synth: more classes than nodes");
    if (classes > dim) throw ConfigError("synth: orthogonal class means need classes <= dim");
    if (!(0 <= p_out && p_out <= p_in && p_in <= 1)) throw ConfigError("synth: need 0 <= p_out <= p_in <= 1");
    if (!(sigma >= 0) || !(separation > 0)) throw ConfigError("synth: need sigma >= 0 and separation > 0");
  }
};

/// Orthonormal directions (Gram-Schmidt on Gaussian draws) scaled to
/// `separation`. Depends only on (classes, dim, separation, family).
inline FeatureMatrix class_means(const SynthSpec& s) {
  s.validate();
  Rng rng(derive_key(s.family, "class-means"));
  std::vector<std::vector<double>> basis;
  while (basis.size() < s.classes) {
    std::vector<double> v(s.dim);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
      for (std::size_t c = 0; c < s.dim; ++c) v[c] -= dot * b[c];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-8) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  FeatureMatrix m(s.classes, s.dim);
  for (std::size_t k = 0; k < s.classes; ++k)
    for (std::size_t c = 0; c < s.dim; ++c) m(k, c) = static_cast<float>(s.separation * basis[k][c]);
  return m;
}

/// Balanced labels in a seeded order, Bernoulli edges per pair, and a
/// 20/20/60 train/valid/test node split.
inline Dataset synth_generate(const SynthSpec& s, std::uint64_t seed) {
  s.validate();
  const std::size_t n = s.nodes;
  Dataset ds;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<std::int32_t>(i % s.classes);
  Rng label_rng(derive_key(seed, "synth-labels"));
  for (std::size_t i = n; i > 1; --i) std::swap(ds.labels[i - 1], ds.labels[label_rng.uniform_index(i)]);

  Rng edge_rng(derive_key(seed, "synth-edges"));
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId u = 0; u < n; ++u)
    for (NodeId v = u + 1; v < n; ++v)
      if (edge_rng.bernoulli(ds.labels[u] == ds.labels[v] ? s.p_in : s.p_out)) edges.emplace_back(u, v);
  ds.graph = Graph::from_edges(n, edges);

  const FeatureMatrix means = class_means(s);
  Rng feat_rng(derive_key(seed, "synth-features"));
  ds.features = FeatureMatrix(n, s.dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto mu = means.row(static_cast<std::size_t>(ds.labels[i]));
    for (std::size_t c = 0; c < s.dim; ++c) ds.features(i, c) = static_cast<float>(mu[c] + (s.sigma > 0 ? s.sigma * feat_rng.normal() : 0.0));
  }
  ds.class_desc = means;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_key(seed, "synth-splits"));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[split_rng.uniform_index(i)]);
  ds.splits.assign(n, Split::test);
  const std::size_t fifth = n / 5;
  for (std::size_t i = 0; i < fifth; ++i) ds.splits[order[i]] = Split::train;
  for (std::size_t i = fifth; i < 2 * fifth; ++i) ds.splits[order[i]] = Split::valid;
  return ds;
}

/// Fraction of edges joining same-label endpoints.
inline double edge_homophily(const Dataset& ds) {
  std::size_t same = 0, total = 0;
  for (auto [u, v] : ds.graph.edge_list()) {
    ++total;
    same += ds.labels[u] == ds.labels[v];
  }
  return total == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(total);
}

}  // namespace gspt
