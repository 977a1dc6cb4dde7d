#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "gspt/dataset.hpp"
#include "gspt/error.hpp"
#include "gspt/graph.hpp"
#include "gspt/parallel.hpp"
#include "gspt/rng.hpp"

namespace gspt {

/// Second-order (node2vec) walk parameters.
struct WalkConfig {
  std::size_t length = 20;
  double p = 0.25;  // return
  double q = 0.25;  // in-out

  void validate() const {
    if (length < 2) throw ConfigError("walk_length must be >= 2");
    if (!(std::isfinite(p) && p > 0) || !(std::isfinite(q) && q > 0)) throw ConfigError("walk p and q must be finite and positive");
  }
};

/// Unnormalized node2vec weight for stepping cur -> next given the previous
/// node. `prev == cur` marks the first step, which is uniform.
inline double step_weight(const Graph& g, NodeId prev, NodeId cur, NodeId next, const WalkConfig& cfg) {
  if (prev == cur) return 1.0;
  if (next == prev) return 1.0 / cfg.p;
  if (g.has_edge(prev, next)) return 1.0;
  return 1.0 / cfg.q;
}

/// Normalized transition distribution over neighbors(cur), in neighbor order.
inline std::vector<std::pair<NodeId, double>> step_distribution(const Graph& g, NodeId prev, NodeId cur, const WalkConfig& cfg) {
  auto nb = g.neighbors(cur);
  if (nb.empty()) throw DataError("step_distribution: node " + std::to_string(cur) + " is isolated");
  std::vector<std::pair<NodeId, double>> out;
  out.reserve(nb.size());
  double total = 0.0;
  for (NodeId x : nb) {
    const double w = step_weight(g, prev, cur, x, cfg);
    out.emplace_back(x, w);
    total += w;
  }
  for (auto& [x, w] : out) w /= total;
  return out;
}

inline std::uint64_t walk_key(std::uint64_t seed, std::uint64_t epoch, std::uint64_t node) {
  return derive_key({seed, epoch, node, hash_string("walk")});
}

/// Writes one walk of cfg.length nodes into `out`. An isolated current node
/// repeats itself for the remainder of the walk.
inline void generate_walk_into(const Graph& g, NodeId start, const WalkConfig& cfg, std::uint64_t key, std::span<NodeId> out,
                               std::vector<double>& scratch) {
  Rng rng(key);
  out[0] = start;
  NodeId prev = start;
  NodeId cur = start;
  for (std::size_t t = 1; t < cfg.length; ++t) {
    auto nb = g.neighbors(cur);
    if (nb.empty()) {
      out[t] = cur;
      continue;
    }
    scratch.resize(nb.size());
    double total = 0.0;
    for (std::size_t i = 0; i < nb.size(); ++i) {
      total += step_weight(g, prev, cur, nb[i], cfg);
      scratch[i] = total;
    }
    const double r = rng.uniform01() * total;
    std::size_t pick = 0;
    while (pick + 1 < nb.size() && scratch[pick] <= r) ++pick;
    prev = cur;
    cur = nb[pick];
    out[t] = cur;
  }
}

inline std::vector<NodeId> generate_walk(const Graph& g, NodeId start, const WalkConfig& cfg, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<NodeId> walk(cfg.length);
  std::vector<double> scratch;
  generate_walk_into(g, start, cfg, walk_key(seed, epoch, start), walk, scratch);
  return walk;
}

/// One walk per node; walk i starts at node i.
class WalkSet {
 public:
  WalkSet() = default;
  WalkSet(std::size_t count, std::size_t length) : count_(count), length_(length), nodes_(count * length) {}

  std::size_t size() const noexcept { return count_; }
  std::size_t length() const noexcept { return length_; }
  std::span<const NodeId> walk(std::size_t i) const noexcept { return {nodes_.data() + i * length_, length_}; }
  std::span<NodeId> walk(std::size_t i) noexcept { return {nodes_.data() + i * length_, length_}; }

  friend bool operator==(const WalkSet&, const WalkSet&) = default;

 private:
  std::size_t count_ = 0;
  std::size_t length_ = 0;
  std::vector<NodeId> nodes_;
};

inline WalkSet generate_epoch_walks(const Graph& g, const WalkConfig& cfg, std::uint64_t seed, std::uint64_t epoch, unsigned threads = 1) {
  cfg.validate();
  WalkSet ws(g.num_nodes(), cfg.length);
  parallel_for(g.num_nodes(), threads, [&](std::size_t i) {
    thread_local std::vector<double> scratch;
    generate_walk_into(g, static_cast<NodeId>(i), cfg, walk_key(seed, epoch, i), ws.walk(i), scratch);
  });
  return ws;
}

/// Debug dump: one walk per line, space-separated ids.
inline void write_walks(const std::filesystem::path& p, const WalkSet& ws) {
  auto os = detail::open_out(p);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    auto w = ws.walk(i);
    for (std::size_t t = 0; t < w.size(); ++t) os << (t ? " " : "") << w[t];
    os << '\n';
  }
}

}  // namespace gspt
