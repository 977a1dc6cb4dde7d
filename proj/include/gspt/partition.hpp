#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gspt/dataset.hpp"
#include "gspt/error.hpp"
#include "gspt/graph.hpp"
#include "gspt/rng.hpp"

namespace gspt {

/// Node-to-part assignment. Parts are numbered [0, num_parts()).
struct PartitionMap {
  std::vector<std::uint32_t> assignment;
  std::vector<std::size_t> part_sizes;

  std::size_t num_parts() const noexcept { return part_sizes.size(); }
};

inline std::size_t edge_cut(const Graph& g, const std::vector<std::uint32_t>& assignment) {
  std::size_t cut = 0;
  for (auto [u, v] : g.edge_list())
    if (assignment[u] != assignment[v]) ++cut;
  return cut;
}

/// Seeded region growing. Seeds are placed by farthest-point selection (a
/// node unreachable from every existing seed counts as infinitely far), then
/// regions grow breadth-first in round-robin order, each capped at
/// 2 * target_size. Nodes left unclaimed join the smallest adjacent region,
/// or the smallest region overall when no neighbour is assigned yet.
inline PartitionMap partition(const Graph& g, std::size_t target_size, std::uint64_t seed) {
  const std::size_t n = g.num_nodes();
  if (n == 0) throw DataError("cannot partition an empty graph");
  if (target_size == 0) throw ConfigError("partition target_size must be >= 1");
  const std::size_t parts = (n + target_size - 1) / target_size;
  const std::size_t cap = 2 * target_size;
  constexpr auto kUnassigned = std::numeric_limits<std::uint32_t>::max();
  constexpr auto kFar = std::numeric_limits<std::size_t>::max();

  Rng rng(derive_key(seed, "partition"));
  std::vector<NodeId> seeds;
  std::vector<std::size_t> dist(n, kFar);
  auto relax_from = [&](NodeId s) {
    std::deque<NodeId> queue{s};
    dist[s] = 0;
    while (!queue.empty()) {
      NodeId u = queue.front();
      queue.pop_front();
      for (NodeId v : g.neighbors(u)) {
        if (dist[u] + 1 < dist[v]) {
          dist[v] = dist[u] + 1;
          queue.push_back(v);
        }
      }
    }
  };
  seeds.push_back(static_cast<NodeId>(rng.uniform_index(n)));
  relax_from(seeds.back());
  std::vector<NodeId> candidates;
  while (seeds.size() < parts) {
    std::size_t best = 0;
    candidates.clear();
    for (NodeId u = 0; u < n; ++u) {
      if (dist[u] == 0) continue;
      if (dist[u] > best) {
        best = dist[u];
        candidates.clear();
      }
      if (dist[u] == best) candidates.push_back(u);
    }
    seeds.push_back(candidates[rng.uniform_index(candidates.size())]);
    relax_from(seeds.back());
  }

  PartitionMap pm;
  pm.assignment.assign(n, kUnassigned);
  pm.part_sizes.assign(parts, 0);
  std::vector<std::deque<NodeId>> frontier(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    pm.assignment[seeds[p]] = static_cast<std::uint32_t>(p);
    pm.part_sizes[p] = 1;
    frontier[p].push_back(seeds[p]);
  }
  for (bool active = true; active;) {
    active = false;
    for (std::size_t p = 0; p < parts; ++p) {
      if (frontier[p].empty()) continue;
      active = true;
      NodeId u = frontier[p].front();
      frontier[p].pop_front();
      for (NodeId v : g.neighbors(u)) {
        if (pm.part_sizes[p] >= cap) break;
        if (pm.assignment[v] != kUnassigned) continue;
        pm.assignment[v] = static_cast<std::uint32_t>(p);
        ++pm.part_sizes[p];
        frontier[p].push_back(v);
      }
    }
  }

  // Leftovers: visited in BFS order from each unassigned node so that a whole
  // unseeded component tends to land in one region.
  auto smallest_with_room = [&](auto&& eligible) {
    std::size_t best = parts;
    for (std::size_t p = 0; p < parts; ++p)
      if (eligible(p) && pm.part_sizes[p] < cap && (best == parts || pm.part_sizes[p] < pm.part_sizes[best])) best = p;
    return best;
  };
  for (NodeId start = 0; start < n; ++start) {
    if (pm.assignment[start] != kUnassigned) continue;
    std::deque<NodeId> queue{start};
    while (!queue.empty()) {
      NodeId u = queue.front();
      queue.pop_front();
      if (pm.assignment[u] != kUnassigned) continue;
      std::vector<bool> adjacent(parts, false);
      for (NodeId v : g.neighbors(u))
        if (pm.assignment[v] != kUnassigned) adjacent[pm.assignment[v]] = true;
      std::size_t p = smallest_with_room([&](std::size_t q) { return adjacent[q]; });
      if (p == parts) p = smallest_with_room([](std::size_t) { return true; });
      pm.assignment[u] = static_cast<std::uint32_t>(p);
      ++pm.part_sizes[p];
      for (NodeId v : g.neighbors(u))
        if (pm.assignment[v] == kUnassigned) queue.push_back(v);
    }
  }
  return pm;
}

/// Subgraph over one part's nodes keeping only intra-part edges. The second
/// member maps local ids to global ids (ascending).
inline std::pair<Graph, std::vector<NodeId>> induced_subgraph(const Graph& g, const PartitionMap& pm, std::size_t part) {
  if (part >= pm.num_parts()) throw DataError("invalid part id " + std::to_string(part));
  std::vector<NodeId> node_map;
  std::vector<NodeId> local(g.num_nodes(), std::numeric_limits<NodeId>::max());
  for (NodeId u = 0; u < g.num_nodes(); ++u) {
    if (pm.assignment[u] == part) {
      local[u] = static_cast<NodeId>(node_map.size());
      node_map.push_back(u);
    }
  }
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId u : node_map)
    for (NodeId v : g.neighbors(u))
      if (u < v && pm.assignment[v] == part) edges.emplace_back(local[u], local[v]);
  return {Graph::from_edges(node_map.size(), edges), std::move(node_map)};
}

inline void write_partition_file(const std::filesystem::path& p, const PartitionMap& pm) {
  auto os = detail::open_out(p);
  os << "#P=" << pm.num_parts() << '\n';
  for (std::size_t u = 0; u < pm.assignment.size(); ++u) os << u << '\t' << pm.assignment[u] << '\n';
}

inline PartitionMap read_partition_file(const std::filesystem::path& p, std::size_t num_nodes) {
  auto is = detail::open_in(p);
  std::string header;
  if (!std::getline(is, header) || header.rfind("#P=", 0) != 0) throw DataError("partition file lacks '#P=' header");
  const std::size_t parts = detail::parse_id(header.substr(3), p.string());
  PartitionMap pm;
  pm.assignment.assign(num_nodes, std::numeric_limits<std::uint32_t>::max());
  pm.part_sizes.assign(parts, 0);
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    auto f = detail::fields(line);
    if (f.empty()) continue;
    const std::string where = p.filename().string() + ":" + std::to_string(line_no);
    if (f.size() != 2) throw DataError("expected 'node<TAB>part' at " + where);
    const auto u = detail::parse_id(f[0], where);
    const auto part = detail::parse_id(f[1], where);
    if (u >= num_nodes || part >= parts) throw DataError("id out of range at " + where);
    pm.assignment[u] = static_cast<std::uint32_t>(part);
    ++pm.part_sizes[part];
  }
  for (auto a : pm.assignment)
    if (a == std::numeric_limits<std::uint32_t>::max()) throw DataError("partition file leaves a node unassigned");
  return pm;
}

}  // namespace gspt
