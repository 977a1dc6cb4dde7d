#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "gspt/error.hpp"

namespace gspt {

using NodeId = std::uint32_t;

/// Dense row-major matrix. FeatureMatrix is the float instantiation used for
/// stored node features; double instantiations appear in tests and oracles.
template <class T>
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw DataError("matrix data size does not match shape");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  template <class U>
  DenseMatrix<U> cast() const {
    return DenseMatrix<U>(rows_, cols_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using FeatureMatrix = DenseMatrix<float>;

/// Immutable undirected graph in CSR form. Every undirected edge occupies one
/// slot in each endpoint's row; rows are sorted, duplicate-free, loop-free.
class Graph {
 public:
  Graph() : row_ptr_{0} {}

  /// Builds from an arbitrary edge list: symmetrizes, drops self-loops and
  /// removes duplicates.
  static Graph from_edges(std::size_t n, std::span<const std::pair<NodeId, NodeId>> edges) {
    std::vector<std::pair<NodeId, NodeId>> slots;
    slots.reserve(edges.size() * 2);
    for (auto [u, v] : edges) {
      if (u >= n || v >= n) throw DataError("edge endpoint out of range");
      if (u == v) continue;
      slots.emplace_back(u, v);
      slots.emplace_back(v, u);
    }
    std::sort(slots.begin(), slots.end());
    slots.erase(std::unique(slots.begin(), slots.end()), slots.end());
    Graph g;
    g.row_ptr_.assign(n + 1, 0);
    g.col_idx_.reserve(slots.size());
    for (auto [u, v] : slots) {
      ++g.row_ptr_[u + 1];
      g.col_idx_.push_back(v);
    }
    for (std::size_t i = 0; i < n; ++i) g.row_ptr_[i + 1] += g.row_ptr_[i];
    return g;
  }

  std::size_t num_nodes() const noexcept { return row_ptr_.size() - 1; }
  /// Directed slot count (twice the undirected edge count).
  std::size_t num_slots() const noexcept { return col_idx_.size(); }
  std::size_t num_edges() const noexcept { return col_idx_.size() / 2; }

  std::span<const NodeId> neighbors(NodeId u) const noexcept {
    return {col_idx_.data() + row_ptr_[u], row_ptr_[u + 1] - row_ptr_[u]};
  }
  std::size_t degree(NodeId u) const noexcept { return row_ptr_[u + 1] - row_ptr_[u]; }

  bool has_edge(NodeId u, NodeId v) const noexcept {
    auto nb = neighbors(u);
    return std::binary_search(nb.begin(), nb.end(), v);
  }

  /// Undirected edges with u < v, in CSR order.
  std::vector<std::pair<NodeId, NodeId>> edge_list() const {
    std::vector<std::pair<NodeId, NodeId>> out;
    out.reserve(num_edges());
    for (NodeId u = 0; u < num_nodes(); ++u)
      for (NodeId v : neighbors(u))
        if (u < v) out.emplace_back(u, v);
    return out;
  }

  const std::vector<std::size_t>& row_ptr() const noexcept { return row_ptr_; }
  const std::vector<NodeId>& col_idx() const noexcept { return col_idx_; }

  friend bool operator==(const Graph&, const Graph&) = default;

 private:
  std::vector<std::size_t> row_ptr_;
  std::vector<NodeId> col_idx_;
};

/// Symmetric normalized adjacency with self-loops,
/// weight(u,v) = 1 / sqrt((deg(u)+1)(deg(v)+1)).
struct NormAdjacency {
  std::vector<std::size_t> row_ptr;
  std::vector<NodeId> col_idx;
  std::vector<double> weight;

  std::size_t num_nodes() const noexcept { return row_ptr.size() - 1; }
};

inline NormAdjacency build_norm_adjacency(const Graph& g) {
  const std::size_t n = g.num_nodes();
  NormAdjacency adj;
  adj.row_ptr.assign(n + 1, 0);
  adj.col_idx.reserve(g.num_slots() + n);
  adj.weight.reserve(g.num_slots() + n);
  std::vector<double> inv_sqrt(n);
  for (NodeId u = 0; u < n; ++u) inv_sqrt[u] = 1.0 / std::sqrt(static_cast<double>(g.degree(u) + 1));
  for (NodeId u = 0; u < n; ++u) {
    bool self_done = false;
    for (NodeId v : g.neighbors(u)) {
      if (!self_done && v > u) {
        adj.col_idx.push_back(u);
        adj.weight.push_back(inv_sqrt[u] * inv_sqrt[u]);
        self_done = true;
      }
      adj.col_idx.push_back(v);
      adj.weight.push_back(inv_sqrt[u] * inv_sqrt[v]);
    }
    if (!self_done) {
      adj.col_idx.push_back(u);
      adj.weight.push_back(inv_sqrt[u] * inv_sqrt[u]);
    }
    adj.row_ptr[u + 1] = adj.col_idx.size();
  }
  return adj;
}

/// out[u] = sum_v weight(u,v) * x[v], accumulated in double.
template <class T>
DenseMatrix<T> spmm(const NormAdjacency& adj, const DenseMatrix<T>& x) {
  if (adj.num_nodes() != x.rows()) throw DataError("spmm: adjacency/feature row count mismatch");
  const std::size_t d = x.cols();
  DenseMatrix<T> out(x.rows(), d);
  std::vector<double> acc(d);
  for (std::size_t u = 0; u < adj.num_nodes(); ++u) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = adj.row_ptr[u]; k < adj.row_ptr[u + 1]; ++k) {
      const double w = adj.weight[k];
      auto xv = x.row(adj.col_idx[k]);
      for (std::size_t c = 0; c < d; ++c) acc[c] += w * static_cast<double>(xv[c]);
    }
    auto o = out.row(u);
    for (std::size_t c = 0; c < d; ++c) o[c] = static_cast<T>(acc[c]);
  }
  return out;
}

}  // namespace gspt
