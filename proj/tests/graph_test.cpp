#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "gspt/dataset.hpp"
#include "gspt/graph.hpp"
#include "gspt/rng.hpp"

namespace gspt {
namespace {

namespace fs = std::filesystem;

Graph random_graph(std::size_t n, double p, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId u = 0; u < n; ++u)
    for (NodeId v = u + 1; v < n; ++v)
      if (rng.bernoulli(p)) edges.emplace_back(u, v);
  return Graph::from_edges(n, edges);
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gspt_graph_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Dense (A + I) normalized by degree, computed independently of the CSR path.
std::vector<std::vector<double>> dense_norm_adjacency(const Graph& g) {
  const std::size_t n = g.num_nodes();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  std::vector<double> deg(n, 1.0);
  for (NodeId u = 0; u < n; ++u) {
    a[u][u] = 1.0;
    for (NodeId v : g.neighbors(u)) {
      a[u][v] = 1.0;
      deg[u] += 1.0;
    }
  }
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) a[u][v] /= std::sqrt(deg[u] * deg[v]);
  return a;
}

TEST(Graph, BuildsDegreesFromEdges) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}, {1, 2}};
  auto g = Graph::from_edges(3, e);
  EXPECT_EQ(g.degree(0), 1u);
  EXPECT_EQ(g.degree(1), 2u);
  EXPECT_EQ(g.degree(2), 1u);
  EXPECT_EQ(g.row_ptr().front(), 0u);
  EXPECT_EQ(g.row_ptr().back(), g.num_slots());
}

TEST(Graph, DeduplicatesAndDropsLoops) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}, {1, 0}, {1, 1}, {0, 1}};
  auto g = Graph::from_edges(2, e);
  EXPECT_EQ(g.degree(0), 1u);
  EXPECT_EQ(g.degree(1), 1u);
  EXPECT_EQ(g.num_edges(), 1u);
}

TEST(Graph, RandomGraphsAreSymmetricSortedLoopFree) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto g = random_graph(40, 0.1, s);
    for (NodeId u = 0; u < g.num_nodes(); ++u) {
      auto nb = g.neighbors(u);
      EXPECT_TRUE(std::is_sorted(nb.begin(), nb.end()));
      EXPECT_TRUE(std::adjacent_find(nb.begin(), nb.end()) == nb.end());
      for (NodeId v : nb) {
        EXPECT_NE(u, v);
        EXPECT_TRUE(g.has_edge(v, u));
      }
    }
  }
}

TEST(NormAdjacency, SingleEdgeAllHalf) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}};
  auto adj = build_norm_adjacency(Graph::from_edges(2, e));
  ASSERT_EQ(adj.weight.size(), 4u);
  for (double w : adj.weight) EXPECT_DOUBLE_EQ(w, 0.5);
}

TEST(NormAdjacency, IsolatedNodeAndStarCenter) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}, {0, 2}, {0, 3}};
  auto adj = build_norm_adjacency(Graph::from_edges(5, e));
  // node 4 isolated
  ASSERT_EQ(adj.row_ptr[5] - adj.row_ptr[4], 1u);
  EXPECT_DOUBLE_EQ(adj.weight[adj.row_ptr[4]], 1.0);
  // star center self weight
  EXPECT_EQ(adj.col_idx[adj.row_ptr[0]], 0u);
  EXPECT_DOUBLE_EQ(adj.weight[adj.row_ptr[0]], 0.25);
}

TEST(NormAdjacency, EntriesMatchDegreeFormula) {
  auto g = random_graph(30, 0.15, 3);
  auto adj = build_norm_adjacency(g);
  for (NodeId u = 0; u < g.num_nodes(); ++u) {
    std::size_t self = 0;
    for (std::size_t k = adj.row_ptr[u]; k < adj.row_ptr[u + 1]; ++k) {
      const NodeId v = adj.col_idx[k];
      self += v == u;
      EXPECT_TRUE(v == u || g.has_edge(u, v));
      EXPECT_DOUBLE_EQ(adj.weight[k], 1.0 / std::sqrt(double(g.degree(u) + 1) * double(g.degree(v) + 1)));
    }
    EXPECT_EQ(self, 1u);
    EXPECT_EQ(adj.row_ptr[u + 1] - adj.row_ptr[u], g.degree(u) + 1);
  }
}

TEST(Spmm, IdentityForIsolatedNodes) {
  auto adj = build_norm_adjacency(Graph::from_edges(3, std::vector<std::pair<NodeId, NodeId>>{}));
  DenseMatrix<double> x(3, 2, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(spmm(adj, x), x);
}

TEST(Spmm, SingleEdgeAveragesRows) {
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}};
  auto adj = build_norm_adjacency(Graph::from_edges(2, e));
  DenseMatrix<double> x(2, 2, std::vector<double>{1, 0, 0, 1});
  auto y = spmm(adj, x);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Spmm, ZeroInZeroOutAndShapeCheck) {
  auto adj = build_norm_adjacency(random_graph(10, 0.3, 1));
  DenseMatrix<double> z(10, 3);
  auto y = spmm(adj, z);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(spmm(adj, DenseMatrix<double>(9, 3)), DataError);
}

TEST(Spmm, MatchesDenseOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(s + 50);
    const std::size_t n = 8 + rng.uniform_index(57);
    auto g = random_graph(n, 0.1, s);
    DenseMatrix<double> x(n, 5);
    for (auto& v : x.data()) v = rng.normal();
    auto y = spmm(build_norm_adjacency(g), x);
    auto a = dense_norm_adjacency(g);
    double worst = 0;
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t c = 0; c < 5; ++c) {
        double ref = 0;
        for (std::size_t v = 0; v < n; ++v) ref += a[u][v] * x(v, c);
        worst = std::max(worst, std::abs(ref - y(u, c)));
      }
    EXPECT_LT(worst, 1e-9);
  }
}

Dataset tiny_dataset() {
  Dataset ds;
  std::vector<std::pair<NodeId, NodeId>> e{{0, 1}, {1, 2}};
  ds.graph = Graph::from_edges(3, e);
  ds.features = FeatureMatrix(3, 2, std::vector<float>{1, 2, 3, 4, 5, 6});
  return ds;
}

TEST(Dataset, LoadsMinimalDirectory) {
  auto dir = temp_dir("minimal");
  save_dataset(dir, tiny_dataset());
  auto ds = load_dataset(dir);
  EXPECT_EQ(ds.num_nodes(), 3u);
  EXPECT_EQ(ds.graph.degree(1), 2u);
  EXPECT_FALSE(ds.has_labels());
  EXPECT_FALSE(ds.class_desc.has_value());
}

TEST(Dataset, ReverseDuplicateEdgeIsOneEdge) {
  auto dir = temp_dir("dup");
  auto ds = tiny_dataset();
  ds.features = FeatureMatrix(2, 2, std::vector<float>{1, 2, 3, 4});
  write_feature_file(dir / "features.bin", ds.features);
  std::ofstream(dir / "edges.tsv") << "0\t1\n1\t0\n";
  auto loaded = load_dataset(dir);
  EXPECT_EQ(loaded.graph.degree(0), 1u);
  EXPECT_EQ(loaded.graph.degree(1), 1u);
}

TEST(Dataset, Errors) {
  auto dir = temp_dir("errors");
  EXPECT_THROW(load_dataset(dir), DataError);  // missing files

  save_dataset(dir, tiny_dataset());
  std::ofstream(dir / "labels.tsv") << "0\t0\n1\t1\n2\t0\n3\t1\n";
  try {
    load_dataset(dir);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("label/node count mismatch"), std::string::npos);
  }

  std::ofstream(dir / "labels.tsv") << "0\t0\n1\t2\n";
  EXPECT_THROW(load_dataset(dir), DataError);  // class 1 missing
  fs::remove(dir / "labels.tsv");

  std::ofstream(dir / "edges.tsv") << "0\t3\n";
  EXPECT_THROW(load_dataset(dir), DataError);  // node id >= n
  std::ofstream(dir / "edges.tsv") << "0\t1\n";

  {
    std::fstream f(dir / "features.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("BADMAGIC", 8);
  }
  EXPECT_THROW(load_dataset(dir), DataError);

  auto bad = tiny_dataset();
  bad.features(1, 1) = std::nanf("");
  write_feature_file(dir / "features.bin", bad.features);
  EXPECT_THROW(load_dataset(dir), DataError);
}

TEST(Dataset, RoundTripsRandomInstances) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    Rng rng(s);
    Dataset ds;
    const std::size_t n = 20 + rng.uniform_index(30);
    ds.graph = random_graph(n, 0.15, s + 7);
    ds.features = FeatureMatrix(n, 4);
    for (auto& v : ds.features.data()) v = static_cast<float>(rng.normal());
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<std::int32_t>(i % 3);
    ds.splits.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.splits[i] = static_cast<Split>(1 + rng.uniform_index(3));
    ds.class_desc = FeatureMatrix(3, 4, 0.25f);
    auto dir = temp_dir("roundtrip" + std::to_string(s));
    save_dataset(dir, ds);
    auto back = load_dataset(dir);
    EXPECT_EQ(back.graph, ds.graph);
    EXPECT_EQ(back.features, ds.features);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.splits, ds.splits);
    EXPECT_EQ(*back.class_desc, *ds.class_desc);
  }
}

}  // namespace
}  // namespace gspt
