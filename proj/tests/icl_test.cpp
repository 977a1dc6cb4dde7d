#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <string>

#include "gspt/icl.hpp"
#include "gspt/synth.hpp"
#include "test_support.hpp"

namespace gspt {
namespace {

Dataset small_synth(std::uint64_t seed, std::size_t dim = 8, std::size_t classes = 5, std::size_t nodes = 250) {
  SynthSpec s;
  s.nodes = nodes;
  s.classes = classes;
  s.dim = dim;
  s.p_in = 0.08;
  s.p_out = 0.004;
  return synth_generate(s, seed);
}

ModelParams<float> tiny_model(std::size_t dim, std::uint64_t seed) {
  return ModelParams<float>::init({.dim = dim, .layers = 2, .heads = 2, .ffn_dim = 2 * dim, .max_len = 8}, seed);
}

TEST(SampleTask, FullClassSetAndInvariants) {
  auto ds = small_synth(1);
  auto task = sample_task(ds, 5, 3, 7, 0);
  EXPECT_EQ(task.classes, (std::vector<std::int32_t>{0, 1, 2, 3, 4}));
  std::set<NodeId> support;
  for (std::size_t i = 0; i < task.classes.size(); ++i) {
    ASSERT_EQ(task.support[i].size(), 3u);
    for (NodeId s : task.support[i]) {
      EXPECT_EQ(ds.labels[s], task.classes[i]);
      EXPECT_EQ(ds.splits[s], Split::train);
      support.insert(s);
    }
  }
  std::size_t expected_queries = 0;
  for (NodeId v = 0; v < ds.num_nodes(); ++v) expected_queries += ds.splits[v] == Split::test;
  EXPECT_EQ(task.queries.size(), expected_queries);
  for (NodeId q : task.queries) {
    EXPECT_FALSE(support.count(q));
    EXPECT_EQ(ds.splits[q], Split::test);
  }
}

TEST(SampleTask, KeyedByTemplateIndex) {
  auto ds = small_synth(2);
  auto a = sample_task(ds, 3, 2, 5, 0);
  auto b = sample_task(ds, 3, 2, 5, 1);
  auto a2 = sample_task(ds, 3, 2, 5, 0);
  EXPECT_EQ(a.support, a2.support);
  EXPECT_EQ(a.classes, a2.classes);
  EXPECT_TRUE(a.support != b.support || a.classes != b.classes);
  for (NodeId q : a.queries) EXPECT_TRUE(std::ranges::binary_search(a.classes, ds.labels[q]));
}

TEST(SampleTask, Errors) {
  auto ds = small_synth(3);
  EXPECT_THROW(sample_task(ds, 6, 3, 0, 0), DataError);
  EXPECT_THROW(sample_task(ds, 2, 1000, 0, 0), DataError);
  EXPECT_THROW(sample_task(ds, 0, 3, 0, 0), ConfigError);
  Dataset unlabeled = ds;
  unlabeled.labels.clear();
  EXPECT_THROW(sample_task(unlabeled, 2, 1, 0, 0), DataError);
}

TEST(Augment, EdgesAndFeatureRows) {
  auto ds = small_synth(4);
  auto task = sample_task(ds, 2, 3, 1, 0);
  auto aug = build_augmented_graph(ds, task, ClassInit::zeros);
  const std::size_t n = ds.num_nodes();
  EXPECT_EQ(aug.graph.num_nodes(), n + 2);
  EXPECT_EQ(aug.graph.num_edges(), ds.graph.num_edges() + 6);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(aug.graph.degree(aug.class_node(i)), 3u);
    for (NodeId s : task.support[i]) EXPECT_TRUE(aug.graph.has_edge(s, aug.class_node(i)));
    for (float v : aug.features.row(n + i)) EXPECT_EQ(v, 0.0f);
  }
  std::vector<std::pair<NodeId, NodeId>> base;
  for (auto e : aug.graph.edge_list())
    if (e.second < n) base.push_back(e);
  EXPECT_EQ(base, ds.graph.edge_list());
  for (NodeId v = 0; v < n; ++v) EXPECT_TRUE(std::ranges::equal(aug.features.row(v), ds.features.row(v)));

  auto desc = build_augmented_graph(ds, task, ClassInit::description);
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_TRUE(std::ranges::equal(desc.features.row(n + i), ds.class_desc->row(static_cast<std::size_t>(task.classes[i]))));
  Dataset bare = ds;
  bare.class_desc.reset();
  EXPECT_THROW(build_augmented_graph(bare, task, ClassInit::description), DataError);
  EXPECT_EQ(parse_class_init("desc"), ClassInit::description);
  EXPECT_THROW(parse_class_init("zero"), ConfigError);
}

AugmentedGraph bare_aug(std::size_t base, std::size_t classes) {
  AugmentedGraph aug;
  aug.base_nodes = base;
  aug.graph = Graph::from_edges(base + classes, std::vector<std::pair<NodeId, NodeId>>{});
  return aug;
}

TEST(Predict, Examples) {
  IclTask task{{3, 7}, {{}, {}}, {0, 1, 2, 3}};
  auto aug = bare_aug(4, 2);
  Mat<double> emb(6, 2);
  emb << 0.9, 0.1,   // closer to class node 0
      0.1, 0.9,      // closer to class node 1
      1, 1,          // equidistant
      0, 0,          // zero norm
      1, 0,          // class node 0
      0, 1;          // class node 1
  EXPECT_EQ(predict(emb, aug, task), (std::vector<std::size_t>{0, 1, 0, 0}));
  emb.row(0) = emb.row(5);
  EXPECT_EQ(predict(emb, aug, task)[0], 1u);
}

TEST(Predict, ScaleInvariant) {
  auto aug = bare_aug(30, 4);
  IclTask task{{0, 1, 2, 3}, std::vector<std::vector<NodeId>>(4), {}};
  for (NodeId q = 0; q < 30; ++q) task.queries.push_back(q);
  Mat<double> emb = Mat<double>::Random(34, 6);
  auto before = predict(emb, aug, task);
  Rng rng(3);
  for (Eigen::Index r = 0; r < emb.rows(); ++r) emb.row(r) *= 0.01 + 10 * rng.uniform01();
  EXPECT_EQ(predict(emb, aug, task), before);
}

TEST(Predict, RandomEmbeddingsNearChance) {
  auto ds = small_synth(5);
  Rng rng(9);
  double hits = 0, total = 0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    auto task = sample_task(ds, 5, 3, 1, t);
    auto aug = bare_aug(ds.num_nodes(), 5);
    Mat<double> emb(static_cast<Eigen::Index>(ds.num_nodes() + 5), 8);
    for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = rng.normal();
    const double acc = task_accuracy(ds, task, predict(emb, aug, task));
    hits += acc * static_cast<double>(task.queries.size());
    total += static_cast<double>(task.queries.size());
  }
  EXPECT_NEAR(hits / total, 0.2, 3 * std::sqrt(0.2 * 0.8 / total));
}

TEST(Predict, PerfectEmbeddingsScoreOne) {
  auto ds = small_synth(6);
  auto task = sample_task(ds, 4, 2, 2, 0);
  auto aug = build_augmented_graph(ds, task, ClassInit::zeros);
  Mat<double> emb = Mat<double>::Zero(static_cast<Eigen::Index>(aug.graph.num_nodes()), 4);
  for (std::size_t i = 0; i < 4; ++i) emb(aug.class_node(i), static_cast<Eigen::Index>(i)) = 1;
  for (NodeId q : task.queries) {
    const auto idx = std::ranges::find(task.classes, ds.labels[q]) - task.classes.begin();
    emb(q, idx) = 2.5;
  }
  EXPECT_DOUBLE_EQ(task_accuracy(ds, task, predict(emb, aug, task)), 1.0);
}

TEST(Embed, ZeroClassFeaturesStillEmbedded) {
  auto ds = small_synth(7);
  auto task = sample_task(ds, 3, 3, 0, 0);
  auto aug = build_augmented_graph(ds, task, ClassInit::zeros);
  auto P = tiny_model(8, 1);
  auto emb = embed_augmented(P, aug, {.length = 8}, 2, 3);
  ASSERT_EQ(emb.rows(), static_cast<Eigen::Index>(aug.graph.num_nodes()));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_GT(emb.row(aug.class_node(i)).norm(), 0.0);
  EXPECT_TRUE(emb.allFinite());
}

TEST(Embed, IsolatedClassNodeUsesItsOwnWalk) {
  auto ds = small_synth(8);
  IclTask task{{0}, {{}}, {}};
  auto aug = build_augmented_graph(ds, task, ClassInit::description);
  auto P = tiny_model(8, 2);
  auto emb = embed_augmented(P, aug, {.length = 8}, 1, 0);
  const NodeId c = aug.class_node(0);
  std::vector<NodeId> stalled(8, c);
  auto pooled = detail::pool_walks(P, aug.features, {stalled}, 1);
  ASSERT_EQ(pooled[0].nodes.size(), 1u);
  for (Eigen::Index k = 0; k < emb.cols(); ++k) EXPECT_NEAR(emb(c, k), pooled[0].vectors(0, k), 1e-6);
}

TEST(Embed, DeterministicAndRepeatSensitive) {
  auto ds = small_synth(9);
  auto task = sample_task(ds, 3, 3, 0, 0);
  auto aug = build_augmented_graph(ds, task, ClassInit::zeros);
  auto P = tiny_model(8, 3);
  auto a = embed_augmented(P, aug, {.length = 8}, 2, 5);
  EXPECT_EQ(a, embed_augmented(P, aug, {.length = 8}, 2, 5, 4));
  EXPECT_NE(a, embed_augmented(P, aug, {.length = 8}, 4, 5));
  EXPECT_EQ(predict(a, aug, task), predict(embed_augmented(P, aug, {.length = 8}, 2, 5), aug, task));
  Dataset narrow = ds;
  narrow.features = FeatureMatrix(ds.num_nodes(), 4);
  EXPECT_THROW(IclEmbedder(P, narrow, {.length = 8}, 1, 0, 1), DataError);
}

TEST(Embed, CachedEmbedderMatchesDirect) {
  auto ds = small_synth(10);
  auto P = tiny_model(8, 4);
  const WalkConfig walk{.length = 8};
  IclEmbedder embedder(P, ds, walk, 3, 11, 1);
  for (std::uint64_t t = 0; t < 3; ++t) {
    auto task = sample_task(ds, 4, 3, 11, t);
    for (auto mode : {ClassInit::zeros, ClassInit::description}) {
      auto aug = build_augmented_graph(ds, task, mode);
      auto direct = embed_augmented(P, aug, walk, 3, 11);
      auto cached = embedder.embed(aug);
      ASSERT_EQ(direct.rows(), cached.rows());
      EXPECT_LT((direct - cached).cwiseAbs().maxCoeff(), 1e-5);
    }
  }
}

TEST(Propagate, HopsZeroOneTwo) {
  auto ds = small_synth(11, 6, 3, 40);
  EXPECT_EQ(propagate_features(ds, 0), ds.features);

  Dataset pair;
  pair.graph = Graph::from_edges(2, std::vector<std::pair<NodeId, NodeId>>{{0, 1}});
  pair.features = FeatureMatrix(2, 2, std::vector<float>{1, 0, 0, 1});
  auto one = propagate_features(pair, 1);
  for (float v : one.data()) EXPECT_FLOAT_EQ(v, 0.5f);

  const std::size_t n = ds.num_nodes();
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (auto [u, v] : ds.graph.edge_list()) A(u, v) = A(v, u) = 1;
  Eigen::VectorXd dinv = A.rowwise().sum().cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd Ahat = dinv.asDiagonal() * A * dinv.asDiagonal();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), 6);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 6; ++c) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = ds.features(i, c);
  Eigen::MatrixXd oracle = Ahat * Ahat * X;
  auto two = propagate_features(ds, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(two(i, c), oracle(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)), 1e-6);
}

TEST(Prototype, SingleShotAndSeparatedClasses) {
  FeatureMatrix X(5, 3, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1, 0.9f, 0.2f, 0, 0, 0.1f, 2});
  IclTask task{{0, 1, 2}, {{0}, {1}, {2}}, {3, 4}};
  EXPECT_EQ(prototype_classify(X, task), (std::vector<std::size_t>{0, 2}));

  SynthSpec s;
  s.nodes = 200;
  s.classes = 4;
  s.dim = 8;
  s.sigma = 0.0;
  auto ds = synth_generate(s, 1);
  auto tk = sample_task(ds, 4, 2, 0, 0);
  EXPECT_DOUBLE_EQ(task_accuracy(ds, tk, prototype_classify(ds.features, tk)), 1.0);
}

TEST(Prototype, SharesTemplatesWithIcl) {
  auto ds = small_synth(12);
  IclConfig cfg;
  cfg.templates = 5;
  cfg.seed = 4;
  auto rep = evaluate_prototype(ds, 2, cfg);
  ASSERT_EQ(rep.accuracy.size(), 5u);
  auto X = propagate_features(ds, 2);
  for (std::size_t t = 0; t < 5; ++t) {
    auto task = sample_task(ds, cfg.n_way, cfg.k_shot, cfg.seed, t);
    EXPECT_DOUBLE_EQ(rep.accuracy[t], task_accuracy(ds, task, prototype_classify(X, task)));
  }
}

TEST(Evaluate, DeterministicReportAndCsv) {
  auto ds = small_synth(13);
  auto P = tiny_model(8, 5);
  IclConfig cfg;
  cfg.templates = 4;
  cfg.repeats = 2;
  cfg.walk.length = 8;
  cfg.seed = 2;
  auto a = evaluate_icl(P, ds, cfg);
  auto b = evaluate_icl(P, ds, cfg);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.mean, b.mean);
  for (double v : a.accuracy) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  auto dir = testing::temp_dir("icl_csv");
  write_icl_csv(dir / "icl.csv", "synth", cfg, a);
  std::ifstream in(dir / "icl.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0], "dataset,N,K,mode,template,accuracy");
  EXPECT_EQ(lines[1].rfind("synth,5,3,void,0,", 0), 0u);
  EXPECT_EQ(lines[5].rfind("synth,5,3,void,mean,", 0), 0u);
  EXPECT_EQ(lines[6].rfind("synth,5,3,void,std,", 0), 0u);
}

TEST(Summary, MeanAndSampleStd) {
  auto r = summarize({0.2, 0.4, 0.6});
  EXPECT_NEAR(r.mean, 0.4, 1e-15);
  EXPECT_NEAR(r.stddev, 0.2, 1e-15);
  EXPECT_EQ(summarize({0.5}).stddev, 0.0);
}

TEST(Attention, StatsBucketsAndRatio) {
  AttentionStats s;
  s.add(0, 0, 0.3);
  s.add(0, 1, 0.1);
  s.add(1, 1, 0.5);
  s.add(1, 0, 0.1);
  EXPECT_NEAR(s.mean(true), 0.4, 1e-15);
  EXPECT_NEAR(s.mean(false), 0.1, 1e-15);
  EXPECT_NEAR(s.ratio(), 4.0, 1e-12);

  auto ds = small_synth(14);
  auto task = sample_task(ds, 3, 3, 0, 0);
  auto aug = build_augmented_graph(ds, task, ClassInit::zeros);
  AttentionStats real;
  collect_attention(tiny_model(8, 6), ds, aug, task, {.length = 8}, 2, 0, real);
  ASSERT_FALSE(real.buckets.empty());
  for (const auto& [k, v] : real.buckets) {
    EXPECT_TRUE(std::ranges::binary_search(task.classes, k.first));
    EXPECT_GT(v.second, 0u);
    EXPECT_GE(v.first, 0.0);
    EXPECT_LE(v.first, static_cast<double>(v.second));
  }
}

}  // namespace
}  // namespace gspt
