#include <gtest/gtest.h>

#include <fstream>

#include "gspt/experiment.hpp"
#include "gspt/synth.hpp"
#include "test_support.hpp"

namespace gspt {
namespace {

TEST(Spearman, Examples) {
  EXPECT_DOUBLE_EQ(spearman({0.25, 0.5, 1.0}, {0.1, 0.2, 0.9}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({0.25, 0.5, 1.0}, {3, 2, 1}), -1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {5, 5, 5}), 0.0);
  EXPECT_NEAR(spearman({1, 2, 3}, {1, 1, 2}), 1.5 / std::sqrt(3.0), 1e-15);
  EXPECT_EQ(average_ranks({3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
  EXPECT_THROW(spearman({1}, {1}), DataError);
  EXPECT_THROW(spearman({1, 2}, {1, 2, 3}), DataError);
}

TEST(CorpusFromDatasets, PartitionsEachDataset) {
  auto dir = testing::temp_dir("corpus");
  SynthSpec s;
  s.nodes = 300;
  save_dataset(dir / "a", synth_generate(s, 1));
  save_dataset(dir / "b", synth_generate(s, 2));
  auto whole = corpus_from_datasets({dir / "a", dir / "b"}, 1000, 0);
  EXPECT_EQ(whole.parts.size(), 2u);
  EXPECT_EQ(whole.num_nodes(), 600u);
  auto split = corpus_from_datasets({dir / "a", dir / "b"}, 100, 0);
  EXPECT_GE(split.parts.size(), 6u);
  EXPECT_EQ(split.num_nodes(), 600u);

  PartitionMap pm;
  pm.assignment.assign(300, 0);
  for (std::size_t v = 0; v < 300; ++v) pm.assignment[v] = v % 3;
  pm.part_sizes = {100, 100, 100};
  write_partition_file(dir / "a" / "partition.tsv", pm);
  auto stored = corpus_from_datasets({dir / "a"}, 1000, 0);
  ASSERT_EQ(stored.parts.size(), 3u);
  for (const auto& p : stored.parts) EXPECT_EQ(p.graph.num_nodes(), 100u);
}

TEST(AttentionReport, DeterministicAndNormalized) {
  SynthSpec s;
  s.nodes = 200;
  auto ds = synth_generate(s, 3);
  auto P = ModelParams<float>::init({.dim = 32, .layers = 1, .heads = 2, .ffn_dim = 32, .max_len = 20}, 4);
  IclConfig cfg;
  cfg.templates = 2;
  cfg.repeats = 1;
  auto a = attention_report(P, ds, cfg), b = attention_report(P, ds, cfg);
  ASSERT_FALSE(a.buckets.empty());
  EXPECT_EQ(a.mean(true), b.mean(true));
  EXPECT_EQ(a.mean(false), b.mean(false));
  EXPECT_GT(a.mean(true), 0.0);
  EXPECT_LE(a.mean(true), 1.0);
  EXPECT_GT(a.ratio(), 0.0);
}

TEST(WriteTextAtomic, ReplacesTarget) {
  auto dir = testing::temp_dir("atomic");
  write_text_atomic(dir / "m.json", "one\n");
  write_text_atomic(dir / "m.json", "two\n");
  std::ifstream in(dir / "m.json");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "two");
  EXPECT_FALSE(std::filesystem::exists(dir / "m.json.tmp"));
  EXPECT_THROW(write_text_atomic(dir / "missing" / "m.json", "x"), DataError);
}

}  // namespace
}  // namespace gspt
