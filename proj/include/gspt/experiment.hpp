#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "gspt/dataset.hpp"
#include "gspt/icl.hpp"
#include "gspt/partition.hpp"
#include "gspt/pretrain.hpp"

namespace gspt {

/// Splits every dataset into blocks of about `partition_size` nodes and
/// stacks the blocks into one corpus. A dataset directory holding a
/// `partition.tsv` uses that assignment instead.
inline Corpus corpus_from_datasets(const std::vector<std::filesystem::path>& dirs, std::size_t partition_size, std::uint64_t seed) {
  Corpus c;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const auto ds = load_dataset(dirs[i]);
    const auto stored = dirs[i] / "partition.tsv";
    const auto pm = std::filesystem::exists(stored) ? read_partition_file(stored, ds.graph.num_nodes())
                                                    : partition(ds.graph, partition_size, derive_key({seed, hash_string("partition"), i}));
    for (auto& part : Corpus::from_partition(ds, pm).parts) c.add(std::move(part.graph), std::move(part.features));
  }
  return c;
}

/// Average ranks, ties sharing the mean of their positions (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

/// Spearman rank correlation. Zero when either side is constant.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DataError("spearman: need two equal-length series of length >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx == 0 || syy == 0 ? 0.0 : sxy / std::sqrt(sxx * syy);
}

/// Attention statistics over the first `cfg.templates` task templates.
inline AttentionStats attention_report(const ModelParams<float>& P, const Dataset& ds, const IclConfig& cfg) {
  AttentionStats stats;
  for (std::size_t t = 0; t < cfg.templates; ++t) {
    const auto task = sample_task(ds, cfg.n_way, cfg.k_shot, cfg.seed, t);
    const auto aug = build_augmented_graph(ds, task, cfg.mode);
    collect_attention(P, ds, aug, task, cfg.walk, cfg.repeats, derive_key({cfg.seed, hash_string("attention"), t}), stats);
  }
  return stats;
}

/// Writes through a sibling temporary and renames over the target.
inline void write_text_atomic(const std::filesystem::path& p, const std::string& text) {
  auto tmp = p;
  tmp += ".tmp";
  {
    auto out = detail::open_out(tmp);
    out << text;
    out.flush();
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

}  // namespace gspt
