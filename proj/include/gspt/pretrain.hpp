#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspt/checkpoint.hpp"
#include "gspt/dataset.hpp"
#include "gspt/node_objective.hpp"
#include "gspt/optimizer.hpp"
#include "gspt/parallel.hpp"
#include "gspt/partition.hpp"
#include "gspt/sequencer.hpp"
#include "gspt/walker.hpp"

namespace gspt {

struct TrainConfig {
  ModelShape shape{768, 3, 12, 3072, 20};
  std::size_t epochs = 10;
  ScheduleConfig schedule;
  double weight_decay = 0.01;
  std::size_t batch_size = 1024;
  WalkConfig walk;
  MaskingConfig masking;
  DropoutConfig dropout{0.3, 0.3, 0.3};
  NegativeMode negatives = NegativeMode::repeated;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    shape.validate();
    schedule.validate();
    walk.validate();
    masking.validate();
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (shape.max_len < walk.length) throw ConfigError("positional table shorter than walk_length");
  }
};

inline const char* negative_mode_name(NegativeMode m) {
  switch (m) {
    case NegativeMode::none: return "none";
    case NegativeMode::random: return "random";
    case NegativeMode::repeated: return "repeated";
  }
  return "?";
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"arch", shape_to_json(c.shape)},
          {"epochs", c.epochs},
          {"peak_lr", c.schedule.peak_lr},
          {"end_lr", c.schedule.end_lr},
          {"warmup_updates", c.schedule.warmup_updates},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"walk_length", c.walk.length},
          {"p", c.walk.p},
          {"q", c.walk.q},
          {"mask_rate", c.masking.mask_rate},
          {"p_random", c.masking.p_random},
          {"p_unchanged", c.masking.p_unchanged},
          {"emb_dropout", c.dropout.emb},
          {"attention_dropout", c.dropout.attention},
          {"dropout", c.dropout.hidden},
          {"negatives", negative_mode_name(c.negatives)},
          {"seed", c.seed}};
}

/// Pretraining corpus: independent graphs (partitions), each with its own
/// feature rows. Sequences address a shared table built by stacking parts.
struct Corpus {
  struct Part {
    Graph graph;
    FeatureMatrix features;
  };
  std::vector<Part> parts;

  void add(Graph g, FeatureMatrix x) {
    if (x.rows() != g.num_nodes()) throw DataError("corpus part: feature rows != node count");
    if (!parts.empty() && x.cols() != parts.front().features.cols())
      throw DataError("inconsistent feature dimension across partitions: " + std::to_string(x.cols()) + " vs " +
                      std::to_string(parts.front().features.cols()));
    parts.push_back({std::move(g), std::move(x)});
  }

  std::size_t dim() const { return parts.empty() ? 0 : parts.front().features.cols(); }
  std::size_t num_nodes() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.graph.num_nodes();
    return n;
  }

  static Corpus from_partition(const Dataset& ds, const PartitionMap& pm) {
    Corpus c;
    for (std::size_t k = 0; k < pm.part_sizes.size(); ++k) {
      auto [sub, map] = induced_subgraph(ds.graph, pm, k);
      FeatureMatrix x(map.size(), ds.features.cols());
      for (std::size_t i = 0; i < map.size(); ++i) std::ranges::copy(ds.features.row(map[i]), x.row(i).begin());
      c.add(std::move(sub), std::move(x));
    }
    return c;
  }

  Corpus subset(const std::vector<std::size_t>& ids) const {
    Corpus c;
    for (auto i : ids) c.add(parts.at(i).graph, parts.at(i).features);
    return c;
  }
};

/// Partition indices for a corpus fraction: round(f*P) parts, at least one,
/// taken as a prefix of one seeded shuffle so smaller fractions nest inside
/// larger ones.
inline std::vector<std::size_t> select_fraction(std::size_t num_parts, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("fraction must lie in (0,1]");
  if (num_parts == 0) throw DataError("empty corpus");
  std::vector<std::size_t> order(num_parts);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_key(seed, "corpus-fraction"));
  for (std::size_t i = num_parts; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(num_parts))));
  order.resize(std::min(k, num_parts));
  std::sort(order.begin(), order.end());
  return order;
}

struct StepRecord {
  std::size_t step;
  std::size_t partition;
  double loss;
  double lr;
};

struct TrainResult {
  ModelParams<float> params;
  std::vector<StepRecord> history;
  std::vector<double> epoch_loss;  // mean step loss per epoch
  std::size_t degenerate_terms = 0;
};

inline std::size_t total_steps(const Corpus& corpus, const TrainConfig& cfg) {
  std::size_t per_epoch = 0;
  for (const auto& p : corpus.parts) per_epoch += (p.graph.num_nodes() + cfg.batch_size - 1) / cfg.batch_size;
  return per_epoch * cfg.epochs;
}

/// Builds the training sequences for one batch. `walks` are local ids;
/// `offset` maps them into the stacked feature table.
inline std::vector<MaskedSequence> build_batch(const WalkSet& walks, std::span<const std::uint32_t> starts, std::size_t offset,
                                               std::size_t part_nodes, std::size_t table_rows, const TrainConfig& cfg,
                                               std::uint64_t batch_key) {
  std::vector<MaskedSequence> seqs(starts.size());
  std::vector<NodeId> pool(part_nodes);
  std::iota(pool.begin(), pool.end(), static_cast<NodeId>(offset));
  parallel_for(starts.size(), cfg.threads, [&](std::size_t i) {
    Rng rng(derive_key({batch_key, starts[i]}));
    auto w = walks.walk(starts[i]);
    std::vector<NodeId> global(w.begin(), w.end());
    for (auto& v : global) v += static_cast<NodeId>(offset);
    seqs[i] = apply_masking(inject_distractor(global, pool, cfg.negatives, rng), cfg.masking, table_rows, rng);
  });
  return seqs;
}

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Masked-reconstruction pretraining. Each epoch regenerates one walk per
/// node in every partition; batches hold walks of a single partition and are
/// visited in a seeded random order.
inline TrainResult pretrain(const TrainConfig& cfg, const Corpus& corpus, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (corpus.parts.empty()) throw DataError("empty corpus");
  if (corpus.dim() != cfg.shape.dim)
    throw ConfigError("hidden_dim " + std::to_string(cfg.shape.dim) + " != feature dimension " + std::to_string(corpus.dim()));

  std::vector<std::size_t> offsets;
  FeatureMatrix table(corpus.num_nodes(), corpus.dim());
  {
    std::size_t off = 0;
    for (const auto& p : corpus.parts) {
      offsets.push_back(off);
      std::ranges::copy(p.features.data(), table.data().begin() + static_cast<std::ptrdiff_t>(off * corpus.dim()));
      off += p.graph.num_nodes();
    }
  }

  const std::size_t total = total_steps(corpus, cfg);
  lr_at_step(cfg.schedule, 0, total);  // rejects warmup > total up front

  TrainResult res;
  res.params = ModelParams<float>::init(cfg.shape, derive_key(cfg.seed, "pretrain"));
  auto grads = ModelParams<float>::zeros(cfg.shape);
  const auto prefs = tensor_refs<float>(res.params);
  const auto grefs = tensor_refs<float>(grads);
  AdamW<float> opt({.weight_decay = cfg.weight_decay});

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    struct Job {
      std::size_t part;
      std::size_t begin, end;
    };
    std::vector<WalkSet> walks(corpus.parts.size());
    std::vector<std::vector<std::uint32_t>> orders(corpus.parts.size());
    std::vector<Job> jobs;
    for (std::size_t k = 0; k < corpus.parts.size(); ++k) {
      const std::size_t n = corpus.parts[k].graph.num_nodes();
      walks[k] = generate_epoch_walks(corpus.parts[k].graph, cfg.walk, derive_key({cfg.seed, hash_string("walks"), k}), epoch, cfg.threads);
      auto& order = orders[k];
      order.resize(n);
      std::iota(order.begin(), order.end(), 0u);
      Rng rng(derive_key({cfg.seed, hash_string("order"), epoch, k}));
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
      for (std::size_t b = 0; b < n; b += cfg.batch_size) jobs.push_back({k, b, std::min(n, b + cfg.batch_size)});
    }
    Rng job_rng(derive_key({cfg.seed, hash_string("jobs"), epoch}));
    for (std::size_t i = jobs.size(); i > 1; --i) std::swap(jobs[i - 1], jobs[job_rng.uniform_index(i)]);

    double epoch_sum = 0;
    for (const auto& job : jobs) {
      ++step;
      const std::span<const std::uint32_t> starts(orders[job.part].data() + job.begin, job.end - job.begin);
      const auto seqs = build_batch(walks[job.part], starts, offsets[job.part], corpus.parts[job.part].graph.num_nodes(), table.rows(), cfg,
                                    derive_key({cfg.seed, hash_string("batch"), epoch, job.part, job.begin}));
      for (auto& g : grefs) g.tensor->setZero();
      Rng drop_rng(derive_key({cfg.seed, hash_string("dropout"), step}));
      const auto r = node_objective<float>(res.params, seqs, table, cfg.dropout, Mode::train, &drop_rng, &grads);
      check_finite_grads(grads);
      const double lr = lr_at_step(cfg.schedule, step, total);
      opt.step(prefs, grefs, lr);
      res.history.push_back({step, job.part, r.loss, lr});
      res.degenerate_terms += r.degenerate;
      epoch_sum += r.loss;
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(jobs.size()));
    if (on_epoch) on_epoch(epoch, res.epoch_loss.back());
  }
  return res;
}

inline void write_loss_csv(const std::filesystem::path& p, const std::vector<StepRecord>& history) {
  auto out = detail::open_out(p);
  out << "step,partition,loss,lr\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", r.step, r.partition, r.loss, r.lr);
    out << buf;
  }
  if (!out) throw DataError("write failed: " + p.string());
}

inline Checkpoint pretrain_checkpoint(const TrainResult& res, const TrainConfig& cfg, nlohmann::json extra = nlohmann::json::object()) {
  extra["kind"] = "node";
  extra["step"] = res.history.size();
  extra["config"] = to_json(cfg);
  return model_checkpoint(res.params, std::move(extra));
}

}  // namespace gspt
