#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gspt/error.hpp"
#include "gspt/graph.hpp"
#include "gspt/rng.hpp"

namespace gspt {

enum class TokenKind : std::uint8_t { feature, mask, random, unchanged, distractor };

/// How the tail of a training sequence is corrupted.
enum class NegativeMode : std::uint8_t {
  none,      // whole walk kept
  random,    // K independent uniform nodes
  repeated,  // one node repeated K times
};

struct MaskingConfig {
  double mask_rate = 0.2;
  double p_random = 0.2;
  double p_unchanged = 0.2;

  void validate() const {
    if (!(mask_rate > 0 && mask_rate < 1)) throw ConfigError("mask_rate must lie in (0,1)");
    if (p_random < 0 || p_unchanged < 0 || p_random + p_unchanged > 1) throw ConfigError("p_random + p_unchanged must lie in [0,1]");
  }
};

/// A training sequence. `node_ids` hold the ground-truth node at every
/// position (pooling and loss use these); `input_ids` hold what the model
/// actually sees, which differs only at RANDOM positions. Ids index the
/// feature table.
struct MaskedSequence {
  std::vector<NodeId> node_ids;
  std::vector<NodeId> input_ids;
  std::vector<TokenKind> kinds;
  std::vector<std::uint32_t> targets;  // ascending positions
  std::optional<NodeId> distractor_id;
  std::size_t num_distractors = 0;

  std::size_t length() const noexcept { return node_ids.size(); }
};

struct DistractedWalk {
  std::vector<NodeId> node_ids;
  std::size_t num_distractors = 0;
  std::optional<NodeId> distractor_id;
};

/// Replaces a random-length suffix of the walk with negatives. K is uniform
/// on [0, l-1], so at least one real node survives. `pool` lists the node ids
/// negatives are drawn from.
inline DistractedWalk inject_distractor(std::span<const NodeId> walk, std::span<const NodeId> pool, NegativeMode mode, Rng& rng) {
  const std::size_t l = walk.size();
  if (l < 2) throw ConfigError("walk length must be >= 2");
  DistractedWalk out{{walk.begin(), walk.end()}, 0, std::nullopt};
  if (mode == NegativeMode::none) return out;
  const std::size_t k = rng.uniform_index(l);
  out.num_distractors = k;
  if (k == 0) return out;
  if (mode == NegativeMode::repeated) {
    const NodeId vd = pool[rng.uniform_index(pool.size())];
    out.distractor_id = vd;
    std::fill(out.node_ids.end() - static_cast<std::ptrdiff_t>(k), out.node_ids.end(), vd);
  } else {
    for (std::size_t t = l - k; t < l; ++t) out.node_ids[t] = pool[rng.uniform_index(pool.size())];
  }
  return out;
}

/// Number of loss targets among `eligible` real positions.
inline std::size_t target_count(std::size_t eligible, double mask_rate) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(mask_rate * static_cast<double>(eligible))));
}

/// BERT-style corruption of the real (non-distractor) prefix. Targets are a
/// fixed-size uniform sample; each becomes MASK, RANDOM or UNCHANGED. RANDOM
/// replacements are drawn uniformly from [0, num_feature_rows).
inline MaskedSequence apply_masking(DistractedWalk walk, const MaskingConfig& cfg, std::size_t num_feature_rows, Rng& rng) {
  const std::size_t l = walk.node_ids.size();
  const std::size_t eligible = l - walk.num_distractors;
  if (eligible == 0) throw DataError("apply_masking: sequence has no real positions");
  MaskedSequence seq;
  seq.node_ids = std::move(walk.node_ids);
  seq.input_ids = seq.node_ids;
  seq.kinds.assign(l, TokenKind::feature);
  std::fill(seq.kinds.begin() + static_cast<std::ptrdiff_t>(eligible), seq.kinds.end(), TokenKind::distractor);
  seq.distractor_id = walk.distractor_id;
  seq.num_distractors = walk.num_distractors;

  const std::size_t m = std::min(eligible, target_count(eligible, cfg.mask_rate));
  std::vector<std::uint32_t> positions(eligible);
  for (std::size_t i = 0; i < eligible; ++i) positions[i] = static_cast<std::uint32_t>(i);
  for (std::size_t i = 0; i < m; ++i) std::swap(positions[i], positions[i + rng.uniform_index(eligible - i)]);
  seq.targets.assign(positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(seq.targets.begin(), seq.targets.end());

  for (auto t : seq.targets) {
    const double u = rng.uniform01();
    if (u < cfg.p_random) {
      seq.kinds[t] = TokenKind::random;
      seq.input_ids[t] = static_cast<NodeId>(rng.uniform_index(num_feature_rows));
    } else if (u < cfg.p_random + cfg.p_unchanged) {
      seq.kinds[t] = TokenKind::unchanged;
    } else {
      seq.kinds[t] = TokenKind::mask;
    }
  }
  return seq;
}

/// An uncorrupted sequence (inference).
inline MaskedSequence plain_sequence(std::span<const NodeId> nodes) {
  MaskedSequence seq;
  seq.node_ids.assign(nodes.begin(), nodes.end());
  seq.input_ids = seq.node_ids;
  seq.kinds.assign(nodes.size(), TokenKind::feature);
  return seq;
}

}  // namespace gspt
