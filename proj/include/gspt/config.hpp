#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gspt/error.hpp"
#include "gspt/icl.hpp"
#include "gspt/linkpred.hpp"
#include "gspt/pretrain.hpp"
#include "gspt/synth.hpp"

namespace gspt {

/// Everything a CLI run can be configured with. Encoder shape keys apply to
/// both tracks; link-pretraining keys that differ from the node track carry
/// a `link_` prefix.
struct RunConfig {
  TrainConfig train;
  LinkPretrainConfig link;
  FinetuneConfig finetune;
  IclConfig icl;
  SynthSpec synth;
  std::size_t partition_size = 10000;
  std::uint64_t seed = 0;
};

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace detail {

using Setter = std::function<void(RunConfig&, const nlohmann::json&, const std::string&)>;

inline double as_double(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' expects a number");
  return v.get<double>();
}

inline std::size_t as_count(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw ConfigError("config key '" + key + "' expects a non-negative integer");
  return v.get<std::size_t>();
}

inline std::string as_string(const nlohmann::json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' expects a string");
  return v.get<std::string>();
}

inline NegativeMode parse_negative_mode(const std::string& s) {
  if (s == "none") return NegativeMode::none;
  if (s == "random") return NegativeMode::random;
  if (s == "repeated") return NegativeMode::repeated;
  throw ConfigError("negatives must be none, random or repeated, got '" + s + "'");
}

template <class M>
Setter real(M member) {
  return [member](RunConfig& c, const nlohmann::json& v, const std::string& k) { std::invoke(member, c) = as_double(v, k); };
}

template <class M>
Setter count(M member) {
  return [member](RunConfig& c, const nlohmann::json& v, const std::string& k) { std::invoke(member, c) = as_count(v, k); };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto shape = [&](const std::string& key, std::size_t ModelShape::*field) {
      t[key] = [field](RunConfig& c, const nlohmann::json& v, const std::string& k) {
        c.train.shape.*field = c.link.shape.*field = as_count(v, k);
      };
    };
    shape("hidden_dim", &ModelShape::dim);
    shape("n_layers", &ModelShape::layers);
    shape("n_heads", &ModelShape::heads);
    shape("ffn_dim", &ModelShape::ffn_dim);

    t["walk_length"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) {
      c.train.walk.length = c.icl.walk.length = as_count(v, k);
      c.train.shape.max_len = std::max(c.train.shape.max_len, c.train.walk.length);
    };
    t["p"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) { c.train.walk.p = c.icl.walk.p = as_double(v, k); };
    t["q"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) { c.train.walk.q = c.icl.walk.q = as_double(v, k); };
    t["epochs"] = count([](RunConfig& c) -> auto& { return c.train.epochs; });
    t["peak_lr"] = real([](RunConfig& c) -> auto& { return c.train.schedule.peak_lr; });
    t["end_lr"] = real([](RunConfig& c) -> auto& { return c.train.schedule.end_lr; });
    t["warmup_updates"] = count([](RunConfig& c) -> auto& { return c.train.schedule.warmup_updates; });
    t["weight_decay"] = real([](RunConfig& c) -> auto& { return c.train.weight_decay; });
    t["batch_size"] = count([](RunConfig& c) -> auto& { return c.train.batch_size; });
    t["mask_rate"] = real([](RunConfig& c) -> auto& { return c.train.masking.mask_rate; });
    t["p_random"] = real([](RunConfig& c) -> auto& { return c.train.masking.p_random; });
    t["p_unchanged"] = real([](RunConfig& c) -> auto& { return c.train.masking.p_unchanged; });
    t["dropout"] = real([](RunConfig& c) -> auto& { return c.train.dropout.hidden; });
    t["attention_dropout"] = real([](RunConfig& c) -> auto& { return c.train.dropout.attention; });
    t["emb_dropout"] = real([](RunConfig& c) -> auto& { return c.train.dropout.emb; });
    t["negatives"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) { c.train.negatives = parse_negative_mode(as_string(v, k)); };
    t["partition_size"] = count([](RunConfig& c) -> auto& { return c.partition_size; });
    t["seed"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) { c.seed = as_count(v, k); };

    t["n_way"] = count([](RunConfig& c) -> auto& { return c.icl.n_way; });
    t["k_shot"] = count([](RunConfig& c) -> auto& { return c.icl.k_shot; });
    t["templates"] = count([](RunConfig& c) -> auto& { return c.icl.templates; });
    t["walk_repeats"] = count([](RunConfig& c) -> auto& { return c.icl.repeats; });
    t["mode"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) { c.icl.mode = parse_class_init(as_string(v, k)); };

    t["n_hops"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) {
      c.link.n_hops = c.finetune.n_hops = as_count(v, k);
      c.link.shape.max_len = std::max(c.link.shape.max_len, c.link.n_hops + 1);
    };
    t["link_epochs"] = count([](RunConfig& c) -> auto& { return c.link.epochs; });
    t["link_peak_lr"] = real([](RunConfig& c) -> auto& { return c.link.schedule.peak_lr; });
    t["link_end_lr"] = real([](RunConfig& c) -> auto& { return c.link.schedule.end_lr; });
    t["link_warmup_updates"] = count([](RunConfig& c) -> auto& { return c.link.schedule.warmup_updates; });
    t["link_weight_decay"] = real([](RunConfig& c) -> auto& { return c.link.weight_decay; });
    t["link_mask_rate"] = real([](RunConfig& c) -> auto& { return c.link.masking.mask_rate; });
    t["link_p_random"] = real([](RunConfig& c) -> auto& { return c.link.masking.p_random; });
    t["link_p_unchanged"] = real([](RunConfig& c) -> auto& { return c.link.masking.p_unchanged; });
    t["link_dropout"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) { c.link.dropout.hidden = c.finetune.dropout.hidden = as_double(v, k); };
    t["link_attention_dropout"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) {
      c.link.dropout.attention = c.finetune.dropout.attention = as_double(v, k);
    };
    t["link_emb_dropout"] = [](RunConfig& c, const nlohmann::json& v, const std::string& k) { c.link.dropout.emb = c.finetune.dropout.emb = as_double(v, k); };

    t["finetune_lr"] = real([](RunConfig& c) -> auto& { return c.finetune.lr; });
    t["finetune_epochs"] = count([](RunConfig& c) -> auto& { return c.finetune.epochs; });
    t["finetune_batch_size"] = count([](RunConfig& c) -> auto& { return c.finetune.batch_size; });
    t["projector_layers"] = count([](RunConfig& c) -> auto& { return c.finetune.projector_layers; });
    t["projector_dim"] = count([](RunConfig& c) -> auto& { return c.finetune.projector_dim; });
    t["patience"] = count([](RunConfig& c) -> auto& { return c.finetune.patience; });

    t["synth_nodes"] = count([](RunConfig& c) -> auto& { return c.synth.nodes; });
    t["synth_classes"] = count([](RunConfig& c) -> auto& { return c.synth.classes; });
    t["synth_dim"] = count([](RunConfig& c) -> auto& { return c.synth.dim; });
    t["synth_p_in"] = real([](RunConfig& c) -> auto& { return c.synth.p_in; });
    t["synth_p_out"] = real([](RunConfig& c) -> auto& { return c.synth.p_out; });
    t["synth_sigma"] = real([](RunConfig& c) -> auto& { return c.synth.sigma; });
    t["synth_separation"] = real([](RunConfig& c) -> auto& { return c.synth.separation; });
    t["synth_family"] = count([](RunConfig& c) -> auto& { return c.synth.family; });
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::setters()) keys.push_back(k);
  return keys;
}

inline std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& [k, _] : detail::setters()) {
    const auto d = edit_distance(key, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

/// Applies a flat JSON object of overrides. Unknown keys are rejected with
/// the closest valid key as a hint.
inline void apply_config(RunConfig& cfg, const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object of key/value pairs");
  const auto& table = detail::setters();
  for (const auto& [key, value] : doc.items()) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
    it->second(cfg, value, key);
  }
  cfg.train.seed = cfg.link.seed = cfg.finetune.seed = cfg.icl.seed = cfg.seed;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  RunConfig cfg;
  auto in = detail::open_in(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  apply_config(cfg, doc);
  return cfg;
}

inline void set_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.seed = cfg.train.seed = cfg.link.seed = cfg.finetune.seed = cfg.icl.seed = seed;
}

inline void set_threads(RunConfig& cfg, unsigned threads) {
  cfg.train.threads = cfg.finetune.threads = cfg.icl.threads = std::max(1u, threads);
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"train", to_json(c.train)},
          {"link", to_json(c.link)},
          {"finetune",
           {{"lr", c.finetune.lr},
            {"epochs", c.finetune.epochs},
            {"patience", c.finetune.patience},
            {"batch_size", c.finetune.batch_size},
            {"projector_layers", c.finetune.projector_layers},
            {"projector_dim", c.finetune.projector_dim},
            {"n_hops", c.finetune.n_hops}}},
          {"icl",
           {{"n_way", c.icl.n_way},
            {"k_shot", c.icl.k_shot},
            {"templates", c.icl.templates},
            {"walk_repeats", c.icl.repeats},
            {"walk_length", c.icl.walk.length},
            {"mode", class_init_name(c.icl.mode)}}},
          {"synth",
           {{"nodes", c.synth.nodes},
            {"classes", c.synth.classes},
            {"dim", c.synth.dim},
            {"p_in", c.synth.p_in},
            {"p_out", c.synth.p_out},
            {"sigma", c.synth.sigma},
            {"separation", c.synth.separation},
            {"family", c.synth.family}}},
          {"partition_size", c.partition_size},
          {"seed", c.seed}};
}

}  // namespace gspt
