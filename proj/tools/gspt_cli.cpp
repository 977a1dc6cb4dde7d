// gspt: command-line driver for pretraining, in-context evaluation and the
// link-prediction track.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gspt/gspt.hpp"

#ifndef GSPT_GIT_DESCRIBE
#define GSPT_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace gspt;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  unsigned threads = 1;
  std::vector<std::string> datasets;
  std::vector<std::string> link_datasets;
  std::string eval_dataset;
  std::string link_target;
  std::string checkpoint;
  std::string mode;
  double fraction = 1.0;
  std::size_t seeds = 1;
  std::size_t prototype_hops = 0;
};

struct Run {
  std::string command;
  Options opt;
  RunConfig cfg;
  json outputs = json::array();
  json results = json::object();

  fs::path out(const std::string& name) {
    auto p = fs::path(opt.out) / name;
    outputs.push_back(p.string());
    return p;
  }
};

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<fs::path> paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

const std::string& single_dataset(const Options& o) {
  if (o.datasets.size() != 1) throw ConfigError("this command takes exactly one --dataset");
  return o.datasets.front();
}

std::string dataset_name(const fs::path& p) {
  auto n = p.lexically_normal().filename();
  if (n.empty()) n = p.lexically_normal().parent_path().filename();
  return n.string();
}

ModelParams<float> node_model(const std::string& path) {
  const auto ck = read_checkpoint(path);
  const auto kind = ck.meta.value("kind", std::string("node"));
  if (kind != "node") throw DataError(path + ": expected a node-track checkpoint, found kind '" + kind + "'");
  return model_from_checkpoint(ck);
}

Corpus select(const Corpus& c, double fraction, std::uint64_t seed, std::vector<std::size_t>* ids_out = nullptr) {
  auto ids = select_fraction(c.parts.size(), fraction, seed);
  if (ids_out) *ids_out = ids;
  return fraction >= 1.0 ? c : c.subset(ids);
}

TrainResult run_pretrain(const TrainConfig& cfg, const Corpus& corpus) {
  std::cerr << "pretraining on " << corpus.parts.size() << " partitions, " << corpus.num_nodes() << " nodes, " << total_steps(corpus, cfg)
            << " steps\n";
  return pretrain(cfg, corpus, [](std::size_t epoch, double loss) { std::cerr << "  epoch " << epoch + 1 << " loss " << fmt(loss) << '\n'; });
}

// ---------------------------------------------------------------------------

void cmd_synth(Run& r) {
  const auto ds = synth_generate(r.cfg.synth, r.cfg.seed);
  save_dataset(r.opt.out, ds);
  r.outputs.push_back(r.opt.out);
  r.results["nodes"] = ds.num_nodes();
  r.results["edges"] = ds.graph.num_edges();
  r.results["homophily"] = edge_homophily(ds);
  std::cout << "wrote " << r.opt.out << ": " << ds.num_nodes() << " nodes, " << ds.graph.num_edges() << " edges, homophily "
            << fmt(edge_homophily(ds), "%.4f") << '\n';
}

void cmd_partition(Run& r) {
  const auto ds = load_dataset(single_dataset(r.opt));
  const auto pm = partition(ds.graph, r.cfg.partition_size, derive_key({r.cfg.seed, hash_string("partition"), 0}));
  write_partition_file(r.out("partition.tsv"), pm);
  const auto cut = edge_cut(ds.graph, pm.assignment);
  r.results["parts"] = pm.num_parts();
  r.results["edge_cut"] = cut;
  std::cout << pm.num_parts() << " parts, edge cut " << cut << " of " << ds.graph.num_edges() << '\n';
}

void cmd_pretrain(Run& r) {
  if (r.opt.datasets.empty()) throw ConfigError("pretrain needs at least one --dataset");
  const auto full = corpus_from_datasets(paths(r.opt.datasets), r.cfg.partition_size, r.cfg.seed);
  std::vector<std::size_t> ids;
  const auto corpus = select(full, r.opt.fraction, r.cfg.seed, &ids);
  const auto res = run_pretrain(r.cfg.train, corpus);
  write_checkpoint(r.out("checkpoint.ckpt"), pretrain_checkpoint(res, r.cfg.train, {{"fraction", r.opt.fraction}, {"partitions", ids}}));
  write_loss_csv(r.out("loss.csv"), res.history);
  r.results["epoch_loss"] = res.epoch_loss;
  r.results["fraction"] = r.opt.fraction;
}

void cmd_icl_eval(Run& r) {
  if (r.opt.checkpoint.empty()) throw ConfigError("icl-eval needs --checkpoint");
  const auto& dir = single_dataset(r.opt);
  const auto P = node_model(r.opt.checkpoint);
  const auto ds = load_dataset(dir);
  const auto name = dataset_name(dir);
  const auto& icl = r.cfg.icl;

  const auto rep = evaluate_icl(P, ds, icl);
  write_icl_csv(r.out("icl.csv"), name, icl, rep);
  const auto base = evaluate_prototype(ds, r.opt.prototype_hops, icl);
  write_icl_csv(r.out("prototype.csv"), name, icl, base);

  IclConfig att = icl;
  att.templates = std::min<std::size_t>(icl.templates, 10);
  att.repeats = 2;
  const auto stats = attention_report(P, ds, att);
  write_attention_csv(r.out("attention.csv"), stats);

  r.results["accuracy_mean"] = rep.mean;
  r.results["accuracy_std"] = rep.stddev;
  r.results["prototype_mean"] = base.mean;
  r.results["attention_same"] = stats.mean(true);
  r.results["attention_diff"] = stats.mean(false);
  r.results["attention_ratio"] = stats.ratio();
  std::cout << name << ' ' << icl.n_way << "-way " << icl.k_shot << "-shot " << class_init_name(icl.mode) << ": " << fmt(rep.mean, "%.4f") << " +- "
            << fmt(rep.stddev, "%.4f") << " (prototype " << fmt(base.mean, "%.4f") << ", attention ratio " << fmt(stats.ratio(), "%.3f") << ")\n";
}

void cmd_link_pretrain(Run& r) {
  if (r.opt.datasets.empty()) throw ConfigError("link-pretrain needs at least one --dataset");
  const auto full = corpus_from_datasets(paths(r.opt.datasets), r.cfg.partition_size, r.cfg.seed);
  std::vector<std::size_t> ids;
  const auto corpus = select(full, r.opt.fraction, r.cfg.seed, &ids);
  std::cerr << "link pretraining on " << corpus.parts.size() << " graphs for " << r.cfg.link.epochs << " epochs\n";
  const auto res = link_pretrain(r.cfg.link, corpus);
  json meta{{"kind", "link"}, {"config", to_json(r.cfg.link)}, {"fraction", r.opt.fraction}, {"partitions", ids}, {"step", res.history.size()}};
  write_checkpoint(r.out("link.ckpt"), link_checkpoint(res.params, std::move(meta)));
  write_loss_csv(r.out("loss.csv"), res.history);
  r.results["epoch_loss_first"] = res.epoch_loss.front();
  r.results["epoch_loss_last"] = res.epoch_loss.back();
  std::cout << "link loss " << fmt(res.epoch_loss.front()) << " -> " << fmt(res.epoch_loss.back()) << '\n';
}

void write_results_csv(const fs::path& p, const std::string& dataset, const std::string& init, std::uint64_t seed, const MrrPair& m) {
  auto out = detail::open_out(p);
  out << "dataset,init,seed,valid_mrr,test_mrr\n" << dataset << ',' << init << ',' << seed << ',' << fmt(m.valid) << ',' << fmt(m.test) << '\n';
}

struct FinetuneOutcome {
  FinetuneResult fit;
  MrrPair mrr;
};

FinetuneOutcome finetune_on(const Dataset& ds, const LinkParams<float>* pretrained, const ModelShape& shape, const FinetuneConfig& fc,
                            std::uint64_t split_seed) {
  auto [train_g, split] = split_edges(ds.graph, split_seed);
  auto fit = finetune(make_link_model(shape, fc, pretrained), train_g, ds.features, split, fc);
  auto mrr = evaluate_link_model(fit.model, train_g, ds.features, split, fc.n_hops, fc.threads);
  return {std::move(fit), mrr};
}

void cmd_link_finetune(Run& r) {
  const auto& dir = single_dataset(r.opt);
  const auto ds = load_dataset(dir);
  std::optional<LinkParams<float>> pre;
  if (!r.opt.checkpoint.empty()) pre = link_params_from_checkpoint(read_checkpoint(r.opt.checkpoint));
  const auto shape = pre ? pre->encoder.shape : r.cfg.link.shape;
  const std::string init = pre ? "pretrained" : "scratch";
  const auto& fc = r.cfg.finetune;

  auto [train_g, split] = split_edges(ds.graph, r.cfg.seed);
  write_split_files(r.out("split.tsv"), r.out("neg.tsv"), split);
  auto fit = finetune(make_link_model(shape, fc, pre ? &*pre : nullptr), train_g, ds.features, split, fc);
  const auto mrr = evaluate_link_model(fit.model, train_g, ds.features, split, fc.n_hops, fc.threads);

  json meta{{"kind", "link-model"}, {"init", init}, {"split_seed", r.cfg.seed}, {"n_hops", fc.n_hops}, {"best_epoch", fit.best_epoch}};
  write_checkpoint(r.out("model.ckpt"), link_model_checkpoint(fit.model, std::move(meta)));
  write_results_csv(r.out("results.csv"), dataset_name(dir), init, r.cfg.seed, mrr);
  r.results["valid_mrr"] = mrr.valid;
  r.results["test_mrr"] = mrr.test;
  r.results["epochs_run"] = fit.epochs_run;
  std::cout << init << ": valid MRR " << fmt(mrr.valid, "%.4f") << ", test MRR " << fmt(mrr.test, "%.4f") << " after " << fit.epochs_run
            << " epochs\n";
}

void cmd_link_eval(Run& r) {
  if (r.opt.checkpoint.empty()) throw ConfigError("link-eval needs --checkpoint");
  const auto& dir = single_dataset(r.opt);
  const auto ck = read_checkpoint(r.opt.checkpoint);
  const auto model = link_model_from_checkpoint(ck);
  const auto ds = load_dataset(dir);
  const auto split_seed = ck.meta.at("split_seed").get<std::uint64_t>();
  const auto n_hops = ck.meta.at("n_hops").get<std::size_t>();
  auto [train_g, split] = split_edges(ds.graph, split_seed);
  const auto mrr = evaluate_link_model(model, train_g, ds.features, split, n_hops, r.cfg.finetune.threads);
  const auto init = ck.meta.value("init", std::string("unknown"));
  write_results_csv(r.out("results.csv"), dataset_name(dir), init, split_seed, mrr);
  r.results["valid_mrr"] = mrr.valid;
  r.results["test_mrr"] = mrr.test;
  std::cout << init << ": valid MRR " << fmt(mrr.valid, "%.4f") << ", test MRR " << fmt(mrr.test, "%.4f") << '\n';
}

const char* variant_name(NegativeMode m) {
  switch (m) {
    case NegativeMode::none: return "no-ns";
    case NegativeMode::random: return "random-ns";
    case NegativeMode::repeated: return "ours";
  }
  return "?";
}

void cmd_ablation(Run& r) {
  if (r.opt.datasets.empty() || r.opt.eval_dataset.empty()) throw ConfigError("ablation needs --dataset (corpus) and --eval-dataset");
  const auto corpus = corpus_from_datasets(paths(r.opt.datasets), r.cfg.partition_size, r.cfg.seed);
  const auto eval = load_dataset(r.opt.eval_dataset);
  const NegativeMode modes[] = {NegativeMode::none, NegativeMode::random, NegativeMode::repeated};
  std::ostringstream csv;
  csv << "variant,seed,mean_accuracy,std_accuracy\n";
  double sums[3] = {};
  for (std::size_t s = 0; s < r.opt.seeds; ++s) {
    const auto seed = r.cfg.seed + s;
    for (std::size_t m = 0; m < 3; ++m) {
      auto tc = r.cfg.train;
      tc.negatives = modes[m];
      tc.seed = seed;
      const auto res = run_pretrain(tc, corpus);
      auto ic = r.cfg.icl;
      ic.seed = seed;
      const auto rep = evaluate_icl(res.params, eval, ic);
      sums[m] += rep.mean;
      const std::string tag = std::string(variant_name(modes[m])) + "_seed" + std::to_string(seed);
      write_checkpoint(r.out("ablation_" + tag + ".ckpt"), pretrain_checkpoint(res, tc, {{"variant", variant_name(modes[m])}}));
      csv << variant_name(modes[m]) << ',' << seed << ',' << fmt(rep.mean) << ',' << fmt(rep.stddev) << '\n';
      std::cout << variant_name(modes[m]) << " seed " << seed << ": " << fmt(rep.mean, "%.4f") << '\n';
    }
  }
  for (std::size_t m = 0; m < 3; ++m) {
    const double mean = sums[m] / static_cast<double>(r.opt.seeds);
    csv << variant_name(modes[m]) << ",mean," << fmt(mean) << ",\n";
    r.results[variant_name(modes[m])] = mean;
  }
  write_text_atomic(r.out("ablation.csv"), csv.str());
}

void cmd_scaling_report(Run& r) {
  if (r.opt.datasets.empty() || r.opt.eval_dataset.empty()) throw ConfigError("scaling-report needs --dataset (corpus) and --eval-dataset");
  const auto node_corpus = corpus_from_datasets(paths(r.opt.datasets), r.cfg.partition_size, r.cfg.seed);
  const auto link_corpus =
      r.opt.link_datasets.empty() ? node_corpus : corpus_from_datasets(paths(r.opt.link_datasets), r.cfg.partition_size, r.cfg.seed);
  const auto eval = load_dataset(r.opt.eval_dataset);
  const auto target = r.opt.link_target.empty() ? eval : load_dataset(r.opt.link_target);
  const double fractions[] = {0.25, 0.5, 1.0};

  std::ostringstream csv, summary;
  csv << "fraction,seed,partitions,icl_accuracy,valid_mrr,test_mrr\n";
  summary << "metric,seed,spearman\n";
  double rho_acc = 0, rho_mrr = 0;
  for (std::size_t s = 0; s < r.opt.seeds; ++s) {
    const auto seed = r.cfg.seed + s;
    std::vector<double> fx, acc, mrr;
    for (double f : fractions) {
      std::vector<std::size_t> ids;
      auto tc = r.cfg.train;
      tc.seed = seed;
      const auto res = run_pretrain(tc, select(node_corpus, f, seed, &ids));
      auto ic = r.cfg.icl;
      ic.seed = seed;
      const auto rep = evaluate_icl(res.params, eval, ic);
      write_checkpoint(r.out("scaling_f" + fmt(f, "%.2f") + "_seed" + std::to_string(seed) + ".ckpt"),
                       pretrain_checkpoint(res, tc, {{"fraction", f}, {"partitions", ids}}));

      auto lc = r.cfg.link;
      lc.seed = seed;
      const auto lres = link_pretrain(lc, select(link_corpus, f, seed));
      auto fc = r.cfg.finetune;
      fc.seed = seed;
      const auto ft = finetune_on(target, &lres.params, lc.shape, fc, seed);

      csv << fmt(f, "%.2f") << ',' << seed << ',' << ids.size() << ',' << fmt(rep.mean) << ',' << fmt(ft.mrr.valid) << ',' << fmt(ft.mrr.test) << '\n';
      std::cout << "fraction " << fmt(f, "%.2f") << " seed " << seed << ": accuracy " << fmt(rep.mean, "%.4f") << ", test MRR "
                << fmt(ft.mrr.test, "%.4f") << '\n';
      fx.push_back(f);
      acc.push_back(rep.mean);
      mrr.push_back(ft.mrr.test);
    }
    const double ra = spearman(fx, acc), rm = spearman(fx, mrr);
    summary << "icl_accuracy," << seed << ',' << fmt(ra, "%.4f") << "\ntest_mrr," << seed << ',' << fmt(rm, "%.4f") << '\n';
    rho_acc += ra;
    rho_mrr += rm;
  }
  rho_acc /= static_cast<double>(r.opt.seeds);
  rho_mrr /= static_cast<double>(r.opt.seeds);
  summary << "icl_accuracy,mean," << fmt(rho_acc, "%.4f") << "\ntest_mrr,mean," << fmt(rho_mrr, "%.4f") << '\n';
  write_text_atomic(r.out("scaling.csv"), csv.str());
  write_text_atomic(r.out("scaling_summary.csv"), summary.str());
  r.results["spearman_accuracy"] = rho_acc;
  r.results["spearman_mrr"] = rho_mrr;
}

}  // namespace

int main(int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  CLI::App app{"Graph sequence pretraining: node and link tracks"};
  app.require_subcommand(1, 1);
  Options opt;
  app.add_option("--config", opt.config, "JSON file of hyperparameter overrides")->check(CLI::ExistingFile);
  app.add_option("--seed", opt.seed, "run seed (overrides the config)");
  app.add_option("--out", opt.out, "output directory")->capture_default_str();
  app.add_option("--threads", opt.threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  auto sub = [&](const char* name, const char* help) { return app.add_subcommand(name, help); };
  auto* synth = sub("synth", "generate a synthetic block-model dataset into --out");
  auto* part = sub("partition", "partition a dataset and write partition.tsv");
  auto* pre = sub("pretrain", "node-track pretraining on a corpus");
  auto* icl = sub("icl-eval", "in-context few-shot evaluation of a checkpoint");
  auto* lpre = sub("link-pretrain", "link-track masked reconstruction pretraining");
  auto* lft = sub("link-finetune", "fine-tune an edge scorer from scratch or a link checkpoint");
  auto* lev = sub("link-eval", "evaluate a fine-tuned link model");
  auto* abl = sub("ablation", "compare distractor modes: no-ns, random-ns, ours");
  auto* scl = sub("scaling-report", "pretraining fraction study over both tracks");
  (void)synth;

  for (auto* c : {part, pre, icl, lpre, lft, lev, abl, scl}) c->add_option("--dataset", opt.datasets, "dataset directory (repeatable for corpora)");
  for (auto* c : {icl, lft, lev}) c->add_option("--checkpoint", opt.checkpoint, "checkpoint file");
  for (auto* c : {icl, abl, scl}) c->add_option("--mode", opt.mode, "class-node features")->check(CLI::IsMember({"void", "desc"}));
  for (auto* c : {pre, lpre}) c->add_option("--fraction", opt.fraction, "fraction of partitions to pretrain on")->check(CLI::Range(0.0, 1.0));
  for (auto* c : {abl, scl}) {
    c->add_option("--eval-dataset", opt.eval_dataset, "held-out dataset for in-context evaluation");
    c->add_option("--seeds", opt.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);
  }
  scl->add_option("--link-dataset", opt.link_datasets, "link pretraining corpus (defaults to --dataset)");
  scl->add_option("--link-target", opt.link_target, "link fine-tuning dataset (defaults to --eval-dataset)");
  icl->add_option("--prototype-hops", opt.prototype_hops, "propagation hops for the prototype baseline")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  Run run;
  run.command = app.get_subcommands().front()->get_name();
  run.opt = opt;
  try {
    if (!opt.config.empty()) run.cfg = load_config(opt.config);
    if (opt.seed) set_seed(run.cfg, *opt.seed);
    set_threads(run.cfg, opt.threads);
    if (!opt.mode.empty()) run.cfg.icl.mode = parse_class_init(opt.mode);
    fs::create_directories(opt.out);

    if (run.command == "synth") cmd_synth(run);
    else if (run.command == "partition") cmd_partition(run);
    else if (run.command == "pretrain") cmd_pretrain(run);
    else if (run.command == "icl-eval") cmd_icl_eval(run);
    else if (run.command == "link-pretrain") cmd_link_pretrain(run);
    else if (run.command == "link-finetune") cmd_link_finetune(run);
    else if (run.command == "link-eval") cmd_link_eval(run);
    else if (run.command == "ablation") cmd_ablation(run);
    else if (run.command == "scaling-report") cmd_scaling_report(run);

    std::vector<std::string> args(argv, argv + argc);
    const json manifest{{"command", run.command},
                        {"arguments", args},
                        {"config", to_json(run.cfg)},
                        {"seed", run.cfg.seed},
                        {"threads", opt.threads},
                        {"git_describe", GSPT_GIT_DESCRIBE},
                        {"outputs", run.outputs},
                        {"results", run.results},
                        {"wall_time_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
    write_text_atomic(fs::path(opt.out) / "manifest.json", manifest.dump(2) + "\n");
  } catch (const gspt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed metadata: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
