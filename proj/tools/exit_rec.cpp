#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "exitrec/dataset.hpp"
#include "exitrec/errors.hpp"
#include "exitrec/eval_bench.hpp"
#include "exitrec/exit_model.hpp"
#include "exitrec/exit_policy.hpp"
#include "exitrec/graph_retriever.hpp"
#include "exitrec/prompt.hpp"
#include "exitrec/rng.hpp"
#include "exitrec/synthetic.hpp"

namespace fs = std::filesystem;
using namespace exitrec;

namespace {

struct PromptFlags {
  std::size_t k = 4;
  std::size_t context_limit = kDefaultContextLimit;
  std::size_t history_cap = 15;
  std::string template_file;

  void add(CLI::App* app) {
    app->add_option("--k", k, "Retrieved examples per prompt");
    app->add_option("--context-limit", context_limit, "Prompt token limit");
    app->add_option("--prompt-history", history_cap, "History entries rendered per block");
    app->add_option("--template", template_file, "Prompt template file");
  }

  CtrPipeline::Options options() const {
    CtrPipeline::Options o;
    o.k = k;
    o.context_limit = context_limit;
    if (!template_file.empty()) o.tmpl = PromptTemplate::load(template_file);
    o.tmpl.history_cap = history_cap;
    return o;
  }
};

struct PolicyFlags {
  double tau = 0.05;
  int window = 2;
  std::vector<int> exit_layers;
  bool force_exit_at_last = false;

  void add(CLI::App* app) {
    app->add_option("--tau", tau, "Exit threshold");
    app->add_option("--window", window, "Discrepancy window m");
    app->add_option("--exit-layers", exit_layers, "Subset of the model's exit layers")->delimiter(',');
    app->add_flag("--force-exit-at-last", force_exit_at_last, "Exit at the last exit layer at the latest");
  }

  ExitPolicy policy() const {
    ExitPolicy p;
    p.tau = tau;
    p.window = window;
    p.exit_layers = exit_layers;
    p.force_exit_at_last = force_exit_at_last;
    p.validate();
    return p;
  }
};

fs::path vocab_path(const std::string& flag, const std::string& split) {
  return flag.empty() ? fs::path(split) / "vocab.json" : fs::path(flag);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented CTR prediction with early-exit decoding"};
  app.require_subcommand(1);

  // gen-synthetic
  SyntheticConfig syn;
  std::string syn_kind = "clustered", syn_out;
  auto* gen = app.add_subcommand("gen-synthetic", "Write a seeded synthetic interaction dataset");
  gen->add_option("--kind", syn_kind, "clustered|multihop");
  gen->add_option("--users", syn.users);
  gen->add_option("--items", syn.items);
  gen->add_option("--per-user", syn.per_user);
  gen->add_option("--clusters", syn.clusters);
  auto* pool_prob_opt = gen->add_option("--pool-prob", syn.pool_prob, "Default 0.8, multihop 0.6");
  gen->add_option("--group-bias", syn.group_bias);
  gen->add_option("--item-bias", syn.item_bias);
  gen->add_option("--group-size", syn.group_size);
  gen->add_option("--niche-items", syn.niche_items);
  gen->add_option("--seed", syn.seed);
  gen->add_option("--out", syn_out)->required();

  // ingest
  std::string in_path, in_format = "csv", in_boundary = "gt", in_ratio = "8:1:1", in_out, in_mode = "every";
  double in_threshold = 3.0;
  SampleOptions in_samples;
  std::uint64_t in_seed = 0;
  auto* ing = app.add_subcommand("ingest", "Ingest interactions, build CTR samples and split");
  ing->add_option("--input", in_path)->required();
  ing->add_option("--format", in_format, "csv|jsonl");
  ing->add_option("--threshold", in_threshold);
  ing->add_option("--boundary", in_boundary, "geq|gt");
  ing->add_option("--hmax", in_samples.h_max);
  ing->add_option("--min-history", in_samples.min_history);
  ing->add_option("--targets", in_mode, "every|one (targets per user)");
  ing->add_option("--ratio", in_ratio);
  ing->add_option("--seed", in_seed);
  ing->add_option("--out", in_out)->required();

  // train-retriever
  std::string tr_split, tr_mode = "average", tr_out;
  std::size_t tr_dim = 64, tr_layers = 3;
  std::uint64_t tr_seed = 0;
  bool tr_layer0 = false;
  auto* trr = app.add_subcommand("train-retriever", "Propagate user/item embeddings over the split's graph");
  trr->add_option("--split", tr_split)->required();
  trr->add_option("--dim", tr_dim);
  trr->add_option("--layers", tr_layers);
  trr->add_option("--seed", tr_seed);
  trr->add_option("--embedding-mode", tr_mode, "average|last");
  trr->add_flag("--include-layer0", tr_layer0);
  trr->add_option("--out", tr_out)->required();

  // retrieve
  std::string rt_table, rt_user;
  std::size_t rt_k = 4;
  auto* ret = app.add_subcommand("retrieve", "Top-k similar users");
  ret->add_option("--table", rt_table)->required();
  ret->add_option("--user", rt_user)->required();
  ret->add_option("--k", rt_k);

  // train
  std::string t_split, t_config, t_phase = "full", t_out, t_init, t_table, t_vocab, t_loss = "answer_pair";
  OptimizerConfig t_opt;
  std::size_t t_max = 0, t_vocab_max = 8192;
  double t_dropout = 0.0;
  PromptFlags t_prompt;
  auto* trn = app.add_subcommand("train", "Full tuning or exit-head tuning");
  trn->add_option("--split", t_split)->required();
  trn->add_option("--config", t_config, "Model config JSON (full phase)");
  trn->add_option("--phase", t_phase, "full|heads");
  trn->add_option("--init", t_init, "Checkpoint to continue from (required for heads)");
  trn->add_option("--lambda0", t_opt.learning_rate, "Learning rate (lambda0 for heads)");
  trn->add_option("--beta", t_opt.beta);
  trn->add_option("--momentum", t_opt.momentum);
  trn->add_option("--epochs", t_opt.epochs);
  trn->add_option("--batch-size", t_opt.batch_size);
  trn->add_option("--clip", t_opt.clip_norm);
  trn->add_option("--loss", t_loss, "answer_pair|full_vocab");
  trn->add_option("--seed", t_opt.seed);
  trn->add_option("--table", t_table, "Embedding table for retrieval-augmented prompts");
  trn->add_option("--vocab", t_vocab, "Vocabulary file (default <split>/vocab.json)");
  trn->add_option("--vocab-size", t_vocab_max);
  trn->add_option("--max-train", t_max, "Train on a seeded subset");
  trn->add_option("--example-dropout", t_dropout, "Share of prompts without examples");
  t_prompt.add(trn);
  trn->add_option("--out", t_out)->required();

  // eval / ablation / bench share most flags
  std::string e_split, e_ckpt, e_table, e_vocab, e_out, e_dataset = "dataset", e_traces;
  std::size_t e_max = 0;
  std::uint64_t e_seed = 0;
  bool e_no_retriever = false, e_no_exit = false;
  PromptFlags e_prompt;
  PolicyFlags e_policy;
  auto add_eval_flags = [&](CLI::App* a) {
    a->add_option("--split", e_split)->required();
    a->add_option("--ckpt", e_ckpt)->required();
    a->add_option("--table", e_table);
    a->add_option("--vocab", e_vocab);
    a->add_option("--max-eval", e_max, "Evaluate a seeded subset of the test split");
    a->add_option("--seed", e_seed);
    a->add_option("--dataset", e_dataset, "Name written to the report");
    e_prompt.add(a);
    e_policy.add(a);
  };
  auto* ev = app.add_subcommand("eval", "Score the test split");
  add_eval_flags(ev);
  ev->add_flag("--no-retriever", e_no_retriever);
  ev->add_flag("--no-exit", e_no_exit);
  ev->add_option("--traces", e_traces, "Write per-request layer traces (JSON lines)");
  ev->add_option("--out", e_out)->required();
  auto* abl = app.add_subcommand("ablation", "Retriever on/off x early exit on/off");
  add_eval_flags(abl);
  abl->add_option("--out", e_out)->required();

  BenchOptions b_opt;
  auto* bn = app.add_subcommand("bench", "Requests per second on test prompts");
  add_eval_flags(bn);
  bn->add_flag("--no-retriever", e_no_retriever);
  bn->add_flag("--no-exit", e_no_exit);
  bn->add_option("--repetitions", b_opt.repetitions);
  bn->add_option("--warmup", b_opt.warmup);
  bn->add_option("--concurrent", b_opt.concurrent);

  // sweep
  std::string s_traces, s_out;
  std::vector<double> s_taus{0.01, 0.02, 0.05, 0.1};
  std::vector<int> s_windows{1, 2, 3};
  int s_layers = 0;
  PolicyFlags s_policy;
  auto* sw = app.add_subcommand("sweep", "Replay traces over tau and window grids");
  sw->add_option("--traces", s_traces)->required();
  sw->add_option("--tau", s_taus)->delimiter(',');
  sw->add_option("--window", s_windows)->delimiter(',');
  sw->add_option("--num-layers", s_layers, "Model depth for traces that lack it");
  sw->add_option("--exit-layers", s_policy.exit_layers)->delimiter(',');
  sw->add_flag("--force-exit-at-last", s_policy.force_exit_at_last);
  sw->add_option("--out", s_out)->required();

  // compare-modes
  std::string c_split, c_groups, c_out, c_ckpt, c_vocab;
  std::size_t c_dim = 64, c_layers = 3, c_queries = 0;
  std::uint64_t c_seed = 0;
  bool c_layer0 = false;
  PromptFlags c_prompt;
  auto* cm = app.add_subcommand("compare-modes", "Average vs last-layer user embeddings");
  cm->add_option("--split", c_split)->required();
  cm->add_option("--groups", c_groups, "Planted user groups (groups.json)")->required();
  cm->add_option("--dim", c_dim);
  cm->add_option("--layers", c_layers);
  cm->add_option("--seed", c_seed);
  cm->add_option("--queries", c_queries, "Query users (seeded subset; 0 = all)");
  cm->add_flag("--include-layer0", c_layer0);
  cm->add_option("--ckpt", c_ckpt, "Also score the test split with this model");
  cm->add_option("--vocab", c_vocab);
  cm->add_option("--max-eval", e_max);
  cm->add_option("--dataset", e_dataset, "Name written to the report");
  c_prompt.add(cm);
  cm->add_option("--out", c_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) {
      syn.kind = parse_synthetic_kind(syn_kind);
      if (pool_prob_opt->count() == 0) syn.pool_prob = default_synthetic_config(syn.kind).pool_prob;
      const auto data = generate_synthetic(syn);
      write_synthetic(data, syn_out);
      std::cout << "wrote " << data.records.size() << " interactions for " << data.groups.size()
                << " users to " << syn_out << "\n";
    } else if (*ing) {
      const auto fmt = in_format == "csv" ? InputFormat::csv
                       : in_format == "jsonl" ? InputFormat::jsonl
                       : throw ConfigError("unknown format '" + in_format + "'");
      const auto boundary = in_boundary == "gt" ? Boundary::gt
                            : in_boundary == "geq" ? Boundary::geq
                            : throw ConfigError("unknown boundary '" + in_boundary + "'");
      in_samples.mode = in_mode == "every" ? TargetMode::every_interaction
                        : in_mode == "one" ? TargetMode::one_per_user
                        : throw ConfigError("unknown target mode '" + in_mode + "'");
      in_samples.seed = in_seed;
      const auto ingested = ingest(in_path, fmt);
      const auto labelled = binarize(ingested.records, in_threshold, boundary);
      const auto samples = build_samples(labelled, in_samples);
      const auto parts = split(samples, SplitRatio::parse(in_ratio), in_seed);
      save_split(parts, in_out);
      std::cout << "rows " << ingested.rows << ", malformed " << ingested.malformed << ", duplicates "
                << ingested.duplicates << ", users " << ingested.distinct_users << ", items "
                << ingested.distinct_items << "\nsamples " << samples.size() << " (train "
                << parts.train.size() << ", validation " << parts.validation.size() << ", test "
                << parts.test.size() << "), graph edges " << parts.graph_edges.size() << "\n";
    } else if (*trr) {
      const auto parts = load_split(tr_split);
      const auto table = build_table(parts, tr_dim, tr_layers, tr_seed, parse_embedding_mode(tr_mode), tr_layer0);
      save_table(table, tr_out);
      std::cout << "users " << table.num_users << ", items " << table.num_items << ", dim "
                << table.dim << ", layers " << table.layers << ", mode " << to_string(table.mode) << "\n";
    } else if (*ret) {
      const auto table = load_table(rt_table);
      for (const auto& nb : retrieve_topk(table, rt_user, rt_k).neighbors) {
        std::cout << nlohmann::json{{"user", nb.user_id}, {"similarity", nb.similarity}}.dump() << "\n";
      }
    } else if (*trn) {
      const auto parts = load_split(t_split);
      t_opt.loss = parse_loss_kind(t_loss);
      const auto popts = t_prompt.options();
      const auto vpath = vocab_path(t_vocab, t_split);
      Vocabulary vocab;
      if (fs::exists(vpath)) {
        vocab = Vocabulary::load(vpath);
      } else {
        vocab = build_vocab(vocabulary_corpus(popts.tmpl, parts.train), t_vocab_max);
        vocab.save(vpath);
      }
      std::optional<EmbeddingTable> table;
      if (!t_table.empty()) table = load_table(t_table);
      const CtrPipeline pipeline(parts.train, table ? &*table : nullptr, vocab, popts);
      const auto examples = make_training_examples(pipeline, parts.train, {t_max, t_dropout, t_opt.seed});

      TrainReport report;
      if (t_phase == "full") {
        ModelConfig cfg;
        if (!t_config.empty()) cfg = ModelConfig::from_json_string(read_file(t_config));
        cfg.vocab_size = static_cast<int>(vocab.size());
        cfg.context_limit = static_cast<int>(popts.context_limit);
        ExitModel model = t_init.empty() ? ExitModel(cfg) : load_checkpoint(t_init);
        report = full_tune(model, examples, t_opt);
        save_checkpoint(model, t_out);
      } else if (t_phase == "heads") {
        if (t_init.empty()) throw PhaseOrder("--phase heads needs --init <full-tuned checkpoint>");
        ExitModel model = load_checkpoint(t_init);
        report = head_tune(model, examples, t_opt);
        save_checkpoint(model, t_out);
      } else {
        throw ConfigError("unknown phase '" + t_phase + "' (full|heads)");
      }
      const auto& L = report.step_losses;
      std::cout << "phase " << to_string(report.phase) << ", examples " << examples.size() << ", steps "
                << L.size();
      if (!L.empty()) std::cout << ", first loss " << L.front() << ", last loss " << L.back();
      for (std::size_t i = 0; i < report.head_learning_rates.size(); ++i) {
        std::cout << (i == 0 ? ", head lr " : " ") << report.head_learning_rates[i];
      }
      std::cout << ", " << report.wall_seconds << " s\n";
    } else if (*ev || *abl || *bn) {
      const auto parts = load_split(e_split);
      const auto model = load_checkpoint(e_ckpt);
      const auto vocab = Vocabulary::load(vocab_path(e_vocab, e_split));
      std::optional<EmbeddingTable> table;
      if (!e_table.empty()) table = load_table(e_table);
      const CtrPipeline pipeline(parts.train, table ? &*table : nullptr, vocab, e_prompt.options());
      const auto samples = subsample(parts.test, e_max, e_seed);
      const auto policy = e_policy.policy();
      int rc = kExitOk;
      if (*ev) {
        EvalOptions o{e_dataset, !e_no_retriever, !e_no_exit, policy, e_seed};
        const auto report = evaluate(pipeline, model, samples, o);
        write_report_csv(e_out, std::span(&report, 1));
        if (!e_traces.empty()) {
          ExitPolicy tp = policy;
          if (e_no_exit) tp.tau = 0.0;
          std::vector<LayerTrace> traces;
          for (const auto& s : samples) {
            auto run = run_with_exit(model, pipeline.tokens(s, !e_no_retriever), tp);
            run.trace.id = std::to_string(s.sample_id);
            traces.push_back(std::move(run.trace));
          }
          write_traces(e_traces, traces);
        }
        std::cout << report_csv(std::span(&report, 1));
        if (!report.auc) rc = kExitMetricUndefined;
      } else if (*abl) {
        const auto reports = run_ablation(pipeline, model, samples, policy, e_dataset, e_seed);
        write_report_csv(e_out, reports);
        std::cout << report_csv(reports);
        for (const auto& r : reports) {
          if (!r.auc) rc = kExitMetricUndefined;
        }
      } else {
        std::vector<std::vector<int>> requests;
        for (const auto& s : samples) requests.push_back(pipeline.tokens(s, !e_no_retriever && table));
        ExitPolicy bp = policy;
        if (e_no_exit) {
          bp.tau = 0.0;
          bp.force_exit_at_last = false;
        }
        const auto r = throughput_bench(model, bp, requests, b_opt);
        std::cout << "requests " << requests.size() << ", rps " << r.rps_mean << " +- " << r.rps_std
                  << ", mean layers " << r.mean_layers_evaluated << "\n";
      }
      return rc;
    } else if (*sw) {
      const auto traces = read_traces(s_traces, s_layers);
      const auto rows = sweep(traces, s_taus, s_windows, s_policy.policy());
      write_sweep_csv(s_out, rows);
      for (const auto& r : rows) {
        std::cout << "tau " << r.tau << " m " << r.window << ": mean exit layer " << r.mean_exit_layer
                  << ", agreement " << r.agreement_with_full << ", speedup " << r.simulated_speedup << "\n";
      }
    } else if (*cm) {
      const auto parts = load_split(c_split);
      const auto groups = load_groups(c_groups);
      std::vector<std::string> users;
      for (const auto& s : parts.test) users.push_back(s.user_id);
      std::sort(users.begin(), users.end());
      users.erase(std::unique(users.begin(), users.end()), users.end());
      if (c_queries > 0 && c_queries < users.size()) {
        Rng rng(c_seed);
        rng.shuffle(users);
        users.resize(c_queries);
        std::sort(users.begin(), users.end());
      }
      auto propagated = build_table(parts, c_dim, c_layers, c_seed);
      std::optional<ExitModel> model;
      std::optional<Vocabulary> vocab;
      std::vector<CtrSample> samples;
      ModeEvalInputs inputs;
      if (!c_ckpt.empty()) {
        model = load_checkpoint(c_ckpt);
        vocab = Vocabulary::load(vocab_path(c_vocab, c_split));
        samples = subsample(parts.test, e_max, c_seed);
        inputs = {parts.train, samples, &*vocab, &*model, c_prompt.options(), {}};
        inputs.eval.policy.tau = 0.0;
        inputs.eval.early_exit = false;
        inputs.eval.seed = c_seed;
      }
      const auto cmp = compare_embedding_modes(propagated, groups, users, c_prompt.k, c_layer0,
                                               c_ckpt.empty() ? nullptr : &inputs);
      write_mode_csv(c_out, cmp, e_dataset);
      std::cout << "average agreement " << cmp.average.neighbor_agreement << ", last agreement "
                << cmp.last.neighbor_agreement << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "exit-rec: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}
