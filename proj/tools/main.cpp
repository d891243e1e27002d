#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vqmoe/checkpoint.hpp"
#include "vqmoe/cluster_sim.hpp"
#include "vqmoe/config.hpp"
#include "vqmoe/diagnostics.hpp"
#include "vqmoe/io.hpp"
#include "vqmoe/metrics.hpp"
#include "vqmoe/model.hpp"
#include "vqmoe/ops.hpp"
#include "vqmoe/quantizer.hpp"
#include "vqmoe/train.hpp"

namespace fs = std::filesystem;
using namespace vqmoe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config_path, "run configuration file")->required();
  sub->add_option("--out", args.out_dir, "artifact directory (overrides [out])");
  auto* seed = sub->add_option("--seed", args.seed, "seed override");
  sub->parse_complete_callback([&args, seed] { args.seed_set = seed->count() > 0; });
}

// phase 1: anything wrong here is a config error
int load_config(const CommonArgs& args, RunConfig& cfg) {
  try {
    cfg = load_run_config(args.config_path);
    if (args.seed_set) {
      cfg.model.seed = args.seed;
      cfg.sim_spec.seed = args.seed;
      cfg.sim_run.seed = args.seed;
    }
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    cfg.validate();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}

int64_t train_seq_len(const RunConfig& cfg) {
  return cfg.seq_len > 0 ? cfg.seq_len : cfg.model.context_length;
}

// [B, T] ids from a [B, T+1] next-token batch
std::vector<int64_t> batch_ids(const Batch& b) {
  std::vector<int64_t> ids(static_cast<size_t>(b.B * b.T));
  for (int64_t r = 0; r < b.B; ++r)
    std::copy(b.tokens.begin() + r * (b.T + 1), b.tokens.begin() + r * (b.T + 1) + b.T,
              ids.begin() + r * b.T);
  return ids;
}

// every ckpt_<step>.vqmo beside `from`, ascending by step; `from` itself is
// always included
std::vector<fs::path> checkpoint_series(const fs::path& from) {
  std::vector<std::pair<int64_t, fs::path>> found;
  const fs::path dir = from.has_parent_path() ? from.parent_path() : fs::path(".");
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("ckpt_", 0) != 0 || name.size() < 11 ||
        name.compare(name.size() - 5, 5, ".vqmo") != 0)
      continue;
    const std::string digits = name.substr(5, name.size() - 10);
    if (digits.empty() ||
        digits.find_first_not_of("0123456789") != std::string::npos)
      continue;
    found.emplace_back(std::stoll(digits), entry.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  bool has_from = false;
  for (auto& [step, p] : found) {
    out.push_back(p);
    std::error_code eq_ec;
    has_from = has_from || fs::equivalent(p, from, eq_ec);
  }
  if (!has_from) out.push_back(from);
  return out;
}

int cmd_pretrain(const CommonArgs& args) {
  RunConfig cfg;
  if (int rc = load_config(args, cfg)) return rc;
  if (cfg.data_path.empty()) {
    std::fprintf(stderr, "config error: [data] path is required for pretrain\n");
    return kExitConfig;
  }

  Corpus corpus;
  try {
    corpus = corpus_from_file(cfg.data_path, cfg.split_train, cfg.split_val);
    fs::create_directories(cfg.out_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }

  const fs::path out(cfg.out_dir);
  try {
    TrainState st = build_model(cfg.model);
    MetricsWriter metrics((out / "metrics.jsonl").string());
    LoopOptions opts;
    opts.steps = cfg.steps;
    opts.batch = cfg.batch;
    opts.seq_len = train_seq_len(cfg);
    opts.lr_max = cfg.lr_max;
    opts.clip = cfg.clip;
    opts.log_every = cfg.log_every;
    opts.ckpt_every = cfg.ckpt_every;
    opts.on_log = [&](const StepMetrics& m) {
      metrics.log(m);
      std::printf("step %lld task %.6f vq %.6f total %.6f lr %.3e grad %.4f\n",
                  static_cast<long long>(m.step), m.task_loss, m.vq_loss,
                  m.total_loss, m.lr, m.grad_norm);
    };
    opts.on_ckpt = [&](TrainState& s) {
      save_checkpoint(
          (out / ("ckpt_" + std::to_string(s.step) + ".vqmo")).string(), s);
    };
    run_pretrain(st, corpus, opts);

    const double val_bpc = evaluate_bpc(st, corpus.val, cfg.batch, opts.seq_len);
    const double test_bpc = evaluate_bpc(st, corpus.test, cfg.batch, opts.seq_len);
    atomic_write_text((out / "bpc.txt").string(), "val_bpc " + fmt_double(val_bpc) +
                                                      "\ntest_bpc " +
                                                      fmt_double(test_bpc) + "\n");
    std::printf("val_bpc %.6f\ntest_bpc %.6f\n", val_bpc, test_bpc);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }
  return kExitOk;
}

int cmd_finetune(const CommonArgs& args, const std::string& from) {
  RunConfig cfg;
  if (int rc = load_config(args, cfg)) return rc;

  TrainState st;
  try {
    st = load_checkpoint(from);
    fs::create_directories(cfg.out_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }

  if (st.cfg.variant != VariantKind::vqmoe) {
    std::fprintf(stderr,
                 "config error: '%s' holds a %s model; fine-tuning runs the "
                 "discrete path, which only vqmoe has\n",
                 from.c_str(), variant_to_string(st.cfg.variant).c_str());
    return kExitConfig;
  }
  if (config_digest(cfg.model) != config_digest(st.cfg)) {
    std::fprintf(stderr,
                 "config error: [model]/[moe] digest mismatch against '%s'; "
                 "restate the pre-training architecture in the fine-tune "
                 "config\n",
                 from.c_str());
    return kExitConfig;
  }

  const fs::path out(cfg.out_dir);
  try {
    LabeledSet task =
        make_majority_task(cfg.ft_examples, cfg.ft_example_len, cfg.ft_classes,
                           cfg.model.vocab_size, cfg.ft_pool_frac, cfg.ft_task_seed);
    // held-out tail; labels cycle, so any contiguous slice stays balanced
    const int64_t n_eval = std::max<int64_t>(cfg.ft_classes, task.size() / 5);
    const int64_t n_train = task.size() - n_eval;
    if (n_train < 1) {
      std::fprintf(stderr, "data error: [finetune] examples leave no training split\n");
      return kExitData;
    }
    const int64_t T = task.T;
    LabeledSet train_set, eval_set;
    train_set.T = eval_set.T = T;
    train_set.tokens.assign(task.tokens.begin(), task.tokens.begin() + n_train * T);
    train_set.labels.assign(task.labels.begin(), task.labels.begin() + n_train);
    eval_set.tokens.assign(task.tokens.begin() + n_train * T, task.tokens.end());
    eval_set.labels.assign(task.labels.begin() + n_train, task.labels.end());

    // measured forward cost, pre-training path vs discrete path, same batch
    const int64_t Bm = std::min<int64_t>(cfg.ft_batch, eval_set.size());
    std::vector<int64_t> probe_ids(eval_set.tokens.begin(),
                                   eval_set.tokens.begin() + Bm * T);
    ops::reset_flop_count();
    model_forward(nullptr, st, probe_ids, Bm, T, nullptr);
    const uint64_t flops_pre = ops::flop_count();

    std::vector<uint64_t> digests_before;
    for (const Block& b : st.blocks)
      digests_before.push_back(codebook_digest(b.router.codebook));

    attach_classifier(st, cfg.ft_classes, cfg.ft_hidden);
    st.step = 0;

    ops::reset_flop_count();
    classifier_forward(nullptr, st, probe_ids, Bm, T, nullptr);
    const uint64_t flops_fine = ops::flop_count();
    const double measured_ratio =
        static_cast<double>(flops_fine) / static_cast<double>(flops_pre);
    ModelConfig probe_cfg = st.cfg;
    probe_cfg.context_length = T;  // the probe batch runs at the task length
    const double analytic_ratio =
        static_cast<double>(flops_count(probe_cfg, FlopsMode::finetune_discrete)) /
        static_cast<double>(flops_count(probe_cfg, FlopsMode::pretrain));

    MetricsWriter metrics((out / "metrics.jsonl").string());
    LoopOptions opts;
    opts.steps = cfg.ft_steps;
    opts.batch = cfg.ft_batch;
    opts.seq_len = T;
    opts.lr_max = cfg.ft_lr_max;
    opts.clip = cfg.clip;
    opts.log_every = cfg.ft_log_every;
    opts.on_log = [&](const StepMetrics& m) {
      metrics.log(m);
      std::printf("step %lld task %.6f vq %.6f lr %.3e\n",
                  static_cast<long long>(m.step), m.task_loss, m.vq_loss, m.lr);
    };
    run_finetune(st, train_set, opts);

    const double train_acc =
        evaluate_accuracy(st, train_set.tokens, train_set.labels, cfg.ft_batch, T);
    const double eval_acc =
        evaluate_accuracy(st, eval_set.tokens, eval_set.labels, cfg.ft_batch, T);

    for (size_t i = 0; i < st.blocks.size(); ++i)
      if (codebook_digest(st.blocks[i].router.codebook) != digests_before[i]) {
        std::fprintf(stderr,
                     "data error: codebook %zu moved during fine-tuning "
                     "(freeze contract violated)\n",
                     i);
        return kExitData;
      }

    save_checkpoint((out / ("ckpt_ft_" + std::to_string(st.step) + ".vqmo")).string(),
                    st);
    atomic_write_text((out / "accuracy.txt").string(),
                      "train_accuracy " + fmt_double(train_acc) + "\neval_accuracy " +
                          fmt_double(eval_acc) + "\nflops_ratio_measured " +
                          fmt_double(measured_ratio) + "\nflops_ratio_analytic " +
                          fmt_double(analytic_ratio) +
                          "\ncodebook_digest_unchanged 1\n");
    std::printf("train_accuracy %.6f\neval_accuracy %.6f\n", train_acc, eval_acc);
    std::printf("flops_ratio_measured %.6f\nflops_ratio_analytic %.6f\n",
                measured_ratio, analytic_ratio);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }
  return kExitOk;
}

int cmd_analyze(const CommonArgs& args, const std::string& from,
                const std::string& report, const std::string& probe) {
  RunConfig cfg;
  if (int rc = load_config(args, cfg)) return rc;
  const fs::path out(cfg.out_dir);

  if (report == "flops") {
    try {
      fs::create_directories(cfg.out_dir);
      write_flops_txt((out / "flops.txt").string(), cfg.model);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "data error: %s\n", e.what());
      return kExitData;
    }
    if (cfg.model.variant == VariantKind::vqmoe) {
      const double ratio =
          static_cast<double>(flops_count(cfg.model, FlopsMode::finetune_discrete)) /
          static_cast<double>(flops_count(cfg.model, FlopsMode::pretrain));
      std::printf("flops_ratio %.6f\n", ratio);
    }
    return kExitOk;
  }

  if (from.empty()) {
    std::fprintf(stderr, "config error: --report %s needs --from CHECKPOINT\n",
                 report.c_str());
    return kExitConfig;
  }
  if (cfg.data_path.empty()) {
    std::fprintf(stderr, "config error: [data] path is required for --report %s\n",
                 report.c_str());
    return kExitConfig;
  }

  try {
    TrainState st = load_checkpoint(from);
    Corpus corpus = corpus_from_file(cfg.data_path, cfg.split_train, cfg.split_val);
    fs::create_directories(cfg.out_dir);
    const SplitView& slice = probe == "train" ? corpus.train
                             : probe == "test" ? corpus.test
                                               : corpus.val;
    const int64_t T = std::min<int64_t>(train_seq_len(cfg), st.cfg.context_length);
    const int64_t B = cfg.batch;
    Rng probe_rng(cfg.model.seed);
    Batch pb = sample_batch(probe_rng, slice, B, T);
    std::vector<int64_t> ids = batch_ids(pb);
    const int64_t N = st.cfg.N_experts;

    if (report == "consistency") {
      std::vector<ConsistencyReport> rows;
      RoutingDecision prev;
      bool have_prev = false;
      for (const fs::path& p : checkpoint_series(from)) {
        TrainState s = load_checkpoint(p.string());
        if (config_digest(s.cfg) != config_digest(st.cfg)) continue;
        ForwardResult fr = model_forward(nullptr, s, ids, B, T, nullptr);
        const RoutingDecision& dec = fr.decisions.back();
        const Tensor& x = fr.moe_inputs.back();
        if (s.cfg.variant == VariantKind::vqmoe) {
          Tensor centroids =
              centroids_from_codebook(s.blocks.back().router.codebook, N);
          rows.push_back(consistency_score(x, dec, centroids, s.cfg.metric, s.step));
        } else {
          RunningCentroids rc(N, st.cfg.d_model);
          rc.observe(x, selected_experts(dec, N));
          rows.push_back(
              consistency_score(x, dec, rc.centroids(), Metric::euclidean, s.step));
        }
        if (have_prev) rows.push_back(temporal_consistency(dec, prev, N, s.step));
        prev = dec;
        have_prev = true;
      }
      write_consistency_csv((out / "consistency.csv").string(), rows);
      std::printf("consistency rows %zu\n", rows.size());
    } else if (report == "jacobian") {
      if (st.cfg.variant == VariantKind::vqmoe) {
        std::fprintf(stderr,
                     "config error: the vqmoe residual bound holds for probe "
                     "experts of width K; run the jacobian report on a router "
                     "variant checkpoint\n");
        return kExitConfig;
      }
      if (st.cfg.d_model > 64) {
        std::fprintf(stderr,
                     "config error: jacobian probes support d_model <= 64, got %lld\n",
                     static_cast<long long>(st.cfg.d_model));
        return kExitConfig;
      }
      ForwardResult fr = model_forward(nullptr, st, ids, B, T, nullptr);
      const Tensor& x = fr.moe_inputs.back();
      const Block& blk = st.blocks.back();
      std::vector<JacobianReport> rows;
      for (int64_t r = 0; r < x.dim(0) && rows.size() < 20; ++r) {
        Tensor x_row({1, st.cfg.d_model});
        std::copy(x.data().begin() + r * st.cfg.d_model,
                  x.data().begin() + (r + 1) * st.cfg.d_model, x_row.data().begin());
        try {
          rows.push_back(jacobian_residual_rank(blk.experts, blk.router, x_row,
                                                st.cfg.top_k, st.cfg.beta));
        } catch (const std::exception& e) {
          if (std::string(e.what()).find("boundary") == std::string::npos) throw;
        }
      }
      if (rows.empty()) {
        std::fprintf(stderr, "data error: every probe sat on a selection boundary\n");
        return kExitData;
      }
      write_jacobian_csv((out / "jacobian.csv").string(), rows);
      std::printf("jacobian probes %zu bound %lld\n", rows.size(),
                  static_cast<long long>(rows.front().bound));
    } else if (report == "pca") {
      PcaResult pr = expert_representation_dump(st, ids, B, T);
      write_pca_csv((out / "pca.csv").string(), pr);
      std::printf("pca points %zu\n", pr.labels.size());
    } else {  // drift
      std::vector<DriftSnapshot> history;
      for (const fs::path& p : checkpoint_series(from)) {
        TrainState s = load_checkpoint(p.string());
        if (config_digest(s.cfg) != config_digest(st.cfg)) continue;
        history.push_back(drift_snapshot(s, ids, B, T));
      }
      if (history.size() < 2) {
        std::fprintf(stderr,
                     "data error: drift needs >= 2 checkpoints next to '%s', "
                     "found %zu\n",
                     from.c_str(), history.size());
        return kExitData;
      }
      std::vector<DriftPoint> points = convergence_tracker(history);
      write_drift_csv((out / "drift.csv").string(), points);
      std::printf("drift checkpoints %zu\n", history.size());
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }
  return kExitOk;
}

int cmd_simulate(const CommonArgs& args) {
  RunConfig cfg;
  if (int rc = load_config(args, cfg)) return rc;
  if (cfg.sim_spec.N_clusters > 6) {
    std::fprintf(stderr,
                 "config error: N_clusters = %lld makes the N! assignment "
                 "enumeration infeasible (max 6)\n",
                 static_cast<long long>(cfg.sim_spec.N_clusters));
    return kExitConfig;
  }

  const fs::path out(cfg.out_dir);
  try {
    fs::create_directories(cfg.out_dir);
    ClusterData data = generate_clusters(cfg.sim_spec);
    std::vector<Tensor> targets =
        make_cluster_targets(cfg.sim_spec.N_clusters, cfg.sim_spec.d,
                             cfg.sim_target_scale, cfg.sim_target_seed);
    Rng expert_rng(cfg.sim_run.seed);
    std::vector<ExpertFFN> experts;
    for (const Tensor& A : targets)
      experts.push_back(make_linear_expert(A, cfg.sim_expert_noise, expert_rng));
    AssignmentReport rep = oracle_assignment_check(data, experts, targets,
                                                   cfg.sim_oracle);
    write_prop1_csv((out / "prop1_report.csv").string(), rep);

    InconsistencySeries series = router_inconsistency_run(cfg.sim_spec, cfg.sim_run);
    write_thm1_csv((out / "thm1_series.csv").string(), series);

    std::printf("identity_minimal %d\nmargin %.6f\nfirst_dip %lld\n",
                rep.identity_minimal ? 1 : 0, rep.margin,
                static_cast<long long>(series.first_dip));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale vector-quantized mixture of experts"};
  app.require_subcommand(1);

  CommonArgs pre_args, ft_args, an_args, sim_args;
  std::string ft_from, an_from, an_report, an_probe = "val";

  CLI::App* pre = app.add_subcommand("pretrain", "train a character LM");
  add_common(pre, pre_args);

  CLI::App* ft = app.add_subcommand("finetune", "discrete-path classification");
  add_common(ft, ft_args);
  ft->add_option("--from", ft_from, "pre-trained vqmoe checkpoint")->required();

  CLI::App* an = app.add_subcommand("analyze", "diagnostics reports");
  add_common(an, an_args);
  an->add_option("--from", an_from, "checkpoint to analyze");
  an->add_option("--report", an_report, "which report to emit")
      ->required()
      ->check(CLI::IsMember({"consistency", "jacobian", "pca", "drift", "flops"}));
  an->add_option("--probe", an_probe, "corpus slice for probe batches")
      ->check(CLI::IsMember({"train", "val", "test"}));

  CLI::App* sim = app.add_subcommand("simulate", "clustering experiments");
  add_common(sim, sim_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (pre->parsed()) return cmd_pretrain(pre_args);
  if (ft->parsed()) return cmd_finetune(ft_args, ft_from);
  if (an->parsed()) return cmd_analyze(an_args, an_from, an_report, an_probe);
  return cmd_simulate(sim_args);
}
