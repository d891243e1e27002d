#pragma once

#include "vqmoe/cluster_sim.hpp"
#include "vqmoe/model.hpp"

#include <cstdint>
#include <string>

namespace vqmoe {

// One parsed run description. Sections map onto the command surface:
// [data]/[model]/[moe]/[train] drive pretrain, [finetune] the downstream
// task, [sim] the clustering experiments, [out] the artifact directory.
struct RunConfig {
  // [data]
  std::string data_path;
  double split_train = 0.90;
  double split_val = 0.05;
  double split_test = 0.05;

  // [model] + [moe]
  ModelConfig model;

  // [train]
  int64_t steps = 5000;
  int64_t batch = 32;
  int64_t seq_len = 0;  // 0: use model.context_length
  double lr_max = 3.5e-4;
  double clip = 0.0;
  int64_t log_every = 50;
  int64_t ckpt_every = 1000;

  // [finetune]: synthetic majority task, see make_majority_task
  int64_t ft_classes = 2;
  int64_t ft_examples = 512;
  int64_t ft_example_len = 64;
  double ft_pool_frac = 0.7;
  uint64_t ft_task_seed = 1;
  int64_t ft_steps = 300;
  int64_t ft_batch = 32;
  double ft_lr_max = 1e-3;
  int64_t ft_hidden = 64;
  int64_t ft_log_every = 50;

  // [sim]
  ClusterSpec sim_spec;
  OracleOptions sim_oracle;
  InconsistencyOptions sim_run;
  double sim_target_scale = 1.0;
  double sim_expert_noise = 0.05;
  uint64_t sim_target_seed = 7;

  // [out]
  std::string out_dir = ".";

  void validate() const;
};

// Line-based `key = value` under `[section]` headers; `#` starts a comment;
// blank lines ignored. Unknown sections or keys are errors so typos cannot
// silently fall back to defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Parses the canonical_model_section rendering back into a ModelConfig;
// inverse of the digest text stored in checkpoints.
ModelConfig model_config_from_canonical(const std::string& text);

}  // namespace vqmoe
