#include "vqmoe/config.hpp"

#include "vqmoe/io.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& v, const std::string& where) {
  char* end = nullptr;
  const long long out = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    fail("config", where + ": '" + v + "' is not an integer");
  return static_cast<int64_t>(out);
}

uint64_t parse_uint(const std::string& v, const std::string& where) {
  if (!v.empty() && v[0] == '-')
    fail("config", where + ": '" + v + "' is not a non-negative integer");
  char* end = nullptr;
  const unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    fail("config", where + ": '" + v + "' is not a non-negative integer");
  return static_cast<uint64_t>(out);
}

double parse_real(const std::string& v, const std::string& where) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    fail("config", where + ": '" + v + "' is not a number");
  return out;
}

bool parse_flag(const std::string& v, const std::string& where) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  fail("config", where + ": '" + v + "' is not a boolean (use 0/1/true/false)");
}

void apply_model_key(ModelConfig& m, const std::string& key, const std::string& value,
                     const std::string& where) {
  if (key == "vocab_size") m.vocab_size = parse_int(value, where);
  else if (key == "d_model") m.d_model = parse_int(value, where);
  else if (key == "n_heads") m.n_heads = parse_int(value, where);
  else if (key == "n_layers") m.n_layers = parse_int(value, where);
  else if (key == "context_length") m.context_length = parse_int(value, where);
  else if (key == "h_ffn") m.h_ffn = parse_int(value, where);
  else if (key == "d_low") m.d_low = parse_int(value, where);
  else if (key == "activation") m.activation = activation_from_string(value);
  else if (key == "expert_bias") m.expert_bias = parse_flag(value, where);
  else if (key == "alpha") m.alpha = parse_real(value, where);
  else if (key == "beta") m.beta = parse_real(value, where);
  else if (key == "stable_phase1_frac") m.stable_phase1_frac = parse_real(value, where);
  else if (key == "seed") m.seed = parse_uint(value, where);
  else fail("config", where + ": unknown key '" + key + "'");
}

void apply_moe_key(ModelConfig& m, const std::string& key, const std::string& value,
                   const std::string& where) {
  if (key == "variant") m.variant = variant_from_string(value);
  else if (key == "n_experts") m.N_experts = parse_int(value, where);
  else if (key == "k_codes") m.K_codes = parse_int(value, where);
  else if (key == "top_k") m.top_k = parse_int(value, where);
  else if (key == "metric") m.metric = metric_from_string(value);
  else fail("config", where + ": unknown key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  const double sum = split_train + split_val + split_test;
  if (std::abs(sum - 1.0) > 1e-9)
    fail("config", "split_ratios sum to " + fmt_double(sum) + ", expected 1.0");
  if (split_train <= 0.0 || split_val <= 0.0 || split_test <= 0.0)
    fail("config", "split_ratios must all be positive");
  if (steps < 1 || batch < 1) fail("config", "[train] steps and batch must be positive");
  if (seq_len < 0) fail("config", "[train] seq_len must be >= 0");
  if (seq_len > model.context_length)
    fail("config", "[train] seq_len exceeds context_length");
  if (log_every < 1) fail("config", "[train] log_every must be positive");
  if (ckpt_every < 0) fail("config", "[train] ckpt_every must be >= 0");
  if (lr_max <= 0.0 || ft_lr_max <= 0.0) fail("config", "lr_max must be positive");
  if (clip < 0.0) fail("config", "[train] clip must be >= 0");
  if (ft_classes < 2) fail("config", "[finetune] classes must be >= 2");
  if (ft_examples < 2) fail("config", "[finetune] examples must be >= 2");
  if (ft_example_len < 1 || ft_example_len > model.context_length)
    fail("config", "[finetune] example_len must lie in [1, context_length]");
  if (ft_pool_frac <= 0.0 || ft_pool_frac > 1.0)
    fail("config", "[finetune] pool_frac must lie in (0, 1]");
  if (ft_steps < 1 || ft_batch < 1 || ft_hidden < 1 || ft_log_every < 1)
    fail("config", "[finetune] steps, batch, hidden, log_every must be positive");
  sim_spec.validate();
  if (sim_oracle.steps < 1 || sim_oracle.lr <= 0.0)
    fail("config", "[sim] oracle_steps and oracle_lr must be positive");
  if (sim_run.steps < 1 || sim_run.checkpoint_every < 1)
    fail("config", "[sim] run_steps and run_checkpoint_every must be positive");
  if (out_dir.empty()) fail("config", "[out] directory must not be empty");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const size_t hash = raw.find('#');
    std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);

    if (line.front() == '[') {
      if (line.back() != ']') fail("config", where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "data" && section != "model" && section != "moe" &&
          section != "train" && section != "finetune" && section != "sim" &&
          section != "out")
        fail("config", where + ": unknown section '" + section + "'");
      continue;
    }

    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail("config", where + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail("config", where + ": empty key");
    if (section.empty())
      fail("config", where + ": key '" + key + "' appears before any [section]");

    if (section == "data") {
      if (key == "path") cfg.data_path = value;
      else if (key == "split_ratios") {
        std::istringstream vs(value);
        std::string part;
        std::vector<double> ratios;
        while (std::getline(vs, part, ','))
          ratios.push_back(parse_real(trim(part), where));
        if (ratios.size() != 3)
          fail("config", where + ": split_ratios needs three comma-separated values");
        cfg.split_train = ratios[0];
        cfg.split_val = ratios[1];
        cfg.split_test = ratios[2];
      } else fail("config", where + ": unknown key '" + key + "'");
    } else if (section == "model") {
      apply_model_key(cfg.model, key, value, where);
    } else if (section == "moe") {
      apply_moe_key(cfg.model, key, value, where);
    } else if (section == "train") {
      if (key == "steps") cfg.steps = parse_int(value, where);
      else if (key == "batch") cfg.batch = parse_int(value, where);
      else if (key == "seq_len") cfg.seq_len = parse_int(value, where);
      else if (key == "lr_max") cfg.lr_max = parse_real(value, where);
      else if (key == "clip") cfg.clip = parse_real(value, where);
      else if (key == "log_every") cfg.log_every = parse_int(value, where);
      else if (key == "ckpt_every") cfg.ckpt_every = parse_int(value, where);
      else if (key == "alpha") cfg.model.alpha = parse_real(value, where);
      else if (key == "beta") cfg.model.beta = parse_real(value, where);
      else fail("config", where + ": unknown key '" + key + "'");
    } else if (section == "finetune") {
      if (key == "classes") cfg.ft_classes = parse_int(value, where);
      else if (key == "examples") cfg.ft_examples = parse_int(value, where);
      else if (key == "example_len") cfg.ft_example_len = parse_int(value, where);
      else if (key == "pool_frac") cfg.ft_pool_frac = parse_real(value, where);
      else if (key == "task_seed") cfg.ft_task_seed = parse_uint(value, where);
      else if (key == "steps") cfg.ft_steps = parse_int(value, where);
      else if (key == "batch") cfg.ft_batch = parse_int(value, where);
      else if (key == "lr_max") cfg.ft_lr_max = parse_real(value, where);
      else if (key == "hidden") cfg.ft_hidden = parse_int(value, where);
      else if (key == "log_every") cfg.ft_log_every = parse_int(value, where);
      else fail("config", where + ": unknown key '" + key + "'");
    } else if (section == "sim") {
      if (key == "n_clusters") cfg.sim_spec.N_clusters = parse_int(value, where);
      else if (key == "d") cfg.sim_spec.d = parse_int(value, where);
      else if (key == "points_per_cluster")
        cfg.sim_spec.points_per_cluster = parse_int(value, where);
      else if (key == "center_separation")
        cfg.sim_spec.center_separation = parse_real(value, where);
      else if (key == "noise_sigma") cfg.sim_spec.noise_sigma = parse_real(value, where);
      else if (key == "seed") cfg.sim_spec.seed = parse_uint(value, where);
      else if (key == "oracle_steps") cfg.sim_oracle.steps = parse_int(value, where);
      else if (key == "oracle_lr") cfg.sim_oracle.lr = parse_real(value, where);
      else if (key == "target_scale") cfg.sim_target_scale = parse_real(value, where);
      else if (key == "target_seed") cfg.sim_target_seed = parse_uint(value, where);
      else if (key == "expert_noise") cfg.sim_expert_noise = parse_real(value, where);
      else if (key == "run_steps") cfg.sim_run.steps = parse_int(value, where);
      else if (key == "run_checkpoint_every")
        cfg.sim_run.checkpoint_every = parse_int(value, where);
      else if (key == "run_router_lr") cfg.sim_run.router_lr = parse_real(value, where);
      else if (key == "run_feature_lr_scale")
        cfg.sim_run.feature_lr_scale = parse_real(value, where);
      else if (key == "run_feature_hidden")
        cfg.sim_run.feature_hidden = parse_int(value, where);
      else if (key == "run_feature_dim")
        cfg.sim_run.feature_dim = parse_int(value, where);
      else if (key == "run_beta") cfg.sim_run.beta = parse_real(value, where);
      else if (key == "run_seed") cfg.sim_run.seed = parse_uint(value, where);
      else fail("config", where + ": unknown key '" + key + "'");
    } else {  // out
      if (key == "directory") cfg.out_dir = value;
      else fail("config", where + ": unknown key '" + key + "'");
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_text_file(path));
}

ModelConfig model_config_from_canonical(const std::string& text) {
  ModelConfig m;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line == "[model]") continue;
    const std::string where = "line " + std::to_string(line_no);
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail("config", "canonical section " + where + ": no '=' in '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    // the canonical rendering folds the [moe] keys into one block
    if (key == "variant" || key == "n_experts" || key == "k_codes" ||
        key == "top_k" || key == "metric")
      apply_moe_key(m, key, value, where);
    else
      apply_model_key(m, key, value, where);
  }
  return m;
}

}  // namespace vqmoe
