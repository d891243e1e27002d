#pragma once

#include "vqmoe/moe.hpp"
#include "vqmoe/quantizer.hpp"
#include "vqmoe/rng.hpp"
#include "vqmoe/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vqmoe {

// Raised when training hits a non-finite loss; the driver maps it to its
// numeric-abort exit code.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelConfig {
  int64_t vocab_size = 256;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_layers = 2;
  int64_t context_length = 128;
  int64_t N_experts = 4;
  int64_t K_codes = 4;
  int64_t top_k = 2;
  int64_t h_ffn = 128;
  int64_t d_low = 16;  // xmoe router projection width
  VariantKind variant = VariantKind::vqmoe;
  Metric metric = Metric::cosine;
  Activation activation = Activation::relu;
  bool expert_bias = true;
  double alpha = 0.1;
  double beta = 0.25;
  double stable_phase1_frac = 0.5;  // stablemoe: router trains in phase 1 only
  uint64_t seed = 0;

  void validate() const;
};

// Canonical one-line-per-field rendering of the [model] section; hashed into
// checkpoints so a resume with a different architecture fails loudly.
std::string canonical_model_section(const ModelConfig& cfg);
uint64_t config_digest(const ModelConfig& cfg);

struct Param {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

struct Block {
  Tensor ln1_g, ln1_b;
  Tensor W_qkv, b_qkv;  // merged projection [d, 3d]
  Tensor W_o, b_o;
  Tensor ln2_g, ln2_b;
  std::vector<ExpertFFN> experts;
  RouterVariant router;
};

struct AdamSlot {
  std::vector<double> m, v;
  int64_t t = 0;  // updates applied to this parameter
};

struct TrainState {
  ModelConfig cfg;
  Tensor tok_emb;  // [V, d]
  Tensor pos_emb;  // [T, d]
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b;
  Tensor W_head, b_head;  // [d, V]

  // classifier head, attached for fine-tuning
  bool finetune_mode = false;
  int64_t n_classes = 0;
  Tensor fc1_W, fc1_b, fc2_W, fc2_b;

  std::vector<Param> params;  // registration order is the checkpoint order
  std::vector<AdamSlot> adam;
  int64_t step = 0;
  bool codebook_ready = false;  // data-dependent init done on first forward
  Rng rng;

  Param* find_param(const std::string& name);
  void set_trainable(const std::string& name, bool trainable);
};

// Embedding, n_layers x [causal attention -> MoE], final norm, LM head.
// All weights uniform +-1/sqrt(fan_in) from cfg.seed; biases zero; layer norm
// gains one; xmoe temperature 10; vqmoe codebooks filled from the first batch.
TrainState build_model(const ModelConfig& cfg);

struct Batch {
  std::vector<int64_t> tokens;  // [B, T+1]; input = first T, target shifted by 1
  int64_t B = 0;
  int64_t T = 0;
};

struct ForwardResult {
  Tensor logits;      // [B, T, V] (LM) or [B, n_classes] (fine-tune)
  Tensor task_loss;   // defined when targets/labels were given
  Tensor vq_sum;      // scalar, sum of per-layer VQ losses (zero if none)
  Tensor final_hidden;  // [B, T, d] after the final norm
  std::vector<RoutingDecision> decisions;  // per layer
  std::vector<Tensor> moe_inputs;          // per layer, [B*T, d]
};

// Language-model forward. `targets` (length B*T, shifted by one) may be null
// for logits-only use. Initializes vqmoe codebooks from data on first call.
ForwardResult model_forward(Tape* tape, TrainState& st,
                            const std::vector<int64_t>& ids, int64_t B, int64_t T,
                            const std::vector<int64_t>* targets);

// Classifier forward for the fine-tuning mode: mean-pooled final hidden
// states through the two-layer head. MoE layers run the discrete path only.
ForwardResult classifier_forward(Tape* tape, TrainState& st,
                                 const std::vector<int64_t>& ids, int64_t B,
                                 int64_t T, const std::vector<int64_t>* labels);

// Switches the state to Eq.-7 fine-tuning: discrete path only, codebooks
// frozen, LM head retired, fresh 2-layer classifier attached.
void attach_classifier(TrainState& st, int64_t n_classes, int64_t hidden);

int64_t total_param_count(const TrainState& st);

}  // namespace vqmoe
