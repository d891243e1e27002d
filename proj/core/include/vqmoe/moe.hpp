#pragma once

#include "vqmoe/quantizer.hpp"
#include "vqmoe/rng.hpp"
#include "vqmoe/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vqmoe {

enum class Activation { relu, gelu };
Activation activation_from_string(const std::string& s);
std::string activation_to_string(Activation a);

struct ExpertFFN {
  Tensor W1;  // [d, h]
  Tensor b1;  // [h]
  Tensor W2;  // [h, d]
  Tensor b2;  // [d]
  Activation activation = Activation::relu;
  bool use_bias = true;
};

ExpertFFN make_expert(int64_t d, int64_t h, Activation act, bool use_bias, Rng& rng);
std::vector<ExpertFFN> make_experts(int64_t n, int64_t d, int64_t h, Activation act,
                                    bool use_bias, Rng& rng);

// W2 phi(W1 x + b1) + b2 over rows of x
Tensor expert_forward(Tape* tape, const ExpertFFN& e, const Tensor& x);

enum class VariantKind { smoe, xmoe, stablemoe, smoe_dropout, vqmoe };
VariantKind variant_from_string(const std::string& s);
std::string variant_to_string(VariantKind k);

struct RouterVariant {
  VariantKind kind = VariantKind::smoe;
  // smoe / stablemoe / smoe_dropout: [N, d]. xmoe: [N, d_low] expert
  // embeddings compared in the down-projected space. vqmoe: [N, d] for the
  // continuous path.
  Tensor W_e;
  Tensor down_proj;    // [d, d_low], xmoe
  Tensor temperature;  // [1], xmoe, learnable, init 10
  Codebook codebook;   // vqmoe
  Tensor W_g;          // [2, d], vqmoe
  bool frozen = false;  // router weights blocked from gradient flow
};

struct RoutingDecision {
  std::vector<int64_t> expert_indices;  // [n*k] flattened, slot-major per token
  Tensor gate_weights;                  // [n, k], rows sum to 1
  std::vector<int64_t> code_indices;    // [n], vqmoe only
  Tensor gc_gd;                         // [n, 2], vqmoe only
  int64_t k = 0;
};

// TopK(softmax(x W_e^T), k) with kept weights renormalized, which equals a
// softmax over the k selected logits. Ties break to the lower expert index.
RoutingDecision route_topk(Tape* tape, const Tensor& x, const Tensor& W_e, int64_t k,
                           bool frozen = false);

// Dispatch over the router baselines (everything except vqmoe).
RoutingDecision route_variant(Tape* tape, const Tensor& x, const RouterVariant& variant,
                              int64_t k);

// Per token, sum over selected slots of gate weight times expert output.
Tensor smoe_forward(Tape* tape, const Tensor& x, const std::vector<ExpertFFN>& experts,
                    const RoutingDecision& decision);

struct VqmoeOutput {
  Tensor output;        // [n, d]
  RoutingDecision decision;
  QuantizationResult quant;
  Tensor vq;            // scalar auxiliary loss
};

// Continuous path (own W_e top-k mixture) and discrete path (straight-through
// quantized vector through expert code mod N), fused by a per-token 2-way
// softmax gate. `freeze` pins stop-gradient contents for gradient checking.
VqmoeOutput vqmoe_forward(Tape* tape, const Tensor& x,
                          const std::vector<ExpertFFN>& experts,
                          const RouterVariant& variant, int64_t k, double beta,
                          const StFreeze* freeze = nullptr);

// Fine-tuning path: quantize, route by code mod N, one expert per token.
// No gate, no continuous path, no auxiliary loss.
Tensor vqmoe_discrete_forward(Tape* tape, const Tensor& x,
                              const std::vector<ExpertFFN>& experts,
                              const Codebook& codebook);

}  // namespace vqmoe
