#include "vqmoe/moe.hpp"

#include "vqmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

// Sorts slot order by logit descending, index ascending on ties.
void topk_indices(const double* logits, int64_t N, int64_t k, int64_t* out) {
  std::vector<int64_t> order(static_cast<size_t>(N));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  for (int64_t j = 0; j < k; ++j) out[j] = order[static_cast<size_t>(j)];
}

}  // namespace

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  fail("activation", "unknown activation '" + s + "' (expected relu or gelu)");
}

std::string activation_to_string(Activation a) {
  return a == Activation::relu ? "relu" : "gelu";
}

VariantKind variant_from_string(const std::string& s) {
  if (s == "smoe") return VariantKind::smoe;
  if (s == "xmoe") return VariantKind::xmoe;
  if (s == "stablemoe") return VariantKind::stablemoe;
  if (s == "smoe_dropout") return VariantKind::smoe_dropout;
  if (s == "vqmoe") return VariantKind::vqmoe;
  fail("variant", "unknown variant '" + s + "'");
}

std::string variant_to_string(VariantKind k) {
  switch (k) {
    case VariantKind::smoe: return "smoe";
    case VariantKind::xmoe: return "xmoe";
    case VariantKind::stablemoe: return "stablemoe";
    case VariantKind::smoe_dropout: return "smoe_dropout";
    case VariantKind::vqmoe: return "vqmoe";
  }
  fail("variant", "bad enum value");
}

ExpertFFN make_expert(int64_t d, int64_t h, Activation act, bool use_bias, Rng& rng) {
  ExpertFFN e;
  e.activation = act;
  e.use_bias = use_bias;
  e.W1 = Tensor({d, h}, true);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& v : e.W1.data()) v = rng.uniform(-s1, s1);
  e.W2 = Tensor({h, d}, true);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
  for (double& v : e.W2.data()) v = rng.uniform(-s2, s2);
  if (use_bias) {
    e.b1 = Tensor::zeros({h}, true);
    e.b2 = Tensor::zeros({d}, true);
  }
  return e;
}

std::vector<ExpertFFN> make_experts(int64_t n, int64_t d, int64_t h, Activation act,
                                    bool use_bias, Rng& rng) {
  std::vector<ExpertFFN> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out.push_back(make_expert(d, h, act, use_bias, rng));
  return out;
}

Tensor expert_forward(Tape* tape, const ExpertFFN& e, const Tensor& x) {
  Tensor pre = ops::matmul(tape, x, e.W1);
  if (e.use_bias) pre = ops::add(tape, pre, e.b1);
  Tensor hidden = e.activation == Activation::relu ? ops::relu(tape, pre)
                                                   : ops::gelu(tape, pre);
  Tensor out = ops::matmul(tape, hidden, e.W2);
  if (e.use_bias) out = ops::add(tape, out, e.b2);
  return out;
}

RoutingDecision route_topk(Tape* tape, const Tensor& x, const Tensor& W_e, int64_t k,
                           bool frozen) {
  const int64_t N = W_e.dim(0);
  if (k < 1 || k > N)
    fail("route_topk", "k = " + std::to_string(k) + " outside [1, " +
                           std::to_string(N) + "]");
  Tensor we = frozen ? ops::stop_gradient(tape, W_e) : W_e;
  Tensor logits = ops::matmul(tape, x, ops::transpose_last2(tape, we));
  const int64_t n = logits.dim(0);

  RoutingDecision d;
  d.k = k;
  d.expert_indices.resize(static_cast<size_t>(n * k));
  for (int64_t i = 0; i < n; ++i)
    topk_indices(logits.data().data() + i * N, N, k, d.expert_indices.data() + i * k);
  Tensor kept = ops::gather_lastdim(tape, logits, d.expert_indices, k);
  d.gate_weights = ops::softmax_lastdim(tape, kept);
  return d;
}

RoutingDecision route_variant(Tape* tape, const Tensor& x, const RouterVariant& variant,
                              int64_t k) {
  switch (variant.kind) {
    case VariantKind::smoe:
      return route_topk(tape, x, variant.W_e, k, variant.frozen);
    case VariantKind::stablemoe:
      return route_topk(tape, x, variant.W_e, k, variant.frozen);
    case VariantKind::smoe_dropout:
      // frozen from initialization, regardless of the flag's current value
      return route_topk(tape, x, variant.W_e, k, true);
    case VariantKind::xmoe: {
      const int64_t N = variant.W_e.dim(0);
      if (k < 1 || k > N)
        fail("route_variant", "k = " + std::to_string(k) + " outside [1, " +
                                  std::to_string(N) + "]");
      Tensor we = variant.frozen ? ops::stop_gradient(tape, variant.W_e) : variant.W_e;
      Tensor proj = ops::matmul(tape, x, variant.down_proj);
      Tensor cos = ops::matmul(
          tape, ops::l2_normalize_rows(tape, proj),
          ops::transpose_last2(tape, ops::l2_normalize_rows(tape, we)));
      Tensor logits = ops::scale_by(tape, cos, variant.temperature);
      const int64_t n = logits.dim(0);
      RoutingDecision d;
      d.k = k;
      d.expert_indices.resize(static_cast<size_t>(n * k));
      for (int64_t i = 0; i < n; ++i)
        topk_indices(logits.data().data() + i * N, N, k, d.expert_indices.data() + i * k);
      Tensor kept = ops::gather_lastdim(tape, logits, d.expert_indices, k);
      d.gate_weights = ops::softmax_lastdim(tape, kept);
      return d;
    }
    case VariantKind::vqmoe:
      fail("route_variant", "vqmoe has no standalone router (use vqmoe_forward)");
  }
  fail("route_variant", "bad variant kind");
}

Tensor smoe_forward(Tape* tape, const Tensor& x, const std::vector<ExpertFFN>& experts,
                    const RoutingDecision& decision) {
  const int64_t n = x.dim(0);
  const int64_t N = static_cast<int64_t>(experts.size());
  const int64_t k = decision.k;
  if (static_cast<int64_t>(decision.expert_indices.size()) != n * k)
    fail("smoe_forward", "decision covers " +
                             std::to_string(decision.expert_indices.size() / std::max<int64_t>(k, 1)) +
                             " tokens for " + std::to_string(n) + " inputs");

  Tensor flat_gates = ops::reshape(tape, decision.gate_weights, {n * k, 1});
  Tensor out;
  bool first = true;
  for (int64_t e = 0; e < N; ++e) {
    std::vector<int64_t> tokens, slots;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < k; ++j)
        if (decision.expert_indices[static_cast<size_t>(i * k + j)] == e) {
          tokens.push_back(i);
          slots.push_back(i * k + j);
        }
    if (tokens.empty()) continue;
    Tensor xe = ops::take_rows(tape, x, tokens);
    Tensor ye = expert_forward(tape, experts[static_cast<size_t>(e)], xe);
    Tensor we = ops::take_rows(tape, flat_gates, slots);
    Tensor scattered = ops::scatter_rows(tape, ops::mul_rows(tape, ye, we), tokens, n);
    out = first ? scattered : ops::add(tape, out, scattered);
    first = false;
  }
  if (first) fail("smoe_forward", "no expert received any token");
  return out;
}

namespace {

// Routes each row of `src` to one expert by its code index mod N.
Tensor discrete_expert_pass(Tape* tape, const Tensor& src,
                            const std::vector<ExpertFFN>& experts,
                            const std::vector<int64_t>& codes) {
  const int64_t n = src.dim(0);
  const int64_t N = static_cast<int64_t>(experts.size());
  Tensor out;
  bool first = true;
  for (int64_t e = 0; e < N; ++e) {
    std::vector<int64_t> tokens;
    for (int64_t i = 0; i < n; ++i)
      if (code_to_expert(codes[static_cast<size_t>(i)], N) == e) tokens.push_back(i);
    if (tokens.empty()) continue;
    Tensor xe = ops::take_rows(tape, src, tokens);
    Tensor ye = expert_forward(tape, experts[static_cast<size_t>(e)], xe);
    Tensor scattered = ops::scatter_rows(tape, ye, tokens, n);
    out = first ? scattered : ops::add(tape, out, scattered);
    first = false;
  }
  if (first) fail("vqmoe_forward", "no expert received any token");
  return out;
}

}  // namespace

VqmoeOutput vqmoe_forward(Tape* tape, const Tensor& x,
                          const std::vector<ExpertFFN>& experts,
                          const RouterVariant& variant, int64_t k, double beta,
                          const StFreeze* freeze) {
  if (variant.kind != VariantKind::vqmoe)
    fail("vqmoe_forward", "variant kind is " + variant_to_string(variant.kind));
  const int64_t n = x.dim(0);

  VqmoeOutput r;
  r.decision = route_topk(tape, x, variant.W_e, k, variant.frozen);
  Tensor continuous = smoe_forward(tape, x, experts, r.decision);

  r.quant = assign_codes(tape, x, variant.codebook);
  const std::vector<int64_t>& codes = freeze ? freeze->indices : r.quant.indices;
  Tensor st = freeze ? straight_through(tape, x, r.quant, variant.codebook, freeze)
                     : r.quant.quantized;
  Tensor discrete = discrete_expert_pass(tape, st, experts, codes);

  Tensor gates = ops::softmax_lastdim(
      tape, ops::matmul(tape, x, ops::transpose_last2(tape, variant.W_g)));
  Tensor g_c = ops::slice_lastdim(tape, gates, 0, 1);
  Tensor g_d = ops::slice_lastdim(tape, gates, 1, 1);
  r.output = ops::add(tape, ops::mul_rows(tape, continuous, g_c),
                      ops::mul_rows(tape, discrete, g_d));

  r.decision.code_indices = codes;
  r.decision.gc_gd = gates;
  r.vq = vq_loss(tape, x, r.quant, variant.codebook, beta, freeze);
  (void)n;
  return r;
}

Tensor vqmoe_discrete_forward(Tape* tape, const Tensor& x,
                              const std::vector<ExpertFFN>& experts,
                              const Codebook& codebook) {
  QuantizationResult r = assign_codes(tape, x, codebook);
  return discrete_expert_pass(tape, r.quantized, experts, r.indices);
}

}  // namespace vqmoe
