#include "vqmoe/model.hpp"

#include "vqmoe/ops.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

void fill_uniform(Tensor& t, double scale, Rng& rng) {
  for (double& v : t.data()) v = rng.uniform(-scale, scale);
}

Tensor make_weight(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), true);
  fill_uniform(t, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) fail("config", "vocab_size must be >= 2");
  if (d_model < 1 || n_heads < 1 || context_length < 1 || h_ffn < 1)
    fail("config", "model dimensions must be positive");
  if (d_model % n_heads != 0)
    fail("config", "d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                       std::to_string(n_heads));
  if (n_layers < 0) fail("config", "n_layers must be >= 0");
  if (N_experts < 1 || K_codes < 1) fail("config", "N_experts and K_codes must be >= 1");
  if (top_k < 1 || top_k > N_experts)
    fail("config", "top_k " + std::to_string(top_k) + " outside [1, " +
                       std::to_string(N_experts) + "]");
  if (alpha < 0.0) fail("config", "alpha must be >= 0");
  if (beta < 0.0) fail("config", "beta must be >= 0");
  if (variant == VariantKind::xmoe && (d_low < 1 || d_low >= d_model))
    fail("config", "xmoe d_low must lie in [1, d_model)");
  if (stable_phase1_frac < 0.0 || stable_phase1_frac > 1.0)
    fail("config", "stable_phase1_frac must lie in [0, 1]");
}

std::string canonical_model_section(const ModelConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "[model]\n"
     << "vocab_size = " << cfg.vocab_size << "\n"
     << "d_model = " << cfg.d_model << "\n"
     << "n_heads = " << cfg.n_heads << "\n"
     << "n_layers = " << cfg.n_layers << "\n"
     << "context_length = " << cfg.context_length << "\n"
     << "n_experts = " << cfg.N_experts << "\n"
     << "k_codes = " << cfg.K_codes << "\n"
     << "top_k = " << cfg.top_k << "\n"
     << "h_ffn = " << cfg.h_ffn << "\n"
     << "d_low = " << cfg.d_low << "\n"
     << "variant = " << variant_to_string(cfg.variant) << "\n"
     << "metric = " << metric_to_string(cfg.metric) << "\n"
     << "activation = " << activation_to_string(cfg.activation) << "\n"
     << "expert_bias = " << (cfg.expert_bias ? 1 : 0) << "\n"
     << "alpha = " << cfg.alpha << "\n"
     << "beta = " << cfg.beta << "\n"
     << "stable_phase1_frac = " << cfg.stable_phase1_frac << "\n";
  return os.str();
}

uint64_t config_digest(const ModelConfig& cfg) {
  const std::string s = canonical_model_section(cfg);
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Param* TrainState::find_param(const std::string& name) {
  for (Param& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

void TrainState::set_trainable(const std::string& name, bool trainable) {
  Param* p = find_param(name);
  if (!p) fail("state", "no parameter named '" + name + "'");
  p->trainable = trainable;
}

namespace {

void reg(TrainState& st, const std::string& name, Tensor t, bool trainable = true) {
  st.params.push_back({name, t, trainable});
  AdamSlot slot;
  slot.m.assign(static_cast<size_t>(t.numel()), 0.0);
  slot.v.assign(static_cast<size_t>(t.numel()), 0.0);
  st.adam.push_back(std::move(slot));
}

}  // namespace

TrainState build_model(const ModelConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.cfg = cfg;
  st.rng = Rng(cfg.seed);
  const int64_t d = cfg.d_model, V = cfg.vocab_size, T = cfg.context_length;

  st.tok_emb = make_weight({V, d}, d, st.rng);
  reg(st, "tok_emb", st.tok_emb);
  st.pos_emb = make_weight({T, d}, d, st.rng);
  reg(st, "pos_emb", st.pos_emb);

  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    Block b;
    const std::string pre = "blocks." + std::to_string(i) + ".";
    b.ln1_g = Tensor::full({d}, 1.0, true);
    b.ln1_b = Tensor::zeros({d}, true);
    reg(st, pre + "ln1.g", b.ln1_g);
    reg(st, pre + "ln1.b", b.ln1_b);
    b.W_qkv = make_weight({d, 3 * d}, d, st.rng);
    b.b_qkv = Tensor::zeros({3 * d}, true);
    b.W_o = make_weight({d, d}, d, st.rng);
    b.b_o = Tensor::zeros({d}, true);
    reg(st, pre + "attn.wqkv", b.W_qkv);
    reg(st, pre + "attn.bqkv", b.b_qkv);
    reg(st, pre + "attn.wo", b.W_o);
    reg(st, pre + "attn.bo", b.b_o);
    b.ln2_g = Tensor::full({d}, 1.0, true);
    b.ln2_b = Tensor::zeros({d}, true);
    reg(st, pre + "ln2.g", b.ln2_g);
    reg(st, pre + "ln2.b", b.ln2_b);

    b.experts = make_experts(cfg.N_experts, d, cfg.h_ffn, cfg.activation,
                             cfg.expert_bias, st.rng);
    for (int64_t e = 0; e < cfg.N_experts; ++e) {
      const std::string ep = pre + "experts." + std::to_string(e) + ".";
      reg(st, ep + "w1", b.experts[static_cast<size_t>(e)].W1);
      if (cfg.expert_bias) reg(st, ep + "b1", b.experts[static_cast<size_t>(e)].b1);
      reg(st, ep + "w2", b.experts[static_cast<size_t>(e)].W2);
      if (cfg.expert_bias) reg(st, ep + "b2", b.experts[static_cast<size_t>(e)].b2);
    }

    b.router.kind = cfg.variant;
    switch (cfg.variant) {
      case VariantKind::smoe:
      case VariantKind::stablemoe:
        b.router.W_e = make_weight({cfg.N_experts, d}, d, st.rng);
        reg(st, pre + "router.we", b.router.W_e);
        break;
      case VariantKind::smoe_dropout:
        b.router.W_e = make_weight({cfg.N_experts, d}, d, st.rng);
        b.router.frozen = true;
        reg(st, pre + "router.we", b.router.W_e, false);
        break;
      case VariantKind::xmoe:
        b.router.W_e = make_weight({cfg.N_experts, cfg.d_low}, cfg.d_low, st.rng);
        b.router.down_proj = make_weight({d, cfg.d_low}, d, st.rng);
        b.router.temperature = Tensor::scalar(10.0, true);
        reg(st, pre + "router.we", b.router.W_e);
        reg(st, pre + "router.down_proj", b.router.down_proj);
        reg(st, pre + "router.temperature", b.router.temperature);
        break;
      case VariantKind::vqmoe:
        b.router.W_e = make_weight({cfg.N_experts, d}, d, st.rng);
        b.router.W_g = make_weight({2, d}, d, st.rng);
        b.router.codebook =
            Codebook{Tensor::zeros({cfg.K_codes, d}, true), cfg.metric};
        reg(st, pre + "router.we", b.router.W_e);
        reg(st, pre + "router.wg", b.router.W_g);
        reg(st, pre + "router.codebook", b.router.codebook.vectors);
        break;
    }
    st.blocks.push_back(std::move(b));
  }

  st.lnf_g = Tensor::full({d}, 1.0, true);
  st.lnf_b = Tensor::zeros({d}, true);
  reg(st, "lnf.g", st.lnf_g);
  reg(st, "lnf.b", st.lnf_b);
  st.W_head = make_weight({d, V}, d, st.rng);
  st.b_head = Tensor::zeros({V}, true);
  reg(st, "head.w", st.W_head);
  reg(st, "head.b", st.b_head);
  return st;
}

namespace {

Tensor attention(Tape* tape, const Block& b, const Tensor& x, int64_t B, int64_t T,
                 int64_t d, int64_t heads) {
  const int64_t dh = d / heads;
  Tensor xn = ops::layer_norm(tape, x, b.ln1_g, b.ln1_b);
  Tensor qkv = ops::add(tape, ops::matmul(tape, xn, b.W_qkv), b.b_qkv);
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int64_t h = 0; h < heads; ++h) {
    Tensor q = ops::slice_lastdim(tape, qkv, h * dh, dh);
    Tensor k = ops::slice_lastdim(tape, qkv, d + h * dh, dh);
    Tensor v = ops::slice_lastdim(tape, qkv, 2 * d + h * dh, dh);
    Tensor scores = ops::matmul(tape, ops::scale(tape, q, inv_sqrt),
                                ops::transpose_last2(tape, k));
    Tensor probs = ops::softmax_causal(tape, scores);
    head_outs.push_back(ops::matmul(tape, probs, v));
  }
  Tensor merged = heads == 1 ? head_outs[0] : ops::concat_lastdim(tape, head_outs);
  (void)B;
  (void)T;
  return ops::add(tape, ops::matmul(tape, merged, b.W_o), b.b_o);
}

// Applies the configured MoE layer to the [n, d] token matrix, accumulating
// the VQ auxiliary term and the routing decision into `fr`.
Tensor moe_layer(Tape* tape, TrainState& st, Block& b, const Tensor& x2d,
                 ForwardResult& fr) {
  if (b.router.kind == VariantKind::vqmoe && !st.codebook_ready)
    init_codebook_from_batch(b.router.codebook, x2d, st.rng);

  fr.moe_inputs.push_back(x2d);
  if (st.finetune_mode) {
    if (b.router.kind != VariantKind::vqmoe)
      fail("forward", "fine-tuning requires vqmoe layers");
    return vqmoe_discrete_forward(tape, x2d, b.experts, b.router.codebook);
  }
  if (b.router.kind == VariantKind::vqmoe) {
    VqmoeOutput out =
        vqmoe_forward(tape, x2d, b.experts, b.router, st.cfg.top_k, st.cfg.beta);
    fr.decisions.push_back(out.decision);
    fr.vq_sum = ops::add(tape, fr.vq_sum, out.vq);
    return out.output;
  }
  RoutingDecision dec = route_variant(tape, x2d, b.router, st.cfg.top_k);
  Tensor out = smoe_forward(tape, x2d, b.experts, dec);
  fr.decisions.push_back(std::move(dec));
  return out;
}

// Shared backbone: embeddings, blocks, final norm.
Tensor backbone(Tape* tape, TrainState& st, const std::vector<int64_t>& ids,
                int64_t B, int64_t T, ForwardResult& fr) {
  const int64_t d = st.cfg.d_model;
  if (T < 1 || T > st.cfg.context_length)
    fail("forward", "sequence length " + std::to_string(T) + " outside [1, " +
                        std::to_string(st.cfg.context_length) + "]");
  if (static_cast<int64_t>(ids.size()) != B * T)
    fail("forward", std::to_string(ids.size()) + " ids for B*T = " +
                        std::to_string(B * T));

  Tensor x = ops::embedding_lookup(tape, st.tok_emb, ids, {B, T});
  std::vector<int64_t> pos(static_cast<size_t>(T));
  for (int64_t t = 0; t < T; ++t) pos[static_cast<size_t>(t)] = t;
  x = ops::add(tape, x, ops::take_rows(tape, st.pos_emb, pos));

  for (Block& b : st.blocks) {
    x = ops::add(tape, x, attention(tape, b, x, B, T, d, st.cfg.n_heads));
    Tensor x2d =
        ops::reshape(tape, ops::layer_norm(tape, x, b.ln2_g, b.ln2_b), {B * T, d});
    Tensor moe_out = moe_layer(tape, st, b, x2d, fr);
    x = ops::add(tape, x, ops::reshape(tape, moe_out, {B, T, d}));
  }
  if (!st.codebook_ready && st.cfg.variant == VariantKind::vqmoe)
    st.codebook_ready = true;
  return ops::layer_norm(tape, x, st.lnf_g, st.lnf_b);
}

}  // namespace

ForwardResult model_forward(Tape* tape, TrainState& st,
                            const std::vector<int64_t>& ids, int64_t B, int64_t T,
                            const std::vector<int64_t>* targets) {
  ForwardResult fr;
  fr.vq_sum = Tensor::scalar(0.0);
  fr.final_hidden = backbone(tape, st, ids, B, T, fr);
  fr.logits = ops::add(tape, ops::matmul(tape, fr.final_hidden, st.W_head), st.b_head);
  if (targets) {
    if (static_cast<int64_t>(targets->size()) != B * T)
      fail("forward", std::to_string(targets->size()) + " targets for B*T = " +
                          std::to_string(B * T));
    Tensor flat = ops::reshape(tape, fr.logits, {B * T, st.cfg.vocab_size});
    fr.task_loss = ops::cross_entropy_with_logits(tape, flat, *targets);
  }
  return fr;
}

ForwardResult classifier_forward(Tape* tape, TrainState& st,
                                 const std::vector<int64_t>& ids, int64_t B,
                                 int64_t T, const std::vector<int64_t>* labels) {
  if (!st.finetune_mode) fail("forward", "classifier head not attached");
  ForwardResult fr;
  fr.vq_sum = Tensor::scalar(0.0);
  fr.final_hidden = backbone(tape, st, ids, B, T, fr);

  Tensor pool_w = Tensor::full({B, 1, T}, 1.0 / static_cast<double>(T));
  Tensor pooled =
      ops::reshape(tape, ops::matmul(tape, pool_w, fr.final_hidden), {B, st.cfg.d_model});
  Tensor hidden =
      ops::relu(tape, ops::add(tape, ops::matmul(tape, pooled, st.fc1_W), st.fc1_b));
  fr.logits = ops::add(tape, ops::matmul(tape, hidden, st.fc2_W), st.fc2_b);
  if (labels) {
    if (static_cast<int64_t>(labels->size()) != B)
      fail("forward", std::to_string(labels->size()) + " labels for batch " +
                          std::to_string(B));
    fr.task_loss = ops::cross_entropy_with_logits(tape, fr.logits, *labels);
  }
  return fr;
}

void attach_classifier(TrainState& st, int64_t n_classes, int64_t hidden) {
  if (st.cfg.variant != VariantKind::vqmoe)
    fail("finetune", "variant " + variant_to_string(st.cfg.variant) +
                         " has no codebook (discrete path undefined)");
  if (n_classes < 2) fail("finetune", "need at least 2 classes");
  if (hidden < 1) fail("finetune", "classifier hidden width must be positive");
  st.finetune_mode = true;
  st.n_classes = n_classes;
  const int64_t d = st.cfg.d_model;
  st.fc1_W = make_weight({d, hidden}, d, st.rng);
  st.fc1_b = Tensor::zeros({hidden}, true);
  st.fc2_W = make_weight({hidden, n_classes}, hidden, st.rng);
  st.fc2_b = Tensor::zeros({n_classes}, true);
  reg(st, "clf.fc1.w", st.fc1_W);
  reg(st, "clf.fc1.b", st.fc1_b);
  reg(st, "clf.fc2.w", st.fc2_W);
  reg(st, "clf.fc2.b", st.fc2_b);

  // Eq. 7 contract: codebooks freeze, the LM head retires.
  for (size_t i = 0; i < st.blocks.size(); ++i) {
    const std::string name = "blocks." + std::to_string(i) + ".router.codebook";
    st.set_trainable(name, false);
  }
  st.set_trainable("head.w", false);
  st.set_trainable("head.b", false);
}

int64_t total_param_count(const TrainState& st) {
  int64_t n = 0;
  for (const Param& p : st.params) n += p.tensor.numel();
  return n;
}

}  // namespace vqmoe
