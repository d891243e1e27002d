#include "vqmoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "vqmoe/ops.hpp"

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

void sync_stablemoe_phase(TrainState& st, int64_t total_steps) {
  if (st.cfg.variant != VariantKind::stablemoe) return;
  const bool phase2 = static_cast<double>(st.step) >=
                      st.cfg.stable_phase1_frac * static_cast<double>(total_steps);
  for (size_t i = 0; i < st.blocks.size(); ++i) {
    st.blocks[i].router.frozen = phase2;
    st.set_trainable("blocks." + std::to_string(i) + ".router.we", !phase2);
  }
}

double trainable_grad_norm(const TrainState& st) {
  double sq = 0.0;
  for (const Param& p : st.params) {
    if (!p.trainable || !p.tensor.grad_allocated()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

void adam_update(TrainState& st, double lr, double clip_scale) {
  for (size_t i = 0; i < st.params.size(); ++i) {
    Param& p = st.params[i];
    if (!p.trainable || !p.tensor.grad_allocated()) continue;
    AdamSlot& slot = st.adam[i];
    slot.t += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(slot.t));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(slot.t));
    std::vector<double>& w = p.tensor.data();
    const std::vector<double>& grad = p.tensor.grad();
    for (size_t j = 0; j < w.size(); ++j) {
      const double g = grad[j] * clip_scale;
      slot.m[j] = kBeta1 * slot.m[j] + (1.0 - kBeta1) * g;
      slot.v[j] = kBeta2 * slot.v[j] + (1.0 - kBeta2) * g * g;
      w[j] -= lr * (slot.m[j] / bc1) / (std::sqrt(slot.v[j] / bc2) + kEps);
    }
  }
}

void zero_param_grads(TrainState& st) {
  for (Param& p : st.params)
    if (p.tensor.grad_allocated()) p.tensor.zero_grad();
}

StepMetrics optimize(TrainState& st, Tape& tape, const Tensor& task,
                     const Tensor& vq_sum, const TrainOptions& opts) {
  Tensor total = ops::add(&tape, task, ops::scale(&tape, vq_sum, st.cfg.alpha));
  if (!std::isfinite(total.value()))
    throw NumericError("train_step: non-finite loss at step " +
                       std::to_string(st.step));
  tape.backward(total);

  StepMetrics m;
  m.task_loss = task.value();
  m.vq_loss = vq_sum.value();
  m.total_loss = total.value();
  m.lr = cosine_lr(st.step, opts.total_steps, opts.lr_max);
  m.grad_norm = trainable_grad_norm(st);

  double clip_scale = 1.0;
  if (opts.clip > 0.0 && m.grad_norm > opts.clip) clip_scale = opts.clip / m.grad_norm;
  adam_update(st, m.lr, clip_scale);
  zero_param_grads(st);

  st.step += 1;
  m.step = st.step;
  return m;
}

}  // namespace

double cosine_lr(int64_t step, int64_t total_steps, double lr_max) {
  if (total_steps < 1) fail("cosine_lr", "total_steps must be positive");
  if (step < 0 || step > total_steps)
    fail("cosine_lr", "step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_max * 0.5 * (1.0 + std::cos(M_PI * frac));
}

Corpus corpus_from_bytes(const std::vector<uint8_t>& bytes, double train_frac,
                         double val_frac) {
  if (!(train_frac > 0.0) || !(val_frac > 0.0) || train_frac + val_frac >= 1.0)
    fail("corpus", "split fractions must be positive with train + val < 1");
  if (bytes.size() < 20) fail("corpus", "need at least 20 bytes to split");
  Corpus c;
  c.tokens.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i)
    c.tokens[i] = static_cast<int64_t>(bytes[i]);
  const int64_t n = static_cast<int64_t>(c.tokens.size());
  const int64_t n_train = static_cast<int64_t>(static_cast<double>(n) * train_frac);
  const int64_t n_val = static_cast<int64_t>(static_cast<double>(n) * val_frac);
  if (n_train < 1 || n_val < 1 || n_train + n_val >= n)
    fail("corpus", "corpus of " + std::to_string(n) + " bytes splits to empty views");
  c.train = {c.tokens.data(), n_train};
  c.val = {c.tokens.data() + n_train, n_val};
  c.test = {c.tokens.data() + n_train + n_val, n - n_train - n_val};
  return c;
}

Corpus corpus_from_file(const std::string& path, double train_frac, double val_frac) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("corpus", "cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return corpus_from_bytes(bytes, train_frac, val_frac);
}

Batch sample_batch(Rng& rng, const SplitView& split, int64_t B, int64_t T) {
  if (B < 1 || T < 1) fail("sample_batch", "B and T must be positive");
  if (split.size < T + 1)
    fail("sample_batch", "split of " + std::to_string(split.size) +
                             " tokens too short for T = " + std::to_string(T));
  Batch batch;
  batch.B = B;
  batch.T = T;
  batch.tokens.resize(static_cast<size_t>(B * (T + 1)));
  const int64_t max_start = split.size - (T + 1);
  for (int64_t b = 0; b < B; ++b) {
    const int64_t start = static_cast<int64_t>(rng.uniform_int(max_start + 1));
    for (int64_t t = 0; t <= T; ++t)
      batch.tokens[static_cast<size_t>(b * (T + 1) + t)] = split.data[start + t];
  }
  return batch;
}

StepMetrics train_step(TrainState& st, const Batch& batch, const TrainOptions& opts) {
  if (static_cast<int64_t>(batch.tokens.size()) != batch.B * (batch.T + 1))
    fail("train_step", "batch tokens not [B, T+1]");
  sync_stablemoe_phase(st, opts.total_steps);

  const int64_t B = batch.B, T = batch.T;
  std::vector<int64_t> inputs(static_cast<size_t>(B * T));
  std::vector<int64_t> targets(static_cast<size_t>(B * T));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t) {
      inputs[static_cast<size_t>(b * T + t)] =
          batch.tokens[static_cast<size_t>(b * (T + 1) + t)];
      targets[static_cast<size_t>(b * T + t)] =
          batch.tokens[static_cast<size_t>(b * (T + 1) + t + 1)];
    }

  Tape tape;
  ForwardResult fr = model_forward(&tape, st, inputs, B, T, &targets);
  return optimize(st, tape, fr.task_loss, fr.vq_sum, opts);
}

StepMetrics train_step_classifier(TrainState& st, const std::vector<int64_t>& ids,
                                  const std::vector<int64_t>& labels, int64_t B,
                                  int64_t T, const TrainOptions& opts) {
  Tape tape;
  ForwardResult fr = classifier_forward(&tape, st, ids, B, T, &labels);
  return optimize(st, tape, fr.task_loss, fr.vq_sum, opts);
}

double evaluate_bpc(TrainState& st, const SplitView& split, int64_t B, int64_t T) {
  if (split.size < 2) fail("evaluate_bpc", "split needs at least 2 tokens");
  if (B < 1 || T < 1) fail("evaluate_bpc", "B and T must be positive");

  // Window w covers tokens [w*T, w*T + T]; its targets are exactly the
  // positions w*T+1 .. w*T+T, so strides of T tile every target once.
  struct Window {
    int64_t start, len;  // len = number of input positions, i.e. targets
  };
  std::vector<Window> windows;
  for (int64_t start = 0; start + 1 < split.size; start += T)
    windows.push_back({start, std::min(T, split.size - 1 - start)});

  double nll_sum = 0.0;
  int64_t n_targets = 0;
  size_t i = 0;
  while (i < windows.size()) {
    // Batch together consecutive windows of equal length (the tail window may
    // be shorter and runs alone).
    const int64_t len = windows[i].len;
    size_t j = i;
    while (j < windows.size() && windows[j].len == len &&
           static_cast<int64_t>(j - i) < B)
      ++j;
    const int64_t nb = static_cast<int64_t>(j - i);
    std::vector<int64_t> inputs(static_cast<size_t>(nb * len));
    std::vector<int64_t> targets(static_cast<size_t>(nb * len));
    for (int64_t b = 0; b < nb; ++b) {
      const int64_t s = windows[i + static_cast<size_t>(b)].start;
      for (int64_t t = 0; t < len; ++t) {
        inputs[static_cast<size_t>(b * len + t)] = split.data[s + t];
        targets[static_cast<size_t>(b * len + t)] = split.data[s + t + 1];
      }
    }
    ForwardResult fr = model_forward(nullptr, st, inputs, nb, len, &targets);
    nll_sum += fr.task_loss.value() * static_cast<double>(nb * len);
    n_targets += nb * len;
    i = j;
  }
  return (nll_sum / static_cast<double>(n_targets)) / std::log(2.0);
}

double evaluate_accuracy(TrainState& st, const std::vector<int64_t>& ids,
                         const std::vector<int64_t>& labels, int64_t B, int64_t T) {
  const int64_t n = static_cast<int64_t>(labels.size());
  if (n == 0) fail("evaluate_accuracy", "empty evaluation set");
  if (static_cast<int64_t>(ids.size()) != n * T)
    fail("evaluate_accuracy", "ids not [n, T]");
  int64_t correct = 0;
  for (int64_t at = 0; at < n; at += B) {
    const int64_t nb = std::min(B, n - at);
    std::vector<int64_t> chunk(ids.begin() + at * T, ids.begin() + (at + nb) * T);
    ForwardResult fr = classifier_forward(nullptr, st, chunk, nb, T, nullptr);
    const std::vector<double>& logits = fr.logits.data();
    const int64_t C = st.n_classes;
    for (int64_t b = 0; b < nb; ++b) {
      int64_t best = 0;
      for (int64_t c = 1; c < C; ++c)
        if (logits[static_cast<size_t>(b * C + c)] >
            logits[static_cast<size_t>(b * C + best)])
          best = c;
      if (best == labels[static_cast<size_t>(at + b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void run_pretrain(TrainState& st, const Corpus& corpus, const LoopOptions& opts) {
  TrainOptions topt{opts.steps, opts.lr_max, opts.clip};
  while (st.step < opts.steps &&
         (opts.stop_after == 0 || st.step < opts.stop_after)) {
    Batch batch = sample_batch(st.rng, corpus.train, opts.batch, opts.seq_len);
    StepMetrics m = train_step(st, batch, topt);
    const bool last = st.step == opts.steps;
    if (opts.on_log && (last || (opts.log_every > 0 && m.step % opts.log_every == 0)))
      opts.on_log(m);
    if (opts.on_ckpt &&
        (last || (opts.ckpt_every > 0 && m.step % opts.ckpt_every == 0)))
      opts.on_ckpt(st);
  }
}

void run_finetune(TrainState& st, const LabeledSet& data, const LoopOptions& opts) {
  if (!st.finetune_mode) fail("finetune", "classifier head not attached");
  if (data.size() < 1) fail("finetune", "empty training set");
  TrainOptions topt{opts.steps, opts.lr_max, opts.clip};
  const int64_t T = data.T;
  while (st.step < opts.steps &&
         (opts.stop_after == 0 || st.step < opts.stop_after)) {
    std::vector<int64_t> ids(static_cast<size_t>(opts.batch * T));
    std::vector<int64_t> labels(static_cast<size_t>(opts.batch));
    for (int64_t b = 0; b < opts.batch; ++b) {
      const int64_t pick = static_cast<int64_t>(st.rng.uniform_int(data.size()));
      std::copy(data.tokens.begin() + pick * T, data.tokens.begin() + (pick + 1) * T,
                ids.begin() + b * T);
      labels[static_cast<size_t>(b)] = data.labels[static_cast<size_t>(pick)];
    }
    StepMetrics m = train_step_classifier(st, ids, labels, opts.batch, T, topt);
    const bool last = st.step == opts.steps;
    if (opts.on_log && (last || (opts.log_every > 0 && m.step % opts.log_every == 0)))
      opts.on_log(m);
    if (opts.on_ckpt &&
        (last || (opts.ckpt_every > 0 && m.step % opts.ckpt_every == 0)))
      opts.on_ckpt(st);
  }
}

LabeledSet make_majority_task(int64_t n_examples, int64_t T, int64_t n_classes,
                              int64_t vocab, double pool_frac, uint64_t seed) {
  if (n_examples < 1 || T < 1) fail("majority_task", "need positive examples and T");
  if (n_classes < 2) fail("majority_task", "need at least 2 classes");
  if (vocab < 2 * n_classes)
    fail("majority_task", "vocab " + std::to_string(vocab) + " too small for " +
                              std::to_string(n_classes) + " disjoint pools");
  if (!(pool_frac > 0.0) || pool_frac > 1.0)
    fail("majority_task", "pool_frac must lie in (0, 1]");

  Rng rng(seed);
  const int64_t pool = vocab / n_classes;
  LabeledSet set;
  set.T = T;
  set.tokens.resize(static_cast<size_t>(n_examples * T));
  set.labels.resize(static_cast<size_t>(n_examples));
  for (int64_t i = 0; i < n_examples; ++i) {
    const int64_t c = i % n_classes;
    set.labels[static_cast<size_t>(i)] = c;
    for (int64_t t = 0; t < T; ++t) {
      const int64_t tok = rng.uniform() < pool_frac
                              ? c * pool + rng.uniform_int(pool)
                              : rng.uniform_int(vocab);
      set.tokens[static_cast<size_t>(i * T + t)] = tok;
    }
  }
  return set;
}

}  // namespace vqmoe
