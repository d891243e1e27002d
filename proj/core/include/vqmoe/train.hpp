#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vqmoe/model.hpp"

namespace vqmoe {

struct TrainOptions {
  int64_t total_steps = 5000;
  double lr_max = 3.5e-4;
  double clip = 0.0;  // global grad-norm ceiling; 0 disables clipping
};

struct StepMetrics {
  int64_t step = 0;
  double task_loss = 0.0;
  double vq_loss = 0.0;
  double total_loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// lr_max * 0.5 * (1 + cos(pi * step / total_steps)), no warmup.
double cosine_lr(int64_t step, int64_t total_steps, double lr_max);

struct SplitView {
  const int64_t* data = nullptr;
  int64_t size = 0;
};

// Token stream plus contiguous 90:5:5 train/val/test views into it.
struct Corpus {
  std::vector<int64_t> tokens;
  SplitView train, val, test;
};

Corpus corpus_from_bytes(const std::vector<uint8_t>& bytes, double train_frac = 0.90,
                         double val_frac = 0.05);
Corpus corpus_from_file(const std::string& path, double train_frac = 0.90,
                        double val_frac = 0.05);

// B random windows of T+1 consecutive tokens, laid out [B, T+1].
Batch sample_batch(Rng& rng, const SplitView& split, int64_t B, int64_t T);

// One optimizer step on a next-token batch: forward, total = task + alpha*vq,
// backward, optional clip, Adam on trainable params. Throws NumericError on a
// non-finite loss. Advances st.step.
StepMetrics train_step(TrainState& st, const Batch& batch, const TrainOptions& opts);

// Same driver for the classification head; ids is [B, T], labels is [B].
StepMetrics train_step_classifier(TrainState& st, const std::vector<int64_t>& ids,
                                  const std::vector<int64_t>& labels, int64_t B,
                                  int64_t T, const TrainOptions& opts);

// Mean next-token NLL / ln 2 over the split. Windows stride by T so every
// position past the first is a target exactly once; a short tail window
// covers the remainder.
double evaluate_bpc(TrainState& st, const SplitView& split, int64_t B, int64_t T);

// Fraction of argmax(logits) == label, evaluated in minibatches of B.
double evaluate_accuracy(TrainState& st, const std::vector<int64_t>& ids,
                         const std::vector<int64_t>& labels, int64_t B, int64_t T);

struct LoopOptions {
  int64_t steps = 5000;
  int64_t batch = 32;
  int64_t seq_len = 128;
  double lr_max = 3.5e-4;
  double clip = 0.0;
  int64_t log_every = 50;
  int64_t ckpt_every = 0;   // 0 disables periodic checkpoints
  int64_t stop_after = 0;   // pause once st.step reaches this; 0 = run to steps
  std::function<void(const StepMetrics&)> on_log;
  std::function<void(TrainState&)> on_ckpt;
};

// Runs pretraining from st.step up to opts.steps; resuming mid-run continues
// the same schedule. Final step always triggers on_log and on_ckpt.
void run_pretrain(TrainState& st, const Corpus& corpus, const LoopOptions& opts);

// Fixed-length classification examples, tokens laid out [n, T].
struct LabeledSet {
  std::vector<int64_t> tokens;
  std::vector<int64_t> labels;
  int64_t T = 0;
  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

// Synthetic majority task: the vocab splits into n_classes disjoint pools and
// an example of class c draws each token from pool c with probability
// pool_frac, uniformly otherwise. Labels cycle 0..n_classes-1, so classes are
// balanced and the label is recoverable from token counts alone.
LabeledSet make_majority_task(int64_t n_examples, int64_t T, int64_t n_classes,
                              int64_t vocab, double pool_frac, uint64_t seed);

void run_finetune(TrainState& st, const LabeledSet& data, const LoopOptions& opts);

}  // namespace vqmoe
