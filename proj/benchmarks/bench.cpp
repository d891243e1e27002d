#include <benchmark/benchmark.h>

#include "vqmoe/model.hpp"
#include "vqmoe/ops.hpp"
#include "vqmoe/quantizer.hpp"
#include "vqmoe/rng.hpp"
#include "vqmoe/train.hpp"

using namespace vqmoe;

namespace {

Tensor random_tensor(std::vector<int64_t> dims, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(dims));
  for (double& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

void bm_matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = random_tensor({n, n}, rng);
  Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tensor c = ops::matmul(nullptr, a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

void bm_softmax_lastdim(benchmark::State& state) {
  const int64_t rows = state.range(0);
  Rng rng(2);
  Tensor x = random_tensor({rows, 64}, rng, 4.0);
  for (auto _ : state) {
    Tensor y = ops::softmax_lastdim(nullptr, x);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * rows);
}

void bm_assign_codes(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(3);
  Codebook cb;
  cb.metric = Metric::euclidean;
  cb.vectors = random_tensor({64, 32}, rng);
  Tensor z = random_tensor({n, 32}, rng);
  for (auto _ : state) {
    QuantizationResult r = assign_codes(nullptr, z, cb);
    benchmark::DoNotOptimize(r.indices.data());
  }
  state.SetItemsProcessed(state.iterations() * n);
}

void bm_train_step(benchmark::State& state) {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.context_length = 32;
  cfg.h_ffn = 48;
  cfg.N_experts = 4;
  cfg.K_codes = 4;
  cfg.top_k = 2;
  cfg.variant = state.range(0) == 0 ? VariantKind::smoe : VariantKind::vqmoe;
  cfg.metric = Metric::euclidean;
  cfg.seed = 5;
  TrainState st = build_model(cfg);

  Rng rng(7);
  Batch batch;
  batch.B = 8;
  batch.T = 32;
  batch.tokens.resize(batch.B * (batch.T + 1));
  for (int64_t& t : batch.tokens) t = rng.uniform_int(cfg.vocab_size);

  TrainOptions opts;
  opts.lr_max = 1e-4;
  for (auto _ : state) {
    StepMetrics m = train_step(st, batch, opts);
    benchmark::DoNotOptimize(m.total_loss);
  }
  state.SetItemsProcessed(state.iterations() * batch.B * batch.T);
}

}  // namespace

BENCHMARK(bm_matmul)->Arg(64)->Arg(256);
BENCHMARK(bm_softmax_lastdim)->Arg(1024);
BENCHMARK(bm_assign_codes)->Arg(1024)->Arg(8192);
BENCHMARK(bm_train_step)->Arg(0)->Arg(1);

BENCHMARK_MAIN();
