#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "vqmoe/diagnostics.hpp"
#include "vqmoe/io.hpp"
#include "vqmoe/model.hpp"
#include "vqmoe/ops.hpp"
#include "vqmoe/train.hpp"

using namespace vqmoe;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0,
                     bool grad = false) {
  Tensor t(shape, grad);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

RouterVariant make_router(VariantKind kind, int64_t N, int64_t d, Rng& rng) {
  RouterVariant v;
  v.kind = kind;
  v.W_e = random_tensor({N, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  return v;
}

RouterVariant make_vq_router(int64_t N, int64_t K, int64_t d, Rng& rng,
                             Metric metric = Metric::euclidean) {
  RouterVariant v;
  v.kind = VariantKind::vqmoe;
  v.W_e = random_tensor({N, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  v.W_g = random_tensor({2, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
  v.codebook.vectors = random_tensor({K, d}, rng, 1.0, true);
  v.codebook.metric = metric;
  return v;
}

// layered plane rotations; orthogonal by construction
std::vector<double> random_orthogonal(int64_t d, Rng& rng) {
  std::vector<double> Q(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < d; ++i) Q[static_cast<size_t>(i * d + i)] = 1.0;
  for (int rep = 0; rep < 3; ++rep)
    for (int64_t i = 0; i + 1 < d; ++i) {
      const int64_t j = i + 1 + static_cast<int64_t>(rng.uniform_int(d - i - 1));
      const double th = rng.uniform(0.0, 6.283185307179586);
      const double c = std::cos(th), s = std::sin(th);
      for (int64_t r = 0; r < d; ++r) {
        const double a = Q[static_cast<size_t>(r * d + i)];
        const double b = Q[static_cast<size_t>(r * d + j)];
        Q[static_cast<size_t>(r * d + i)] = a * c - b * s;
        Q[static_cast<size_t>(r * d + j)] = a * s + b * c;
      }
    }
  return Q;
}

bool same_bytes(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

template <typename Fn>
std::string error_message(Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

ModelConfig small_vq_config() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.context_length = 16;
  cfg.N_experts = 4;
  cfg.K_codes = 4;
  cfg.top_k = 2;
  cfg.h_ffn = 48;
  cfg.variant = VariantKind::vqmoe;
  cfg.metric = Metric::euclidean;
  cfg.seed = 5;
  return cfg;
}

std::vector<int64_t> random_ids(Rng& rng, int64_t n, int64_t vocab) {
  std::vector<int64_t> ids(static_cast<size_t>(n));
  for (auto& v : ids) v = static_cast<int64_t>(rng.uniform_int(vocab));
  return ids;
}

Corpus pattern_corpus(const std::string& pattern, int64_t total) {
  std::vector<uint8_t> bytes(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i)
    bytes[static_cast<size_t>(i)] =
        static_cast<uint8_t>(pattern[static_cast<size_t>(i) % pattern.size()]);
  return corpus_from_bytes(bytes);
}

}  // namespace

// ---------------------------------------------------------------------------
// consistency

TEST_CASE("vqmoe discrete selection with K=N euclidean centroids is consistent exactly") {
  Rng rng(31);
  const int64_t K = 4, d = 8, n = 60;
  Codebook cb;
  cb.vectors = random_tensor({K, d}, rng);
  cb.metric = Metric::euclidean;
  Tensor x = random_tensor({n, d}, rng);

  QuantizationResult qr = assign_codes(nullptr, x, cb);
  RoutingDecision dec;
  dec.code_indices = qr.indices;

  Tensor centroids = centroids_from_codebook(cb, K);
  CHECK(same_bytes(centroids.data(), cb.vectors.data()));  // K=N: identity map

  ConsistencyReport r = consistency_score(x, dec, centroids, Metric::euclidean, 7);
  CHECK(r.score == 1.0);
  CHECK(r.step == 7);
  CHECK(r.mode == ConsistencyMode::definitional);
}

TEST_CASE("random routing scores about 1/N against running centroids") {
  Rng rng(97);
  const int64_t N = 4, d = 16, n = 10000;
  Tensor x = random_tensor({n, d}, rng);
  RoutingDecision dec;
  dec.k = 1;
  dec.expert_indices.resize(static_cast<size_t>(n));
  for (auto& e : dec.expert_indices) e = static_cast<int64_t>(rng.uniform_int(N));

  RunningCentroids rc(N, d);
  rc.observe(x, selected_experts(dec, N));
  ConsistencyReport r = consistency_score(x, dec, rc.centroids(), Metric::euclidean);
  CHECK(std::abs(r.score - 0.25) <= 0.05);
}

TEST_CASE("codebook centroids average the codes mapped to each expert") {
  Rng rng(3);
  const int64_t K = 8, N = 4, d = 4;
  Codebook cb;
  cb.vectors = random_tensor({K, d}, rng);
  Tensor c = centroids_from_codebook(cb, N);
  for (int64_t e = 0; e < N; ++e)
    for (int64_t t = 0; t < d; ++t) {
      const double expect = 0.5 * (cb.vectors.data()[static_cast<size_t>(e * d + t)] +
                                   cb.vectors.data()[static_cast<size_t>((e + N) * d + t)]);
      CHECK(c.data()[static_cast<size_t>(e * d + t)] == doctest::Approx(expect).epsilon(1e-15));
    }

  // more experts than codes leaves someone with nothing to average
  CHECK(error_message([&] { centroids_from_codebook(cb, 12); }).find("no codes") !=
        std::string::npos);
}

TEST_CASE("running centroids fall back to the global mean for idle experts") {
  Rng rng(12);
  const int64_t N = 3, d = 5, n = 10;
  Tensor x = random_tensor({n, d}, rng);
  std::vector<int64_t> sel(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) sel[static_cast<size_t>(i)] = i % 2;  // expert 2 idle

  RunningCentroids rc(N, d);
  rc.observe(x, sel);
  Tensor c = rc.centroids();
  for (int64_t t = 0; t < d; ++t) {
    double g = 0.0;
    for (int64_t i = 0; i < n; ++i) g += x.data()[static_cast<size_t>(i * d + t)];
    g /= static_cast<double>(n);
    CHECK(c.data()[static_cast<size_t>(2 * d + t)] == doctest::Approx(g).epsilon(1e-14));
  }

  CHECK(error_message([&] { RunningCentroids(0, 4); }).find("positive") !=
        std::string::npos);
  CHECK(error_message([&] { RunningCentroids(2, 3).centroids(); }).find("no observations") !=
        std::string::npos);
}

TEST_CASE("temporal consistency counts unchanged selections") {
  RoutingDecision prev, cur;
  prev.k = 1;
  prev.expert_indices = {0, 1, 2, 3, 0};
  cur.k = 1;
  cur.expert_indices = {0, 1, 0, 3, 1};
  ConsistencyReport r = temporal_consistency(cur, prev, 4, 100);
  CHECK(r.score == doctest::Approx(0.6));
  CHECK(r.mode == ConsistencyMode::temporal);
  CHECK(r.step == 100);

  // code-based selections compare through the mod-N map
  RoutingDecision pc, cc;
  pc.code_indices = {4, 1, 2};
  cc.code_indices = {0, 5, 2};
  CHECK(temporal_consistency(cc, pc, 4).score == 1.0);

  RoutingDecision shorter;
  shorter.k = 1;
  shorter.expert_indices = {0, 1};
  CHECK(error_message([&] { temporal_consistency(cur, shorter, 4); }).find("size") !=
        std::string::npos);
  RoutingDecision empty;
  CHECK(error_message([&] { temporal_consistency(empty, empty, 4); })
            .find("no routing slots") != std::string::npos);
}

TEST_CASE("consistency rejects bad centroids and mismatched decisions") {
  Rng rng(4);
  Tensor x = random_tensor({3, 4}, rng);
  RoutingDecision dec;
  dec.k = 1;
  dec.expert_indices = {0, 1, 0};

  Tensor bad = random_tensor({2, 4}, rng);
  bad.data()[3] = std::numeric_limits<double>::quiet_NaN();
  CHECK(error_message([&] { consistency_score(x, dec, bad, Metric::euclidean); })
            .find("finite") != std::string::npos);

  Tensor wrong = random_tensor({2, 5}, rng);
  CHECK(error_message([&] { consistency_score(x, dec, wrong, Metric::euclidean); })
            .find("centroids") != std::string::npos);

  RoutingDecision two;
  two.k = 1;
  two.expert_indices = {0, 1};
  Tensor c = random_tensor({2, 4}, rng);
  CHECK(error_message([&] { consistency_score(x, two, c, Metric::euclidean); })
            .find("covers") != std::string::npos);
}

// ---------------------------------------------------------------------------
// jacobian rank decomposition

TEST_CASE("smoe residual rank stays within the expert-count bound") {
  Rng rng(71);
  const int64_t d = 32, N = 4, h = 16, k = 2;
  std::vector<ExpertFFN> experts = make_experts(N, d, h, Activation::relu, true, rng);
  RouterVariant router = make_router(VariantKind::smoe, N, d, rng);

  int admissible = 0, nonzero = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({1, d}, rng);
    JacobianReport rep;
    try {
      rep = jacobian_residual_rank(experts, router, x, k, 0.25);
    } catch (const std::runtime_error&) {
      continue;  // boundary probe
    }
    ++admissible;
    CHECK(rep.bound == N);
    CHECK(rep.numerical_rank <= rep.bound);
    CHECK(rep.margin > 1e-3);
    CHECK(static_cast<int64_t>(rep.residual_singular_values.size()) == d);
    for (size_t i = 1; i < rep.residual_singular_values.size(); ++i)
      CHECK(rep.residual_singular_values[i] <= rep.residual_singular_values[i - 1]);
    if (rep.numerical_rank >= 1) ++nonzero;
  }
  CHECK(admissible >= 15);
  CHECK(nonzero >= 1);  // the gate gradient is generically present
}

TEST_CASE("vqmoe residual rank respects N+K+2 and usually exceeds the smoe bound") {
  Rng rng(29);
  const int64_t d = 32, N = 4, K = 8, k = 2, h = K;
  std::vector<ExpertFFN> experts = make_experts(N, d, h, Activation::gelu, true, rng);
  RouterVariant router = make_vq_router(N, K, d, rng);

  int admissible = 0, above_smoe_bound = 0;
  for (int trial = 0; trial < 25; ++trial) {
    Tensor x = random_tensor({1, d}, rng);
    JacobianReport rep;
    try {
      rep = jacobian_residual_rank(experts, router, x, k, 0.25);
    } catch (const std::runtime_error&) {
      continue;
    }
    ++admissible;
    CHECK(rep.bound == N + K + 2);
    CHECK(rep.numerical_rank <= rep.bound);
    if (rep.numerical_rank > N) ++above_smoe_bound;
  }
  CHECK(admissible >= 18);
  CHECK(static_cast<double>(above_smoe_bound) >= 0.8 * static_cast<double>(admissible));
}

TEST_CASE("every router variant obeys the rank bound on admissible probes") {
  Rng rng(55);
  const int64_t d = 16, N = 4, h = 12, k = 2;
  std::vector<ExpertFFN> experts = make_experts(N, d, h, Activation::relu, true, rng);

  for (VariantKind kind : {VariantKind::smoe, VariantKind::stablemoe,
                           VariantKind::smoe_dropout, VariantKind::xmoe}) {
    RouterVariant router;
    if (kind == VariantKind::xmoe) {
      router.kind = kind;
      const int64_t dl = 6;
      router.W_e = random_tensor({N, dl}, rng, 1.0, true);
      router.down_proj = random_tensor({d, dl}, rng, 1.0 / std::sqrt(16.0), true);
      router.temperature = Tensor::scalar(10.0, true);
    } else {
      router = make_router(kind, N, d, rng);
      router.frozen = kind != VariantKind::smoe;
    }
    int admissible = 0;
    for (int trial = 0; trial < 8; ++trial) {
      Tensor x = random_tensor({1, d}, rng);
      try {
        JacobianReport rep = jacobian_residual_rank(experts, router, x, k, 0.25);
        CHECK(rep.numerical_rank <= rep.bound);
        CHECK(rep.bound == N);
        ++admissible;
      } catch (const std::runtime_error&) {
      }
    }
    CHECK(admissible >= 4);
  }
}

TEST_CASE("constant selection weights empty the residual") {
  Rng rng(42);
  const int64_t d = 16, N = 4, h = 8, k = 2;
  std::vector<ExpertFFN> experts = make_experts(N, d, h, Activation::relu, true, rng);
  RouterVariant router = make_router(VariantKind::stablemoe, N, d, rng);
  router.frozen = true;

  int checked = 0;
  for (int trial = 0; trial < 6; ++trial) {
    Tensor x = random_tensor({1, d}, rng);
    try {
      JacobianReport rep = jacobian_residual_rank(experts, router, x, k, 0.25, true);
      CHECK(rep.numerical_rank == 0);
      ++checked;
    } catch (const std::runtime_error&) {
    }
  }
  CHECK(checked >= 3);

  RouterVariant vq = make_vq_router(2, 4, d, rng);
  Tensor x = random_tensor({1, d}, rng);
  CHECK(error_message([&] { jacobian_residual_rank(experts, vq, x, 1, 0.25, true); })
            .find("router variants") != std::string::npos);
}

TEST_CASE("boundary probes and oversized inputs are rejected") {
  Rng rng(8);
  const int64_t d = 16, N = 4, h = 8;
  std::vector<ExpertFFN> experts = make_experts(N, d, h, Activation::relu, true, rng);

  // identical router rows tie every logit: zero selection margin
  RouterVariant flat;
  flat.kind = VariantKind::smoe;
  flat.W_e = Tensor({N, d}, true);
  Tensor row = random_tensor({1, d}, rng);
  for (int64_t e = 0; e < N; ++e)
    std::memcpy(flat.W_e.data().data() + e * d, row.data().data(),
                sizeof(double) * static_cast<size_t>(d));
  Tensor x = random_tensor({1, d}, rng);
  CHECK(error_message([&] { jacobian_residual_rank(experts, flat, x, 2, 0.25); })
            .find("boundary") != std::string::npos);

  // identical codebook rows tie the assignment
  RouterVariant vq = make_vq_router(N, 4, d, rng);
  for (int64_t j = 0; j < 4; ++j)
    std::memcpy(vq.codebook.vectors.data().data() + j * d, row.data().data(),
                sizeof(double) * static_cast<size_t>(d));
  CHECK(error_message([&] { jacobian_residual_rank(experts, vq, x, 2, 0.25); })
            .find("boundary") != std::string::npos);

  std::vector<ExpertFFN> wide = make_experts(2, 80, 8, Activation::relu, true, rng);
  RouterVariant wide_router = make_router(VariantKind::smoe, 2, 80, rng);
  Tensor wx = random_tensor({1, 80}, rng);
  CHECK(error_message([&] { jacobian_residual_rank(wide, wide_router, wx, 1, 0.25); })
            .find("64") != std::string::npos);
}

// ---------------------------------------------------------------------------
// expert representation PCA

TEST_CASE("isotropic cloud spreads variance evenly across axes") {
  Rng rng(19);
  const int64_t n = 4000, d = 16;
  Tensor x = random_tensor({n, d}, rng);
  std::vector<int64_t> labels(static_cast<size_t>(n), 0);
  PcaResult r = expert_pca(x, labels, 1);
  const double top2 = r.explained[0] + r.explained[1];
  CHECK(std::abs(top2 - 2.0 / static_cast<double>(d)) < 0.03);
  CHECK(r.explained[0] >= r.explained[1]);
}

TEST_CASE("pca projection is rotation invariant up to sign") {
  Rng rng(23);
  const int64_t n = 200, d = 8;
  Tensor x({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < d; ++t) {
      const double s = t == 0 ? 5.0 : (t == 1 ? 3.0 : 1.0);
      x.data()[static_cast<size_t>(i * d + t)] = s * rng.normal();
    }
  std::vector<int64_t> labels(static_cast<size_t>(n), 0);

  const std::vector<double> Q = random_orthogonal(d, rng);
  Tensor xr({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < d; ++t) {
      double acc = 0.0;
      for (int64_t s = 0; s < d; ++s)
        acc += x.data()[static_cast<size_t>(i * d + s)] * Q[static_cast<size_t>(s * d + t)];
      xr.data()[static_cast<size_t>(i * d + t)] = acc;
    }

  PcaResult a = expert_pca(x, labels, 1);
  PcaResult b = expert_pca(xr, labels, 1);
  CHECK(std::abs(a.explained[0] - b.explained[0]) < 1e-10);
  CHECK(std::abs(a.explained[1] - b.explained[1]) < 1e-10);
  for (int64_t j = 0; j < 2; ++j) {
    double diff_same = 0.0, diff_flip = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double va = a.coords[static_cast<size_t>(i * 2 + j)];
      const double vb = b.coords[static_cast<size_t>(i * 2 + j)];
      diff_same = std::max(diff_same, std::abs(va - vb));
      diff_flip = std::max(diff_flip, std::abs(va + vb));
    }
    CHECK(std::min(diff_same, diff_flip) < 1e-8);
  }
}

TEST_CASE("identical expert outputs collapse every group mean") {
  Rng rng(41);
  const int64_t d = 8, n = 12, N = 4;
  ExpertFFN e = make_expert(d, 16, Activation::relu, true, rng);
  Tensor x0 = random_tensor({1, d}, rng);
  Tensor y0 = expert_forward(nullptr, e, x0);

  Tensor outputs({n, d});
  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(outputs.data().data() + i * d, y0.data().data(),
                sizeof(double) * static_cast<size_t>(d));
    labels[static_cast<size_t>(i)] = i % N;
  }
  PcaResult r = expert_pca(outputs, labels, N);
  for (double m : r.group_means) CHECK(std::abs(m) <= 1e-9);
  for (double c : r.coords) CHECK(std::abs(c) <= 1e-9);  // centering removed everything
}

TEST_CASE("pca csv round-trips coordinates bit-exactly and keeps empty groups") {
  Rng rng(77);
  const int64_t n = 20, d = 6, N = 4;
  Tensor outputs = random_tensor({n, d}, rng);
  std::vector<int64_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    labels[static_cast<size_t>(i)] = (i % 3);  // expert 3 never appears
  PcaResult r = expert_pca(outputs, labels, N);
  CHECK(r.group_sizes[3] == 0);

  const std::string path = "pca_roundtrip_test.csv";
  write_pca_csv(path, r);
  CHECK(!std::filesystem::exists(path + ".tmp"));
  PcaResult back = read_pca_csv(path);
  CHECK(back.labels == r.labels);
  CHECK(same_bytes(back.coords, r.coords));
  std::filesystem::remove(path);
}

TEST_CASE("representation dump projects the selected expert's outputs") {
  ModelConfig cfg = small_vq_config();
  cfg.n_layers = 1;
  cfg.N_experts = 1;
  cfg.K_codes = 1;
  cfg.top_k = 1;
  TrainState st = build_model(cfg);
  Rng rng(2);
  const int64_t B = 2, T = 12;
  std::vector<int64_t> ids = random_ids(rng, B * T, cfg.vocab_size);

  PcaResult r = expert_representation_dump(st, ids, B, T);
  CHECK(static_cast<int64_t>(r.labels.size()) == B * T);
  CHECK(r.group_sizes[0] == B * T);

  // with one expert the pooled matrix is exactly that expert on the layer input
  ForwardResult fr = model_forward(nullptr, st, ids, B, T, nullptr);
  Tensor expect = expert_forward(nullptr, st.blocks[0].experts[0], fr.moe_inputs[0]);
  CHECK(same_bytes(r.pooled.data(), expect.data()));
}

TEST_CASE("representation dump validates the layer index") {
  ModelConfig cfg = small_vq_config();
  TrainState st = build_model(cfg);
  Rng rng(6);
  std::vector<int64_t> ids = random_ids(rng, 2 * 8, cfg.vocab_size);
  PcaResult last = expert_representation_dump(st, ids, 2, 8, -1);
  PcaResult one = expert_representation_dump(st, ids, 2, 8, 1);
  CHECK(same_bytes(last.coords, one.coords));  // -1 means the last MoE layer
  CHECK(error_message([&] { expert_representation_dump(st, ids, 2, 8, 2); })
            .find("layer") != std::string::npos);
  for (int64_t l : last.labels) {
    CHECK(l >= 0);
    CHECK(l < cfg.N_experts);
  }
}

// ---------------------------------------------------------------------------
// load statistics

TEST_CASE("load counters cover every slot and flag stray indices") {
  Rng rng(90);
  const int64_t n = 24, d = 16, N = 4, k = 2;
  Tensor x = random_tensor({n, d}, rng);
  Tensor W_e = random_tensor({N, d}, rng, 0.5, true);
  RoutingDecision dec = route_topk(nullptr, x, W_e, k);

  std::vector<int64_t> load = expert_load(dec, N);
  int64_t total = 0;
  for (int64_t c : load) total += c;
  CHECK(total == n * k);

  dec.code_indices.assign(static_cast<size_t>(n), 1);
  std::vector<int64_t> load2 = expert_load(dec, N);
  int64_t total2 = 0;
  for (int64_t c : load2) total2 += c;
  CHECK(total2 == n * k + n);
  CHECK(load2[1] == load[1] + n);

  std::vector<int64_t> counts = code_load({0, 1, 1, 3}, 5);
  CHECK(counts == std::vector<int64_t>{1, 2, 0, 1, 0});
  CHECK(error_message([&] { code_load({7}, 5); }).find("outside") != std::string::npos);
}

// ---------------------------------------------------------------------------
// flops accounting

TEST_CASE("flops counter matches the hand tally for the tiny stack") {
  ModelConfig cfg;  // defaults: d=64 h=128 K=4 N=4 k=2 T=128 V=256 L=2 vqmoe
  cfg.metric = Metric::euclidean;
  FlopsBreakdown pre = flops_breakdown(cfg, FlopsMode::pretrain);
  // per token per layer: attn 8d^2+4Td, router 2Nd, gate 4d, scan 2Kd,
  // experts (k+1)4dh; head 2dV once
  CHECK(pre.attention == 2 * (8 * 64 * 64 + 4 * 128 * 64));
  CHECK(pre.router == 2 * (2 * 4 * 64));
  CHECK(pre.gate == 2 * (4 * 64));
  CHECK(pre.quantizer == 2 * (2 * 4 * 64));
  CHECK(pre.experts == 2 * (3 * 4 * 64 * 128));
  CHECK(pre.head == 2 * 64 * 256);
  CHECK(pre.total() == 363008);

  FlopsBreakdown fin = flops_breakdown(cfg, FlopsMode::finetune_discrete);
  CHECK(fin.router == 0);
  CHECK(fin.gate == 0);
  CHECK(fin.head == 0);
  CHECK(fin.experts == 2 * (4 * 64 * 128));
  CHECK(fin.total() == 197632);
}

TEST_CASE("single-path fine-tune counts one expert plus the scan") {
  ModelConfig cfg;
  cfg.N_experts = 1;
  cfg.K_codes = 1;
  cfg.top_k = 1;
  cfg.n_layers = 1;
  cfg.metric = Metric::euclidean;
  FlopsBreakdown fin = flops_breakdown(cfg, FlopsMode::finetune_discrete);
  CHECK(fin.experts == 4u * 64 * 128);   // 2*d*h*2 for the lone expert
  CHECK(fin.quantizer == 2u * 1 * 64);   // K=1 scan

  cfg.metric = Metric::cosine;
  FlopsBreakdown fin_cos = flops_breakdown(cfg, FlopsMode::finetune_discrete);
  CHECK(fin_cos.quantizer == fin.quantizer + 64);  // +d per row for the norm
}

TEST_CASE("reference architecture reproduces the published cost ratio") {
  ModelConfig cfg;
  cfg.vocab_size = 256;
  cfg.d_model = 432;
  cfg.n_heads = 8;
  cfg.n_layers = 4;
  cfg.context_length = 512;
  cfg.N_experts = 16;
  cfg.K_codes = 16;
  cfg.top_k = 2;
  cfg.h_ffn = 304;
  cfg.variant = VariantKind::vqmoe;
  cfg.metric = Metric::euclidean;

  const uint64_t pre = flops_count(cfg, FlopsMode::pretrain);
  const uint64_t fin = flops_count(cfg, FlopsMode::finetune_discrete);
  CHECK(pre == 16153344);
  CHECK(fin == 11667456);
  const double ratio = static_cast<double>(fin) / static_cast<double>(pre);
  CHECK(std::abs(ratio / 0.7233 - 1.0) <= 0.02);
}

TEST_CASE("flops grow with every width knob") {
  ModelConfig base;
  base.vocab_size = 64;
  base.d_model = 32;
  base.n_heads = 4;
  base.n_layers = 2;
  base.context_length = 24;
  base.N_experts = 4;
  base.K_codes = 6;
  base.top_k = 2;
  base.h_ffn = 48;
  base.metric = Metric::euclidean;

  const uint64_t pre0 = flops_count(base, FlopsMode::pretrain);
  const uint64_t fin0 = flops_count(base, FlopsMode::finetune_discrete);

  auto bumped = [&](auto&& mutate) {
    ModelConfig c = base;
    mutate(c);
    return c;
  };
  const ModelConfig more_d = bumped([](ModelConfig& c) { c.d_model = 36; });
  const ModelConfig more_h = bumped([](ModelConfig& c) { c.h_ffn = 49; });
  const ModelConfig more_K = bumped([](ModelConfig& c) { c.K_codes = 7; });
  const ModelConfig more_N = bumped([](ModelConfig& c) { c.N_experts = 5; });
  const ModelConfig more_k = bumped([](ModelConfig& c) { c.top_k = 3; });

  for (const ModelConfig* c : {&more_d, &more_h, &more_K, &more_N, &more_k})
    CHECK(flops_count(*c, FlopsMode::pretrain) > pre0);
  for (const ModelConfig* c : {&more_d, &more_h, &more_K})
    CHECK(flops_count(*c, FlopsMode::finetune_discrete) > fin0);
  for (const ModelConfig* c : {&more_N, &more_k})
    CHECK(flops_count(*c, FlopsMode::finetune_discrete) >= fin0);
}

TEST_CASE("discrete fine-tune accounting needs a codebook") {
  ModelConfig cfg;
  cfg.variant = VariantKind::smoe;
  CHECK(error_message([&] { flops_count(cfg, FlopsMode::finetune_discrete); })
            .find("vqmoe") != std::string::npos);
}

TEST_CASE("flops report file carries both modes and their ratio") {
  ModelConfig cfg;
  cfg.metric = Metric::euclidean;
  const std::string path = "flops_test.txt";
  write_flops_txt(path, cfg);
  const std::string text = read_text_file(path);
  CHECK(text.find("mode pretrain") != std::string::npos);
  CHECK(text.find("mode finetune_discrete") != std::string::npos);
  const size_t at = text.find("ratio ");
  REQUIRE(at != std::string::npos);
  const double ratio = std::strtod(text.c_str() + at + 6, nullptr);
  CHECK(ratio == doctest::Approx(197632.0 / 363008.0).epsilon(1e-12));
  std::filesystem::remove(path);

  cfg.variant = VariantKind::smoe;
  write_flops_txt(path, cfg);
  CHECK(read_text_file(path).find("ratio") == std::string::npos);
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// convergence tracking

TEST_CASE("identical checkpoints drift by exactly zero") {
  ModelConfig cfg = small_vq_config();
  TrainState st = build_model(cfg);
  Rng rng(14);
  std::vector<int64_t> ids = random_ids(rng, 2 * 10, cfg.vocab_size);

  DriftSnapshot a = drift_snapshot(st, ids, 2, 10);
  DriftSnapshot b = drift_snapshot(st, ids, 2, 10);
  std::vector<DriftPoint> pts = convergence_tracker({a, b});
  REQUIRE(pts.size() == 1);
  CHECK(pts[0].token_drift == 0.0);
  CHECK(pts[0].router_drift == 0.0);
}

TEST_CASE("frozen router pins router drift at zero while tokens move") {
  ModelConfig cfg = small_vq_config();
  cfg.vocab_size = 256;  // corpus bytes are raw ascii
  cfg.variant = VariantKind::smoe_dropout;
  cfg.top_k = 2;
  TrainState st = build_model(cfg);
  Corpus corpus = pattern_corpus("the quick onyx goblin jumps over the lazy dwarf. ", 4000);

  Rng rng(15);
  std::vector<int64_t> ids = random_ids(rng, 2 * 12, cfg.vocab_size);
  std::vector<DriftSnapshot> history;
  history.push_back(drift_snapshot(st, ids, 2, 12));

  TrainOptions opt;
  opt.total_steps = 10;
  opt.lr_max = 1e-3;
  Rng sampler(3);
  for (int i = 0; i < 10; ++i) {
    Batch batch = sample_batch(sampler, corpus.train, 4, 12);
    train_step(st, batch, opt);
    if ((i + 1) % 5 == 0) history.push_back(drift_snapshot(st, ids, 2, 12));
  }

  std::vector<DriftPoint> pts = convergence_tracker(history);
  REQUIRE(pts.size() == 2);
  for (const DriftPoint& p : pts) {
    CHECK(p.router_drift == 0.0);  // W_e never updates under smoe_dropout
    CHECK(p.token_drift > 0.0);
    CHECK(std::isfinite(p.token_drift));
  }
}

TEST_CASE("vqmoe codebook registers as router embedding drift") {
  ModelConfig cfg = small_vq_config();
  cfg.vocab_size = 256;  // corpus bytes are raw ascii
  TrainState st = build_model(cfg);
  Corpus corpus = pattern_corpus("abcdabcdabxyabcd", 2000);

  Rng rng(16);
  std::vector<int64_t> ids = random_ids(rng, 2 * 12, cfg.vocab_size);
  std::vector<DriftSnapshot> history;
  history.push_back(drift_snapshot(st, ids, 2, 12));

  TrainOptions opt;
  opt.total_steps = 6;
  opt.lr_max = 2e-3;
  Rng sampler(4);
  for (int i = 0; i < 6; ++i) train_step(st, sample_batch(sampler, corpus.train, 4, 12), opt);
  history.push_back(drift_snapshot(st, ids, 2, 12));

  std::vector<DriftPoint> pts = convergence_tracker(history);
  REQUIRE(pts.size() == 1);
  CHECK(pts[0].router_drift > 0.0);
  CHECK(pts[0].token_drift > 0.0);
  CHECK(history[0].router_emb.dim(0) == cfg.K_codes);  // codebook, not W_e
}

TEST_CASE("drift tracking rejects thin or mismatched histories") {
  ModelConfig cfg = small_vq_config();
  TrainState st = build_model(cfg);
  Rng rng(17);
  std::vector<int64_t> ids = random_ids(rng, 2 * 10, cfg.vocab_size);
  DriftSnapshot a = drift_snapshot(st, ids, 2, 10);
  CHECK(error_message([&] { convergence_tracker({a}); }).find("at least 2") !=
        std::string::npos);

  std::vector<int64_t> other = random_ids(rng, 2 * 6, cfg.vocab_size);
  DriftSnapshot c = drift_snapshot(st, other, 2, 6);
  CHECK(error_message([&] { convergence_tracker({a, c}); }).find("mismatched") !=
        std::string::npos);
}

// ---------------------------------------------------------------------------
// csv emission

TEST_CASE("csv writers emit the documented headers atomically") {
  std::vector<ConsistencyReport> cons(2);
  cons[0].step = 0;
  cons[0].score = 0.5;
  cons[1].step = 10;
  cons[1].score = 0.75;
  cons[1].mode = ConsistencyMode::temporal;
  write_consistency_csv("cons_test.csv", cons);
  std::string text = read_text_file("cons_test.csv");
  CHECK(text.find("step,mode,score\n") == 0);
  CHECK(text.find("0,definitional,0.5\n") != std::string::npos);
  CHECK(text.find("10,temporal,0.75\n") != std::string::npos);
  CHECK(!std::filesystem::exists("cons_test.csv.tmp"));
  std::filesystem::remove("cons_test.csv");

  JacobianReport jr;
  jr.numerical_rank = 3;
  jr.bound = 4;
  jr.residual_singular_values = {3.0, 2.0, 1.0};  // shorter than 8: padded
  write_jacobian_csv("jac_test.csv", {jr});
  text = read_text_file("jac_test.csv");
  CHECK(text.find("probe_id,rank,bound,sv_1,sv_2,sv_3,sv_4,sv_5,sv_6,sv_7,sv_8\n") == 0);
  CHECK(text.find("0,3,4,3,2,1,0,0,0,0,0\n") != std::string::npos);
  std::filesystem::remove("jac_test.csv");

  DriftPoint p;
  p.step = 50;
  p.token_drift = 0.125;
  p.router_drift = 0.0625;
  write_drift_csv("drift_test.csv", {p});
  text = read_text_file("drift_test.csv");
  CHECK(text.find("step,token_drift,router_drift\n") == 0);
  CHECK(text.find("50,0.125,0.0625\n") != std::string::npos);
  std::filesystem::remove("drift_test.csv");
}
