#include "vqmoe/cluster_sim.hpp"

#include "vqmoe/diagnostics.hpp"
#include "vqmoe/io.hpp"
#include "vqmoe/ops.hpp"
#include "vqmoe/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

double sq_dist(const double* a, const double* b, int64_t d) {
  double acc = 0.0;
  for (int64_t t = 0; t < d; ++t) {
    const double diff = a[t] - b[t];
    acc += diff * diff;
  }
  return acc;
}

}  // namespace

void ClusterSpec::validate() const {
  if (N_clusters < 1) fail("cluster_spec", "N_clusters must be positive");
  if (d < 1) fail("cluster_spec", "d must be positive");
  if (points_per_cluster < 1) fail("cluster_spec", "points_per_cluster must be positive");
  if (!(center_separation > 0.0)) fail("cluster_spec", "center_separation must be > 0");
  if (noise_sigma < 0.0) fail("cluster_spec", "noise_sigma must be >= 0");
}

ClusterData generate_clusters(const ClusterSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int64_t N = spec.N_clusters, d = spec.d, P = spec.points_per_cluster;
  const double L = 2.0 * spec.center_separation;  // box half-width
  const double min_sq = spec.center_separation * spec.center_separation;

  ClusterData out;
  out.centers = Tensor({N, d});
  int64_t placed = 0;
  int64_t attempts = 0;
  std::vector<double> cand(static_cast<size_t>(d));
  while (placed < N) {
    if (++attempts > 10000)
      fail("generate_clusters",
           "could not place " + std::to_string(N) + " centers at separation " +
               fmt_double(spec.center_separation) +
               " after 10000 attempts; lower N_clusters or raise d");
    for (int64_t t = 0; t < d; ++t) cand[static_cast<size_t>(t)] = rng.uniform(-L, L);
    bool ok = true;
    for (int64_t j = 0; j < placed && ok; ++j)
      ok = sq_dist(cand.data(), out.centers.data().data() + j * d, d) >= min_sq;
    if (!ok) continue;
    std::copy(cand.begin(), cand.end(), out.centers.data().begin() + placed * d);
    ++placed;
  }

  out.points = Tensor({N * P, d});
  out.labels.resize(static_cast<size_t>(N * P));
  for (int64_t i = 0; i < N; ++i) {
    const double* c = out.centers.data().data() + i * d;
    for (int64_t p = 0; p < P; ++p) {
      double* row = out.points.data().data() + (i * P + p) * d;
      for (int64_t t = 0; t < d; ++t) row[t] = c[t] + spec.noise_sigma * rng.normal();
      out.labels[static_cast<size_t>(i * P + p)] = i;
    }
  }
  return out;
}

std::vector<int64_t> nearest_center_labels(const Tensor& points, const Tensor& centers) {
  if (points.rank() != 2 || centers.rank() != 2 || points.dim(1) != centers.dim(1))
    fail("nearest_center_labels", "points and centers must share the last dim");
  const int64_t M = points.dim(0), N = centers.dim(0), d = points.dim(1);
  std::vector<int64_t> out(static_cast<size_t>(M));
  for (int64_t i = 0; i < M; ++i) {
    const double* row = points.data().data() + i * d;
    int64_t best = 0;
    double best_d = sq_dist(row, centers.data().data(), d);
    for (int64_t j = 1; j < N; ++j) {
      const double dist = sq_dist(row, centers.data().data() + j * d, d);
      if (dist < best_d) {
        best_d = dist;
        best = j;
      }
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

ExpertFFN make_linear_expert(const Tensor& A, double init_noise, Rng& rng) {
  if (A.rank() != 2 || A.dim(0) != A.dim(1))
    fail("make_linear_expert", "target map must be square [d, d]");
  const int64_t d = A.dim(0), h = 2 * d;
  ExpertFFN e;
  e.activation = Activation::relu;
  e.use_bias = false;
  e.W1 = Tensor::zeros({d, h}, true);
  e.W2 = Tensor::zeros({h, d}, true);
  for (int64_t a = 0; a < d; ++a) {
    e.W1.data()[static_cast<size_t>(a * h + a)] = 1.0;
    e.W1.data()[static_cast<size_t>(a * h + d + a)] = -1.0;
  }
  for (int64_t j = 0; j < d; ++j)
    for (int64_t t = 0; t < d; ++t) {
      const double v = A.data()[static_cast<size_t>(j * d + t)];
      e.W2.data()[static_cast<size_t>(j * d + t)] = v;
      e.W2.data()[static_cast<size_t>((d + j) * d + t)] = -v;
    }
  if (init_noise > 0.0) {
    for (double& v : e.W1.data()) v += init_noise * rng.normal();
    for (double& v : e.W2.data()) v += init_noise * rng.normal();
  }
  return e;
}

std::vector<Tensor> make_cluster_targets(int64_t N, int64_t d, double scale,
                                         uint64_t seed) {
  if (N < 1 || d < 1) fail("make_cluster_targets", "need positive N and d");
  Rng rng(seed);
  std::vector<Tensor> maps;
  maps.reserve(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i) {
    Tensor A({d, d});
    for (double& v : A.data()) v = scale * rng.normal();
    maps.push_back(A);
  }
  return maps;
}

namespace {

ExpertFFN clone_expert(const ExpertFFN& e) {
  ExpertFFN c;
  c.activation = e.activation;
  c.use_bias = e.use_bias;
  c.W1 = Tensor(e.W1.shape(), true);
  c.W1.data() = e.W1.data();
  c.W2 = Tensor(e.W2.shape(), true);
  c.W2.data() = e.W2.data();
  if (e.use_bias) {
    c.b1 = Tensor(e.b1.shape(), true);
    c.b1.data() = e.b1.data();
    c.b2 = Tensor(e.b2.shape(), true);
    c.b2.data() = e.b2.data();
  }
  return c;
}

void sgd_step(Tensor& w, double lr) {
  if (!w.grad_allocated()) return;
  double* pw = w.data().data();
  const double* pg = w.grad().data();
  const int64_t n = w.numel();
  for (int64_t i = 0; i < n; ++i) pw[i] -= lr * pg[i];
  w.zero_grad();
}

Tensor mse(Tape* tape, const Tensor& pred, const Tensor& target) {
  Tensor diff = ops::sub(tape, pred, target);
  return ops::scale(tape, ops::squared_l2(tape, diff),
                    1.0 / static_cast<double>(pred.numel()));
}

// Full-batch gradient descent of one expert on y = x A; returns the final
// post-update loss.
double train_expert_on_cluster(ExpertFFN& e, const Tensor& x, const Tensor& y,
                               const OracleOptions& opt) {
  for (int64_t s = 0; s < opt.steps; ++s) {
    Tape tape;
    Tensor loss = mse(&tape, expert_forward(&tape, e, x), y);
    tape.backward(loss);
    sgd_step(e.W1, opt.lr);
    sgd_step(e.W2, opt.lr);
    if (e.use_bias) {
      sgd_step(e.b1, opt.lr);
      sgd_step(e.b2, opt.lr);
    }
  }
  Tensor final_loss = mse(nullptr, expert_forward(nullptr, e, x), y);
  return final_loss.data()[0];
}

}  // namespace

AssignmentReport oracle_assignment_check(const ClusterData& data,
                                         const std::vector<ExpertFFN>& experts,
                                         const std::vector<Tensor>& targets,
                                         const OracleOptions& opt) {
  const int64_t N = static_cast<int64_t>(experts.size());
  if (N < 1) fail("oracle_assignment_check", "no experts");
  if (N > 6)
    fail("oracle_assignment_check", "N = " + std::to_string(N) +
                                        " makes N! enumeration infeasible (max 6)");
  if (static_cast<int64_t>(targets.size()) != N)
    fail("oracle_assignment_check", std::to_string(targets.size()) +
                                        " targets for " + std::to_string(N) +
                                        " experts");
  if (data.centers.dim(0) != N)
    fail("oracle_assignment_check", "data has " + std::to_string(data.centers.dim(0)) +
                                        " clusters for " + std::to_string(N) +
                                        " experts");

  // split rows by cluster and bake the per-cluster regression targets
  const int64_t d = data.points.dim(1);
  std::vector<Tensor> xs, ys;
  for (int64_t i = 0; i < N; ++i) {
    std::vector<int64_t> rows;
    for (size_t p = 0; p < data.labels.size(); ++p)
      if (data.labels[p] == i) rows.push_back(static_cast<int64_t>(p));
    if (rows.empty())
      fail("oracle_assignment_check", "cluster " + std::to_string(i) + " is empty");
    Tensor x = ops::take_rows(nullptr, data.points, rows);
    if (targets[static_cast<size_t>(i)].rank() != 2 ||
        targets[static_cast<size_t>(i)].dim(0) != d)
      fail("oracle_assignment_check", "target " + std::to_string(i) +
                                          " is not a [d, d] map");
    xs.push_back(x);
    ys.push_back(ops::matmul(nullptr, x, targets[static_cast<size_t>(i)]));
  }

  AssignmentReport report;
  std::vector<int64_t> perm(static_cast<size_t>(N));
  std::iota(perm.begin(), perm.end(), 0);
  do {
    double total = 0.0;
    for (int64_t i = 0; i < N; ++i) {
      ExpertFFN trainee = clone_expert(experts[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
      total += train_expert_on_cluster(trainee, xs[static_cast<size_t>(i)],
                                       ys[static_cast<size_t>(i)], opt);
    }
    report.permutations.push_back(perm);
    report.total_losses.push_back(total);
  } while (std::next_permutation(perm.begin(), perm.end()));

  report.best_index = 0;
  double runner_up = std::numeric_limits<double>::infinity();
  for (size_t p = 0; p < report.total_losses.size(); ++p) {
    if (report.total_losses[p] < report.total_losses[static_cast<size_t>(report.best_index)])
      report.best_index = static_cast<int64_t>(p);
    if (p != 0) runner_up = std::min(runner_up, report.total_losses[p]);
  }
  report.margin = report.total_losses.size() > 1
                      ? runner_up - report.total_losses[0]
                      : 0.0;
  report.identity_minimal = report.total_losses.size() > 1 && report.margin > 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// theorem-1 inconsistency illustration

namespace {

struct FeatureNet {
  Tensor W1, W2;  // [d, H] relu [H, df]

  Tensor forward(Tape* tape, const Tensor& x) const {
    return ops::matmul(tape, ops::relu(tape, ops::matmul(tape, x, W1)), W2);
  }
};

FeatureNet make_feature_net(int64_t d, int64_t H, int64_t df, Rng& rng) {
  FeatureNet f;
  f.W1 = Tensor({d, H}, true);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& v : f.W1.data()) v = rng.uniform(-s1, s1);
  f.W2 = Tensor({H, df}, true);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(H));
  for (double& v : f.W2.data()) v = rng.uniform(-s2, s2);
  return f;
}

FeatureNet clone_feature_net(const FeatureNet& f) {
  FeatureNet c;
  c.W1 = Tensor(f.W1.shape(), true);
  c.W1.data() = f.W1.data();
  c.W2 = Tensor(f.W2.shape(), true);
  c.W2.data() = f.W2.data();
  return c;
}

}  // namespace

InconsistencySeries router_inconsistency_run(const ClusterSpec& spec,
                                             const InconsistencyOptions& opt) {
  if (opt.steps < 1 || opt.checkpoint_every < 1)
    fail("router_inconsistency_run", "steps and checkpoint_every must be positive");
  ClusterData data = generate_clusters(spec);
  const int64_t N = spec.N_clusters;
  Rng rng(opt.seed);

  FeatureNet router_feat = make_feature_net(spec.d, opt.feature_hidden, opt.feature_dim, rng);
  FeatureNet vq_feat = clone_feature_net(router_feat);  // identical start

  const double sr = 1.0 / std::sqrt(static_cast<double>(opt.feature_dim));
  Tensor W_router({N, opt.feature_dim}, true);
  for (double& v : W_router.data()) v = rng.uniform(-sr, sr);
  Tensor W_vq_head(W_router.shape(), true);
  W_vq_head.data() = W_router.data();

  Codebook cb;
  cb.metric = Metric::euclidean;
  cb.vectors = Tensor({N, opt.feature_dim}, true);
  {
    Tensor f0 = vq_feat.forward(nullptr, data.points);
    init_codebook_from_batch(cb, f0, rng);
  }

  const double flr = opt.router_lr * opt.feature_lr_scale;
  InconsistencySeries series;

  for (int64_t step = 1; step <= opt.steps; ++step) {
    {  // router arm: fast linear router over slow features
      Tape tape;
      Tensor f = router_feat.forward(&tape, data.points);
      Tensor logits = ops::matmul(&tape, f, ops::transpose_last2(&tape, W_router));
      Tensor loss = ops::cross_entropy_with_logits(&tape, logits, data.labels);
      tape.backward(loss);
      sgd_step(W_router, opt.router_lr);
      sgd_step(router_feat.W1, flr);
      sgd_step(router_feat.W2, flr);
    }
    {  // vq arm: same surrogate, assignment carried by the codebook
      Tape tape;
      Tensor f = vq_feat.forward(&tape, data.points);
      Tensor logits = ops::matmul(&tape, f, ops::transpose_last2(&tape, W_vq_head));
      Tensor ce = ops::cross_entropy_with_logits(&tape, logits, data.labels);
      QuantizationResult qr = assign_codes(&tape, f, cb);
      Tensor loss = ops::add(&tape, ce, vq_loss(&tape, f, qr, cb, opt.beta));
      tape.backward(loss);
      sgd_step(W_vq_head, opt.router_lr);
      sgd_step(cb.vectors, opt.router_lr);
      sgd_step(vq_feat.W1, flr);
      sgd_step(vq_feat.W2, flr);
    }

    if (step % opt.checkpoint_every != 0 && step != opt.steps) continue;

    {  // router arm consistency against routed-group centroids
      Tensor f = router_feat.forward(nullptr, data.points);
      RoutingDecision dec = route_topk(nullptr, f, W_router, 1);
      RunningCentroids rc(N, opt.feature_dim);
      rc.observe(f, selected_experts(dec, N));
      series.router_consistency.push_back(
          consistency_score(f, dec, rc.centroids(), Metric::euclidean, step).score);
    }
    {  // vq arm: selection is the centroid argmin by construction
      Tensor f = vq_feat.forward(nullptr, data.points);
      QuantizationResult qr = assign_codes(nullptr, f, cb);
      RoutingDecision dec;
      dec.code_indices = qr.indices;
      series.vq_consistency.push_back(
          consistency_score(f, dec, centroids_from_codebook(cb, N), Metric::euclidean,
                            step)
              .score);
    }
    series.steps.push_back(step);
    if (series.first_dip < 0 && series.router_consistency.back() < 1.0)
      series.first_dip = static_cast<int64_t>(series.steps.size()) - 1;
  }
  return series;
}

// ---------------------------------------------------------------------------
// csv emission

void write_prop1_csv(const std::string& path, const AssignmentReport& report) {
  std::ostringstream ss;
  ss << "permutation,total_loss\n";
  for (size_t p = 0; p < report.permutations.size(); ++p) {
    for (size_t i = 0; i < report.permutations[p].size(); ++i) {
      if (i) ss << "-";
      ss << report.permutations[p][i];
    }
    ss << "," << fmt_double(report.total_losses[p]) << "\n";
  }
  atomic_write_text(path, ss.str());
}

void write_thm1_csv(const std::string& path, const InconsistencySeries& series) {
  std::ostringstream ss;
  ss << "step,router_consistency,vq_consistency\n";
  for (size_t i = 0; i < series.steps.size(); ++i)
    ss << series.steps[i] << "," << fmt_double(series.router_consistency[i]) << ","
       << fmt_double(series.vq_consistency[i]) << "\n";
  atomic_write_text(path, ss.str());
}

}  // namespace vqmoe
