#include "vqmoe/diagnostics.hpp"

#include "vqmoe/io.hpp"
#include "vqmoe/ops.hpp"

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

const double kInf = std::numeric_limits<double>::infinity();

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor clone_values(const Tensor& t) {
  Tensor c(t.shape(), false);
  c.data() = t.data();
  return c;
}

// Same conventions as the quantizer: squared L2, or 1 - cos with zero norms
// rejected. Ties go to the lowest index via strict less-than.
double row_distance(const char* op, const double* a, const double* b, int64_t d,
                    Metric metric) {
  if (metric == Metric::euclidean) {
    double acc = 0.0;
    for (int64_t t = 0; t < d; ++t) {
      const double diff = a[t] - b[t];
      acc += diff * diff;
    }
    return acc;
  }
  double na = 0.0, nb = 0.0, dot = 0.0;
  for (int64_t t = 0; t < d; ++t) {
    na += a[t] * a[t];
    nb += b[t] * b[t];
    dot += a[t] * b[t];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12) fail(op, "zero-norm row under cosine metric");
  return 1.0 - dot / (na * nb);
}

}  // namespace

// ---------------------------------------------------------------------------
// consistency

std::vector<int64_t> selected_experts(const RoutingDecision& decision,
                                      int64_t n_experts) {
  if (n_experts < 1) fail("selected_experts", "n_experts must be positive");
  if (!decision.code_indices.empty()) {
    std::vector<int64_t> out(decision.code_indices.size());
    for (size_t i = 0; i < out.size(); ++i)
      out[i] = code_to_expert(decision.code_indices[i], n_experts);
    return out;
  }
  if (decision.k < 1 || decision.expert_indices.empty())
    fail("selected_experts", "decision carries no routing slots");
  const int64_t n = static_cast<int64_t>(decision.expert_indices.size()) / decision.k;
  std::vector<int64_t> out(static_cast<size_t>(n));
  // slot 0 holds the largest logit, hence the largest renormalized gate
  for (int64_t i = 0; i < n; ++i)
    out[static_cast<size_t>(i)] = decision.expert_indices[static_cast<size_t>(i * decision.k)];
  return out;
}

Tensor centroids_from_codebook(const Codebook& cb, int64_t n_experts) {
  if (n_experts < 1) fail("centroids_from_codebook", "n_experts must be positive");
  const int64_t K = cb.K(), d = cb.d();
  Tensor out = Tensor::zeros({n_experts, d});
  std::vector<int64_t> counts(static_cast<size_t>(n_experts), 0);
  for (int64_t j = 0; j < K; ++j) {
    const int64_t e = code_to_expert(j, n_experts);
    counts[static_cast<size_t>(e)] += 1;
    const double* src = cb.vectors.data().data() + j * d;
    double* dst = out.data().data() + e * d;
    for (int64_t t = 0; t < d; ++t) dst[t] += src[t];
  }
  for (int64_t e = 0; e < n_experts; ++e) {
    if (counts[static_cast<size_t>(e)] == 0)
      fail("centroids_from_codebook", "expert " + std::to_string(e) +
                                          " receives no codes (K = " +
                                          std::to_string(K) + " < N)");
    double* dst = out.data().data() + e * d;
    for (int64_t t = 0; t < d; ++t) dst[t] /= static_cast<double>(counts[static_cast<size_t>(e)]);
  }
  return out;
}

RunningCentroids::RunningCentroids(int64_t n_experts, int64_t dim)
    : N(n_experts), d(dim) {
  if (n_experts < 1 || dim < 1)
    fail("running_centroids", "need positive expert count and width");
  sums.assign(static_cast<size_t>(N * d), 0.0);
  counts.assign(static_cast<size_t>(N), 0);
}

void RunningCentroids::observe(const Tensor& x, const std::vector<int64_t>& selected) {
  if (x.rank() != 2 || x.dim(1) != d)
    fail("running_centroids", "batch width " + std::to_string(x.rank() == 2 ? x.dim(1) : -1) +
                                  " does not match d = " + std::to_string(d));
  const int64_t n = x.dim(0);
  if (static_cast<int64_t>(selected.size()) != n)
    fail("running_centroids", std::to_string(selected.size()) + " selections for " +
                                  std::to_string(n) + " rows");
  for (int64_t i = 0; i < n; ++i) {
    const int64_t e = selected[static_cast<size_t>(i)];
    if (e < 0 || e >= N)
      fail("running_centroids", "expert index " + std::to_string(e) + " outside [0, " +
                                    std::to_string(N) + ")");
    counts[static_cast<size_t>(e)] += 1;
    const double* src = x.data().data() + i * d;
    double* dst = sums.data() + e * d;
    for (int64_t t = 0; t < d; ++t) dst[t] += src[t];
  }
}

Tensor RunningCentroids::centroids() const {
  int64_t total = 0;
  for (int64_t c : counts) total += c;
  if (total == 0) fail("running_centroids", "no observations yet");
  std::vector<double> global(static_cast<size_t>(d), 0.0);
  for (int64_t e = 0; e < N; ++e)
    for (int64_t t = 0; t < d; ++t)
      global[static_cast<size_t>(t)] += sums[static_cast<size_t>(e * d + t)];
  for (double& v : global) v /= static_cast<double>(total);

  Tensor out({N, d});
  for (int64_t e = 0; e < N; ++e) {
    double* dst = out.data().data() + e * d;
    const int64_t c = counts[static_cast<size_t>(e)];
    if (c == 0) {
      std::memcpy(dst, global.data(), sizeof(double) * static_cast<size_t>(d));
    } else {
      for (int64_t t = 0; t < d; ++t)
        dst[t] = sums[static_cast<size_t>(e * d + t)] / static_cast<double>(c);
    }
  }
  return out;
}

ConsistencyReport consistency_score(const Tensor& x, const RoutingDecision& decision,
                                    const Tensor& centroids, Metric metric,
                                    int64_t step) {
  if (x.rank() != 2) fail("consistency_score", "x must be [n, d]");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (n == 0) fail("consistency_score", "empty batch");
  if (centroids.rank() != 2 || centroids.dim(1) != d)
    fail("consistency_score", "centroids must be [N, " + std::to_string(d) + "]");
  if (!all_finite(centroids)) fail("consistency_score", "centroids must be finite");
  const int64_t N = centroids.dim(0);

  const std::vector<int64_t> sel = selected_experts(decision, N);
  if (static_cast<int64_t>(sel.size()) != n)
    fail("consistency_score", "decision covers " + std::to_string(sel.size()) +
                                  " tokens for " + std::to_string(n) + " inputs");

  int64_t consistent = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * d;
    int64_t best = 0;
    double best_dist = kInf;
    for (int64_t e = 0; e < N; ++e) {
      const double dist = row_distance("consistency_score", row,
                                       centroids.data().data() + e * d, d, metric);
      if (dist < best_dist) {
        best_dist = dist;
        best = e;
      }
    }
    if (best == sel[static_cast<size_t>(i)]) consistent += 1;
  }

  ConsistencyReport r;
  r.step = step;
  r.score = static_cast<double>(consistent) / static_cast<double>(n);
  r.per_expert_centroids = centroids;
  r.mode = ConsistencyMode::definitional;
  return r;
}

ConsistencyReport temporal_consistency(const RoutingDecision& current,
                                       const RoutingDecision& previous,
                                       int64_t n_experts, int64_t step) {
  const std::vector<int64_t> cur = selected_experts(current, n_experts);
  const std::vector<int64_t> prev = selected_experts(previous, n_experts);
  if (cur.empty()) fail("temporal_consistency", "empty batch");
  if (cur.size() != prev.size())
    fail("temporal_consistency", "probe changed size between checkpoints (" +
                                     std::to_string(prev.size()) + " -> " +
                                     std::to_string(cur.size()) + ")");
  int64_t same = 0;
  for (size_t i = 0; i < cur.size(); ++i)
    if (cur[i] == prev[i]) same += 1;

  ConsistencyReport r;
  r.step = step;
  r.score = static_cast<double>(same) / static_cast<double>(cur.size());
  r.mode = ConsistencyMode::temporal;
  return r;
}

// ---------------------------------------------------------------------------
// jacobian rank decomposition

namespace {

// mirror of ops::relu / ops::gelu backward
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;

double activation_derivative(Activation act, double v) {
  if (act == Activation::relu) return v > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(kGeluC0 * (v + kGeluC1 * v * v * v));
  return 0.5 * (1.0 + t) +
         0.5 * v * (1.0 - t * t) * kGeluC0 * (1.0 + 3.0 * kGeluC1 * v * v);
}

// router logits at one token, value side only, matching route_variant
std::vector<double> probe_logits(const Tensor& x_row, const RouterVariant& variant) {
  const int64_t d = x_row.dim(1);
  const double* xv = x_row.data().data();
  if (variant.kind == VariantKind::xmoe) {
    const int64_t dl = variant.down_proj.dim(1);
    const int64_t N = variant.W_e.dim(0);
    std::vector<double> proj(static_cast<size_t>(dl), 0.0);
    for (int64_t j = 0; j < dl; ++j)
      for (int64_t t = 0; t < d; ++t)
        proj[static_cast<size_t>(j)] += xv[t] * variant.down_proj.data()[static_cast<size_t>(t * dl + j)];
    double pn = 0.0;
    for (double v : proj) pn += v * v;
    pn = std::sqrt(std::max(pn, 1e-12));
    const double temp = variant.temperature.data()[0];
    std::vector<double> logits(static_cast<size_t>(N));
    for (int64_t e = 0; e < N; ++e) {
      const double* we = variant.W_e.data().data() + e * dl;
      double wn = 0.0, dot = 0.0;
      for (int64_t j = 0; j < dl; ++j) {
        wn += we[j] * we[j];
        dot += we[j] * proj[static_cast<size_t>(j)];
      }
      wn = std::sqrt(std::max(wn, 1e-12));
      logits[static_cast<size_t>(e)] = temp * dot / (pn * wn);
    }
    return logits;
  }
  const int64_t N = variant.W_e.dim(0);
  std::vector<double> logits(static_cast<size_t>(N), 0.0);
  for (int64_t e = 0; e < N; ++e) {
    const double* we = variant.W_e.data().data() + e * d;
    double dot = 0.0;
    for (int64_t t = 0; t < d; ++t) dot += xv[t] * we[t];
    logits[static_cast<size_t>(e)] = dot;
  }
  return logits;
}

// gap between the k-th kept logit and the best dropped one
double topk_margin(std::vector<double> logits, int64_t k) {
  const int64_t N = static_cast<int64_t>(logits.size());
  if (k >= N) return kInf;
  std::sort(logits.begin(), logits.end(), std::greater<double>());
  return logits[static_cast<size_t>(k - 1)] - logits[static_cast<size_t>(k)];
}

}  // namespace

JacobianReport jacobian_residual_rank(const std::vector<ExpertFFN>& experts,
                                      const RouterVariant& variant,
                                      const Tensor& x_row, int64_t top_k,
                                      double beta, bool freeze_gates) {
  if (x_row.rank() != 2 || x_row.dim(0) != 1)
    fail("jacobian_residual_rank", "probe must be a single [1, d] token");
  const int64_t d = x_row.dim(1);
  if (d > 64)
    fail("jacobian_residual_rank",
         "d = " + std::to_string(d) + " exceeds the dense-Jacobian limit 64");
  const int64_t N = static_cast<int64_t>(experts.size());
  if (N == 0) fail("jacobian_residual_rank", "no experts");
  const bool is_vq = variant.kind == VariantKind::vqmoe;
  if (freeze_gates && is_vq)
    fail("jacobian_residual_rank", "freeze_gates supports router variants only");

  // Reject probes near a piecewise boundary: the selection there is not
  // locally constant and neither J nor the decomposition is well defined.
  double margin = topk_margin(probe_logits(x_row, variant), top_k);
  if (is_vq) {
    QuantizationResult qr = assign_codes(nullptr, x_row, variant.codebook);
    margin = std::min(margin, assignment_margins(qr)[0]);
  }
  if (!(margin > 1e-3))
    fail("jacobian_residual_rank", "probe margin " + fmt_double(margin) +
                                       " below 1e-3 (piecewise boundary)");

  Tape tape;
  Tensor x({1, d}, true);
  x.data() = x_row.data();

  Tensor out;
  std::vector<std::pair<int64_t, double>> slots;  // (expert, continuous-path weight)
  int64_t bound = 0;
  if (is_vq) {
    VqmoeOutput o = vqmoe_forward(&tape, x, experts, variant, top_k, beta);
    out = o.output;
    const double g_c = o.decision.gc_gd.data()[0];
    for (int64_t j = 0; j < top_k; ++j)
      slots.emplace_back(o.decision.expert_indices[static_cast<size_t>(j)],
                         g_c * o.decision.gate_weights.data()[static_cast<size_t>(j)]);
    bound = N + variant.codebook.K() + 2;
  } else {
    RoutingDecision dec = route_variant(&tape, x, variant, top_k);
    RoutingDecision used = dec;
    if (freeze_gates) used.gate_weights = ops::stop_gradient(&tape, dec.gate_weights);
    out = smoe_forward(&tape, x, experts, used);
    for (int64_t j = 0; j < top_k; ++j)
      slots.emplace_back(dec.expert_indices[static_cast<size_t>(j)],
                         dec.gate_weights.data()[static_cast<size_t>(j)]);
    bound = N;
  }

  // J(a, b) = d out_b / d x_a, one seeded backward pass per output column
  std::vector<double> J(static_cast<size_t>(d * d));
  std::vector<double> seed(static_cast<size_t>(d), 0.0);
  for (int64_t b = 0; b < d; ++b) {
    tape.zero_grads();
    seed[static_cast<size_t>(b)] = 1.0;
    tape.backward_with_seed(out, seed);
    seed[static_cast<size_t>(b)] = 0.0;
    const double* gx = x.grad().data();
    for (int64_t a = 0; a < d; ++a) J[static_cast<size_t>(a * d + b)] = gx[a];
  }

  // P = sum over active continuous slots of weight * W1 diag(phi') W2
  std::vector<double> P(static_cast<size_t>(d * d), 0.0);
  const double* xv = x.data().data();
  for (const auto& [e, w] : slots) {
    const ExpertFFN& ex = experts[static_cast<size_t>(e)];
    const int64_t h = ex.W1.dim(1);
    std::vector<double> dphi(static_cast<size_t>(h));
    for (int64_t t = 0; t < h; ++t) {
      double z = ex.use_bias ? ex.b1.data()[static_cast<size_t>(t)] : 0.0;
      for (int64_t a = 0; a < d; ++a)
        z += xv[a] * ex.W1.data()[static_cast<size_t>(a * h + t)];
      dphi[static_cast<size_t>(t)] = activation_derivative(ex.activation, z);
    }
    for (int64_t a = 0; a < d; ++a)
      for (int64_t t = 0; t < h; ++t) {
        const double coef =
            w * ex.W1.data()[static_cast<size_t>(a * h + t)] * dphi[static_cast<size_t>(t)];
        if (coef == 0.0) continue;
        const double* w2 = ex.W2.data().data() + t * d;
        double* prow = P.data() + a * d;
        for (int64_t b = 0; b < d; ++b) prow[b] += coef * w2[b];
      }
  }

  Eigen::MatrixXd R(d, d), Jm(d, d);
  for (int64_t a = 0; a < d; ++a)
    for (int64_t b = 0; b < d; ++b) {
      Jm(a, b) = J[static_cast<size_t>(a * d + b)];
      R(a, b) = J[static_cast<size_t>(a * d + b)] - P[static_cast<size_t>(a * d + b)];
    }

  // Rank threshold is relative to the full Jacobian's scale, not the
  // residual's: a residual that is pure rounding noise must report rank 0.
  Eigen::JacobiSVD<Eigen::MatrixXd> svd_r(R);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd_j(Jm);
  const double sigma_full = svd_j.singularValues().size() > 0 ? svd_j.singularValues()(0) : 0.0;
  const double threshold = 1e-8 * sigma_full;

  JacobianReport rep;
  rep.bound = bound;
  rep.margin = margin;
  const auto& sv = svd_r.singularValues();
  rep.residual_singular_values.resize(static_cast<size_t>(sv.size()));
  for (int64_t i = 0; i < sv.size(); ++i) {
    rep.residual_singular_values[static_cast<size_t>(i)] = sv(i);
    if (sigma_full > 0.0 && sv(i) > threshold) rep.numerical_rank += 1;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// expert representation PCA

PcaResult expert_pca(const Tensor& outputs, const std::vector<int64_t>& labels,
                     int64_t n_experts) {
  if (outputs.rank() != 2) fail("expert_pca", "outputs must be [n, d]");
  const int64_t n = outputs.dim(0), d = outputs.dim(1);
  if (n < 1) fail("expert_pca", "empty batch");
  if (n_experts < 1) fail("expert_pca", "n_experts must be positive");
  if (static_cast<int64_t>(labels.size()) != n)
    fail("expert_pca", std::to_string(labels.size()) + " labels for " +
                           std::to_string(n) + " rows");
  for (int64_t l : labels)
    if (l < 0 || l >= n_experts)
      fail("expert_pca", "label " + std::to_string(l) + " outside [0, " +
                             std::to_string(n_experts) + ")");

  Eigen::MatrixXd X(n, d);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < d; ++t) X(i, t) = outputs.data()[static_cast<size_t>(i * d + t)];
  const Eigen::RowVectorXd mu = X.colwise().mean();
  Eigen::MatrixXd Xc = X.rowwise() - mu;

  Eigen::BDCSVD<Eigen::MatrixXd> svd(Xc, Eigen::ComputeThinV);
  Eigen::MatrixXd V = svd.matrixV();
  const auto& sv = svd.singularValues();
  const int64_t ncomp = std::min<int64_t>(2, V.cols());

  // canonical sign: the largest-magnitude loading of each axis is positive
  for (int64_t j = 0; j < ncomp; ++j) {
    int64_t arg = 0;
    for (int64_t t = 1; t < d; ++t)
      if (std::abs(V(t, j)) > std::abs(V(arg, j))) arg = t;
    if (V(arg, j) < 0.0) V.col(j) *= -1.0;
  }

  PcaResult r;
  r.pooled = outputs;
  r.coords.assign(static_cast<size_t>(n * 2), 0.0);
  r.labels = labels;
  r.explained.assign(2, 0.0);
  r.components.assign(static_cast<size_t>(2 * d), 0.0);

  double total_var = 0.0;
  for (int64_t j = 0; j < sv.size(); ++j) total_var += sv(j) * sv(j);
  for (int64_t j = 0; j < ncomp; ++j) {
    const Eigen::VectorXd proj = Xc * V.col(j);
    for (int64_t i = 0; i < n; ++i) r.coords[static_cast<size_t>(i * 2 + j)] = proj(i);
    if (total_var > 0.0) r.explained[static_cast<size_t>(j)] = sv(j) * sv(j) / total_var;
    for (int64_t t = 0; t < d; ++t) r.components[static_cast<size_t>(j * d + t)] = V(t, j);
  }

  r.group_means.assign(static_cast<size_t>(n_experts * 2), 0.0);
  r.group_sizes.assign(static_cast<size_t>(n_experts), 0);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t e = labels[static_cast<size_t>(i)];
    r.group_sizes[static_cast<size_t>(e)] += 1;
    r.group_means[static_cast<size_t>(e * 2)] += r.coords[static_cast<size_t>(i * 2)];
    r.group_means[static_cast<size_t>(e * 2 + 1)] += r.coords[static_cast<size_t>(i * 2 + 1)];
  }
  for (int64_t e = 0; e < n_experts; ++e) {
    const int64_t c = r.group_sizes[static_cast<size_t>(e)];
    if (c > 0) {
      r.group_means[static_cast<size_t>(e * 2)] /= static_cast<double>(c);
      r.group_means[static_cast<size_t>(e * 2 + 1)] /= static_cast<double>(c);
    }
  }
  return r;
}

namespace {

int64_t resolve_layer(int64_t layer, int64_t n_layers, const char* op) {
  if (n_layers == 0) fail(op, "model has no MoE layers");
  if (layer == -1) return n_layers - 1;
  if (layer < 0 || layer >= n_layers)
    fail(op, "layer " + std::to_string(layer) + " outside [0, " +
                 std::to_string(n_layers) + ")");
  return layer;
}

ForwardResult probe_forward(TrainState& st, const std::vector<int64_t>& ids,
                            int64_t B, int64_t T) {
  return st.finetune_mode ? classifier_forward(nullptr, st, ids, B, T, nullptr)
                          : model_forward(nullptr, st, ids, B, T, nullptr);
}

}  // namespace

PcaResult expert_representation_dump(TrainState& st, const std::vector<int64_t>& ids,
                                     int64_t B, int64_t T, int64_t layer) {
  ForwardResult fr = probe_forward(st, ids, B, T);
  const int64_t L = static_cast<int64_t>(fr.moe_inputs.size());
  const int64_t li = resolve_layer(layer, L, "expert_representation_dump");
  const Tensor& x2d = fr.moe_inputs[static_cast<size_t>(li)];
  const std::vector<int64_t> sel =
      selected_experts(fr.decisions[static_cast<size_t>(li)], st.cfg.N_experts);

  const int64_t n = x2d.dim(0), d = x2d.dim(1);
  Tensor outputs({n, d});
  const std::vector<ExpertFFN>& experts = st.blocks[static_cast<size_t>(li)].experts;
  for (int64_t e = 0; e < st.cfg.N_experts; ++e) {
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < n; ++i)
      if (sel[static_cast<size_t>(i)] == e) rows.push_back(i);
    if (rows.empty()) continue;
    Tensor ye = expert_forward(nullptr, experts[static_cast<size_t>(e)],
                               ops::take_rows(nullptr, x2d, rows));
    for (size_t ri = 0; ri < rows.size(); ++ri)
      std::memcpy(outputs.data().data() + rows[ri] * d,
                  ye.data().data() + static_cast<int64_t>(ri) * d,
                  sizeof(double) * static_cast<size_t>(d));
  }
  return expert_pca(outputs, sel, st.cfg.N_experts);
}

// ---------------------------------------------------------------------------
// load statistics

std::vector<int64_t> expert_load(const RoutingDecision& decision, int64_t n_experts) {
  if (n_experts < 1) fail("expert_load", "n_experts must be positive");
  std::vector<int64_t> counts(static_cast<size_t>(n_experts), 0);
  for (int64_t e : decision.expert_indices) {
    if (e < 0 || e >= n_experts)
      fail("expert_load", "expert index " + std::to_string(e) + " outside [0, " +
                              std::to_string(n_experts) + ")");
    counts[static_cast<size_t>(e)] += 1;
  }
  for (int64_t c : decision.code_indices)
    counts[static_cast<size_t>(code_to_expert(c, n_experts))] += 1;
  return counts;
}

std::vector<int64_t> code_load(const std::vector<int64_t>& codes, int64_t n_codes) {
  if (n_codes < 1) fail("code_load", "n_codes must be positive");
  std::vector<int64_t> counts(static_cast<size_t>(n_codes), 0);
  for (int64_t c : codes) {
    if (c < 0 || c >= n_codes)
      fail("code_load", "code index " + std::to_string(c) + " outside [0, " +
                            std::to_string(n_codes) + ")");
    counts[static_cast<size_t>(c)] += 1;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// flops accounting

FlopsBreakdown flops_breakdown(const ModelConfig& cfg, FlopsMode mode) {
  cfg.validate();
  const uint64_t d = static_cast<uint64_t>(cfg.d_model);
  const uint64_t h = static_cast<uint64_t>(cfg.h_ffn);
  const uint64_t T = static_cast<uint64_t>(cfg.context_length);
  const uint64_t V = static_cast<uint64_t>(cfg.vocab_size);
  const uint64_t L = static_cast<uint64_t>(cfg.n_layers);
  const uint64_t N = static_cast<uint64_t>(cfg.N_experts);
  const uint64_t K = static_cast<uint64_t>(cfg.K_codes);
  const uint64_t k = static_cast<uint64_t>(cfg.top_k);
  const uint64_t dl = static_cast<uint64_t>(cfg.d_low);
  const uint64_t scan = 2 * K * d + (cfg.metric == Metric::cosine ? d : 0);

  FlopsBreakdown b;
  // per token per layer: qkv 6d^2, output proj 2d^2, scores 2Td, probs*v 2Td
  b.attention = L * (8 * d * d + 4 * T * d);

  if (mode == FlopsMode::finetune_discrete) {
    if (cfg.variant != VariantKind::vqmoe)
      fail("flops_count", "finetune_discrete requires a vqmoe config");
    // quantize, run the assigned expert, classify; no router, no gate, no LM
    // head, and the per-sequence classifier is not a per-token cost
    b.quantizer = L * scan;
    b.experts = L * 4 * d * h;
    return b;
  }

  switch (cfg.variant) {
    case VariantKind::vqmoe:
      b.router = L * 2 * N * d;
      b.gate = L * 2 * 2 * d;
      b.quantizer = L * scan;
      b.experts = L * (k + 1) * 4 * d * h;  // k continuous slots + discrete path
      break;
    case VariantKind::xmoe:
      b.router = L * (2 * d * dl + 2 * N * dl);
      b.experts = L * k * 4 * d * h;
      break;
    default:
      b.router = L * 2 * N * d;
      b.experts = L * k * 4 * d * h;
      break;
  }
  b.head = 2 * d * V;
  return b;
}

uint64_t flops_count(const ModelConfig& cfg, FlopsMode mode) {
  return flops_breakdown(cfg, mode).total();
}

// ---------------------------------------------------------------------------
// convergence tracking

DriftSnapshot drift_snapshot(TrainState& st, const std::vector<int64_t>& ids,
                             int64_t B, int64_t T, int64_t layer) {
  ForwardResult fr = probe_forward(st, ids, B, T);
  const int64_t L = static_cast<int64_t>(fr.moe_inputs.size());
  const int64_t li = resolve_layer(layer, L, "drift_snapshot");

  DriftSnapshot snap;
  snap.step = st.step;
  snap.token_repr = clone_values(fr.moe_inputs[static_cast<size_t>(li)]);
  const RouterVariant& rv = st.blocks[static_cast<size_t>(li)].router;
  snap.router_emb = clone_values(rv.kind == VariantKind::vqmoe ? rv.codebook.vectors
                                                               : rv.W_e);
  return snap;
}

namespace {

double normalized_row_drift(const Tensor& prev, const Tensor& cur) {
  const int64_t rows = cur.dim(0);
  const int64_t cols = cur.numel() / rows;
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < rows; ++i) {
    const double* p = prev.data().data() + i * cols;
    const double* c = cur.data().data() + i * cols;
    double dist = 0.0, nrm = 0.0;
    for (int64_t t = 0; t < cols; ++t) {
      const double diff = c[t] - p[t];
      dist += diff * diff;
      nrm += c[t] * c[t];
    }
    num += std::sqrt(dist);
    den += std::sqrt(nrm);
  }
  num /= static_cast<double>(rows);
  den /= static_cast<double>(rows);
  if (den == 0.0) return num == 0.0 ? 0.0 : kInf;
  return num / den;
}

}  // namespace

std::vector<DriftPoint> convergence_tracker(const std::vector<DriftSnapshot>& history) {
  if (history.size() < 2)
    fail("convergence_tracker", "need at least 2 checkpoints, got " +
                                    std::to_string(history.size()));
  for (size_t i = 1; i < history.size(); ++i) {
    if (history[i].token_repr.shape() != history[0].token_repr.shape() ||
        history[i].router_emb.shape() != history[0].router_emb.shape())
      fail("convergence_tracker", "mismatched shapes across checkpoints");
  }
  std::vector<DriftPoint> out;
  out.reserve(history.size() - 1);
  for (size_t i = 1; i < history.size(); ++i) {
    DriftPoint p;
    p.step = history[i].step;
    p.token_drift = normalized_row_drift(history[i - 1].token_repr, history[i].token_repr);
    p.router_drift = normalized_row_drift(history[i - 1].router_emb, history[i].router_emb);
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// csv / text emission

namespace {

std::string mode_name(ConsistencyMode m) {
  return m == ConsistencyMode::definitional ? "definitional" : "temporal";
}

}  // namespace

void write_consistency_csv(const std::string& path,
                           const std::vector<ConsistencyReport>& rows) {
  std::ostringstream ss;
  ss << "step,mode,score\n";
  for (const ConsistencyReport& r : rows)
    ss << r.step << "," << mode_name(r.mode) << "," << fmt_double(r.score) << "\n";
  atomic_write_text(path, ss.str());
}

void write_jacobian_csv(const std::string& path,
                        const std::vector<JacobianReport>& rows) {
  std::ostringstream ss;
  ss << "probe_id,rank,bound";
  for (int i = 1; i <= 8; ++i) ss << ",sv_" << i;
  ss << "\n";
  for (size_t p = 0; p < rows.size(); ++p) {
    ss << p << "," << rows[p].numerical_rank << "," << rows[p].bound;
    for (size_t i = 0; i < 8; ++i) {
      const double v = i < rows[p].residual_singular_values.size()
                           ? rows[p].residual_singular_values[i]
                           : 0.0;
      ss << "," << fmt_double(v);
    }
    ss << "\n";
  }
  atomic_write_text(path, ss.str());
}

void write_pca_csv(const std::string& path, const PcaResult& pca) {
  std::ostringstream ss;
  ss << "expert,pc1,pc2\n";
  for (size_t i = 0; i < pca.labels.size(); ++i)
    ss << pca.labels[i] << "," << fmt_double(pca.coords[i * 2]) << ","
       << fmt_double(pca.coords[i * 2 + 1]) << "\n";
  atomic_write_text(path, ss.str());
}

PcaResult read_pca_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "expert,pc1,pc2")
    fail("read_pca_csv", "'" + path + "' is not a pca.csv file");
  PcaResult r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      fail("read_pca_csv", "malformed row '" + line + "'");
    r.labels.push_back(std::strtoll(line.substr(0, c1).c_str(), nullptr, 10));
    r.coords.push_back(std::strtod(line.substr(c1 + 1, c2 - c1 - 1).c_str(), nullptr));
    r.coords.push_back(std::strtod(line.substr(c2 + 1).c_str(), nullptr));
  }
  return r;
}

void write_drift_csv(const std::string& path, const std::vector<DriftPoint>& rows) {
  std::ostringstream ss;
  ss << "step,token_drift,router_drift\n";
  for (const DriftPoint& p : rows)
    ss << p.step << "," << fmt_double(p.token_drift) << ","
       << fmt_double(p.router_drift) << "\n";
  atomic_write_text(path, ss.str());
}

namespace {

void append_breakdown(std::ostringstream& ss, const char* name,
                      const FlopsBreakdown& b) {
  ss << "mode " << name << "\n";
  ss << "  attention " << b.attention << "\n";
  ss << "  router    " << b.router << "\n";
  ss << "  gate      " << b.gate << "\n";
  ss << "  quantizer " << b.quantizer << "\n";
  ss << "  experts   " << b.experts << "\n";
  ss << "  head      " << b.head << "\n";
  ss << "  total     " << b.total() << "\n";
}

}  // namespace

void write_flops_txt(const std::string& path, const ModelConfig& cfg) {
  std::ostringstream ss;
  ss << "per-token flops (multiply-accumulates x 2, matmul-class work only)\n";
  const FlopsBreakdown pre = flops_breakdown(cfg, FlopsMode::pretrain);
  append_breakdown(ss, "pretrain", pre);
  if (cfg.variant == VariantKind::vqmoe) {
    const FlopsBreakdown fin = flops_breakdown(cfg, FlopsMode::finetune_discrete);
    append_breakdown(ss, "finetune_discrete", fin);
    ss << "ratio "
       << fmt_double(static_cast<double>(fin.total()) / static_cast<double>(pre.total()))
       << "\n";
  }
  atomic_write_text(path, ss.str());
}

}  // namespace vqmoe
