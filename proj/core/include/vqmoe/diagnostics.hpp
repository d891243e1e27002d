#pragma once

#include "vqmoe/model.hpp"
#include "vqmoe/moe.hpp"
#include "vqmoe/quantizer.hpp"
#include "vqmoe/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vqmoe {

// ---------------------------------------------------------------------------
// consistency

enum class ConsistencyMode { definitional, temporal };

struct ConsistencyReport {
  int64_t step = 0;
  double score = 0.0;           // consistent tokens / tokens, in [0, 1]
  Tensor per_expert_centroids;  // [N, d]; empty handle in temporal mode
  ConsistencyMode mode = ConsistencyMode::definitional;
};

// The expert a token actually landed on: the code assignment (mod N) when the
// decision carries one, otherwise the top-gate slot of the router.
std::vector<int64_t> selected_experts(const RoutingDecision& decision,
                                      int64_t n_experts);

// Per-expert means of the codebook rows that map to each expert by i mod N.
Tensor centroids_from_codebook(const Codebook& cb, int64_t n_experts);

// Running per-expert means of routed tokens, accumulated across batches.
// An expert that never received a token falls back to the global mean.
struct RunningCentroids {
  int64_t N = 0;
  int64_t d = 0;
  std::vector<double> sums;     // [N, d] flattened
  std::vector<int64_t> counts;  // [N]

  RunningCentroids(int64_t n_experts, int64_t dim);
  void observe(const Tensor& x, const std::vector<int64_t>& selected);
  Tensor centroids() const;  // [N, d]
};

// A token is consistent when its selected expert is the distance argmin over
// the centroids (ties to the lowest index, like the quantizer).
ConsistencyReport consistency_score(const Tensor& x, const RoutingDecision& decision,
                                    const Tensor& centroids, Metric metric,
                                    int64_t step = 0);

// Fraction of probe tokens whose selection matches the previous checkpoint's.
ConsistencyReport temporal_consistency(const RoutingDecision& current,
                                       const RoutingDecision& previous,
                                       int64_t n_experts, int64_t step = 0);

// ---------------------------------------------------------------------------
// jacobian rank decomposition

struct JacobianReport {
  std::vector<double> residual_singular_values;  // descending, length d
  int64_t numerical_rank = 0;  // singular values above 1e-8 * sigma_max
  int64_t bound = 0;           // N for router variants, N + K + 2 for vqmoe
  double margin = 0.0;         // smallest selection/assignment gap at the probe
};

// Full layer Jacobian at one token by d seeded backward passes, minus the
// expert-path term P = sum over active continuous slots of
// gate * J_FFN(slot input); reports the SVD of the residual. Probes closer
// than 1e-3 to a selection or assignment boundary are rejected: the layer is
// piecewise there and the decomposition is meaningless. With freeze_gates the
// gate weights are treated as constants (stop-gradient), which empties the
// residual entirely; only router variants support it.
JacobianReport jacobian_residual_rank(const std::vector<ExpertFFN>& experts,
                                      const RouterVariant& variant,
                                      const Tensor& x_row, int64_t top_k,
                                      double beta, bool freeze_gates = false);

// ---------------------------------------------------------------------------
// expert representation PCA

struct PcaResult {
  Tensor pooled;                     // [n, d] raw expert outputs, row i from labels[i]
  std::vector<double> coords;        // [n, 2] projections onto the top axes
  std::vector<int64_t> labels;       // expert per row
  std::vector<double> explained;     // variance ratio per axis, length 2
  std::vector<double> components;    // [2, d] principal axes
  std::vector<double> group_means;   // [N, 2] mean coordinates per expert
  std::vector<int64_t> group_sizes;  // [N]; an empty group is size 0, not an error
};

// PCA(2) via SVD of the mean-centered pooled output matrix. Component signs
// are canonicalized (largest-magnitude loading positive), so projections are
// reproducible up to that convention.
PcaResult expert_pca(const Tensor& outputs, const std::vector<int64_t>& labels,
                     int64_t n_experts);

// Runs the model on the probe ids and projects every token's selected-expert
// output for the chosen MoE layer (-1 = last). On a fresh vqmoe state the
// forward pass performs the data-dependent codebook init.
PcaResult expert_representation_dump(TrainState& st, const std::vector<int64_t>& ids,
                                     int64_t B, int64_t T, int64_t layer = -1);

// ---------------------------------------------------------------------------
// load statistics

std::vector<int64_t> expert_load(const RoutingDecision& decision, int64_t n_experts);
std::vector<int64_t> code_load(const std::vector<int64_t>& codes, int64_t n_codes);

// ---------------------------------------------------------------------------
// flops accounting

enum class FlopsMode { pretrain, finetune_discrete };

// Analytic multiply-accumulate counts x2, per token, matmul-class work only.
struct FlopsBreakdown {
  uint64_t attention = 0;
  uint64_t router = 0;
  uint64_t gate = 0;
  uint64_t quantizer = 0;
  uint64_t experts = 0;
  uint64_t head = 0;
  uint64_t total() const {
    return attention + router + gate + quantizer + experts + head;
  }
};

FlopsBreakdown flops_breakdown(const ModelConfig& cfg, FlopsMode mode);
uint64_t flops_count(const ModelConfig& cfg, FlopsMode mode);

// ---------------------------------------------------------------------------
// convergence tracking

struct DriftSnapshot {
  int64_t step = 0;
  Tensor token_repr;  // [n, d] representations entering the MoE layer
  Tensor router_emb;  // router weight (or codebook) at the checkpoint
};

struct DriftPoint {
  int64_t step = 0;
  double token_drift = 0.0;
  double router_drift = 0.0;
};

// Deep-copies the probe's layer input and the layer's router embedding
// (codebook for vqmoe, W_e otherwise) so later training cannot mutate it.
DriftSnapshot drift_snapshot(TrainState& st, const std::vector<int64_t>& ids,
                             int64_t B, int64_t T, int64_t layer = -1);

// Drift between consecutive checkpoints: mean row-wise L2 distance divided by
// the mean current row norm. Needs >= 2 snapshots of matching shapes.
std::vector<DriftPoint> convergence_tracker(const std::vector<DriftSnapshot>& history);

// ---------------------------------------------------------------------------
// csv / text emission

void write_consistency_csv(const std::string& path,
                           const std::vector<ConsistencyReport>& rows);
void write_jacobian_csv(const std::string& path,
                        const std::vector<JacobianReport>& rows);
void write_pca_csv(const std::string& path, const PcaResult& pca);
PcaResult read_pca_csv(const std::string& path);  // coords + labels round-trip
void write_drift_csv(const std::string& path, const std::vector<DriftPoint>& rows);
void write_flops_txt(const std::string& path, const ModelConfig& cfg);

}  // namespace vqmoe
