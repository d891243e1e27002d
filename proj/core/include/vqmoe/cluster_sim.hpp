#pragma once

#include "vqmoe/moe.hpp"
#include "vqmoe/rng.hpp"
#include "vqmoe/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vqmoe {

struct ClusterSpec {
  int64_t N_clusters = 4;
  int64_t d = 8;
  int64_t points_per_cluster = 100;
  double center_separation = 4.0;
  double noise_sigma = 0.5;
  uint64_t seed = 0;

  void validate() const;
};

struct ClusterData {
  Tensor points;                // [M, d], cluster-major
  std::vector<int64_t> labels;  // [M]
  Tensor centers;               // [N, d]
};

// Centers are drawn uniformly from a box two separations wide and kept only
// when at least center_separation away from every earlier center; points add
// Gaussian(0, sigma^2 I) noise. Deterministic per seed.
ClusterData generate_clusters(const ClusterSpec& spec);

// Argmin distance to a center per row, ties to the lowest index.
std::vector<int64_t> nearest_center_labels(const Tensor& points, const Tensor& centers);

// Expert initialized to compute y = x A exactly through the relu pair
// trick (W1 = [I | -I], W2 = [A ; -A]), plus optional Gaussian jitter. Such
// experts start specialized, which is what makes assignment order matter.
ExpertFFN make_linear_expert(const Tensor& A, double init_noise, Rng& rng);

// Cluster-specific random linear maps, the per-cluster regression targets.
std::vector<Tensor> make_cluster_targets(int64_t N, int64_t d, double scale,
                                         uint64_t seed);

struct OracleOptions {
  int64_t steps = 40;  // full-batch gradient descent per expert
  double lr = 0.005;
};

struct AssignmentReport {
  // permutations[p][i] is the expert handling cluster i; index 0 is identity
  std::vector<std::vector<int64_t>> permutations;
  std::vector<double> total_losses;  // post-training loss summed over clusters
  int64_t best_index = 0;
  bool identity_minimal = false;  // strictly below every other assignment
  double margin = 0.0;            // best non-identity total minus identity total
};

// Trains every one of the N! cluster-to-expert assignments from bit-identical
// copies of the given experts on y = x A_cluster regression and reports
// whether the identity assignment wins. The passed experts are not mutated.
AssignmentReport oracle_assignment_check(const ClusterData& data,
                                         const std::vector<ExpertFFN>& experts,
                                         const std::vector<Tensor>& targets,
                                         const OracleOptions& opt = {});

struct InconsistencyOptions {
  int64_t steps = 400;
  int64_t checkpoint_every = 40;
  double router_lr = 0.2;         // fast: router, vq head, codebook
  double feature_lr_scale = 0.1;  // slow features realize the t_e << t_m premise
  int64_t feature_hidden = 32;
  int64_t feature_dim = 8;
  double beta = 0.25;
  uint64_t seed = 1;
};

struct InconsistencySeries {
  std::vector<int64_t> steps;
  std::vector<double> router_consistency;
  std::vector<double> vq_consistency;
  int64_t first_dip = -1;  // first checkpoint where the router arm is below 1
};

// Two arms over the same clustered data and identically initialized feature
// maps: a fast linear router and a VQ codebook assignment, both under a
// cluster-classification surrogate loss. Reports Definition-1 consistency per
// checkpoint; the VQ arm scores 1.0 identically because its selection is the
// centroid argmin by construction.
InconsistencySeries router_inconsistency_run(const ClusterSpec& spec,
                                             const InconsistencyOptions& opt = {});

void write_prop1_csv(const std::string& path, const AssignmentReport& report);
void write_thm1_csv(const std::string& path, const InconsistencySeries& series);

}  // namespace vqmoe
