#pragma once

#include "vqmoe/rng.hpp"
#include "vqmoe/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vqmoe {

enum class Metric { euclidean, cosine };

Metric metric_from_string(const std::string& s);
std::string metric_to_string(Metric m);

struct Codebook {
  Tensor vectors;  // [K, d]
  Metric metric = Metric::cosine;

  int64_t K() const { return vectors.dim(0); }
  int64_t d() const { return vectors.dim(1); }
};

// Rows drawn from the batch without replacement (cycling with small jitter
// when the batch has fewer rows than codes), so no two codes start identical.
void init_codebook_from_batch(Codebook& cb, const Tensor& x, Rng& rng);

struct QuantizationResult {
  std::vector<int64_t> indices;  // [n], argmin per row, ties to lowest index
  Tensor quantized;              // [n, d] straight-through output
  Tensor distances;              // [n, K], constant (assignment has no gradient)
};

// Per-row gap between second-best and best distance. Rows with a small gap
// sit near an assignment boundary where finite differences are meaningless.
std::vector<double> assignment_margins(const QuantizationResult& r);

// Pinned straight-through offsets and stop-gradient contents, captured at one
// parameter point. Rebuilding the graph with a freeze makes the forward value
// a smooth function whose exact gradient is what backward reports, which is
// what a finite-difference check must differentiate.
struct StFreeze {
  std::vector<int64_t> indices;
  std::vector<double> st_offset;  // quantized - z at capture
  std::vector<double> z_pinned;   // sg[z] contents
  std::vector<double> v_pinned;   // sg[v] contents (selected codes)
};

StFreeze make_freeze(const Tensor& z, const QuantizationResult& r, const Codebook& cb);

// Nearest-code assignment. Distances are squared L2 (euclidean) or
// 1 - cos (cosine). Fills `quantized` via straight_through.
QuantizationResult assign_codes(Tape* tape, const Tensor& z, const Codebook& cb);

// Value is exactly the selected code rows; gradient w.r.t. z is the identity
// pass (z + sg(q - z)); the codebook receives nothing through this path.
Tensor straight_through(Tape* tape, const Tensor& z, const QuantizationResult& r,
                        const Codebook& cb, const StFreeze* freeze = nullptr);

// ||sg[z] - v||^2 + beta ||z - sg[v]||^2, mean over the n tokens. Term 1
// reaches only the selected codes, term 2 only z.
Tensor vq_loss(Tape* tape, const Tensor& z, const QuantizationResult& r,
               const Codebook& cb, double beta, const StFreeze* freeze = nullptr);

// i_exp = i_cb mod N
int64_t code_to_expert(int64_t code_index, int64_t n_experts);

// Checkpoint wire format: metric tag byte, u64 K, u64 d, then K*d
// little-endian f64 code rows.
std::string serialize_codebook(const Codebook& cb);
Codebook deserialize_codebook(const std::string& bytes);

// FNV-1a over the serialized bytes; the freeze contract check during
// fine-tuning compares this before and after.
uint64_t codebook_digest(const Codebook& cb);

}  // namespace vqmoe
