#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vqmoe/tensor.hpp"

// Differentiable primitives. Every op takes the active tape as its first
// argument; passing nullptr runs the forward math without recording (used by
// evaluation and the finite-difference oracle). Shape violations throw
// std::runtime_error with a message naming the op and the offending dims.

namespace vqmoe::ops {

// Running multiply-accumulate counter (MACs x 2), matmul-class work only.
// diagnostics::flops_count is the analytic model of the same accounting.
uint64_t flop_count();
void reset_flop_count();
void add_flop_count(uint64_t flops);

// a: [*, m, k]. b: [k, n] (shared weight) or [*, k, n] (per-batch).
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);

// Same shape, or b's shape a suffix of a's (bias-style broadcast over the
// leading dims). No other broadcasting exists anywhere in the engine.
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul_elementwise(Tape* tape, const Tensor& a, const Tensor& b);

Tensor scale(Tape* tape, const Tensor& x, double c);
// s is a 1-element tensor; gradient flows to both x and s.
Tensor scale_by(Tape* tape, const Tensor& x, const Tensor& s);

Tensor relu(Tape* tape, const Tensor& x);
Tensor gelu(Tape* tape, const Tensor& x);  // tanh approximation

// Rows are the last dim. Output rows sum to 1 and are strictly positive for
// inputs whose row spread stays inside the f64 exp range.
Tensor softmax_lastdim(Tape* tape, const Tensor& x);

// x: [*, T, T]. Row r is softmaxed over columns 0..r; the rest are exactly
// zero, so position t never sees information from positions > t.
Tensor softmax_causal(Tape* tape, const Tensor& x);

// Normalizes the last dim with eps = 1e-5; gamma/beta shaped [d].
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta);

// table: [V, d]; out: lead_shape + [d]. ids.size() must equal
// numel(lead_shape); every id must lie in [0, V).
Tensor embedding_lookup(Tape* tape, const Tensor& table,
                        const std::vector<int64_t>& ids, const Shape& lead_shape);

// Row gather on an activation [n, d] -> [m, d]; backward scatter-adds.
Tensor take_rows(Tape* tape, const Tensor& x, const std::vector<int64_t>& rows);

// logits: [n, V], targets: n class ids. Returns the scalar mean NLL with a
// fused log-softmax.
Tensor cross_entropy_with_logits(Tape* tape, const Tensor& logits,
                                 const std::vector<int64_t>& targets);

Tensor sum(Tape* tape, const Tensor& x);
Tensor mean(Tape* tape, const Tensor& x);
Tensor squared_l2(Tape* tape, const Tensor& x);

Tensor transpose_last2(Tape* tape, const Tensor& x);
Tensor concat_lastdim(Tape* tape, const std::vector<Tensor>& xs);
Tensor slice_lastdim(Tape* tape, const Tensor& x, int64_t offset, int64_t len);

// Value copy; numel must match.
Tensor reshape(Tape* tape, const Tensor& x, Shape target);

// Forward passes x through unchanged; the output does not require grad, so
// nothing ever flows back into x along this edge.
Tensor stop_gradient(Tape* tape, const Tensor& x);

// x: [n, d], w: [n] or [n, 1]; out[i, :] = x[i, :] * w[i].
Tensor mul_rows(Tape* tape, const Tensor& x, const Tensor& w);

// x: [n, L], idx: n*k entries in [0, L); out [n, k].
Tensor gather_lastdim(Tape* tape, const Tensor& x, const std::vector<int64_t>& idx,
                      int64_t k);

// rows: [m, d], idx: m targets in [0, n); out [n, d] with duplicate targets
// accumulating. Backward gathers.
Tensor scatter_rows(Tape* tape, const Tensor& rows, const std::vector<int64_t>& idx,
                    int64_t n);

// Unit-normalizes each row; rejects rows with norm < 1e-12, naming the row.
Tensor l2_normalize_rows(Tape* tape, const Tensor& x);

// String-dispatched entry over the core primitive set:
//   matmul add sub mul_elementwise scale relu gelu softmax_lastdim layer_norm
//   embedding_lookup cross_entropy_with_logits sum mean transpose_last2
//   concat_lastdim squared_l2
// Ops with non-tensor parameters take them as trailing tensors holding
// integral values (scale takes a 1-element constant factor). Unknown ids are
// rejected.
Tensor forward_primitive(Tape* tape, const std::string& op_id,
                         const std::vector<Tensor>& inputs);

}  // namespace vqmoe::ops
