#include "vqmoe/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <utility>

// Everything except the gemm calls runs as plain sequential loops. Eigen's
// mapped-array kernels peel until the buffer address is SIMD-aligned, so the
// same row of numbers can round differently depending on where the allocator
// placed it; gemm is immune because it packs operands into aligned scratch.
// Scalar loops keep every element's dataflow a function of values alone.

namespace vqmoe::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

uint64_t g_flops = 0;

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

bool want_grad(Tape* tape, std::initializer_list<const Tensor*> ts) {
  if (!tape) return false;
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// C[m,n] (+)= A[m,k] * B[k,n], row-major dense.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k,
          int64_t n, bool accumulate) {
  CMatMap A(a, m, k), B(b, k, n);
  MatMap C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
  g_flops += static_cast<uint64_t>(2) * m * k * n;
}

// C (+)= A^T * B with A[k,m], B[k,n].
void gemm_at(const double* a, const double* b, double* c, int64_t k, int64_t m,
             int64_t n, bool accumulate) {
  CMatMap A(a, k, m), B(b, k, n);
  MatMap C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
  g_flops += static_cast<uint64_t>(2) * m * k * n;
}

// C (+)= A * B^T with A[m,k], B[n,k].
void gemm_bt(const double* a, const double* b, double* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
  CMatMap A(a, m, k), B(b, n, k);
  MatMap C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
  g_flops += static_cast<uint64_t>(2) * m * k * n;
}

bool is_suffix(const Shape& suf, const Shape& big) {
  if (suf.size() > big.size()) return false;
  size_t off = big.size() - suf.size();
  for (size_t i = 0; i < suf.size(); ++i)
    if (suf[i] != big[off + i]) return false;
  return true;
}

// Runs the forward once, then records it (with its backward) if a tape is
// active. Closures capture the tensor handles they need.
Tensor finish(Tape* tape, const char* op, std::vector<Tensor> inputs, Tensor out,
              std::function<void()> fwd, std::function<void()> bwd) {
  fwd();
  if (tape)
    tape->record(op, std::move(inputs), out, std::move(fwd),
                 out.requires_grad() ? std::move(bwd) : nullptr);
  return out;
}

std::vector<int64_t> check_index_tensor(const Tensor& t, int64_t hi, const char* op) {
  std::vector<int64_t> out;
  out.reserve(t.data().size());
  for (size_t i = 0; i < t.data().size(); ++i) {
    double v = t.data()[i];
    if (v != std::floor(v))
      fail(op, "index tensor holds non-integral value at position " + std::to_string(i));
    int64_t iv = static_cast<int64_t>(v);
    if (iv < 0 || iv >= hi)
      fail(op, "index " + std::to_string(iv) + " out of range [0, " + std::to_string(hi) +
               ") at position " + std::to_string(i));
    out.push_back(iv);
  }
  return out;
}

double seq_sum(const double* p, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += p[i];
  return s;
}

double seq_max(const double* p, int64_t n) {
  double m = p[0];
  for (int64_t i = 1; i < n; ++i)
    if (p[i] > m) m = p[i];
  return m;
}

double seq_dot(const double* a, const double* b, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
constexpr double kLnEps = 1e-5;

}  // namespace

uint64_t flop_count() { return g_flops; }
void reset_flop_count() { g_flops = 0; }
void add_flop_count(uint64_t flops) { g_flops += flops; }

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) fail("matmul", "operands must have rank >= 2");
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t batch = a.numel() / (m * k);

  const bool batched_b = b.rank() > 2;
  if (batched_b) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      fail("matmul", "leading dims differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const int64_t kb = b.dim(-2), n = b.dim(-1);
  if (k != kb)
    fail("matmul", "inner dims " + std::to_string(k) + " vs " + std::to_string(kb) + " (" +
                       shape_str(a.shape()) + " x " + shape_str(b.shape()) + ")");

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape, want_grad(tape, {&a, &b}));
  Tensor ta = a, tb = b;

  auto fwd = [=]() mutable {
    const double* pa = ta.data().data();
    const double* pb = tb.data().data();
    double* pc = out.data().data();
    if (!batched_b) {
      gemm(pa, pb, pc, batch * m, k, n, false);
    } else {
      for (int64_t i = 0; i < batch; ++i)
        gemm(pa + i * m * k, pb + i * k * n, pc + i * m * n, m, k, n, false);
    }
  };
  auto bwd = [=]() mutable {
    const double* pg = out.grad().data();
    if (!batched_b) {
      if (ta.requires_grad())
        gemm_bt(pg, tb.data().data(), ta.grad().data(), batch * m, n, k, true);
      if (tb.requires_grad())
        gemm_at(ta.data().data(), pg, tb.grad().data(), batch * m, k, n, true);
    } else {
      for (int64_t i = 0; i < batch; ++i) {
        const double* gi = pg + i * m * n;
        if (ta.requires_grad())
          gemm_bt(gi, tb.data().data() + i * k * n, ta.grad().data() + i * m * k, m, n, k,
                  true);
        if (tb.requires_grad())
          gemm_at(ta.data().data() + i * m * k, gi, tb.grad().data() + i * k * n, m, k, n,
                  true);
      }
    }
  };
  return finish(tape, "matmul", {a, b}, out, fwd, bwd);
}

namespace {

enum class EwKind { Add, Sub, Mul };

Tensor elementwise(Tape* tape, EwKind kind, const char* name, const Tensor& a,
                   const Tensor& b) {
  const bool bcast = a.shape() != b.shape();
  if (bcast) {
    if (kind != EwKind::Add || !is_suffix(b.shape(), a.shape()))
      fail(name, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape(), want_grad(tape, {&a, &b}));
  Tensor ta = a, tb = b;
  const int64_t bn = b.numel(), an = a.numel();

  auto fwd = [=]() mutable {
    const double* pa = ta.data().data();
    const double* pb = tb.data().data();
    double* po = out.data().data();
    if (!bcast) {
      switch (kind) {
        case EwKind::Add:
          for (int64_t i = 0; i < an; ++i) po[i] = pa[i] + pb[i];
          break;
        case EwKind::Sub:
          for (int64_t i = 0; i < an; ++i) po[i] = pa[i] - pb[i];
          break;
        case EwKind::Mul:
          for (int64_t i = 0; i < an; ++i) po[i] = pa[i] * pb[i];
          break;
      }
    } else {
      for (int64_t off = 0; off < an; off += bn)
        for (int64_t i = 0; i < bn; ++i) po[off + i] = pa[off + i] + pb[i];
    }
  };
  auto bwd = [=]() mutable {
    const double* pg = out.grad().data();
    if (ta.requires_grad()) {
      double* ga = ta.grad().data();
      if (kind == EwKind::Mul) {
        const double* pb = tb.data().data();
        for (int64_t i = 0; i < an; ++i) ga[i] += pg[i] * pb[i];
      } else {
        for (int64_t i = 0; i < an; ++i) ga[i] += pg[i];
      }
    }
    if (tb.requires_grad()) {
      double* gb = tb.grad().data();
      if (!bcast) {
        switch (kind) {
          case EwKind::Add:
            for (int64_t i = 0; i < an; ++i) gb[i] += pg[i];
            break;
          case EwKind::Sub:
            for (int64_t i = 0; i < an; ++i) gb[i] -= pg[i];
            break;
          case EwKind::Mul: {
            const double* pa = ta.data().data();
            for (int64_t i = 0; i < an; ++i) gb[i] += pg[i] * pa[i];
            break;
          }
        }
      } else {
        for (int64_t off = 0; off < an; off += bn)
          for (int64_t i = 0; i < bn; ++i) gb[i] += pg[off + i];
      }
    }
  };
  return finish(tape, name, {a, b}, out, fwd, bwd);
}

}  // namespace

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  return elementwise(tape, EwKind::Add, "add", a, b);
}
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  return elementwise(tape, EwKind::Sub, "sub", a, b);
}
Tensor mul_elementwise(Tape* tape, const Tensor& a, const Tensor& b) {
  return elementwise(tape, EwKind::Mul, "mul_elementwise", a, b);
}

Tensor scale(Tape* tape, const Tensor& x, double c) {
  Tensor out(x.shape(), want_grad(tape, {&x}));
  Tensor tx = x;
  const int64_t n = x.numel();
  auto fwd = [=]() mutable {
    const double* px = tx.data().data();
    double* po = out.data().data();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    const double* pg = out.grad().data();
    double* pd = tx.grad().data();
    for (int64_t i = 0; i < n; ++i) pd[i] += pg[i] * c;
  };
  return finish(tape, "scale", {x}, out, fwd, bwd);
}

Tensor scale_by(Tape* tape, const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) fail("scale_by", "factor must be a 1-element tensor");
  Tensor out(x.shape(), want_grad(tape, {&x, &s}));
  Tensor tx = x, ts = s;
  const int64_t n = x.numel();
  auto fwd = [=]() mutable {
    const double c = ts.data()[0];
    const double* px = tx.data().data();
    double* po = out.data().data();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
  };
  auto bwd = [=]() mutable {
    const double* pg = out.grad().data();
    if (tx.requires_grad()) {
      const double c = ts.data()[0];
      double* pd = tx.grad().data();
      for (int64_t i = 0; i < n; ++i) pd[i] += pg[i] * c;
    }
    if (ts.requires_grad()) ts.grad()[0] += seq_dot(pg, tx.data().data(), n);
  };
  return finish(tape, "scale_by", {x, s}, out, fwd, bwd);
}

Tensor relu(Tape* tape, const Tensor& x) {
  Tensor out(x.shape(), want_grad(tape, {&x}));
  Tensor tx = x;
  const int64_t n = x.numel();
  auto fwd = [=]() mutable {
    const double* px = tx.data().data();
    double* po = out.data().data();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    const double* px = tx.data().data();
    const double* pg = out.grad().data();
    double* pd = tx.grad().data();
    for (int64_t i = 0; i < n; ++i)
      if (px[i] > 0.0) pd[i] += pg[i];
  };
  return finish(tape, "relu", {x}, out, fwd, bwd);
}

Tensor gelu(Tape* tape, const Tensor& x) {
  Tensor out(x.shape(), want_grad(tape, {&x}));
  Tensor tx = x;
  const int64_t n = x.numel();
  auto fwd = [=]() mutable {
    const double* px = tx.data().data();
    double* po = out.data().data();
    for (int64_t i = 0; i < n; ++i) {
      const double v = px[i];
      po[i] = 0.5 * v * (1.0 + std::tanh(kGeluC0 * (v + kGeluC1 * v * v * v)));
    }
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    const double* px = tx.data().data();
    const double* pg = out.grad().data();
    double* pd = tx.grad().data();
    for (int64_t i = 0; i < n; ++i) {
      const double v = px[i];
      const double t = std::tanh(kGeluC0 * (v + kGeluC1 * v * v * v));
      pd[i] += pg[i] * (0.5 * (1.0 + t) +
                        0.5 * v * (1.0 - t * t) * kGeluC0 *
                            (1.0 + 3.0 * kGeluC1 * v * v));
    }
  };
  return finish(tape, "gelu", {x}, out, fwd, bwd);
}

namespace {

void softmax_row(const double* x, double* y, int64_t len) {
  const double m = seq_max(x, len);
  double z = 0.0;
  for (int64_t i = 0; i < len; ++i) {
    y[i] = std::exp(x[i] - m);
    z += y[i];
  }
  for (int64_t i = 0; i < len; ++i) y[i] /= z;
}

void softmax_row_backward(const double* y, const double* g, double* d, int64_t len) {
  const double dot = seq_dot(y, g, len);
  for (int64_t i = 0; i < len; ++i) d[i] += y[i] * (g[i] - dot);
}

}  // namespace

Tensor softmax_lastdim(Tape* tape, const Tensor& x) {
  if (x.rank() < 1) fail("softmax_lastdim", "rank-0 input");
  const int64_t L = x.dim(-1);
  const int64_t rows = x.numel() / L;
  Tensor out(x.shape(), want_grad(tape, {&x}));
  Tensor tx = x;
  auto fwd = [=]() mutable {
    for (int64_t r = 0; r < rows; ++r)
      softmax_row(tx.data().data() + r * L, out.data().data() + r * L, L);
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    for (int64_t r = 0; r < rows; ++r)
      softmax_row_backward(out.data().data() + r * L, out.grad().data() + r * L,
                           tx.grad().data() + r * L, L);
  };
  return finish(tape, "softmax_lastdim", {x}, out, fwd, bwd);
}

Tensor softmax_causal(Tape* tape, const Tensor& x) {
  if (x.rank() < 2 || x.dim(-1) != x.dim(-2))
    fail("softmax_causal", "trailing dims must be square, got " + shape_str(x.shape()));
  const int64_t T = x.dim(-1);
  const int64_t rows = x.numel() / T;  // row r of each matrix keeps cols 0..r
  Tensor out(x.shape(), want_grad(tape, {&x}));
  Tensor tx = x;
  auto fwd = [=]() mutable {
    std::fill(out.data().begin(), out.data().end(), 0.0);
    for (int64_t r = 0; r < rows; ++r)
      softmax_row(tx.data().data() + r * T, out.data().data() + r * T, (r % T) + 1);
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    for (int64_t r = 0; r < rows; ++r)
      softmax_row_backward(out.data().data() + r * T, out.grad().data() + r * T,
                           tx.grad().data() + r * T, (r % T) + 1);
  };
  return finish(tape, "softmax_causal", {x}, out, fwd, bwd);
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const int64_t d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    fail("layer_norm", "gamma/beta must be [" + std::to_string(d) + "], got " +
                           shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  const int64_t rows = x.numel() / d;
  Tensor out(x.shape(), want_grad(tape, {&x, &gamma, &beta}));
  Tensor tx = x, tg = gamma, tb = beta;
  auto rstd = std::make_shared<std::vector<double>>(rows);
  auto mu = std::make_shared<std::vector<double>>(rows);

  auto fwd = [=]() mutable {
    const double* pg = tg.data().data();
    const double* pb = tb.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* px = tx.data().data() + r * d;
      double* py = out.data().data() + r * d;
      const double m = seq_sum(px, d) / static_cast<double>(d);
      double var = 0.0;
      for (int64_t j = 0; j < d; ++j) var += (px[j] - m) * (px[j] - m);
      var /= static_cast<double>(d);
      const double rs = 1.0 / std::sqrt(var + kLnEps);
      (*mu)[r] = m;
      (*rstd)[r] = rs;
      for (int64_t j = 0; j < d; ++j) py[j] = (px[j] - m) * rs * pg[j] + pb[j];
    }
  };
  auto bwd = [=]() mutable {
    const double* pg = tg.data().data();
    std::vector<double> xhat(static_cast<size_t>(d)), dxhat(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      const double* px = tx.data().data() + r * d;
      const double* dy = out.grad().data() + r * d;
      const double m = (*mu)[r], rs = (*rstd)[r];
      for (int64_t j = 0; j < d; ++j) xhat[static_cast<size_t>(j)] = (px[j] - m) * rs;
      if (tg.requires_grad()) {
        double* gd = tg.grad().data();
        for (int64_t j = 0; j < d; ++j) gd[j] += dy[j] * xhat[static_cast<size_t>(j)];
      }
      if (tb.requires_grad()) {
        double* bd = tb.grad().data();
        for (int64_t j = 0; j < d; ++j) bd[j] += dy[j];
      }
      if (tx.requires_grad()) {
        for (int64_t j = 0; j < d; ++j) dxhat[static_cast<size_t>(j)] = dy[j] * pg[j];
        const double mean_dx = seq_sum(dxhat.data(), d) / static_cast<double>(d);
        const double mean_dxx =
            seq_dot(dxhat.data(), xhat.data(), d) / static_cast<double>(d);
        double* xd = tx.grad().data() + r * d;
        for (int64_t j = 0; j < d; ++j)
          xd[j] += rs * (dxhat[static_cast<size_t>(j)] - mean_dx -
                         xhat[static_cast<size_t>(j)] * mean_dxx);
      }
    }
  };
  return finish(tape, "layer_norm", {x, gamma, beta}, out, fwd, bwd);
}

namespace {

Tensor row_lookup(Tape* tape, const char* name, const Tensor& table,
                  std::vector<int64_t> ids, Shape out_shape) {
  const int64_t V = table.dim(0), d = table.dim(-1);
  if (table.rank() != 2) fail(name, "table must be rank 2, got " + shape_str(table.shape()));
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= V)
      fail(name, "index " + std::to_string(ids[i]) + " out of range [0, " +
                     std::to_string(V) + ") at position " + std::to_string(i));
  Tensor out(out_shape, want_grad(tape, {&table}));
  Tensor tt = table;
  auto shared_ids = std::make_shared<std::vector<int64_t>>(std::move(ids));

  auto fwd = [=]() mutable {
    const double* src = tt.data().data();
    double* dst = out.data().data();
    for (size_t i = 0; i < shared_ids->size(); ++i)
      std::memcpy(dst + i * d, src + (*shared_ids)[i] * d, sizeof(double) * d);
  };
  auto bwd = [=]() mutable {
    if (!tt.requires_grad()) return;
    const double* pg = out.grad().data();
    double* pd = tt.grad().data();
    for (size_t i = 0; i < shared_ids->size(); ++i) {
      double* row = pd + (*shared_ids)[i] * d;
      const double* g = pg + i * d;
      for (int64_t j = 0; j < d; ++j) row[j] += g[j];
    }
  };
  return finish(tape, name, {table}, out, fwd, bwd);
}

}  // namespace

Tensor embedding_lookup(Tape* tape, const Tensor& table, const std::vector<int64_t>& ids,
                        const Shape& lead_shape) {
  if (numel_of(lead_shape) != static_cast<int64_t>(ids.size()))
    fail("embedding_lookup", "lead shape " + shape_str(lead_shape) + " does not match " +
                                 std::to_string(ids.size()) + " ids");
  Shape out_shape = lead_shape;
  out_shape.push_back(table.dim(-1));
  return row_lookup(tape, "embedding_lookup", table, ids, std::move(out_shape));
}

Tensor take_rows(Tape* tape, const Tensor& x, const std::vector<int64_t>& rows) {
  Shape out_shape{static_cast<int64_t>(rows.size()), x.dim(-1)};
  return row_lookup(tape, "take_rows", x, rows, std::move(out_shape));
}

Tensor cross_entropy_with_logits(Tape* tape, const Tensor& logits,
                                 const std::vector<int64_t>& targets) {
  if (logits.rank() != 2)
    fail("cross_entropy_with_logits", "logits must be [n, V], got " + shape_str(logits.shape()));
  const int64_t n = logits.dim(0), V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n)
    fail("cross_entropy_with_logits", std::to_string(targets.size()) + " targets for " +
                                          std::to_string(n) + " rows");
  for (int64_t i = 0; i < n; ++i)
    if (targets[i] < 0 || targets[i] >= V)
      fail("cross_entropy_with_logits", "target " + std::to_string(targets[i]) +
                                          " out of range [0, " + std::to_string(V) +
                                          ") at row " + std::to_string(i));
  Tensor out({1}, want_grad(tape, {&logits}));
  Tensor tl = logits;
  auto tgt = std::make_shared<std::vector<int64_t>>(targets);
  auto probs = std::make_shared<std::vector<double>>(n * V);

  auto fwd = [=]() mutable {
    double total = 0.0;
    for (int64_t r = 0; r < n; ++r) {
      const double* px = tl.data().data() + r * V;
      double* pp = probs->data() + r * V;
      const double m = seq_max(px, V);
      double z = 0.0;
      for (int64_t j = 0; j < V; ++j) {
        pp[j] = std::exp(px[j] - m);
        z += pp[j];
      }
      for (int64_t j = 0; j < V; ++j) pp[j] /= z;
      total += m + std::log(z) - px[(*tgt)[r]];
    }
    out.data()[0] = total / static_cast<double>(n);
  };
  auto bwd = [=]() mutable {
    if (!tl.requires_grad()) return;
    const double g = out.grad()[0] / static_cast<double>(n);
    double* pd = tl.grad().data();
    const double* pp = probs->data();
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t j = 0; j < V; ++j) pd[r * V + j] += g * pp[r * V + j];
      pd[r * V + (*tgt)[r]] -= g;
    }
  };
  return finish(tape, "cross_entropy_with_logits", {logits}, out, fwd, bwd);
}

namespace {

Tensor reduce_op(Tape* tape, const char* name, const Tensor& x, int kind) {
  Tensor out({1}, want_grad(tape, {&x}));
  Tensor tx = x;
  const int64_t n = x.numel();
  auto fwd = [=]() mutable {
    const double* px = tx.data().data();
    switch (kind) {
      case 0:
        out.data()[0] = seq_sum(px, n);
        break;
      case 1:
        out.data()[0] = seq_sum(px, n) / static_cast<double>(n);
        break;
      default:
        out.data()[0] = seq_dot(px, px, n);
        break;
    }
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    const double g = out.grad()[0];
    double* pd = tx.grad().data();
    switch (kind) {
      case 0:
        for (int64_t i = 0; i < n; ++i) pd[i] += g;
        break;
      case 1: {
        const double gn = g / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) pd[i] += gn;
        break;
      }
      default: {
        const double* px = tx.data().data();
        for (int64_t i = 0; i < n; ++i) pd[i] += 2.0 * g * px[i];
        break;
      }
    }
  };
  return finish(tape, name, {x}, out, fwd, bwd);
}

}  // namespace

Tensor sum(Tape* tape, const Tensor& x) { return reduce_op(tape, "sum", x, 0); }
Tensor mean(Tape* tape, const Tensor& x) { return reduce_op(tape, "mean", x, 1); }
Tensor squared_l2(Tape* tape, const Tensor& x) { return reduce_op(tape, "squared_l2", x, 2); }

Tensor transpose_last2(Tape* tape, const Tensor& x) {
  if (x.rank() < 2) fail("transpose_last2", "needs rank >= 2, got " + shape_str(x.shape()));
  const int64_t a = x.dim(-2), b = x.dim(-1);
  const int64_t batch = x.numel() / (a * b);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor out(out_shape, want_grad(tape, {&x}));
  Tensor tx = x;
  auto fwd = [=]() mutable {
    for (int64_t i = 0; i < batch; ++i) {
      const double* src = tx.data().data() + i * a * b;
      double* dst = out.data().data() + i * a * b;
      for (int64_t r = 0; r < a; ++r)
        for (int64_t c = 0; c < b; ++c) dst[c * a + r] = src[r * b + c];
    }
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    for (int64_t i = 0; i < batch; ++i) {
      const double* g = out.grad().data() + i * a * b;
      double* pd = tx.grad().data() + i * a * b;
      for (int64_t r = 0; r < a; ++r)
        for (int64_t c = 0; c < b; ++c) pd[r * b + c] += g[c * a + r];
    }
  };
  return finish(tape, "transpose_last2", {x}, out, fwd, bwd);
}

Tensor concat_lastdim(Tape* tape, const std::vector<Tensor>& xs) {
  if (xs.empty()) fail("concat_lastdim", "no inputs");
  const Shape& lead = xs[0].shape();
  int64_t total = 0;
  bool any_grad = false;
  for (const Tensor& t : xs) {
    if (t.rank() != xs[0].rank() ||
        !std::equal(lead.begin(), lead.end() - 1, t.shape().begin()))
      fail("concat_lastdim", "leading dims differ: " + shape_str(lead) + " vs " +
                                 shape_str(t.shape()));
    total += t.dim(-1);
    any_grad = any_grad || t.requires_grad();
  }
  Shape out_shape(lead.begin(), lead.end() - 1);
  out_shape.push_back(total);
  Tensor out(out_shape, tape && any_grad);
  const int64_t rows = out.numel() / total;
  auto parts = std::make_shared<std::vector<Tensor>>(xs);

  auto fwd = [=]() mutable {
    int64_t off = 0;
    for (const Tensor& t : *parts) {
      const int64_t w = t.dim(-1);
      for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.data().data() + r * total + off, t.data().data() + r * w,
                    sizeof(double) * w);
      off += w;
    }
  };
  auto bwd = [=]() mutable {
    int64_t off = 0;
    for (Tensor& t : *parts) {
      const int64_t w = t.dim(-1);
      if (t.requires_grad()) {
        double* pd = t.grad().data();
        const double* pg = out.grad().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < w; ++j) pd[r * w + j] += pg[r * total + off + j];
      }
      off += w;
    }
  };
  return finish(tape, "concat_lastdim", xs, out, fwd, bwd);
}

Tensor slice_lastdim(Tape* tape, const Tensor& x, int64_t offset, int64_t len) {
  const int64_t L = x.dim(-1);
  if (offset < 0 || len <= 0 || offset + len > L)
    fail("slice_lastdim", "range [" + std::to_string(offset) + ", " +
                              std::to_string(offset + len) + ") outside width " +
                              std::to_string(L));
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(len);
  Tensor out(out_shape, want_grad(tape, {&x}));
  Tensor tx = x;
  const int64_t rows = x.numel() / L;
  auto fwd = [=]() mutable {
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(out.data().data() + r * len, tx.data().data() + r * L + offset,
                  sizeof(double) * len);
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    double* pd = tx.grad().data();
    const double* pg = out.grad().data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < len; ++j) pd[r * L + offset + j] += pg[r * len + j];
  };
  return finish(tape, "slice_lastdim", {x}, out, fwd, bwd);
}

Tensor reshape(Tape* tape, const Tensor& x, Shape target) {
  if (numel_of(target) != x.numel())
    fail("reshape", shape_str(x.shape()) + " -> " + shape_str(target) + " changes numel");
  Tensor out(target, want_grad(tape, {&x}));
  Tensor tx = x;
  const int64_t n = x.numel();
  auto fwd = [=]() mutable {
    std::memcpy(out.data().data(), tx.data().data(), sizeof(double) * n);
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    const double* pg = out.grad().data();
    double* pd = tx.grad().data();
    for (int64_t i = 0; i < n; ++i) pd[i] += pg[i];
  };
  return finish(tape, "reshape", {x}, out, fwd, bwd);
}

Tensor stop_gradient(Tape* tape, const Tensor& x) {
  Tensor out(x.shape(), false);
  Tensor tx = x;
  const int64_t n = x.numel();
  auto fwd = [=]() mutable {
    std::memcpy(out.data().data(), tx.data().data(), sizeof(double) * n);
  };
  return finish(tape, "stop_gradient", {x}, out, fwd, nullptr);
}

Tensor mul_rows(Tape* tape, const Tensor& x, const Tensor& w) {
  if (x.rank() != 2) fail("mul_rows", "x must be [n, d], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), d = x.dim(1);
  if (w.numel() != n)
    fail("mul_rows", "weight shape " + shape_str(w.shape()) + " does not match " +
                         std::to_string(n) + " rows");
  Tensor out(x.shape(), want_grad(tape, {&x, &w}));
  Tensor tx = x, tw = w;
  auto fwd = [=]() mutable {
    for (int64_t r = 0; r < n; ++r) {
      const double c = tw.data()[r];
      const double* px = tx.data().data() + r * d;
      double* po = out.data().data() + r * d;
      for (int64_t j = 0; j < d; ++j) po[j] = px[j] * c;
    }
  };
  auto bwd = [=]() mutable {
    for (int64_t r = 0; r < n; ++r) {
      const double* pg = out.grad().data() + r * d;
      if (tx.requires_grad()) {
        const double c = tw.data()[r];
        double* pd = tx.grad().data() + r * d;
        for (int64_t j = 0; j < d; ++j) pd[j] += pg[j] * c;
      }
      if (tw.requires_grad())
        tw.grad()[r] += seq_dot(pg, tx.data().data() + r * d, d);
    }
  };
  return finish(tape, "mul_rows", {x, w}, out, fwd, bwd);
}

Tensor gather_lastdim(Tape* tape, const Tensor& x, const std::vector<int64_t>& idx,
                      int64_t k) {
  if (x.rank() != 2) fail("gather_lastdim", "x must be [n, L], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), L = x.dim(1);
  if (static_cast<int64_t>(idx.size()) != n * k)
    fail("gather_lastdim", std::to_string(idx.size()) + " indices for n*k = " +
                               std::to_string(n * k));
  for (size_t i = 0; i < idx.size(); ++i)
    if (idx[i] < 0 || idx[i] >= L)
      fail("gather_lastdim", "index " + std::to_string(idx[i]) + " out of range [0, " +
                                 std::to_string(L) + ") at position " + std::to_string(i));
  Tensor out({n, k}, want_grad(tape, {&x}));
  Tensor tx = x;
  auto ids = std::make_shared<std::vector<int64_t>>(idx);
  auto fwd = [=]() mutable {
    for (int64_t r = 0; r < n; ++r)
      for (int64_t j = 0; j < k; ++j)
        out.data()[r * k + j] = tx.data()[r * L + (*ids)[r * k + j]];
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    for (int64_t r = 0; r < n; ++r)
      for (int64_t j = 0; j < k; ++j)
        tx.grad()[r * L + (*ids)[r * k + j]] += out.grad()[r * k + j];
  };
  return finish(tape, "gather_lastdim", {x}, out, fwd, bwd);
}

Tensor scatter_rows(Tape* tape, const Tensor& rows, const std::vector<int64_t>& idx,
                    int64_t n) {
  if (rows.rank() != 2)
    fail("scatter_rows", "rows must be [m, d], got " + shape_str(rows.shape()));
  const int64_t m = rows.dim(0), d = rows.dim(1);
  if (static_cast<int64_t>(idx.size()) != m)
    fail("scatter_rows", std::to_string(idx.size()) + " indices for " + std::to_string(m) +
                             " rows");
  for (size_t i = 0; i < idx.size(); ++i)
    if (idx[i] < 0 || idx[i] >= n)
      fail("scatter_rows", "index " + std::to_string(idx[i]) + " out of range [0, " +
                               std::to_string(n) + ") at position " + std::to_string(i));
  Tensor out({n, d}, want_grad(tape, {&rows}));
  Tensor tr = rows;
  auto ids = std::make_shared<std::vector<int64_t>>(idx);
  auto fwd = [=]() mutable {
    std::fill(out.data().begin(), out.data().end(), 0.0);
    for (int64_t i = 0; i < m; ++i) {
      double* dst = out.data().data() + (*ids)[i] * d;
      const double* src = tr.data().data() + i * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  auto bwd = [=]() mutable {
    if (!tr.requires_grad()) return;
    for (int64_t i = 0; i < m; ++i) {
      const double* g = out.grad().data() + (*ids)[i] * d;
      double* dst = tr.grad().data() + i * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
    }
  };
  return finish(tape, "scatter_rows", {rows}, out, fwd, bwd);
}

Tensor l2_normalize_rows(Tape* tape, const Tensor& x) {
  if (x.rank() != 2)
    fail("l2_normalize_rows", "x must be [n, d], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), d = x.dim(1);
  Tensor out(x.shape(), want_grad(tape, {&x}));
  Tensor tx = x;
  auto norms = std::make_shared<std::vector<double>>(n);
  auto fwd = [=]() mutable {
    for (int64_t r = 0; r < n; ++r) {
      const double* px = tx.data().data() + r * d;
      const double nrm = std::sqrt(seq_dot(px, px, d));
      if (nrm < 1e-12)
        fail("l2_normalize_rows", "zero-norm row " + std::to_string(r));
      (*norms)[r] = nrm;
      double* po = out.data().data() + r * d;
      for (int64_t j = 0; j < d; ++j) po[j] = px[j] / nrm;
    }
  };
  auto bwd = [=]() mutable {
    if (!tx.requires_grad()) return;
    for (int64_t r = 0; r < n; ++r) {
      const double* py = out.data().data() + r * d;
      const double* pg = out.grad().data() + r * d;
      const double dot = seq_dot(py, pg, d);
      double* pd = tx.grad().data() + r * d;
      for (int64_t j = 0; j < d; ++j) pd[j] += (pg[j] - py[j] * dot) / (*norms)[r];
    }
  };
  return finish(tape, "l2_normalize_rows", {x}, out, fwd, bwd);
}

Tensor forward_primitive(Tape* tape, const std::string& op_id,
                         const std::vector<Tensor>& in) {
  auto need = [&](size_t n) {
    if (in.size() != n)
      fail("forward_primitive", op_id + " expects " + std::to_string(n) + " inputs, got " +
                                    std::to_string(in.size()));
  };
  if (op_id == "matmul") { need(2); return matmul(tape, in[0], in[1]); }
  if (op_id == "add") { need(2); return add(tape, in[0], in[1]); }
  if (op_id == "sub") { need(2); return sub(tape, in[0], in[1]); }
  if (op_id == "mul_elementwise") { need(2); return mul_elementwise(tape, in[0], in[1]); }
  if (op_id == "scale") {
    need(2);
    if (in[1].numel() != 1) fail("forward_primitive", "scale factor must be 1-element");
    return scale(tape, in[0], in[1].data()[0]);
  }
  if (op_id == "relu") { need(1); return relu(tape, in[0]); }
  if (op_id == "gelu") { need(1); return gelu(tape, in[0]); }
  if (op_id == "softmax_lastdim") { need(1); return softmax_lastdim(tape, in[0]); }
  if (op_id == "layer_norm") { need(3); return layer_norm(tape, in[0], in[1], in[2]); }
  if (op_id == "embedding_lookup") {
    need(2);
    auto ids = check_index_tensor(in[1], in[0].dim(0), "embedding_lookup");
    return embedding_lookup(tape, in[0], ids, in[1].shape());
  }
  if (op_id == "cross_entropy_with_logits") {
    need(2);
    auto tgt = check_index_tensor(in[1], in[0].dim(-1), "cross_entropy_with_logits");
    return cross_entropy_with_logits(tape, in[0], tgt);
  }
  if (op_id == "sum") { need(1); return sum(tape, in[0]); }
  if (op_id == "mean") { need(1); return mean(tape, in[0]); }
  if (op_id == "transpose_last2") { need(1); return transpose_last2(tape, in[0]); }
  if (op_id == "concat_lastdim") {
    if (in.empty()) fail("forward_primitive", "concat_lastdim needs at least one input");
    return concat_lastdim(tape, in);
  }
  if (op_id == "squared_l2") { need(1); return squared_l2(tape, in[0]); }
  fail("forward_primitive", "unknown op '" + op_id + "'");
}

}  // namespace vqmoe::ops
