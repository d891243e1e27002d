#include "vqmoe/quantizer.hpp"

#include "vqmoe/ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <stdexcept>

namespace vqmoe {

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

// Plain per-row scan. Deliberately the same arithmetic a brute-force check
// would use, so exact matches give exact zeros and argmin ties are stable.
void euclidean_distances(const double* z, const double* v, double* out, int64_t n,
                         int64_t K, int64_t d) {
  for (int64_t i = 0; i < n; ++i) {
    const double* zi = z + i * d;
    for (int64_t j = 0; j < K; ++j) {
      const double* vj = v + j * d;
      double acc = 0.0;
      for (int64_t t = 0; t < d; ++t) {
        const double diff = zi[t] - vj[t];
        acc += diff * diff;
      }
      out[i * K + j] = acc;
    }
  }
  ops::add_flop_count(static_cast<uint64_t>(2) * n * K * d);
}

void cosine_distances(const double* z, const double* v, double* out, int64_t n,
                      int64_t K, int64_t d) {
  std::vector<double> vn(static_cast<size_t>(K));
  for (int64_t j = 0; j < K; ++j) {
    double acc = 0.0;
    for (int64_t t = 0; t < d; ++t) acc += v[j * d + t] * v[j * d + t];
    const double nrm = std::sqrt(acc);
    if (nrm < 1e-12) fail("assign_codes", "zero-norm code vector " + std::to_string(j));
    vn[static_cast<size_t>(j)] = nrm;
  }
  for (int64_t i = 0; i < n; ++i) {
    const double* zi = z + i * d;
    double acc = 0.0;
    for (int64_t t = 0; t < d; ++t) acc += zi[t] * zi[t];
    const double zn = std::sqrt(acc);
    if (zn < 1e-12)
      fail("assign_codes", "zero-norm query row " + std::to_string(i) +
                               " under cosine metric");
    for (int64_t j = 0; j < K; ++j) {
      const double* vj = v + j * d;
      double dot = 0.0;
      for (int64_t t = 0; t < d; ++t) dot += zi[t] * vj[t];
      out[i * K + j] = 1.0 - dot / (zn * vn[static_cast<size_t>(j)]);
    }
  }
  ops::add_flop_count(static_cast<uint64_t>(2) * n * K * d + static_cast<uint64_t>(n) * d);
}

}  // namespace

Metric metric_from_string(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  fail("codebook", "unknown metric '" + s + "' (expected euclidean or cosine)");
}

std::string metric_to_string(Metric m) {
  return m == Metric::euclidean ? "euclidean" : "cosine";
}

void init_codebook_from_batch(Codebook& cb, const Tensor& x, Rng& rng) {
  if (x.rank() != 2 || x.dim(1) != cb.d())
    fail("init_codebook_from_batch", "batch shape " + shape_str(x.shape()) +
                                         " incompatible with codebook d = " +
                                         std::to_string(cb.d()));
  const int64_t n = x.dim(0), K = cb.K(), d = cb.d();
  std::vector<int64_t> pool(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
  for (int64_t j = 0; j < K; ++j) {
    int64_t row;
    if (j < n) {
      // partial Fisher-Yates draw without replacement
      const int64_t pick = j + rng.uniform_int(n - j);
      std::swap(pool[static_cast<size_t>(j)], pool[static_cast<size_t>(pick)]);
      row = pool[static_cast<size_t>(j)];
    } else {
      row = rng.uniform_int(n);
    }
    double* dst = cb.vectors.data().data() + j * d;
    const double* src = x.data().data() + row * d;
    std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(d));
    if (j >= n)
      for (int64_t t = 0; t < d; ++t) dst[t] += 1e-3 * rng.normal();
  }
}

std::vector<double> assignment_margins(const QuantizationResult& r) {
  const int64_t n = r.distances.dim(0), K = r.distances.dim(1);
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* row = r.distances.data().data() + i * K;
    double best = std::numeric_limits<double>::infinity();
    double second = std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < K; ++j) {
      if (row[j] < best) {
        second = best;
        best = row[j];
      } else if (row[j] < second) {
        second = row[j];
      }
    }
    out[static_cast<size_t>(i)] = K > 1 ? second - best : std::numeric_limits<double>::infinity();
  }
  return out;
}

StFreeze make_freeze(const Tensor& z, const QuantizationResult& r, const Codebook& cb) {
  StFreeze f;
  f.indices = r.indices;
  const int64_t n = z.dim(0), d = z.dim(1);
  f.st_offset.resize(static_cast<size_t>(n * d));
  f.z_pinned = z.data();
  f.v_pinned.resize(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    const double* code = cb.vectors.data().data() + r.indices[static_cast<size_t>(i)] * d;
    for (int64_t t = 0; t < d; ++t) {
      f.v_pinned[static_cast<size_t>(i * d + t)] = code[t];
      f.st_offset[static_cast<size_t>(i * d + t)] = code[t] - z.data()[i * d + t];
    }
  }
  return f;
}

QuantizationResult assign_codes(Tape* tape, const Tensor& z, const Codebook& cb) {
  if (z.rank() != 2)
    fail("assign_codes", "queries must be [n, d], got " + shape_str(z.shape()));
  if (z.dim(1) != cb.d())
    fail("assign_codes", "query width " + std::to_string(z.dim(1)) +
                             " does not match codebook d = " + std::to_string(cb.d()));
  const int64_t n = z.dim(0), K = cb.K(), d = cb.d();

  QuantizationResult r;
  r.distances = Tensor({n, K});
  if (cb.metric == Metric::euclidean)
    euclidean_distances(z.data().data(), cb.vectors.data().data(),
                        r.distances.data().data(), n, K, d);
  else
    cosine_distances(z.data().data(), cb.vectors.data().data(),
                     r.distances.data().data(), n, K, d);

  r.indices.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* row = r.distances.data().data() + i * K;
    int64_t best = 0;
    for (int64_t j = 1; j < K; ++j)
      if (row[j] < row[best]) best = j;
    r.indices[static_cast<size_t>(i)] = best;
  }
  r.quantized = straight_through(tape, z, r, cb);
  return r;
}

Tensor straight_through(Tape* tape, const Tensor& z, const QuantizationResult& r,
                        const Codebook& cb, const StFreeze* freeze) {
  const int64_t n = z.dim(0), d = z.dim(1);
  if (static_cast<int64_t>(r.indices.size()) != n && !freeze)
    fail("straight_through", std::to_string(r.indices.size()) + " indices for " +
                                 std::to_string(n) + " rows");

  if (freeze) {
    // z plus a constant offset: smooth surrogate whose true derivative is the
    // identity pass the unfrozen backward reports.
    Tensor offset = Tensor::from_data({n, d}, freeze->st_offset);
    return ops::add(tape, z, offset);
  }

  Tensor out({n, d}, tape && z.requires_grad());
  Tensor tz = z, tv = cb.vectors;
  auto ids = std::make_shared<std::vector<int64_t>>(r.indices);
  auto fwd = [=]() mutable {
    for (int64_t i = 0; i < n; ++i)
      std::memcpy(out.data().data() + i * d, tv.data().data() + (*ids)[static_cast<size_t>(i)] * d,
                  sizeof(double) * static_cast<size_t>(d));
  };
  auto bwd = [=]() mutable {
    if (!tz.requires_grad()) return;
    double* gz = tz.grad().data();
    const double* go = out.grad().data();
    for (int64_t i = 0; i < n * d; ++i) gz[i] += go[i];
  };
  fwd();
  if (tape)
    tape->record("straight_through", {z, cb.vectors}, out, std::move(fwd),
                 out.requires_grad() ? std::move(bwd) : std::function<void()>());
  return out;
}

Tensor vq_loss(Tape* tape, const Tensor& z, const QuantizationResult& r,
               const Codebook& cb, double beta, const StFreeze* freeze) {
  if (beta < 0.0) fail("vq_loss", "beta must be non-negative");
  const int64_t n = z.dim(0), d = z.dim(1);
  const std::vector<int64_t>& idx = freeze ? freeze->indices : r.indices;
  if (static_cast<int64_t>(idx.size()) != n)
    fail("vq_loss", std::to_string(idx.size()) + " indices for " + std::to_string(n) +
                        " rows");

  Tensor selected = ops::take_rows(tape, cb.vectors, idx);
  Tensor z_ref = freeze ? Tensor::from_data({n, d}, freeze->z_pinned)
                        : ops::stop_gradient(tape, z);
  Tensor v_ref = freeze ? Tensor::from_data({n, d}, freeze->v_pinned)
                        : ops::stop_gradient(tape, selected);

  Tensor codebook_term = ops::squared_l2(tape, ops::sub(tape, z_ref, selected));
  Tensor commit_term = ops::squared_l2(tape, ops::sub(tape, z, v_ref));
  Tensor total = ops::add(tape, codebook_term, ops::scale(tape, commit_term, beta));
  return ops::scale(tape, total, 1.0 / static_cast<double>(n));
}

int64_t code_to_expert(int64_t code_index, int64_t n_experts) {
  if (n_experts <= 0) fail("code_to_expert", "n_experts must be positive");
  if (code_index < 0) fail("code_to_expert", "negative code index");
  return code_index % n_experts;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "codebook wire format assumes a little-endian host");

void put_u64(std::string& out, uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

uint64_t get_u64(const std::string& bytes, size_t& pos, const std::string& what) {
  if (pos + 8 > bytes.size())
    fail("deserialize_codebook", "truncated blob reading " + what);
  uint64_t v = 0;
  std::memcpy(&v, bytes.data() + pos, 8);
  pos += 8;
  return v;
}

}  // namespace

std::string serialize_codebook(const Codebook& cb) {
  if (!cb.vectors.defined() || cb.vectors.rank() != 2)
    fail("serialize_codebook", "codebook vectors must be a [K, d] tensor");
  std::string out;
  out.push_back(cb.metric == Metric::euclidean ? '\x00' : '\x01');
  put_u64(out, static_cast<uint64_t>(cb.K()));
  put_u64(out, static_cast<uint64_t>(cb.d()));
  const std::vector<double>& v = cb.vectors.data();
  const size_t payload = v.size() * sizeof(double);
  out.append(reinterpret_cast<const char*>(v.data()), payload);
  return out;
}

Codebook deserialize_codebook(const std::string& bytes) {
  if (bytes.empty()) fail("deserialize_codebook", "empty blob");
  const char tag = bytes[0];
  if (tag != '\x00' && tag != '\x01')
    fail("deserialize_codebook", "unknown metric tag " + std::to_string(int(tag)));
  size_t pos = 1;
  const uint64_t K = get_u64(bytes, pos, "K");
  const uint64_t d = get_u64(bytes, pos, "d");
  if (K < 1 || d < 1) fail("deserialize_codebook", "K and d must be positive");
  const size_t payload = static_cast<size_t>(K * d) * sizeof(double);
  if (bytes.size() != pos + payload)
    fail("deserialize_codebook", "blob holds " + std::to_string(bytes.size() - pos) +
                                     " payload bytes, expected " +
                                     std::to_string(payload));
  Codebook cb;
  cb.metric = tag == '\x00' ? Metric::euclidean : Metric::cosine;
  cb.vectors = Tensor({static_cast<int64_t>(K), static_cast<int64_t>(d)}, true);
  std::memcpy(cb.vectors.data().data(), bytes.data() + pos, payload);
  return cb;
}

uint64_t codebook_digest(const Codebook& cb) {
  const std::string s = serialize_codebook(cb);
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace vqmoe
