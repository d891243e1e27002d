#include "doctest.h"

#include "vqmoe/gradcheck.hpp"
#include "vqmoe/ops.hpp"
#include "vqmoe/rng.hpp"
#include "vqmoe/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

using namespace vqmoe;
namespace ops = vqmoe::ops;

namespace {

Tensor randn(Rng& rng, Shape shape, bool requires_grad = true) {
  Tensor t(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

// Builds the loss on a fresh tape from shared parameter handles.
using BuildFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

double max_fd_gap(const BuildFn& build, const std::vector<Tensor>& params) {
  Tape tape;
  Tensor loss = build(tape, params);
  tape.backward(loss);
  double worst = 0.0;
  for (const Tensor& p : params) {
    auto fd = finite_difference_gradient(
        [&](const Tensor&) {
          Tape t2;
          return build(t2, params).value();
        },
        p, 1e-5);
    worst = std::max(worst, gradient_gap(p.grad(), fd));
  }
  return worst;
}

void expect_error(const std::function<void()>& fn, const std::string& needle) {
  bool threw = false;
  try {
    fn();
  } catch (const std::runtime_error& e) {
    threw = true;
    CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos,
                  "message '", e.what(), "' lacks '", needle, "'");
  }
  CHECK_MESSAGE(threw, "expected failure mentioning '", needle, "'");
}

constexpr int kSeeds = 24;
constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("tensor basics and invariants") {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(-1) == 3);
  CHECK(t.dim(0) == 2);
  CHECK(!t.requires_grad());
  CHECK(!t.grad_allocated());
  CHECK(t.grad().size() == 6);  // lazy zero allocation
  CHECK(t.grad_allocated());
  for (double g : t.grad()) CHECK(g == 0.0);

  Tensor s = Tensor::scalar(2.5);
  CHECK(s.value() == 2.5);
  expect_error([&] { t.value(); }, "value() on non-scalar");
  expect_error([] { Tensor::from_data({2, 2}, {1.0}); }, "does not match shape");
  expect_error([] { Tensor x({2, 0, 3}); }, "non-positive dim");

  Tensor alias = t;
  alias.data()[0] = 42.0;
  CHECK(t.data()[0] == 42.0);
  CHECK(alias.same_object(t));
}

TEST_CASE("matmul identity and flop counting") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  ops::reset_flop_count();
  Tensor out = ops::matmul(nullptr, a, eye);
  CHECK(out.data() == std::vector<double>{1, 2, 3, 4});
  CHECK(ops::flop_count() == 2 * 2 * 2 * 2);
}

TEST_CASE("softmax symmetry, row sums, strict positivity") {
  Tensor x = Tensor::from_data({2}, {0, 0});
  Tensor y = ops::softmax_lastdim(nullptr, x);
  CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.data()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(7);
  Tensor big(Shape{7, 9});
  for (double& v : big.data()) v = rng.uniform(-100.0, 100.0);
  Tensor p = ops::softmax_lastdim(nullptr, big);
  for (int64_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < 9; ++c) {
      const double v = p.data()[r * 9 + c];
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("softmax_causal masks above the diagonal with exact zeros") {
  Rng rng(3);
  Tensor x = randn(rng, {2, 4, 4}, false);
  Tensor y = ops::softmax_causal(nullptr, x);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < 4; ++c) {
        const double v = y.data()[b * 16 + r * 4 + c];
        if (c > r)
          CHECK(v == 0.0);
        else {
          CHECK(v > 0.0);
          s += v;
        }
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("squared_l2 hand value and gradient") {
  Tensor x = Tensor::from_data({2}, {3, 4}, true);
  Tape tape;
  Tensor loss = ops::squared_l2(&tape, x);
  CHECK(loss.value() == doctest::Approx(25.0).epsilon(1e-15));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
  CHECK(x.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("linear map gradient is the constant") {
  Tensor x = Tensor::from_data({2, 3}, {1, -2, 3, 0.5, 0, -1}, true);
  Tape tape;
  Tensor loss = ops::sum(&tape, ops::scale(&tape, x, 3.0));
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("stop_gradient is identity forward, zero backward") {
  Tensor x = Tensor::from_data({2}, {1.5, -2}, true);
  Tensor sg = ops::stop_gradient(nullptr, x);
  CHECK(sg.data() == std::vector<double>{1.5, -2});
  CHECK(!sg.requires_grad());

  {
    Tape tape;
    Tensor loss = ops::sum(&tape, ops::stop_gradient(&tape, x));
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{0, 0});
  }
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = ops::sum(&tape, ops::add(&tape, x, ops::stop_gradient(&tape, x)));
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{1, 1});
  }

  // FD sees the identity value path even though backward reports zero.
  auto fd = finite_difference_gradient(
      [&](const Tensor&) {
        Tape t;
        return ops::sum(&t, ops::stop_gradient(&t, x)).value();
      },
      x, 1e-5);
  CHECK(fd[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(fd[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("finite differences: analytic examples") {
  Tensor x = Tensor::from_data({2}, {1, 2});
  auto fd = finite_difference_gradient(
      [](const Tensor& t) {
        Tape tape;
        return ops::squared_l2(&tape, t).value();
      },
      x, 1e-5);
  CHECK(std::abs(fd[0] - 2.0) < 1e-6);
  CHECK(std::abs(fd[1] - 4.0) < 1e-6);

  auto fd_sum = finite_difference_gradient(
      [](const Tensor& t) {
        Tape tape;
        return ops::sum(&tape, t).value();
      },
      x, 1e-5);
  CHECK(fd_sum[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fd_sum[1] == doctest::Approx(1.0).epsilon(1e-9));

  expect_error(
      [&] {
        finite_difference_gradient(
            [](const Tensor&) { return std::nan(""); }, x, 1e-5);
      },
      "non-finite");
  expect_error(
      [&] {
        finite_difference_gradient([](const Tensor&) { return 0.0; }, x, 0.0);
      },
      "eps");
}

TEST_CASE("two-layer network gradcheck across seeds") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(seed);
    Tensor x = randn(rng, {4, 6});
    Tensor w1 = randn(rng, {6, 8});
    Tensor b1 = randn(rng, {8});
    Tensor w2 = randn(rng, {8, 5});
    Tensor b2 = randn(rng, {5});
    Tensor gamma = Tensor::full({5}, 1.0, true);
    Tensor beta = Tensor::zeros({5}, true);
    std::vector<int64_t> targets{1, 0, 4, 2};

    BuildFn build = [&](Tape& t, const std::vector<Tensor>& p) {
      Tensor h = ops::gelu(&t, ops::add(&t, ops::matmul(&t, p[0], p[1]), p[2]));
      Tensor y = ops::layer_norm(
          &t, ops::add(&t, ops::matmul(&t, h, p[3]), p[4]), p[5], p[6]);
      return ops::cross_entropy_with_logits(&t, y, targets);
    };
    CHECK(max_fd_gap(build, {x, w1, b1, w2, b2, gamma, beta}) < kTol);
  }
}

TEST_CASE("gradcheck: elementwise, scaling, reductions") {
  for (int seed = 100; seed < 100 + kSeeds; ++seed) {
    Rng rng(seed);
    Tensor a = randn(rng, {3, 4});
    Tensor b = randn(rng, {3, 4});
    Tensor c = randn(rng, {3, 4});
    Tensor s = Tensor::scalar(rng.normal(), true);
    BuildFn build = [](Tape& t, const std::vector<Tensor>& p) {
      Tensor u = ops::mul_elementwise(&t, ops::add(&t, p[0], p[1]),
                                      ops::sub(&t, p[0], p[2]));
      Tensor v = ops::scale_by(&t, ops::scale(&t, u, 1.7), p[3]);
      return ops::add(&t, ops::mean(&t, v), ops::squared_l2(&t, p[1]));
    };
    CHECK(max_fd_gap(build, {a, b, c, s}) < kTol);
  }
}

TEST_CASE("gradcheck: bias broadcast add") {
  for (int seed = 200; seed < 200 + kSeeds; ++seed) {
    Rng rng(seed);
    Tensor x = randn(rng, {2, 3, 4});
    Tensor bias = randn(rng, {4});
    BuildFn build = [](Tape& t, const std::vector<Tensor>& p) {
      return ops::squared_l2(&t, ops::add(&t, p[0], p[1]));
    };
    CHECK(max_fd_gap(build, {x, bias}) < kTol);
  }
}

TEST_CASE("gradcheck: relu away from the kink") {
  for (int seed = 300; seed < 300 + kSeeds; ++seed) {
    Rng rng(seed);
    Tensor x(Shape{5, 3}, true);
    for (double& v : x.data()) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      v = sign * rng.uniform(0.1, 1.0);  // margin > FD eps
    }
    Tensor w = randn(rng, {5, 3}, false);
    BuildFn build = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::sum(&t, ops::mul_elementwise(&t, ops::relu(&t, p[0]), w));
    };
    CHECK(max_fd_gap(build, {x}) < kTol);
  }
}

TEST_CASE("gradcheck: softmax variants") {
  for (int seed = 400; seed < 400 + kSeeds; ++seed) {
    Rng rng(seed);
    Tensor x = randn(rng, {3, 5});
    Tensor w = randn(rng, {3, 5}, false);
    BuildFn build = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::sum(
          &t, ops::mul_elementwise(&t, ops::softmax_lastdim(&t, p[0]), w));
    };
    CHECK(max_fd_gap(build, {x}) < kTol);

    Tensor xc = randn(rng, {2, 4, 4});
    Tensor wc = randn(rng, {2, 4, 4}, false);
    BuildFn build_causal = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::sum(
          &t, ops::mul_elementwise(&t, ops::softmax_causal(&t, p[0]), wc));
    };
    CHECK(max_fd_gap(build_causal, {xc}) < kTol);
  }
}

TEST_CASE("gradcheck: lookup, gather, scatter, rows") {
  for (int seed = 500; seed < 500 + kSeeds; ++seed) {
    Rng rng(seed);
    Tensor table = randn(rng, {7, 3});
    std::vector<int64_t> ids{0, 3, 6, 3};  // duplicate accumulates
    BuildFn b1 = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::squared_l2(&t, ops::embedding_lookup(&t, p[0], ids, {4}));
    };
    CHECK(max_fd_gap(b1, {table}) < kTol);

    Tensor x = randn(rng, {5, 4});
    std::vector<int64_t> rows{4, 0, 0, 2};
    BuildFn b2 = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::squared_l2(&t, ops::take_rows(&t, p[0], rows));
    };
    CHECK(max_fd_gap(b2, {x}) < kTol);

    Tensor g = randn(rng, {3, 5});
    std::vector<int64_t> gi{1, 4, 0, 0, 3, 2};  // per-row pairs, one duplicated
    BuildFn b3 = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::squared_l2(&t, ops::gather_lastdim(&t, p[0], gi, 2));
    };
    CHECK(max_fd_gap(b3, {g}) < kTol);

    Tensor r = randn(rng, {4, 3});
    Tensor w = randn(rng, {4});
    std::vector<int64_t> si{0, 2, 2, 1};
    BuildFn b4 = [&](Tape& t, const std::vector<Tensor>& p) {
      Tensor weighted = ops::mul_rows(&t, p[0], p[1]);
      return ops::squared_l2(&t, ops::scatter_rows(&t, weighted, si, 3));
    };
    CHECK(max_fd_gap(b4, {r, w}) < kTol);
  }
}

TEST_CASE("gradcheck: shape movers and normalization") {
  for (int seed = 600; seed < 600 + kSeeds; ++seed) {
    Rng rng(seed);
    Tensor x = randn(rng, {2, 3, 4});
    Tensor w = randn(rng, {2, 4, 3}, false);
    BuildFn b1 = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::sum(
          &t, ops::mul_elementwise(&t, ops::transpose_last2(&t, p[0]), w));
    };
    CHECK(max_fd_gap(b1, {x}) < kTol);

    Tensor p1 = randn(rng, {2, 2});
    Tensor p2 = randn(rng, {2, 3});
    Tensor p3 = randn(rng, {2, 1});
    BuildFn b2 = [](Tape& t, const std::vector<Tensor>& p) {
      Tensor cat = ops::concat_lastdim(&t, {p[0], p[1], p[2]});
      return ops::squared_l2(&t, ops::slice_lastdim(&t, cat, 1, 4));
    };
    CHECK(max_fd_gap(b2, {p1, p2, p3}) < kTol);

    Tensor rx = randn(rng, {2, 6});
    Tensor rw = randn(rng, {3, 4}, false);
    BuildFn b3 = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::sum(
          &t, ops::mul_elementwise(&t, ops::reshape(&t, p[0], {3, 4}), rw));
    };
    CHECK(max_fd_gap(b3, {rx}) < kTol);

    Tensor nx(Shape{3, 4}, true);
    for (double& v : nx.data()) v = rng.normal() + (v >= 0 ? 0.5 : -0.5);
    Tensor nw = randn(rng, {3, 4}, false);
    BuildFn b4 = [&](Tape& t, const std::vector<Tensor>& p) {
      return ops::sum(
          &t, ops::mul_elementwise(&t, ops::l2_normalize_rows(&t, p[0]), nw));
    };
    CHECK(max_fd_gap(b4, {nx}) < kTol);
  }
}

TEST_CASE("gradcheck: batched matmul both operands") {
  for (int seed = 700; seed < 700 + kSeeds; ++seed) {
    Rng rng(seed);
    Tensor a = randn(rng, {2, 3, 4});
    Tensor b2d = randn(rng, {4, 5});
    Tensor b3d = randn(rng, {2, 4, 5});
    BuildFn build = [](Tape& t, const std::vector<Tensor>& p) {
      Tensor u = ops::matmul(&t, p[0], p[1]);
      Tensor v = ops::matmul(&t, p[0], p[2]);
      return ops::add(&t, ops::squared_l2(&t, u), ops::mean(&t, v));
    };
    CHECK(max_fd_gap(build, {a, b2d, b3d}) < kTol);
  }
}

TEST_CASE("tape replay reproduces every output bit-identically") {
  Rng rng(11);
  Tensor x = randn(rng, {4, 6});
  Tensor w1 = randn(rng, {6, 8});
  Tensor b1 = randn(rng, {8});
  Tensor w2 = randn(rng, {8, 5});
  std::vector<int64_t> targets{1, 0, 4, 2};

  Tape tape;
  Tensor h = ops::gelu(&tape, ops::add(&tape, ops::matmul(&tape, x, w1), b1));
  Tensor sm = ops::softmax_lastdim(&tape, ops::matmul(&tape, h, w2));
  Tensor loss = ops::cross_entropy_with_logits(
      &tape, ops::matmul(&tape, h, w2), targets);
  (void)sm;
  (void)loss;

  std::vector<std::vector<double>> snap;
  for (size_t i = 0; i < tape.size(); ++i) snap.push_back(tape.node(i).output.data());
  tape.replay();
  for (size_t i = 0; i < tape.size(); ++i) {
    const auto& now = tape.node(i).output.data();
    REQUIRE(now.size() == snap[i].size());
    CHECK(std::memcmp(now.data(), snap[i].data(), now.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("gradient accumulation across fan-out and zero_grads") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tape tape;
  Tensor y = ops::add(&tape, x, x);  // d/dx = 2
  Tensor loss = ops::sum(&tape, y);
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{2, 2});
  tape.zero_grads();
  CHECK(x.grad() == std::vector<double>{0, 0});
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{2, 2});
}

TEST_CASE("error contracts name the primitive and the shapes") {
  Tensor a({2, 3});
  Tensor b({4, 5});
  expect_error([&] { ops::matmul(nullptr, a, b); }, "matmul");
  expect_error([&] { ops::matmul(nullptr, a, b); }, "[2, 3]");
  expect_error([&] { ops::matmul(nullptr, a, b); }, "[4, 5]");
  expect_error([&] { ops::add(nullptr, a, b); }, "add");
  expect_error([&] { ops::sub(nullptr, a, Tensor({3, 2})); }, "sub");
  Tensor table({5, 3});
  expect_error([&] { ops::embedding_lookup(nullptr, table, {0, 5}, {2}); },
               "out of range");
  expect_error([&] { ops::take_rows(nullptr, table, {-1}); }, "out of range");
  expect_error(
      [&] { ops::cross_entropy_with_logits(nullptr, Tensor({2, 4}), {0, 4}); },
      "out of range");
  expect_error([&] { ops::slice_lastdim(nullptr, a, 2, 5); }, "slice_lastdim");
  expect_error([&] { ops::reshape(nullptr, a, {7}); }, "numel");
  expect_error([&] { ops::softmax_causal(nullptr, a); }, "square");
  Tensor z = Tensor::zeros({2, 3}, true);
  expect_error([&] { ops::l2_normalize_rows(nullptr, z); }, "zero-norm row 0");

  Tape tape;
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor vec = ops::scale(&tape, x, 2.0);
  expect_error([&] { tape.backward(vec); }, "scalar");
  Tensor stranger = Tensor::scalar(1.0, true);
  expect_error([&] { tape.backward(stranger); }, "not produced on this tape");
}

TEST_CASE("forward_primitive dispatch matches direct calls") {
  Rng rng(21);
  Tensor a = randn(rng, {3, 4}, false);
  Tensor b = randn(rng, {4, 2}, false);
  CHECK(ops::forward_primitive(nullptr, "matmul", {a, b}).data() ==
        ops::matmul(nullptr, a, b).data());
  CHECK(ops::forward_primitive(nullptr, "gelu", {a}).data() ==
        ops::gelu(nullptr, a).data());
  CHECK(ops::forward_primitive(nullptr, "softmax_lastdim", {a}).data() ==
        ops::softmax_lastdim(nullptr, a).data());
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  CHECK(ops::forward_primitive(nullptr, "layer_norm", {a, gamma, beta}).data() ==
        ops::layer_norm(nullptr, a, gamma, beta).data());
  Tensor ids = Tensor::from_data({2}, {0, 2});
  CHECK(ops::forward_primitive(nullptr, "embedding_lookup", {a, ids}).data() ==
        ops::embedding_lookup(nullptr, a, {0, 2}, {2}).data());
  Tensor targets = Tensor::from_data({3}, {1, 0, 3});
  CHECK(ops::forward_primitive(nullptr, "cross_entropy_with_logits", {a, targets})
            .value() ==
        ops::cross_entropy_with_logits(nullptr, a, {1, 0, 3}).value());
  CHECK(ops::forward_primitive(nullptr, "scale", {a, Tensor::scalar(0.5)}).data() ==
        ops::scale(nullptr, a, 0.5).data());
  CHECK(ops::forward_primitive(nullptr, "concat_lastdim", {a, a}).dim(-1) == 8);

  expect_error([&] { ops::forward_primitive(nullptr, "qr_decompose", {a}); },
               "unknown op");
  expect_error([&] { ops::forward_primitive(nullptr, "matmul", {a}); },
               "expects 2 inputs");
  Tensor bad_ids = Tensor::from_data({1}, {0.5});
  expect_error(
      [&] { ops::forward_primitive(nullptr, "embedding_lookup", {a, bad_ids}); },
      "non-integral");
}

TEST_CASE("cross entropy equals hand-rolled log softmax") {
  Tensor logits = Tensor::from_data({1, 4}, {2, 1, 0, -1});
  const double z = std::exp(2.0) + std::exp(1.0) + std::exp(0.0) + std::exp(-1.0);
  const double expect = -(1.0 - std::log(z));
  CHECK(ops::cross_entropy_with_logits(nullptr, logits, {1}).value() ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("gelu endpoint behavior") {
  Tensor x = Tensor::from_data({3}, {0.0, 8.0, -8.0});
  Tensor y = ops::gelu(nullptr, x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == doctest::Approx(8.0).epsilon(1e-9));
  CHECK(std::abs(y.data()[2]) < 1e-9);
}
