#include <cmath>
#include <random>

#include "doctest.h"
#include "evosam/numkit/adam.hpp"
#include "evosam/numkit/ops.hpp"
#include "evosam/numkit/params.hpp"
#include "evosam/numkit/rng.hpp"
#include "support.hpp"

using namespace evosam::nk;
using testsupport::random_tensor;

namespace {

// Straightforward triple loop used as the reference for the blocked kernels.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (int k = 0; k < a.cols(); ++k) s += static_cast<double>(a.at(i, k)) * b.at(k, j);
      c.at(i, j) = static_cast<real>(s);
    }
  return c;
}

}  // namespace

TEST_CASE("matmul: identity, hand example and zero") {
  const Tensor m = Tensor::matrix({{1.5f, -2}, {0.25f, 7}});
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(matmul(eye, m) == m);

  const Tensor r = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1}, {1}}));
  CHECK(r == Tensor::matrix({{3}, {7}}));

  const Tensor z = matmul(Tensor({2, 2}), m);
  for (auto v : z.data()) CHECK(v == 0);
}

TEST_CASE("matmul: shape mismatch throws") {
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  Tape tape;
  CHECK_THROWS_AS(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({4, 1}))), ShapeError);
}

TEST_CASE("gemm kernels agree with a naive product on odd shapes") {
  std::mt19937_64 rng(3);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {5, 7, 3}, {13, 9, 17}, {64, 48, 33}}) {
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    const Tensor ref = naive_matmul(a, b);
    CHECK(max_abs_diff(matmul(a, b), ref) < 1e-4);

    Tensor c({m, n});
    const Tensor at = transpose(a);
    gemm_tn(at.ptr(), b.ptr(), c.ptr(), m, k, n);
    CHECK(max_abs_diff(c, ref) < 1e-4);

    const Tensor bt = transpose(b);
    gemm_nt(a.ptr(), bt.ptr(), c.ptr(), m, k, n);
    CHECK(max_abs_diff(c, ref) < 1e-4);

    gemm_nn(a.ptr(), b.ptr(), c.ptr(), m, k, n, true);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(2 * ref[i]).epsilon(1e-4));
  }
}

TEST_CASE("softmax_rows examples") {
  CHECK(softmax_rows(Tensor::matrix({{3.7f}}))[0] == 1.0f);
  const Tensor h = softmax_rows(Tensor::matrix({{0, 0}}));
  CHECK(h[0] == doctest::Approx(0.5));
  CHECK(h[1] == doctest::Approx(0.5));
  const Tensor q = softmax_rows(Tensor::matrix({{static_cast<real>(std::log(1.0)), static_cast<real>(std::log(3.0))}}));
  CHECK(q[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax_rows: rows are distributions, stable for large logits") {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({6, 11}, rng, 30.0);
  a.at(2, 3) = 1e4f;
  const Tensor s = softmax_rows(a);
  CHECK(s.all_finite());
  for (int r = 0; r < s.rows(); ++r) {
    double sum = 0;
    for (int c = 0; c < s.cols(); ++c) {
      CHECK(s.at(r, c) >= 0);
      sum += s.at(r, c);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(s.at(2, 3) == doctest::Approx(1.0));
  CHECK_THROWS(softmax_rows(Tensor({2, 0})));
}

TEST_CASE("gelu and sigmoid match libm references") {
  Tape tape;
  std::vector<real> xs;
  for (double x = -9; x <= 9; x += 0.037) xs.push_back(static_cast<real>(x));
  const Tensor in({1, static_cast<int>(xs.size())}, xs);
  const Tensor g = gelu(tape.constant(in)).value();
  const Tensor s = sigmoid(tape.constant(in)).value();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double x = xs[i];
    // The float build uses polynomial exp/erf; absolute error stays near 1e-6.
    CHECK(std::abs(g[i] - 0.5 * x * (1 + std::erf(x / std::sqrt(2.0)))) < 2e-6 * (1 + std::abs(x)));
    CHECK(std::abs(s[i] - 1 / (1 + std::exp(-x))) < 2e-6);
  }
}

TEST_CASE("upsample2x and pixel_dot") {
  Tape tape;
  // 2x2 grid, one channel: values 1..4.
  const Tensor grid({4, 1}, {1, 2, 3, 4});
  const Tensor up = upsample2x(tape.constant(grid), 2, 2).value();
  REQUIRE(up.shape() == Shape{16, 1});
  const real expect[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) CHECK(up[static_cast<std::size_t>(i)] == expect[i]);

  const Tensor f = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
  const Tensor d = pixel_dot(tape.constant(f), tape.constant(Tensor({2}, {10, 1}))).value();
  CHECK(d == Tensor({3, 1}, {12, 34, 56}));
}

TEST_CASE("float32 finite differences for primitive ops") {
  // Coarse check on the float32 build (the tight one runs on the float64 shadow).
  std::mt19937_64 rng(11);
  auto check = [&](std::vector<Tensor> in, auto f) {
    const auto r = testsupport::grad_check(std::move(in), f, 1e-3, 1e-1);
    CHECK(r.max_rel < 1e-2);
  };
  check({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
        [](Tape&, std::vector<Var>& v) { return sum(matmul(v[0], v[1])); });
  check({random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)},
        [](Tape&, std::vector<Var>& v) { return sum(mul(softmax_rows(v[0]), v[1])); });
  check({random_tensor({2, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng), random_tensor({2, 6}, rng)},
        [](Tape&, std::vector<Var>& v) { return sum(mul(layernorm(v[0], v[1], v[2]), v[3])); });
  check({random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)},
        [](Tape&, std::vector<Var>& v) { return sum(mul(gelu(v[0]), v[1])); });
}

TEST_CASE("forward results are deterministic") {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor({37, 29}, rng), b = random_tensor({29, 41}, rng);
  CHECK(matmul(a, b) == matmul(a, b));
  CHECK(softmax_rows(a) == softmax_rows(a));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  std::mt19937_64 rng(1);
  Tensor p = random_tensor({3, 3}, rng);
  const Tensor before = p;
  AdamState st(1e-3);
  Tensor* ps[] = {&p};
  const Tensor g({3, 3});
  for (int i = 0; i < 5; ++i) adam_step(ps, std::span<const Tensor>(&g, 1), st);
  CHECK(max_abs_diff(p, before) <= 1e-12);
  CHECK(st.step == 5);
}

TEST_CASE("adam: first step matches a reference implementation") {
  // Reference: m = (1-b1) g; v = (1-b2) g^2; mhat = m/(1-b1); vhat = v/(1-b2);
  // p -= lr mhat / (sqrt(vhat) + eps), i.e. about -lr sign(g).
  const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor p({4}, {1, -2, 0.5f, 3});
  const Tensor g({4}, {0.3f, -4, 1e-3f, 0});
  const Tensor p0 = p;
  AdamState st(lr);
  Tensor* ps[] = {&p};
  adam_step(ps, std::span<const Tensor>(&g, 1), st);
  for (std::size_t i = 0; i < 4; ++i) {
    const double m = (1 - b1) * g[i], v = (1 - b2) * g[i] * g[i];
    const double expect = p0[i] - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
    CHECK(p[i] == doctest::Approx(expect).epsilon(1e-6));
  }
  CHECK(p[0] == doctest::Approx(p0[0] - lr).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(p0[1] + lr).epsilon(1e-4));
}

TEST_CASE("adam: deterministic and rejects NaN gradients") {
  std::mt19937_64 rng(4);
  const Tensor init = random_tensor({5}, rng), g = random_tensor({5}, rng);
  Tensor a = init, b = init;
  AdamState sa, sb;
  Tensor* pa[] = {&a};
  Tensor* pb[] = {&b};
  for (int i = 0; i < 3; ++i) {
    adam_step(pa, std::span<const Tensor>(&g, 1), sa);
    adam_step(pb, std::span<const Tensor>(&g, 1), sb);
  }
  CHECK(a == b);
  Tensor bad = g;
  bad[2] = std::nanf("");
  CHECK_THROWS_AS(adam_step(pa, std::span<const Tensor>(&bad, 1), sa), NumericError);
}

TEST_CASE("checkpoint round trip keeps names, shapes and bytes") {
  testsupport::TempDir dir("ckpt");
  std::mt19937_64 rng(8);
  ParamStore ps;
  ps.add("enc.w", random_tensor({3, 4}, rng));
  ps.add("bias", random_tensor({7}, rng));
  save_checkpoint(ps, dir.path / "p.bin");
  CHECK(std::filesystem::file_size(dir.path / "p.bin") == (12 + 7) * 4);
  const ParamStore back = load_checkpoint(dir.path / "p.bin");
  CHECK(back == ps);
  CHECK(to_bytes(back) == to_bytes(ps));
  CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.bin"), CheckpointError);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<real>{1, 2, 3}), ShapeError);
  Tensor a({2}), b({3});
  CHECK_THROWS_AS(a += b, ShapeError);
  Rng r1(9), r2(9);
  for (int i = 0; i < 10; ++i) CHECK(r1.normal() == r2.normal());
}
