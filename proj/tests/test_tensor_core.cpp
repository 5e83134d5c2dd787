#include <doctest.h>

#include <cmath>

#include "scalar_oracle.hpp"
#include "test_util.hpp"
#include "ustf/errors.hpp"
#include "ustf/gradcheck.hpp"
#include "ustf/gradcheck_suite.hpp"
#include "ustf/ops.hpp"

using namespace ustf;
using testutil::random_tensor;
using testutil::vec;

TEST_CASE("tensor invariants") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_FALSE(t.has_grad());
  Tensor g = Tensor::zeros({2, 3}, true);
  ops::sum(g).backward();
  REQUIRE(g.has_grad());
  CHECK(g.grad().size() == g.numel());
}

TEST_CASE("non-finite results are rejected") {
  Tensor x({2}, {1e308, 1e308});
  CHECK_THROWS_AS(ops::add(x, x), NumericError);
  CHECK_THROWS_AS(ops::scale(x, 10.0), NumericError);
}

TEST_CASE("separable_conv2d: constant input with zero padding") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor dw = Tensor::full({1, 3, 3}, 1.0);
  Tensor y = ops::separable_conv2d(x, dw, Tensor({1, 1}, {1.0}), Tensor({1}, {0.0}));
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y[4] == 9.0);
  CHECK(y[0] == 4.0);
  CHECK(y[8] == 4.0);
  CHECK(y[1] == 6.0);
}

TEST_CASE("separable_conv2d: Dirac depthwise and identity pointwise is the identity") {
  Rng rng(1);
  for (std::size_t k : {1u, 3u, 5u}) {
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    std::vector<double> dirac(3 * k * k, 0.0), eye(9, 0.0);
    for (std::size_t c = 0; c < 3; ++c) dirac[c * k * k + (k / 2) * k + k / 2] = 1.0;
    for (std::size_t c = 0; c < 3; ++c) eye[c * 3 + c] = 1.0;
    Tensor y = ops::separable_conv2d(x, Tensor({3, k, k}, dirac), Tensor({3, 3}, eye), Tensor::zeros({3}));
    CHECK(vec(y) == vec(x));
  }
}

TEST_CASE("separable_conv2d matches the direct loop oracle") {
  Rng rng(2);
  Tensor x = random_tensor({2, 3, 4, 5}, rng);
  Tensor dw = random_tensor({3, 3, 3}, rng), pw = random_tensor({4, 3}, rng), b = random_tensor({4}, rng);
  Tensor y = ops::separable_conv2d(x, dw, pw, b);
  CHECK(y.shape() == Shape{2, 4, 4, 5});
  CHECK(oracle::rel_err(y, oracle::separable_conv(vec(x), {2, 3, 4, 5}, vec(dw), 3, 3, vec(pw), vec(b), 4)) < 1e-6);
  Tensor dw13 = random_tensor({3, 1, 3}, rng);
  CHECK(oracle::rel_err(ops::separable_conv2d(x, dw13, pw, b),
                        oracle::separable_conv(vec(x), {2, 3, 4, 5}, vec(dw13), 1, 3, vec(pw), vec(b), 4)) < 1e-6);
}

TEST_CASE("separable_conv2d errors") {
  Rng rng(3);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  CHECK_THROWS_AS(ops::depthwise_conv2d(x, Tensor::zeros({2, 2, 3})), ShapeError);
  CHECK_THROWS_AS(ops::depthwise_conv2d(x, Tensor::zeros({3, 3, 3})), ShapeError);
  CHECK_THROWS_AS(ops::pointwise_conv(x, Tensor::zeros({2, 3}), Tensor()), ShapeError);
  CHECK_THROWS_AS(ops::pointwise_conv(x, Tensor::zeros({2, 2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("avg_pool_axes") {
  Tensor x({2, 2}, {1, 3, 5, 7});
  CHECK(vec(ops::avg_pool_axes(x, {0})) == std::vector<double>{3, 5});
  CHECK(vec(ops::avg_pool_axes(Tensor::full({2, 3, 4, 5}, 1.0), {1, 2})) == std::vector<double>(10, 1.0));
  CHECK_THROWS_AS(ops::avg_pool_axes(x, {}), ShapeError);
  CHECK_THROWS_AS(ops::avg_pool_axes(x, {2}), ShapeError);

  Rng rng(4);
  Tensor r = random_tensor({2, 4, 6, 5}, rng);
  Tensor p = ops::avg_pool_axes(r, {1, 2});
  CHECK(p.shape() == Shape{2, 5});
  CHECK(oracle::rel_err(p, oracle::pool_global(vec(r), {2, 4, 6, 5}, 0, 4)) < 1e-7);
  // Linearity: mean times the pooled size equals the sum.
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t v = 0; v < 5; ++v) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t t = 0; t < 6; ++t) s += r[((n * 4 + c) * 6 + t) * 5 + v];
      CHECK(p[n * 5 + v] * 24.0 == doctest::Approx(s).epsilon(1e-12));
    }
}

TEST_CASE("adaptive_avg_pool bins") {
  CHECK(ops::adaptive_bin(0, 6, 4).start == 0);
  CHECK(ops::adaptive_bin(0, 6, 4).end == 1);
  CHECK(ops::adaptive_bin(1, 6, 4).start == 1);
  CHECK(ops::adaptive_bin(1, 6, 4).end == 3);
  CHECK(ops::adaptive_bin(2, 6, 4).start == 3);
  CHECK(ops::adaptive_bin(2, 6, 4).end == 4);
  CHECK(ops::adaptive_bin(3, 6, 4).start == 4);
  CHECK(ops::adaptive_bin(3, 6, 4).end == 6);
  for (std::size_t L = 1; L <= 70; ++L)
    for (std::size_t i = 0; i < 4; ++i) {
      const auto b = ops::adaptive_bin(i, L, 4);
      const auto o = oracle::bin(i, L, 4);
      CHECK(b.start == o.first);
      CHECK(b.end == o.second);
      CHECK(b.end > b.start);
      CHECK(b.end <= L);
    }

  // Length 4: identity partition.
  Rng rng(5);
  Tensor x = random_tensor({1, 4, 4, 3}, rng);
  CHECK(vec(ops::adaptive_avg_pool(x, 1, 2, 4, 4)) == vec(x));

  // Length 8, values 1..8.
  std::vector<double> ramp(8);
  for (int i = 0; i < 8; ++i) ramp[i] = i + 1;
  Tensor r({1, 1, 8, 1}, ramp);
  Tensor p = ops::adaptive_avg_pool(r, 1, 2, 1, 4);
  CHECK(vec(p) == std::vector<double>{1.5, 3.5, 5.5, 7.5});
  CHECK_THROWS(ops::adaptive_avg_pool(x, 2, 1, 4, 4));
}

TEST_CASE("softmax_lastdim") {
  Tensor u = ops::softmax_lastdim(Tensor({3}, {0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  Tensor s = ops::softmax_lastdim(Tensor({2}, {1000, 0}));
  CHECK(std::abs(s[0] - 1.0) < 1e-12);
  CHECK(std::abs(s[1]) < 1e-12);

  Rng rng(6);
  Tensor x = random_tensor({3, 5}, rng, -5, 5);
  Tensor y = ops::softmax_lastdim(x);
  for (std::size_t r = 0; r < 3; ++r) {
    long double z = 0.0L, total = 0.0L;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(x[r * 5 + c]));
    for (std::size_t c = 0; c < 5; ++c) {
      const long double ref = std::exp(static_cast<long double>(x[r * 5 + c])) / z;
      CHECK(std::abs(static_cast<long double>(y[r * 5 + c]) - ref) / ref < 1e-6L);
      CHECK(y[r * 5 + c] >= 0.0);
      CHECK(y[r * 5 + c] <= 1.0);
      total += y[r * 5 + c];
    }
    CHECK(std::abs(static_cast<double>(total) - 1.0) < 1e-6);
  }
}

TEST_CASE("pointwise_unary") {
  Tensor r = ops::relu(Tensor({2}, {-2, 3}));
  CHECK(vec(r) == std::vector<double>{0, 3});
  CHECK(ops::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  Tensor s = ops::sigmoid(Tensor({2}, {20, -20}));
  CHECK(s[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(s[1] == doctest::Approx(0.0).epsilon(1e-8));
  CHECK(s[1] > 0.0);
  Tensor big = ops::sigmoid(Tensor({2}, {800, -800}));
  CHECK(std::isfinite(big[0]));
  CHECK(std::isfinite(big[1]));
}

TEST_CASE("batchnorm2d") {
  Rng rng(7);
  Tensor x = random_tensor({3, 2, 4, 5}, rng, -3, 5);
  auto st = ops::BatchNormState::identity(2);
  Tensor y = ops::batchnorm2d(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), st, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 20; ++k) m += y[(n * 2 + c) * 20 + k];
    m /= 60;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 20; ++k) v += std::pow(y[(n * 2 + c) * 20 + k] - m, 2);
    v /= 60;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }

  SUBCASE("affine") {
    auto s2 = ops::BatchNormState::identity(2);
    Tensor z = ops::batchnorm2d(x, Tensor::full({2}, 2.0), Tensor::full({2}, 3.0), s2, Mode::Train);
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 20; ++k) m += z[n * 40 + k];
    m /= 60;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 20; ++k) v += std::pow(z[n * 40 + k] - m, 2);
    CHECK(m == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(std::sqrt(v / 60) == doctest::Approx(2.0).epsilon(1e-4));
  }

  SUBCASE("running statistics") {
    auto s3 = ops::BatchNormState::identity(2);
    ops::batchnorm2d(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), s3, Mode::Train);
    const auto ch = oracle::values(x);
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 20; ++k) m += ch[n * 40 + k];
    m /= 60;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 20; ++k) v += std::pow(ch[n * 40 + k] - m, 2);
    v /= 59;
    CHECK(s3.running_mean[0] == doctest::Approx(0.1 * m).epsilon(1e-12));
    CHECK(s3.running_var[0] == doctest::Approx(0.9 + 0.1 * v).epsilon(1e-12));
  }

  SUBCASE("eval mode closed form") {
    ops::BatchNormState es{Tensor({2}, {0.3, -1.2}), Tensor({2}, {2.5, 0.4})};
    Tensor g({2}, {1.5, -0.7}), b({2}, {0.2, 0.9});
    Tensor e = ops::batchnorm2d(x, g, b, es, Mode::Eval);
    CHECK(oracle::rel_err(e, oracle::batchnorm(vec(x), {3, 2, 4, 5}, vec(g), vec(b), {0.3, -1.2}, {2.5, 0.4}, false)) <
          1e-12);
    CHECK(es.running_mean[0] == 0.3);
  }

  SUBCASE("a single element per channel cannot be normalised in train mode") {
    auto s4 = ops::BatchNormState::identity(2);
    CHECK_THROWS_AS(ops::batchnorm2d(Tensor::zeros({1, 2, 1, 1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), s4,
                                     Mode::Train),
                    ShapeError);
  }
}

TEST_CASE("linear") {
  Rng rng(8);
  Tensor x = random_tensor({3, 4}, rng);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  CHECK(vec(ops::linear(x, Tensor({4, 4}, eye), Tensor::zeros({4}))) == vec(x));
  CHECK(ops::linear(Tensor({2}, {2, 3}), Tensor({1, 2}, {1, 1}), Tensor({1}, {1})).item() == 6.0);
  Tensor w = random_tensor({4, 7}, rng), b = random_tensor({4}, rng), z = random_tensor({5, 7}, rng);
  Tensor y = ops::linear(z, w, b);
  std::vector<double> ref(20);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 7; ++i) acc += w[o * 7 + i] * z[r * 7 + i];
      ref[r * 4 + o] = acc;
    }
  CHECK(oracle::rel_err(y, ref) < 1e-6);
  CHECK_THROWS_AS(ops::linear(z, Tensor::zeros({4, 6}), b), ShapeError);
}

TEST_CASE("batched_outer") {
  CHECK(vec(ops::batched_outer(Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {1, 0}))) == std::vector<double>{1, 0, 0, 0});
  CHECK(vec(ops::batched_outer(Tensor::full({1, 3}, 1.0), Tensor::full({1, 3}, 1.0))) == std::vector<double>(9, 1.0));
  Rng rng(9);
  Tensor q = random_tensor({2, 5}, rng), k = random_tensor({2, 5}, rng);
  Tensor o = ops::batched_outer(q, k);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK(o[(n * 5 + i) * 5 + j] == q[n * 5 + i] * k[n * 5 + j]);
  CHECK_THROWS_AS(ops::batched_outer(q, Tensor::zeros({2, 4})), ShapeError);
}

TEST_CASE("dropout") {
  Rng rng(10);
  Tensor x = random_tensor({4, 8}, rng);
  Rng a(3), b(3);
  CHECK(vec(ops::dropout(x, 0.5, Mode::Eval, a)) == vec(x));
  Tensor y = ops::dropout(x, 0.5, Mode::Train, a);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const bool keep = b.uniform() >= 0.5;
    CHECK(y[i] == (keep ? x[i] * 2.0 : 0.0));
  }
}

TEST_CASE("backward") {
  Tensor x({3}, {1, -2, 3}, true);
  ops::sum(x).backward();
  CHECK(vec(Tensor({3}, {x.grad().begin(), x.grad().end()})) == std::vector<double>{1, 1, 1});

  Tensor n({3}, {-1, -2, -3}, true);
  ops::sum(ops::relu(n)).backward();
  for (double g : n.grad()) CHECK(g == 0.0);

  Tensor v({2}, {1, 2}, true);
  CHECK_THROWS_AS(ops::scale(v, 2.0).backward(), ShapeError);

  Tensor w({2}, {1, 2}, true);
  Tensor loss = ops::sum(ops::mul(w, w));
  loss.backward();
  CHECK_THROWS(loss.backward());

  SUBCASE("no graph under NoGradGuard") {
    NoGradGuard guard;
    Tensor y = ops::sum(ops::mul(w, w));
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("finite_diff_check") {
  Tensor x({2}, {1, 2});
  auto sq = [](const Tensor& t) { return ops::sum(ops::mul(t, t)); };
  const auto r = finite_diff_check(sq, x, 1e-8);
  CHECK(r.passed);
  CHECK(r.max_relative_error < 1e-8);
  CHECK(x[0] == 1.0);
  CHECK(x[1] == 2.0);

  // Evaluation points at least 0.1 from the kink; passes at 1e-4.
  Rng rng(11);
  std::vector<double> d(12);
  for (double& v : d) v = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 1.0);
  const auto k = finite_diff_check([](const Tensor& t) { return ops::sum(ops::relu(t)); }, Tensor({12}, d), 1e-4);
  CHECK(k.passed);

  GradCheckOptions corrupt;
  corrupt.corrupt_factor = 1.01;
  const auto bad = finite_diff_check(sq, x, 1e-4, corrupt);
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_relative_error > 1e-3);
}

TEST_CASE("every op passes the finite-difference suite at 1e-4") {
  for (const auto& r : check_ops({})) {
    INFO(r.name << " " << r.max_relative_error);
    CHECK(r.passed);
  }
}

TEST_CASE("instrumented FLOP counter sees every kernel") {
  FlopCounter outer;
  {
    FlopCounter inner;
    ops::add(Tensor::zeros({5}), Tensor::zeros({5}));
    CHECK(inner.total() == 5);
  }
  ops::linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 3}), Tensor::zeros({4}));
  CHECK(outer.total() == 5 + 2 * 2 * 3 * 4);
}
