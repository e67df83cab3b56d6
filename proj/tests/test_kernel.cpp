#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dgp/kernel.hpp"
#include "dgp/random.hpp"
#include "oracles.hpp"

using dgp::KernelParams;

TEST_CASE("se_cov closed-form values") {
  KernelParams unit;
  CHECK(dgp::se_cov(0.7, 0.7, unit) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(dgp::se_cov(-3.2, -3.2, KernelParams{2.5, 0.4}) ==
        doctest::Approx(2.5).epsilon(1e-12));
  CHECK(dgp::se_cov(0.0, 1.0, unit) == doctest::Approx(0.606531).epsilon(1e-6));
  CHECK(dgp::se_cov(0.0, 2.0, KernelParams{4.0, 2.0}) ==
        doctest::Approx(2.426123).epsilon(1e-6));
}

TEST_CASE("se_cov01 closed-form values and antisymmetry") {
  KernelParams unit;
  CHECK(dgp::se_cov01(1.3, 1.3, unit) == 0.0);
  CHECK(dgp::se_cov01(0.0, 1.0, unit) == doctest::Approx(-0.606531).epsilon(1e-6));
  CHECK(dgp::se_cov01(1.0, 0.0, unit) == doctest::Approx(0.606531).epsilon(1e-6));

  dgp::Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform(-3.0, 3.0);
    const double b = rng.uniform(-3.0, 3.0);
    KernelParams p{rng.uniform(0.1, 5.0), rng.uniform(0.1, 3.0)};
    CHECK(dgp::se_cov01(a, b, p) == doctest::Approx(-dgp::se_cov01(b, a, p)));
  }
}

TEST_CASE("se_cov11 closed-form values") {
  KernelParams unit;
  CHECK(dgp::se_cov11(0.4, 0.4, unit) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(dgp::se_cov11(0.0, 1.0, unit) == doctest::Approx(0.0));
  CHECK(dgp::se_cov11(0.0, 2.0, unit) == doctest::Approx(-0.406006).epsilon(1e-6));
  // tau^2 / h^2 on the diagonal
  CHECK(dgp::se_cov11(0.0, 0.0, KernelParams{3.0, 0.5}) ==
        doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("kernel symmetry") {
  dgp::Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.uniform(-5.0, 5.0);
    const double b = rng.uniform(-5.0, 5.0);
    KernelParams p{rng.uniform(0.05, 4.0), rng.uniform(0.05, 3.0)};
    CHECK(dgp::se_cov(a, b, p) == doctest::Approx(dgp::se_cov(b, a, p)));
    CHECK(dgp::se_cov11(a, b, p) == doctest::Approx(dgp::se_cov11(b, a, p)));
  }
}

TEST_CASE("se_cov01 equals the central difference of se_cov in its second argument") {
  dgp::Rng rng(13);
  const double step = 1e-5;
  for (int i = 0; i < 500; ++i) {
    KernelParams p{rng.uniform(0.1, 5.0), rng.uniform(0.05, 3.0)};
    const double x = rng.uniform(-3.0, 3.0);
    const double t = x + rng.uniform(-5.0, 5.0) * p.h;
    const double fd = oracles::central_diff(
        [&](double u) { return dgp::se_cov(x, u, p); }, t, step);
    CHECK(std::abs(dgp::se_cov01(x, t, p) - fd) <= 1e-6 * p.tau_sq / p.h);
  }
}

TEST_CASE("se_cov11 equals the mixed second difference of se_cov") {
  dgp::Rng rng(17);
  for (int i = 0; i < 500; ++i) {
    KernelParams p{rng.uniform(0.1, 5.0), rng.uniform(0.05, 3.0)};
    const double ti = rng.uniform(-3.0, 3.0);
    const double tj = ti + rng.uniform(-5.0, 5.0) * p.h;
    const double fd = oracles::mixed_diff(
        [&](double u, double v) { return dgp::se_cov(u, v, p); }, ti, tj,
        1e-4 * p.h);
    CHECK(std::abs(dgp::se_cov11(ti, tj, p) - fd) <=
          1e-4 * p.tau_sq / (p.h * p.h));
  }
}

TEST_CASE("parameter and input validation") {
  KernelParams unit;
  CHECK_THROWS_AS(dgp::se_cov(0.0, 1.0, KernelParams{-1.0, 1.0}), dgp::ValidationError);
  CHECK_THROWS_AS(dgp::se_cov(0.0, 1.0, KernelParams{1.0, 0.0}), dgp::ValidationError);
  CHECK_THROWS_AS(dgp::se_cov(std::nan(""), 1.0, unit), dgp::ValidationError);
  CHECK_THROWS_AS(dgp::se_cov01(0.0, std::numeric_limits<double>::infinity(), unit),
                  dgp::ValidationError);
  CHECK_THROWS_AS(dgp::se_cov11(std::nan(""), 0.0, unit), dgp::ValidationError);
}

TEST_CASE("build_cov_blocks shapes and entries") {
  const std::vector<double> x = {0.0, 0.5, 1.0};
  const std::vector<double> t = {0.25};
  const auto b = dgp::build_cov_blocks(x, t, KernelParams{});
  CHECK(b.k.rows() == 3);
  CHECK(b.k.cols() == 3);
  CHECK(b.k01.rows() == 3);
  CHECK(b.k01.cols() == 1);
  CHECK(b.k10.rows() == 1);
  CHECK(b.k10.cols() == 3);
  CHECK(b.k11.rows() == 1);
  CHECK(b.k11.cols() == 1);
  CHECK(b.stacked().rows() == 4);
  for (int i = 0; i < 3; ++i) {
    CHECK(b.k(i, i) == doctest::Approx(1.0));
    CHECK(b.k01(i, 0) == doctest::Approx(dgp::se_cov01(x[i], t[0], KernelParams{})));
    CHECK(b.k10(0, i) == b.k01(i, 0));
  }
  CHECK(b.k11(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("build_cov_blocks with t = (0, 1) has zero K11 off-diagonal") {
  const std::vector<double> x = {0.5};
  const std::vector<double> t = {0.0, 1.0};
  const auto b = dgp::build_cov_blocks(x, t, KernelParams{});
  CHECK(b.k11(0, 1) == doctest::Approx(0.0));
  CHECK(b.k11(1, 0) == doctest::Approx(0.0));
  CHECK(oracles::min_eigenvalue(b.stacked()) >= -1e-10);
}

TEST_CASE("stacked block matrix is positive semidefinite") {
  dgp::Rng rng(23);
  for (int trial = 0; trial < 60; ++trial) {
    KernelParams p{rng.uniform(0.1, 4.0), rng.uniform(0.2, 2.0)};
    const int n = 2 + static_cast<int>(rng.uniform(0.0, 19.0));
    const int m = 1 + static_cast<int>(rng.uniform(0.0, 3.0));
    std::vector<double> x, t;
    for (int i = 0; i < n; ++i) x.push_back(rng.uniform(-2.0, 2.0));
    double next = rng.uniform(-2.0, 0.0);
    for (int j = 0; j < m; ++j) {
      t.push_back(next);
      next += rng.uniform(0.5, 1.5);  // keeps the points well separated
    }
    const auto b = dgp::build_cov_blocks(x, t, p);
    CHECK(oracles::min_eigenvalue(b.stacked()) >= -1e-8 * p.tau_sq);
  }
}

TEST_CASE("constraint points closer than the separation floor are rejected") {
  const std::vector<double> x = {0.0, 1.0};
  KernelParams p{1.0, 0.5};  // delta_t = 5e-4
  const std::vector<double> close = {0.3, 0.3 + 4e-4};
  CHECK_THROWS_AS(dgp::build_cov_blocks(x, close, p), dgp::DegenerateConstraintError);
  const std::vector<double> apart = {0.3, 0.3 + 6e-4};
  CHECK_NOTHROW(dgp::build_cov_blocks(x, apart, p));
  CHECK_THROWS_AS(dgp::build_cov_blocks(std::vector<double>{}, apart, p),
                  dgp::ValidationError);
}

TEST_CASE("jittered_cholesky on the identity uses no jitter") {
  const auto f = dgp::jittered_cholesky(Eigen::MatrixXd::Identity(3, 3));
  CHECK(f.jitter == 0.0);
  CHECK((f.lower - Eigen::MatrixXd::Identity(3, 3)).norm() == doctest::Approx(0.0));
}

TEST_CASE("jittered_cholesky repairs a singular PSD matrix") {
  Eigen::VectorXd v(4);
  v << 1.0, 2.0, -1.0, 0.5;
  const Eigen::MatrixXd rank1 = v * v.transpose();
  const auto f = dgp::jittered_cholesky(rank1);
  CHECK(f.jitter > 0.0);
  const double eta_abs = f.jitter * rank1.diagonal().mean();
  const Eigen::MatrixXd target =
      rank1 + eta_abs * Eigen::MatrixXd::Identity(4, 4);
  CHECK((f.lower * f.lower.transpose() - target).norm() <= 1e-8 * target.norm());
}

TEST_CASE("jittered_cholesky rejects an indefinite matrix") {
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(3, 3);
  m(2, 2) = -1.0;  // eigenvalue -1, far beyond what the ladder can absorb
  try {
    dgp::jittered_cholesky(m);
    FAIL("expected NotPositiveDefiniteError");
  } catch (const dgp::NotPositiveDefiniteError& e) {
    CHECK(e.final_jitter() == dgp::kJitterLadder.back());
  }
  CHECK_THROWS_AS(dgp::jittered_cholesky(Eigen::MatrixXd::Ones(2, 3)),
                  dgp::ValidationError);
}
