#pragma once

#include <Eigen/Dense>
#include <array>
#include <span>

#include "dgp/errors.hpp"

namespace dgp {

// Squared-exponential kernel hyperparameters. tau_sq is the vertical variance
// (signal units squared), h the length scale (input units).
struct KernelParams {
  double tau_sq = 1.0;
  double h = 1.0;
};

// Throws ValidationError unless both parameters are finite and positive.
void validate(const KernelParams& p);

// Minimum allowed separation between constraint points, below which the
// derivative Gram matrix k11(t, t) is treated as singular.
inline double constraint_separation(double h) { return 1e-3 * h; }

// Jitter ladder used by jittered_cholesky, relative to mean(diag).
inline constexpr std::array<double, 4> kJitterLadder = {0.0, 1e-10, 1e-8, 1e-6};

// k(xi, xj) = tau^2 exp(-(xi - xj)^2 / (2 h^2))
double se_cov(double xi, double xj, const KernelParams& p);

// k01(x, t) = d/dt k(x, t) = tau^2 exp(-(x - t)^2 / (2 h^2)) (x - t) / h^2
// Covariance between a function value at x and a derivative value at t;
// k10(t, x) is the same quantity.
double se_cov01(double x, double t, const KernelParams& p);

// k11(ti, tj) = d^2/dti dtj k(ti, tj)
//             = tau^2 exp(-(ti - tj)^2 / (2 h^2)) (1 - (ti - tj)^2 / h^2) / h^2
double se_cov11(double ti, double tj, const KernelParams& p);

// Joint covariance blocks of (f(x), f'(t)). The stacked matrix
// [[k, k01], [k10, k11]] is positive semidefinite; k10 = k01^T.
struct CovBlocks {
  Eigen::MatrixXd k;    // n x n
  Eigen::MatrixXd k01;  // n x m
  Eigen::MatrixXd k10;  // m x n
  Eigen::MatrixXd k11;  // m x m

  Eigen::MatrixXd stacked() const;
};

// Throws DegenerateConstraintError if any pair of constraint points is closer
// than constraint_separation(h).
CovBlocks build_cov_blocks(std::span<const double> x, std::span<const double> t,
                           const KernelParams& p);

struct CholeskyFactor {
  Eigen::MatrixXd lower;
  double jitter = 0.0;  // eta actually used, relative to mean(diag)
};

// Cholesky of m + eta * mean(diag(m)) * I, escalating eta through the jitter
// ladder. Throws NotPositiveDefiniteError if the last level still fails.
CholeskyFactor jittered_cholesky(const Eigen::MatrixXd& m);

}  // namespace dgp
