#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "dgp/kernel.hpp"
#include "dgp/random.hpp"

namespace dgp {

// Reparameterized SE hyperparameters, tau = tau0 * sigma.
struct Theta {
  double tau0 = 1.0;
  double h = 1.0;
};

void validate(const Theta& theta);

struct Dataset {
  std::vector<double> x;
  std::vector<double> y;
};

// Constant-mean GP conditioned on zero derivatives at the points in t.
// Empty t gives back the unconstrained GP.
struct DgpPrior {
  double mean = 0.0;
  KernelParams params;
  std::vector<double> t;
};

struct GridMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Mean and covariance of the constrained process on evaluation points x:
// mean is the constant prior mean (the derivative of a constant mean is zero),
// cov(x, x') = k(x, x') - k01(x, t) k11^-1 k10(t, x').
GridMoments constrained_moments(const DgpPrior& prior, std::span<const double> x);

// Draws `count` sample paths of the constrained process on a strictly
// increasing grid. Sampling goes through an eigendecomposition with negative
// eigenvalues clamped to zero, so the derivative constraints hold to numerical
// precision even on dense grids where the covariance is rank-deficient.
std::vector<Eigen::VectorXd> sample_dgp_paths(const DgpPrior& prior,
                                              std::span<const double> grid,
                                              int count, Rng& rng);

// A(t) = tau0^2 Kc~(t) + I_n where Kc~ is the unit-variance constrained
// covariance of x given the constraints at t. Cov(y | t, sigma^2, theta) =
// sigma^2 A(t).
Eigen::MatrixXd marginal_cov_A(std::span<const double> t, const Theta& theta,
                               std::span<const double> x);

// Log density of N(0, sigma^2 A(t)) at the centered observations y.
double log_marginal_likelihood(const Eigen::VectorXd& y, std::span<const double> t,
                               double sigma_sq, const Theta& theta,
                               std::span<const double> x);

struct PredictiveDistribution {
  std::vector<double> grid;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Posterior of f(grid) given the centered observations y (noise sigma^2 on the
// observation block) jointly with the derivative constraints f'(t) = 0.
// The kernel variance is tau^2 = tau0^2 sigma^2.
PredictiveDistribution posterior_predictive(const Eigen::VectorXd& y,
                                            std::span<const double> x,
                                            std::span<const double> t,
                                            double sigma_sq, const Theta& theta,
                                            std::span<const double> grid);

// Conditional-simulation helper for one fitted model: theta is fixed while
// many posterior draws (t, sigma^2) stream through. Both predictive moments
// factor through sigma^2 — the mean is sigma^2-free and the covariance is
// sigma^2 times a matrix that depends only on t — so all n^3 work involving
// the data block is done once up front and the grid factorization is reused
// across consecutive draws sharing t. Not thread-safe.
class PredictiveSampler {
 public:
  PredictiveSampler(std::vector<double> x, Eigen::VectorXd y_centered, Theta theta,
                    std::vector<double> grid);

  struct Conditional {
    Eigen::VectorXd mean;  // posterior mean of f(grid), independent of sigma^2
    Eigen::MatrixXd chol;  // posterior cov = sigma^2 * chol * chol^T
  };
  // Reference stays valid until the next call.
  const Conditional& at(std::span<const double> t);

  const std::vector<double>& grid() const { return grid_; }

 private:
  std::vector<double> x_, grid_;
  Theta theta_;
  Eigen::MatrixXd a0_lower_;  // chol(tau0^2 Kxx + I), unit-variance kernel
  Eigen::MatrixXd p_;         // A0^-1 Kxg
  Eigen::VectorXd alpha0_;    // A0^-1 y
  Eigen::VectorXd v0_;        // Kgx alpha0
  Eigen::MatrixXd q0_;        // Kgx P
  Eigen::MatrixXd kgg_, kgx_;
  std::vector<double> cached_t_;
  bool cache_valid_ = false;
  Conditional cond_;
};

// Marginal likelihood evaluator with the theta-dependent Gram matrix cached,
// for samplers that evaluate many constraint vectors under one theta.
// Not thread-safe; use one instance per chain.
class MarginalEvaluator {
 public:
  MarginalEvaluator(std::vector<double> x, Eigen::VectorXd y_centered);

  void set_theta(const Theta& theta);
  const Theta& theta() const { return theta_; }

  struct TFactor {
    double logdet_a = 0.0;    // log det A(t)
    double quad_form = 0.0;   // y^T A(t)^-1 y
  };

  TFactor factor(std::span<const double> t);
  double loglik(const TFactor& f, double sigma_sq) const;
  double loglik(std::span<const double> t, double sigma_sq);

  Eigen::Index n() const { return y_.size(); }
  const std::vector<double>& x() const { return x_; }
  const Eigen::VectorXd& y() const { return y_; }

 private:
  std::vector<double> x_;
  Eigen::VectorXd y_;
  Theta theta_;
  Eigen::MatrixXd dist_sq_;  // pairwise squared distances, fixed
  Eigen::MatrixXd ktilde_;   // unit-variance SE Gram for current h
  Eigen::MatrixXd a_;        // workspace
  Eigen::VectorXd solve_;    // workspace
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

}  // namespace dgp
