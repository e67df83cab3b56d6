#include "dgp/dgp.hpp"

#include <algorithm>
#include <cmath>

namespace dgp {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Unit-variance constrained covariance on x given constraints at t.
// t may be empty.
Eigen::MatrixXd unit_constrained_cov(std::span<const double> x,
                                     std::span<const double> t, double h) {
  const KernelParams unit{1.0, h};
  if (t.empty()) {
    const Eigen::Index n = static_cast<Eigen::Index>(x.size());
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      k(i, i) = 1.0;
      for (Eigen::Index j = 0; j < i; ++j) {
        k(i, j) = se_cov(x[i], x[j], unit);
        k(j, i) = k(i, j);
      }
    }
    return k;
  }
  CovBlocks b = build_cov_blocks(x, t, unit);
  CholeskyFactor f11 = jittered_cholesky(b.k11);
  Eigen::MatrixXd w = f11.lower.triangularView<Eigen::Lower>().solve(b.k10);
  Eigen::MatrixXd cov = b.k - w.transpose() * w;
  return 0.5 * (cov + cov.transpose());
}

}  // namespace

void validate(const Theta& theta) {
  if (!std::isfinite(theta.tau0) || theta.tau0 <= 0.0)
    throw ValidationError("theta tau0 must be finite and positive");
  if (!std::isfinite(theta.h) || theta.h <= 0.0)
    throw ValidationError("theta h must be finite and positive");
}

GridMoments constrained_moments(const DgpPrior& prior, std::span<const double> x) {
  validate(prior.params);
  if (x.empty()) throw ValidationError("constrained_moments: empty evaluation vector");
  if (!std::isfinite(prior.mean)) throw ValidationError("constrained_moments: non-finite mean");

  GridMoments out;
  out.mean = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(x.size()), prior.mean);
  out.cov = prior.params.tau_sq * unit_constrained_cov(x, prior.t, prior.params.h);
  return out;
}

std::vector<Eigen::VectorXd> sample_dgp_paths(const DgpPrior& prior,
                                              std::span<const double> grid,
                                              int count, Rng& rng) {
  if (count < 1) throw ValidationError("sample_dgp_paths: count must be >= 1");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1]))
      throw ValidationError("sample_dgp_paths: grid must be strictly increasing");

  GridMoments mom = constrained_moments(prior, grid);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mom.cov);
  if (es.info() != Eigen::Success)
    throw NotPositiveDefiniteError("eigendecomposition failed in path sampling", 0.0);

  Eigen::VectorXd scale = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Eigen::MatrixXd root = es.eigenvectors() * scale.asDiagonal();

  const Eigen::Index n = mom.mean.size();
  std::vector<Eigen::VectorXd> paths;
  paths.reserve(static_cast<std::size_t>(count));
  Eigen::VectorXd z(n);
  for (int c = 0; c < count; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) z(i) = rng.normal();
    paths.push_back(mom.mean + root * z);
  }
  return paths;
}

Eigen::MatrixXd marginal_cov_A(std::span<const double> t, const Theta& theta,
                               std::span<const double> x) {
  validate(theta);
  if (x.empty()) throw ValidationError("marginal_cov_A: empty input vector");
  Eigen::MatrixXd a = (theta.tau0 * theta.tau0) * unit_constrained_cov(x, t, theta.h);
  a.diagonal().array() += 1.0;
  return a;
}

double log_marginal_likelihood(const Eigen::VectorXd& y, std::span<const double> t,
                               double sigma_sq, const Theta& theta,
                               std::span<const double> x) {
  if (static_cast<std::size_t>(y.size()) != x.size())
    throw ValidationError("log_marginal_likelihood: y and x length mismatch");
  if (!std::isfinite(sigma_sq) || sigma_sq <= 0.0)
    throw ValidationError("log_marginal_likelihood: sigma_sq must be positive");

  CholeskyFactor f = jittered_cholesky(marginal_cov_A(t, theta, x));
  const double logdet = 2.0 * f.lower.diagonal().array().log().sum();
  Eigen::VectorXd alpha = f.lower.triangularView<Eigen::Lower>().solve(y);
  const double qf = alpha.squaredNorm();
  const double n = static_cast<double>(y.size());
  const double value = -0.5 * n * (kLog2Pi + std::log(sigma_sq)) - 0.5 * logdet -
                       0.5 * qf / sigma_sq;
  if (!std::isfinite(value))
    throw DgpError("log_marginal_likelihood: non-finite value");
  return value;
}

PredictiveDistribution posterior_predictive(const Eigen::VectorXd& y,
                                            std::span<const double> x,
                                            std::span<const double> t,
                                            double sigma_sq, const Theta& theta,
                                            std::span<const double> grid) {
  validate(theta);
  if (static_cast<std::size_t>(y.size()) != x.size())
    throw ValidationError("posterior_predictive: y and x length mismatch");
  if (!std::isfinite(sigma_sq) || sigma_sq <= 0.0)
    throw ValidationError("posterior_predictive: sigma_sq must be positive");
  if (grid.empty()) throw ValidationError("posterior_predictive: empty grid");
  for (double g : grid)
    if (!std::isfinite(g)) throw ValidationError("posterior_predictive: non-finite grid");

  const KernelParams p{theta.tau0 * theta.tau0 * sigma_sq, theta.h};
  const Eigen::Index n = static_cast<Eigen::Index>(x.size());
  const Eigen::Index m = static_cast<Eigen::Index>(t.size());
  const Eigen::Index q = static_cast<Eigen::Index>(grid.size());

  // G = [[k(x, x) + sigma^2 I, k01(x, t)], [k10(t, x), k11(t, t)]]
  Eigen::MatrixXd g(n + m, n + m);
  if (m > 0) {
    CovBlocks b = build_cov_blocks(x, t, p);
    g = b.stacked();
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      g(i, i) = p.tau_sq;
      for (Eigen::Index j = 0; j < i; ++j) {
        g(i, j) = se_cov(x[i], x[j], p);
        g(j, i) = g(i, j);
      }
    }
  }
  g.diagonal().head(n).array() += sigma_sq;

  // Cross covariance of f(grid) with (f(x), f'(t)).
  Eigen::MatrixXd cross(q, n + m);
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) cross(i, j) = se_cov(grid[i], x[j], p);
    for (Eigen::Index j = 0; j < m; ++j) cross(i, n + j) = se_cov01(grid[i], t[j], p);
  }

  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + m);
  rhs.head(n) = y;

  CholeskyFactor f = jittered_cholesky(g);
  auto lower = f.lower.triangularView<Eigen::Lower>();
  Eigen::VectorXd alpha = lower.solve(rhs);
  Eigen::MatrixXd w = lower.solve(cross.transpose());

  PredictiveDistribution pred;
  pred.grid.assign(grid.begin(), grid.end());
  pred.mean = w.transpose() * alpha;

  Eigen::MatrixXd kstar(q, q);
  for (Eigen::Index i = 0; i < q; ++i) {
    kstar(i, i) = p.tau_sq;
    for (Eigen::Index j = 0; j < i; ++j) {
      kstar(i, j) = se_cov(grid[i], grid[j], p);
      kstar(j, i) = kstar(i, j);
    }
  }
  pred.cov = kstar - w.transpose() * w;
  pred.cov = 0.5 * (pred.cov + pred.cov.transpose()).eval();
  return pred;
}

PredictiveSampler::PredictiveSampler(std::vector<double> x, Eigen::VectorXd y_centered,
                                     Theta theta, std::vector<double> grid)
    : x_(std::move(x)), grid_(std::move(grid)), theta_(theta) {
  validate(theta_);
  if (x_.empty() || grid_.empty())
    throw ValidationError("PredictiveSampler: empty inputs");
  if (x_.size() != static_cast<std::size_t>(y_centered.size()))
    throw ValidationError("PredictiveSampler: x and y length mismatch");
  for (double v : grid_)
    if (!std::isfinite(v)) throw ValidationError("PredictiveSampler: non-finite grid");

  const KernelParams unit{1.0, theta_.h};
  const Eigen::Index n = static_cast<Eigen::Index>(x_.size());
  const Eigen::Index q = static_cast<Eigen::Index>(grid_.size());
  const double tau0_sq = theta_.tau0 * theta_.tau0;

  Eigen::MatrixXd a0(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    a0(i, i) = tau0_sq + 1.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      a0(i, j) = tau0_sq * se_cov(x_[static_cast<std::size_t>(i)],
                                  x_[static_cast<std::size_t>(j)], unit);
      a0(j, i) = a0(i, j);
    }
  }
  a0_lower_ = jittered_cholesky(a0).lower;

  kgx_.resize(q, n);
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      kgx_(i, j) = se_cov(grid_[static_cast<std::size_t>(i)],
                          x_[static_cast<std::size_t>(j)], unit);
  kgg_.resize(q, q);
  for (Eigen::Index i = 0; i < q; ++i) {
    kgg_(i, i) = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      kgg_(i, j) = se_cov(grid_[static_cast<std::size_t>(i)],
                          grid_[static_cast<std::size_t>(j)], unit);
      kgg_(j, i) = kgg_(i, j);
    }
  }

  auto lower = a0_lower_.triangularView<Eigen::Lower>();
  auto upper = a0_lower_.transpose().triangularView<Eigen::Upper>();
  alpha0_ = upper.solve(lower.solve(y_centered));
  p_ = upper.solve(lower.solve(Eigen::MatrixXd(kgx_.transpose())));
  v0_ = kgx_ * alpha0_;
  q0_ = kgx_ * p_;
}

const PredictiveSampler::Conditional& PredictiveSampler::at(std::span<const double> t) {
  if (cache_valid_ && std::equal(t.begin(), t.end(), cached_t_.begin(), cached_t_.end()))
    return cond_;

  const KernelParams unit{1.0, theta_.h};
  const Eigen::Index n = static_cast<Eigen::Index>(x_.size());
  const Eigen::Index q = static_cast<Eigen::Index>(grid_.size());
  const Eigen::Index m = static_cast<Eigen::Index>(t.size());
  const double tau0_sq = theta_.tau0 * theta_.tau0;

  Eigen::MatrixXd b_unit;
  if (m == 0) {
    cond_.mean = tau0_sq * v0_;
    b_unit = tau0_sq * kgg_ - (tau0_sq * tau0_sq) * q0_;
  } else {
    const double delta = constraint_separation(theta_.h);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (!std::isfinite(t[i]))
        throw ValidationError("PredictiveSampler: non-finite constraint point");
      for (Eigen::Index j = i + 1; j < m; ++j)
        if (std::abs(t[i] - t[j]) < delta)
          throw DegenerateConstraintError("constraint points closer than " +
                                          std::to_string(delta));
    }
    Eigen::MatrixXd u(n, m), s(m, m), r(q, m);
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index i = 0; i < n; ++i)
        u(i, j) = tau0_sq * se_cov01(x_[static_cast<std::size_t>(i)], t[j], unit);
      for (Eigen::Index i = 0; i < m; ++i)
        s(i, j) = tau0_sq * se_cov11(t[i], t[j], unit);
      for (Eigen::Index i = 0; i < q; ++i)
        r(i, j) = se_cov01(grid_[static_cast<std::size_t>(i)], t[j], unit);
    }
    auto lower = a0_lower_.triangularView<Eigen::Lower>();
    auto upper = a0_lower_.transpose().triangularView<Eigen::Upper>();
    Eigen::MatrixXd w = upper.solve(lower.solve(u));         // A0^-1 U
    Eigen::MatrixXd schur = s - u.transpose() * w;           // S - U^T A0^-1 U
    CholeskyFactor fs = jittered_cholesky(schur);
    auto slo = fs.lower.triangularView<Eigen::Lower>();
    auto sup = fs.lower.transpose().triangularView<Eigen::Upper>();

    Eigen::VectorXd beta = -sup.solve(slo.solve(u.transpose() * alpha0_));
    cond_.mean = tau0_sq * (v0_ - kgx_ * (w * beta) + r * beta);

    // beta_m = schur^-1 (R^T - U^T P), block solve for the grid columns
    Eigen::MatrixXd beta_m =
        sup.solve(slo.solve(Eigen::MatrixXd(r.transpose() - u.transpose() * p_)));
    b_unit = tau0_sq * kgg_ -
             (tau0_sq * tau0_sq) *
                 (q0_ - (kgx_ * w) * beta_m + r * beta_m);
  }
  b_unit = 0.5 * (b_unit + b_unit.transpose()).eval();
  cond_.chol = jittered_cholesky(b_unit).lower;
  cached_t_.assign(t.begin(), t.end());
  cache_valid_ = true;
  return cond_;
}

MarginalEvaluator::MarginalEvaluator(std::vector<double> x, Eigen::VectorXd y_centered)
    : x_(std::move(x)), y_(std::move(y_centered)) {
  if (x_.size() != static_cast<std::size_t>(y_.size()))
    throw ValidationError("MarginalEvaluator: x and y length mismatch");
  const Eigen::Index n = y_.size();
  dist_sq_.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d = x_[static_cast<std::size_t>(i)] - x_[static_cast<std::size_t>(j)];
      dist_sq_(i, j) = d * d;
    }
  a_.resize(n, n);
  set_theta(Theta{});
}

void MarginalEvaluator::set_theta(const Theta& theta) {
  validate(theta);
  if (ktilde_.size() == 0 || theta.h != theta_.h)
    ktilde_ = (-0.5 / (theta.h * theta.h) * dist_sq_.array()).exp().matrix();
  theta_ = theta;
}

MarginalEvaluator::TFactor MarginalEvaluator::factor(std::span<const double> t) {
  const Eigen::Index n = y_.size();
  const Eigen::Index m = static_cast<Eigen::Index>(t.size());
  const double tau0_sq = theta_.tau0 * theta_.tau0;

  if (m == 0) {
    a_ = tau0_sq * ktilde_;
  } else {
    const KernelParams unit{1.0, theta_.h};
    const double delta = constraint_separation(theta_.h);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (!std::isfinite(t[i])) throw ValidationError("non-finite constraint point");
      for (Eigen::Index j = i + 1; j < m; ++j)
        if (std::abs(t[i] - t[j]) < delta)
          throw DegenerateConstraintError("constraint points closer than " +
                                          std::to_string(delta));
    }
    Eigen::MatrixXd k01(n, m);
    for (Eigen::Index j = 0; j < m; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        k01(i, j) = se_cov01(x_[static_cast<std::size_t>(i)], t[j], unit);
    if (m == 1) {
      const double k11 = se_cov11(t[0], t[0], unit);
      a_ = tau0_sq * ktilde_;
      a_.noalias() -= (tau0_sq / k11) * (k01 * k01.transpose());
    } else {
      Eigen::MatrixXd k11(m, m);
      for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) k11(i, j) = se_cov11(t[i], t[j], unit);
      CholeskyFactor f11 = jittered_cholesky(k11);
      Eigen::MatrixXd w = f11.lower.triangularView<Eigen::Lower>().solve(k01.transpose());
      a_ = tau0_sq * ktilde_;
      a_.noalias() -= tau0_sq * (w.transpose() * w);
    }
  }
  a_.diagonal().array() += 1.0;

  llt_.compute(a_);
  if (llt_.info() != Eigen::Success) {
    // A has a unit diagonal shift, so this is rare; fall back to the ladder.
    CholeskyFactor f = jittered_cholesky(a_);
    TFactor out;
    out.logdet_a = 2.0 * f.lower.diagonal().array().log().sum();
    solve_ = f.lower.triangularView<Eigen::Lower>().solve(y_);
    out.quad_form = solve_.squaredNorm();
    return out;
  }
  TFactor out;
  out.logdet_a =
      2.0 * llt_.matrixLLT().diagonal().array().log().sum();
  solve_ = llt_.matrixL().solve(y_);
  out.quad_form = solve_.squaredNorm();
  return out;
}

double MarginalEvaluator::loglik(const TFactor& f, double sigma_sq) const {
  if (!std::isfinite(sigma_sq) || sigma_sq <= 0.0)
    throw ValidationError("loglik: sigma_sq must be positive");
  const double n = static_cast<double>(y_.size());
  const double value = -0.5 * n * (kLog2Pi + std::log(sigma_sq)) - 0.5 * f.logdet_a -
                       0.5 * f.quad_form / sigma_sq;
  if (!std::isfinite(value)) throw DgpError("loglik: non-finite value");
  return value;
}

double MarginalEvaluator::loglik(std::span<const double> t, double sigma_sq) {
  return loglik(factor(t), sigma_sq);
}

}  // namespace dgp
