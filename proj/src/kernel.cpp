#include "dgp/kernel.hpp"

#include <cmath>

namespace dgp {

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw ValidationError(std::string("non-finite ") + what);
}

}  // namespace

void validate(const KernelParams& p) {
  if (!std::isfinite(p.tau_sq) || p.tau_sq <= 0.0)
    throw ValidationError("kernel tau_sq must be finite and positive");
  if (!std::isfinite(p.h) || p.h <= 0.0)
    throw ValidationError("kernel length scale h must be finite and positive");
}

double se_cov(double xi, double xj, const KernelParams& p) {
  validate(p);
  require_finite(xi, "input point");
  require_finite(xj, "input point");
  const double d = xi - xj;
  return p.tau_sq * std::exp(-0.5 * d * d / (p.h * p.h));
}

double se_cov01(double x, double t, const KernelParams& p) {
  validate(p);
  require_finite(x, "input point");
  require_finite(t, "constraint point");
  const double d = x - t;
  const double h_sq = p.h * p.h;
  return p.tau_sq * std::exp(-0.5 * d * d / h_sq) * d / h_sq;
}

double se_cov11(double ti, double tj, const KernelParams& p) {
  validate(p);
  require_finite(ti, "constraint point");
  require_finite(tj, "constraint point");
  const double d = ti - tj;
  const double h_sq = p.h * p.h;
  return p.tau_sq * std::exp(-0.5 * d * d / h_sq) * (1.0 - d * d / h_sq) / h_sq;
}

Eigen::MatrixXd CovBlocks::stacked() const {
  const Eigen::Index n = k.rows();
  const Eigen::Index m = k11.rows();
  Eigen::MatrixXd s(n + m, n + m);
  s.topLeftCorner(n, n) = k;
  s.topRightCorner(n, m) = k01;
  s.bottomLeftCorner(m, n) = k10;
  s.bottomRightCorner(m, m) = k11;
  return s;
}

CovBlocks build_cov_blocks(std::span<const double> x, std::span<const double> t,
                           const KernelParams& p) {
  validate(p);
  if (x.empty()) throw ValidationError("build_cov_blocks: empty input vector");
  if (t.empty()) throw ValidationError("build_cov_blocks: empty constraint vector");
  for (double v : x) require_finite(v, "input point");
  for (double v : t) require_finite(v, "constraint point");

  const double delta = constraint_separation(p.h);
  for (std::size_t i = 0; i < t.size(); ++i)
    for (std::size_t j = i + 1; j < t.size(); ++j)
      if (std::abs(t[i] - t[j]) < delta)
        throw DegenerateConstraintError("constraint points closer than " +
                                        std::to_string(delta));

  const Eigen::Index n = static_cast<Eigen::Index>(x.size());
  const Eigen::Index m = static_cast<Eigen::Index>(t.size());
  CovBlocks b;
  b.k.resize(n, n);
  b.k01.resize(n, m);
  b.k11.resize(m, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    b.k(i, i) = p.tau_sq;
    for (Eigen::Index j = 0; j < i; ++j) {
      b.k(i, j) = se_cov(x[i], x[j], p);
      b.k(j, i) = b.k(i, j);
    }
    for (Eigen::Index j = 0; j < m; ++j) b.k01(i, j) = se_cov01(x[i], t[j], p);
  }
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) b.k11(i, j) = se_cov11(t[i], t[j], p);
  b.k10 = b.k01.transpose();
  return b;
}

CholeskyFactor jittered_cholesky(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw ValidationError("jittered_cholesky: matrix not square");
  if (!m.allFinite()) throw ValidationError("jittered_cholesky: non-finite entries");

  const double diag_mean = m.diagonal().mean();
  for (double eta : kJitterLadder) {
    Eigen::MatrixXd shifted = m;
    if (eta > 0.0) shifted.diagonal().array() += eta * diag_mean;
    Eigen::LLT<Eigen::MatrixXd> llt(shifted);
    if (llt.info() == Eigen::Success) return {llt.matrixL(), eta};
  }
  throw NotPositiveDefiniteError("matrix not positive definite after jitter",
                                 kJitterLadder.back());
}

}  // namespace dgp
