#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "dgp/dgp.hpp"
#include "dgp/mcem.hpp"

namespace dgp {

// Gaussian kernel density estimate on an equispaced grid over [a, b],
// renormalized to unit trapezoid integral.
struct KdeResult {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;

  // Linear interpolation; zero outside [a, b].
  double value_at(double t) const;
};

// Silverman bandwidth 0.9 min(sd, IQR/1.34) n^(-1/5), falling back to the
// plain sd when the IQR degenerates. Requires at least 10 draws with spread.
KdeResult kde(std::span<const double> draws, double a, double b,
              int grid_size = 512);

// Highest-posterior-density region C(g_alpha) = {t : g(t) >= g_alpha}.
struct HpdRegion {
  double alpha = 0.0;
  double threshold = 0.0;  // g_alpha
  std::vector<std::pair<double, double>> segments;
  std::vector<double> modes;  // per-segment argmax of the density grid
  double mass = 0.0;          // fraction of draws inside the segments

  std::size_t count() const { return segments.size(); }  // estimated M
};

// g_alpha is the largest grid density level whose superlevel set holds at
// least 1 - alpha of the draws. Segments narrower than two grid cells are
// merged into a neighbor within two cells or dropped as ripple artifacts.
HpdRegion hpd(const KdeResult& density, std::span<const double> draws, double alpha);

// Two-component univariate Gaussian mixture, best of 10 short EM runs with
// means initialized at random draw quantiles; 50 iterations per run, stop on
// loglik increment < 1e-4. Means sorted ascending.
struct GmmFit {
  std::array<double, 2> weights{};
  std::array<double, 2> means{};
  std::array<double, 2> sds{};
  double loglik = 0.0;
  bool converged = false;
};

GmmFit fit_gmm2(std::span<const double> draws);

// One EM run from explicit mean initializations — the building block behind
// fit_gmm2's restarts. Starts from equal weights and a common sd of
// max(sample sd, 1e-3 * range). Component collapse returns a flagged fit.
GmmFit fit_gmm2_once(std::span<const double> draws, double init_m1, double init_m2);

struct CurveEstimate {
  std::vector<double> grid;
  std::vector<double> mean;
  std::vector<double> lower;   // pointwise 2.5% quantile
  std::vector<double> upper;   // pointwise 97.5% quantile
  std::size_t skipped = 0;     // draws dropped for factorization failures
};

// Conditional simulation: one sampled path per posterior draw at theta-star,
// pointwise averaged (data mean re-added) with empirical 95% bands. Isolated
// factorization failures are skipped; more than 1% of draws failing is an
// error.
CurveEstimate curve_bands(const PosteriorDraws& draws, const Dataset& data,
                          std::span<const double> grid,
                          std::uint64_t seed = 0x5eedULL);

// Type-7 (linear interpolation) empirical quantile of a sample; p in [0, 1].
double quantile(std::span<const double> sample, double p);

}  // namespace dgp
