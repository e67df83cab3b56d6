#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgp/mcem.hpp"
#include "dgp/summarize.hpp"

namespace dgp {

// Benchmark truth: f(x) = 0.3 + 0.4x + 0.5 sin(3.2x) + 1.1/(1 + x^2), with
// stationary points near 0.436 and 1.459 on [0, 2].
double f_true(double x);
double f_true_deriv(double x);

inline constexpr double kTrueT1 = 0.436;
inline constexpr double kTrueT2 = 1.459;

struct SyntheticSpec {
  int n = 50;
  double sigma = 0.25;
  double a = 0.0;
  double b = 2.0;
  int replicates = 100;
  std::uint64_t seed = 1;
  int test_grid = 100;
  // Base sampler settings applied to every method (mode, prior, and
  // constraint fields are overwritten per method).
  McemConfig mcem;
};

void validate(const SyntheticSpec& spec);

// x ~ iid Uniform(a, b) sorted ascending, y = f_true(x) + N(0, sigma^2);
// bitwise deterministic per (spec.seed, replicate).
Dataset generate_dataset(const SyntheticSpec& spec, int replicate);

std::vector<double> make_test_grid(const SyntheticSpec& spec);

enum class Method { gpr, single_dgp, multiple_dgp, oracle_dgp };

std::string method_name(Method m);
std::optional<Method> parse_method(const std::string& name);

// Per-method MCEM configuration for one replicate. gpr is the oracle mode
// with an empty constraint set; oracle fixes both stationary points; single
// puts a uniform prior on the whole interval; multiple splits it at 1.
McemConfig method_config(const SyntheticSpec& spec, Method m, std::uint64_t seed);

// Outcome of fitting one method on one replicate.
struct ReplicateFit {
  bool failed = false;
  std::string error;
  bool converged = false;
  std::vector<double> f_hat;   // posterior mean curve on the test grid
  std::vector<double> lower, upper;
  bool has_t = false;
  HpdRegion region;                    // from the pooled t draws, alpha = 0.05
  std::optional<double> t1_hat, t2_hat;  // highest-density MAP mode per sub-interval
};

// Fit one (replicate, method) pair; identical to its in-suite result.
ReplicateFit fit_one(const SyntheticSpec& spec, int replicate, Method m);

struct MethodReport {
  Method method{};
  int replicates_used = 0;
  int failures = 0;
  std::vector<double> rmse_curve;  // per test-grid point
  double mean_rmse = 0.0;
  double band_width_at_one = 0.0;  // mean 95% band width interpolated at x = 1
  double converged_frac = 0.0;
  bool has_t = false;
  // Populated only when has_t:
  double rmse_t1 = 0.0, rmse_t2 = 0.0;
  int missing_t1 = 0, missing_t2 = 0;  // sub-interval had no mode (worst-case error)
  std::vector<int> m_hist;             // index = segment count
  double frac_m2 = 0.0;
  // Endpoint averages over replicates with exactly two segments.
  std::pair<double, double> avg_hpd1{0.0, 0.0}, avg_hpd2{0.0, 0.0};
  double endpoint_excluded_frac = 0.0;
};

struct RmseReport {
  SyntheticSpec spec;
  std::vector<double> test_grid;
  std::vector<MethodReport> methods;
};

// Deterministic reduction over the ordered replicate index; fits[m][r] holds
// method m on replicate r. Errors if any method lost more than 5% of
// replicates.
RmseReport aggregate(const SyntheticSpec& spec, std::span<const Method> methods,
                     const std::vector<std::vector<ReplicateFit>>& fits);

RmseReport run_replicates(const SyntheticSpec& spec, std::span<const Method> methods,
                          int threads = 1);

// ERP-analog multi-subject generator: one dip near 100 and one peak near 170
// on a step-2 grid over [50, 250], SNR about 2.
struct ErpSpec {
  int subjects = 10;
  double grid_lo = 50.0, grid_hi = 250.0, step = 2.0;
  double dip_center = 100.0, peak_center = 170.0, center_jitter = 4.0;
  double dip_amp = -6.0, peak_amp = 5.0;
  double dip_width = 18.0, peak_width = 18.0;
  double snr = 2.0;
  std::uint64_t seed = 7;
};

struct ErpTable {
  std::vector<Dataset> subjects;
  std::vector<double> true_dip;   // exact stationary point of each dip
  std::vector<double> true_peak;  // exact stationary point of each peak
};

ErpTable make_erp_like_table(const ErpSpec& spec);

}  // namespace dgp
