#include "dgp/simstudy.hpp"

#include <algorithm>
#include <cmath>

#include "dgp/parallel.hpp"

namespace dgp {

double f_true(double x) {
  if (!std::isfinite(x)) throw ValidationError("f_true: non-finite x");
  return 0.3 + 0.4 * x + 0.5 * std::sin(3.2 * x) + 1.1 / (1.0 + x * x);
}

double f_true_deriv(double x) {
  if (!std::isfinite(x)) throw ValidationError("f_true_deriv: non-finite x");
  const double d = 1.0 + x * x;
  return 0.4 + 1.6 * std::cos(3.2 * x) - 2.2 * x / (d * d);
}

void validate(const SyntheticSpec& spec) {
  if (spec.n < 3) throw ValidationError("synthetic spec: n must be >= 3");
  if (!(spec.sigma > 0.0)) throw ValidationError("synthetic spec: sigma must be positive");
  if (!std::isfinite(spec.a) || !std::isfinite(spec.b) || !(spec.a < spec.b))
    throw ValidationError("synthetic spec: domain must satisfy a < b");
  if (spec.replicates < 1) throw ValidationError("synthetic spec: replicates must be >= 1");
  if (spec.test_grid < 2) throw ValidationError("synthetic spec: test grid too short");
}

Dataset generate_dataset(const SyntheticSpec& spec, int replicate) {
  validate(spec);
  if (replicate < 0 || replicate >= spec.replicates)
    throw ValidationError("generate_dataset: replicate index out of range");
  Rng rng(derive_seed(spec.seed, "data", static_cast<std::uint64_t>(replicate)));
  Dataset out;
  out.x.resize(static_cast<std::size_t>(spec.n));
  for (double& xi : out.x) xi = rng.uniform(spec.a, spec.b);
  std::sort(out.x.begin(), out.x.end());
  out.y.resize(out.x.size());
  for (std::size_t i = 0; i < out.x.size(); ++i)
    out.y[i] = f_true(out.x[i]) + rng.normal(0.0, spec.sigma);
  return out;
}

std::vector<double> make_test_grid(const SyntheticSpec& spec) {
  std::vector<double> grid(static_cast<std::size_t>(spec.test_grid));
  const double dx = (spec.b - spec.a) / static_cast<double>(spec.test_grid - 1);
  for (std::size_t i = 0; i < grid.size(); ++i)
    grid[i] = spec.a + dx * static_cast<double>(i);
  return grid;
}

std::string method_name(Method m) {
  switch (m) {
    case Method::gpr: return "gpr";
    case Method::single_dgp: return "single_dgp";
    case Method::multiple_dgp: return "multiple_dgp";
    case Method::oracle_dgp: return "oracle_dgp";
  }
  throw ValidationError("method_name: unknown method");
}

std::optional<Method> parse_method(const std::string& name) {
  if (name == "gpr") return Method::gpr;
  if (name == "single" || name == "single_dgp") return Method::single_dgp;
  if (name == "multiple" || name == "multiple_dgp") return Method::multiple_dgp;
  if (name == "oracle" || name == "oracle_dgp") return Method::oracle_dgp;
  return std::nullopt;
}

McemConfig method_config(const SyntheticSpec& spec, Method m, std::uint64_t seed) {
  McemConfig cfg = spec.mcem;
  cfg.seed = seed;
  cfg.sub_intervals.clear();
  cfg.oracle_t.clear();
  cfg.t_prior = TPrior{TPriorKind::uniform, spec.a, spec.b, 3.0, 3.0};
  const double mid = 0.5 * (spec.a + spec.b);
  switch (m) {
    case Method::gpr:
      cfg.mode = McemMode::oracle;
      break;
    case Method::single_dgp:
      cfg.mode = McemMode::single;
      break;
    case Method::multiple_dgp:
      cfg.mode = McemMode::multiple;
      cfg.sub_intervals = {{spec.a, mid}, {mid, spec.b}};
      break;
    case Method::oracle_dgp:
      cfg.mode = McemMode::oracle;
      cfg.oracle_t = {kTrueT1, kTrueT2};
      break;
  }
  return cfg;
}

namespace {

// Linear interpolation of a curve tabulated on an equispaced grid.
double interp_at(const std::vector<double>& grid, const std::vector<double>& value,
                 double x) {
  if (x <= grid.front()) return value.front();
  if (x >= grid.back()) return value.back();
  const double dx = (grid.back() - grid.front()) / static_cast<double>(grid.size() - 1);
  const double pos = (x - grid.front()) / dx;
  const std::size_t lo =
      std::min<std::size_t>(static_cast<std::size_t>(pos), grid.size() - 2);
  const double frac = pos - static_cast<double>(lo);
  return value[lo] + frac * (value[lo + 1] - value[lo]);
}

// Highest-density MAP mode inside (lo, hi), when any.
std::optional<double> pick_mode(const HpdRegion& region, const KdeResult& density,
                                double lo, double hi) {
  std::optional<double> best;
  double best_density = -1.0;
  for (double mode : region.modes) {
    if (!(mode > lo && mode < hi)) continue;
    const double d = density.value_at(mode);
    if (d > best_density) {
      best_density = d;
      best = mode;
    }
  }
  return best;
}

}  // namespace

ReplicateFit fit_one(const SyntheticSpec& spec, int replicate, Method m) {
  const Dataset data = generate_dataset(spec, replicate);
  const std::uint64_t rep_seed =
      derive_seed(spec.seed, "replicate", static_cast<std::uint64_t>(replicate));
  const McemConfig cfg = method_config(spec, m, derive_seed(rep_seed, method_name(m)));
  const std::vector<double> grid = make_test_grid(spec);

  ReplicateFit out;
  try {
    const PosteriorDraws dr = run_mcem(cfg, data);
    out.converged = dr.meta.converged;
    const CurveEstimate ce = curve_bands(dr, data, grid, cfg.seed);
    out.f_hat = ce.mean;
    out.lower = ce.lower;
    out.upper = ce.upper;
    if (m == Method::single_dgp || m == Method::multiple_dgp) {
      const std::vector<double> pooled = dr.t_pooled();
      const KdeResult density = kde(pooled, spec.a, spec.b);
      out.region = hpd(density, pooled, 0.05);
      out.has_t = true;
      const double mid = 0.5 * (spec.a + spec.b);
      out.t1_hat = pick_mode(out.region, density, spec.a, mid);
      out.t2_hat = pick_mode(out.region, density, mid, spec.b);
    }
  } catch (const std::exception& e) {
    out = ReplicateFit{};
    out.failed = true;
    out.error = e.what();
  }
  return out;
}

RmseReport aggregate(const SyntheticSpec& spec, std::span<const Method> methods,
                     const std::vector<std::vector<ReplicateFit>>& fits) {
  if (methods.empty()) throw ValidationError("aggregate: no methods");
  if (fits.size() != methods.size())
    throw ValidationError("aggregate: fits/methods shape mismatch");

  RmseReport report;
  report.spec = spec;
  report.test_grid = make_test_grid(spec);
  const double mid = 0.5 * (spec.a + spec.b);

  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const auto& row = fits[mi];
    if (static_cast<int>(row.size()) != spec.replicates)
      throw ValidationError("aggregate: wrong replicate count");

    MethodReport mr;
    mr.method = methods[mi];
    std::vector<const ReplicateFit*> kept;
    std::string first_error;
    for (const ReplicateFit& f : row) {
      if (f.failed) {
        ++mr.failures;
        if (first_error.empty()) first_error = f.error;
      } else {
        kept.push_back(&f);
      }
    }
    if (static_cast<double>(mr.failures) > 0.05 * static_cast<double>(spec.replicates))
      throw DgpError("simstudy: method " + method_name(methods[mi]) + " failed on " +
                     std::to_string(mr.failures) + " of " +
                     std::to_string(spec.replicates) + " replicates; first error: " +
                     first_error);
    mr.replicates_used = static_cast<int>(kept.size());
    const double nk = static_cast<double>(kept.size());

    mr.rmse_curve.assign(report.test_grid.size(), 0.0);
    for (std::size_t i = 0; i < report.test_grid.size(); ++i) {
      const double truth = f_true(report.test_grid[i]);
      double ss = 0.0;
      for (const ReplicateFit* f : kept) {
        const double e = truth - f->f_hat[i];
        ss += e * e;
      }
      mr.rmse_curve[i] = std::sqrt(ss / nk);
    }
    mr.mean_rmse = 0.0;
    for (double v : mr.rmse_curve) mr.mean_rmse += v;
    mr.mean_rmse /= static_cast<double>(mr.rmse_curve.size());

    double width_sum = 0.0;
    int conv = 0;
    for (const ReplicateFit* f : kept) {
      width_sum += interp_at(report.test_grid, f->upper, 1.0) -
                   interp_at(report.test_grid, f->lower, 1.0);
      conv += f->converged ? 1 : 0;
    }
    mr.band_width_at_one = width_sum / nk;
    mr.converged_frac = static_cast<double>(conv) / nk;

    mr.has_t = !kept.empty() && kept.front()->has_t;
    if (mr.has_t) {
      double ss1 = 0.0, ss2 = 0.0;
      int count2 = 0;
      double l1 = 0.0, u1 = 0.0, l2 = 0.0, u2 = 0.0;
      for (const ReplicateFit* f : kept) {
        const double e1 = f->t1_hat ? std::abs(*f->t1_hat - kTrueT1) : mid - spec.a;
        const double e2 = f->t2_hat ? std::abs(*f->t2_hat - kTrueT2) : spec.b - mid;
        if (!f->t1_hat) ++mr.missing_t1;
        if (!f->t2_hat) ++mr.missing_t2;
        ss1 += e1 * e1;
        ss2 += e2 * e2;
        const std::size_t m_hat = f->region.count();
        if (mr.m_hist.size() <= m_hat) mr.m_hist.resize(m_hat + 1, 0);
        ++mr.m_hist[m_hat];
        if (m_hat == 2) {
          ++count2;
          l1 += f->region.segments[0].first;
          u1 += f->region.segments[0].second;
          l2 += f->region.segments[1].first;
          u2 += f->region.segments[1].second;
        }
      }
      mr.rmse_t1 = std::sqrt(ss1 / nk);
      mr.rmse_t2 = std::sqrt(ss2 / nk);
      mr.frac_m2 = static_cast<double>(count2) / nk;
      mr.endpoint_excluded_frac = 1.0 - mr.frac_m2;
      if (count2 > 0) {
        const double c2 = static_cast<double>(count2);
        mr.avg_hpd1 = {l1 / c2, u1 / c2};
        mr.avg_hpd2 = {l2 / c2, u2 / c2};
      }
    }
    report.methods.push_back(std::move(mr));
  }
  return report;
}

RmseReport run_replicates(const SyntheticSpec& spec, std::span<const Method> methods,
                          int threads) {
  validate(spec);
  if (methods.empty()) throw ValidationError("run_replicates: no methods");
  std::vector<std::vector<ReplicateFit>> fits(methods.size());
  for (auto& row : fits) row.resize(static_cast<std::size_t>(spec.replicates));
  parallel_for(static_cast<std::size_t>(spec.replicates), threads, [&](std::size_t r) {
    for (std::size_t mi = 0; mi < methods.size(); ++mi)
      fits[mi][r] = fit_one(spec, static_cast<int>(r), methods[mi]);
  });
  return aggregate(spec, methods, fits);
}

namespace {

// Flanking components shared by every subject: the falling tail of an early
// positive wave centered left of the window and the onset of a late slow
// negative wave centered right of it. They keep the true derivative bounded
// away from zero near the window edges, so each subject's curve has exactly
// two stationary points inside the analysis window rather than flat shoulders
// where a zero-derivative constraint would be unconstrained by the data.
constexpr double kErpEarlyAmp = 4.0;
constexpr double kErpEarlyCenter = 35.0;
constexpr double kErpEarlyWidth = 22.0;
constexpr double kErpLateAmp = -9.0;
constexpr double kErpLateCenter = 275.0;
constexpr double kErpLateWidth = 33.0;

double erp_signal(const ErpSpec& spec, double d, double p, double x) {
  const double zd = (x - d) / spec.dip_width;
  const double zp = (x - p) / spec.peak_width;
  const double ze = (x - kErpEarlyCenter) / kErpEarlyWidth;
  const double zl = (x - kErpLateCenter) / kErpLateWidth;
  return spec.dip_amp * std::exp(-0.5 * zd * zd) +
         spec.peak_amp * std::exp(-0.5 * zp * zp) +
         kErpEarlyAmp * std::exp(-0.5 * ze * ze) +
         kErpLateAmp * std::exp(-0.5 * zl * zl);
}

double erp_signal_deriv(const ErpSpec& spec, double d, double p, double x) {
  const double zd = (x - d) / spec.dip_width;
  const double zp = (x - p) / spec.peak_width;
  const double ze = (x - kErpEarlyCenter) / kErpEarlyWidth;
  const double zl = (x - kErpLateCenter) / kErpLateWidth;
  return -spec.dip_amp * (x - d) / (spec.dip_width * spec.dip_width) *
             std::exp(-0.5 * zd * zd) -
         spec.peak_amp * (x - p) / (spec.peak_width * spec.peak_width) *
             std::exp(-0.5 * zp * zp) -
         kErpEarlyAmp * (x - kErpEarlyCenter) / (kErpEarlyWidth * kErpEarlyWidth) *
             std::exp(-0.5 * ze * ze) -
         kErpLateAmp * (x - kErpLateCenter) / (kErpLateWidth * kErpLateWidth) *
             std::exp(-0.5 * zl * zl);
}

// Stationary point nearest `center`, located by scanning for a sign change
// of the derivative and bisecting it down.
double erp_stationary_near(const ErpSpec& spec, double d, double p, double center) {
  const double half = 8.0;
  double prev_x = center - half;
  double prev_f = erp_signal_deriv(spec, d, p, prev_x);
  for (int i = 1; i <= 160; ++i) {
    const double x = center - half + static_cast<double>(i) * (2.0 * half / 160.0);
    const double f = erp_signal_deriv(spec, d, p, x);
    if ((prev_f <= 0.0 && f > 0.0) || (prev_f >= 0.0 && f < 0.0)) {
      double lo = prev_x, hi = x, flo = prev_f;
      for (int it = 0; it < 80; ++it) {
        const double m = 0.5 * (lo + hi);
        const double fm = erp_signal_deriv(spec, d, p, m);
        if ((flo <= 0.0) == (fm <= 0.0)) {
          lo = m;
          flo = fm;
        } else {
          hi = m;
        }
      }
      return 0.5 * (lo + hi);
    }
    prev_x = x;
    prev_f = f;
  }
  throw DgpError("erp table: no stationary point near " + std::to_string(center));
}

}  // namespace

ErpTable make_erp_like_table(const ErpSpec& spec) {
  if (spec.subjects < 1) throw ValidationError("erp spec: subjects must be >= 1");
  if (!(spec.step > 0.0) || !(spec.grid_lo < spec.grid_hi))
    throw ValidationError("erp spec: bad grid");
  if (!(spec.snr > 0.0)) throw ValidationError("erp spec: snr must be positive");

  std::vector<double> x;
  for (double v = spec.grid_lo; v <= spec.grid_hi + 1e-9; v += spec.step)
    x.push_back(v);

  ErpTable out;
  for (int s = 0; s < spec.subjects; ++s) {
    Rng rng(derive_seed(spec.seed, "erp-subject", static_cast<std::uint64_t>(s)));
    const double target_dip =
        rng.uniform(spec.dip_center - spec.center_jitter, spec.dip_center + spec.center_jitter);
    const double target_peak =
        rng.uniform(spec.peak_center - spec.center_jitter, spec.peak_center + spec.center_jitter);

    // The flanking waves pull the stationary points away from the Gaussian
    // centers, so solve for centers whose stationary points land exactly on
    // the jittered targets. The root location moves one-for-one with its own
    // center and is nearly independent of the other, so alternating updates
    // converge in a few rounds.
    double d = target_dip, p = target_peak;
    for (int round = 0; round < 8; ++round) {
      d += target_dip - erp_stationary_near(spec, d, p, target_dip);
      p += target_peak - erp_stationary_near(spec, d, p, target_peak);
    }

    Dataset subject;
    subject.x = x;
    subject.y.resize(x.size());
    std::vector<double> signal(x.size());
    double mean = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      signal[i] = erp_signal(spec, d, p, x[i]);
      mean += signal[i];
    }
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : signal) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    const double sigma = std::sqrt(var) / spec.snr;
    for (std::size_t i = 0; i < x.size(); ++i)
      subject.y[i] = signal[i] + rng.normal(0.0, sigma);

    out.subjects.push_back(std::move(subject));
    out.true_dip.push_back(erp_stationary_near(spec, d, p, target_dip));
    out.true_peak.push_back(erp_stationary_near(spec, d, p, target_peak));
  }
  return out;
}

}  // namespace dgp
