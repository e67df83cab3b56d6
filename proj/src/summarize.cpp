#include "dgp/summarize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dgp {

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_draws(std::span<const double> draws, std::size_t minimum,
                 const char* who) {
  if (draws.size() < minimum)
    throw ValidationError(std::string(who) + ": too few draws");
  for (double d : draws)
    if (!std::isfinite(d))
      throw ValidationError(std::string(who) + ": non-finite draw");
}

double sample_sd(std::span<const double> v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (n - 1.0));
}

}  // namespace

double quantile(std::span<const double> sample, double p) {
  if (sample.empty()) throw ValidationError("quantile: empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("quantile: p outside [0, 1]");
  std::vector<double> s(sample.begin(), sample.end());
  std::sort(s.begin(), s.end());
  const double pos = p * static_cast<double>(s.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  if (lo + 1 >= s.size()) return s.back();
  const double frac = pos - static_cast<double>(lo);
  return s[lo] + frac * (s[lo + 1] - s[lo]);
}

double KdeResult::value_at(double t) const {
  if (grid.empty() || t < grid.front() || t > grid.back()) return 0.0;
  const double dx = (grid.back() - grid.front()) / static_cast<double>(grid.size() - 1);
  const double pos = (t - grid.front()) / dx;
  const std::size_t lo = std::min<std::size_t>(static_cast<std::size_t>(pos),
                                               grid.size() - 2);
  const double frac = pos - static_cast<double>(lo);
  return density[lo] + frac * (density[lo + 1] - density[lo]);
}

KdeResult kde(std::span<const double> draws, double a, double b, int grid_size) {
  check_draws(draws, 10, "kde");
  if (!std::isfinite(a) || !std::isfinite(b) || !(a < b))
    throw ValidationError("kde: domain must satisfy a < b");
  if (grid_size < 2) throw ValidationError("kde: grid_size must be >= 2");

  const double n = static_cast<double>(draws.size());
  const double sd = sample_sd(draws);
  std::vector<double> sorted(draws.begin(), draws.end());
  std::sort(sorted.begin(), sorted.end());
  const double iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd;
  if (!(spread > 0.0)) throw ValidationError("kde: degenerate density (all draws identical)");
  const double bw = 0.9 * spread * std::pow(n, -0.2);

  KdeResult out;
  out.bandwidth = bw;
  out.grid.resize(static_cast<std::size_t>(grid_size));
  out.density.assign(static_cast<std::size_t>(grid_size), 0.0);
  const double dx = (b - a) / static_cast<double>(grid_size - 1);
  for (int i = 0; i < grid_size; ++i)
    out.grid[static_cast<std::size_t>(i)] = a + dx * static_cast<double>(i);

  const double scale = kInvSqrt2Pi / (n * bw);
  for (double d : draws) {
    // Gaussian kernel support truncated at 8 bandwidths.
    const int lo = std::max(0, static_cast<int>(std::ceil((d - 8.0 * bw - a) / dx)));
    const int hi = std::min(grid_size - 1,
                            static_cast<int>(std::floor((d + 8.0 * bw - a) / dx)));
    for (int i = lo; i <= hi; ++i) {
      const double z = (out.grid[static_cast<std::size_t>(i)] - d) / bw;
      out.density[static_cast<std::size_t>(i)] += scale * std::exp(-0.5 * z * z);
    }
  }

  double integral = 0.0;
  for (int i = 0; i + 1 < grid_size; ++i)
    integral += 0.5 * dx * (out.density[static_cast<std::size_t>(i)] +
                            out.density[static_cast<std::size_t>(i) + 1]);
  if (!(integral > 0.0))
    throw ValidationError("kde: degenerate density (no mass on [a, b])");
  for (double& v : out.density) v /= integral;
  return out;
}

namespace {

struct Run {
  std::size_t first, last;  // inclusive grid-index range
};

std::vector<Run> superlevel_runs(const std::vector<double>& density, double threshold) {
  std::vector<Run> runs;
  bool open = false;
  for (std::size_t i = 0; i < density.size(); ++i) {
    if (density[i] >= threshold) {
      if (!open) {
        runs.push_back({i, i});
        open = true;
      } else {
        runs.back().last = i;
      }
    } else {
      open = false;
    }
  }
  return runs;
}

}  // namespace

HpdRegion hpd(const KdeResult& density, std::span<const double> draws, double alpha) {
  if (density.grid.size() < 2 || density.density.size() != density.grid.size())
    throw ValidationError("hpd: invalid density grid");
  check_draws(draws, 1, "hpd");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("hpd: alpha outside (0, 1)");

  const double n = static_cast<double>(draws.size());
  std::vector<double> draw_density(draws.size());
  for (std::size_t j = 0; j < draws.size(); ++j)
    draw_density[j] = density.value_at(draws[j]);
  std::sort(draw_density.begin(), draw_density.end(), std::greater<>());

  // Descend through the distinct grid density levels until the superlevel
  // set first captures 1 - alpha of the draws.
  std::vector<double> levels(density.density);
  std::sort(levels.begin(), levels.end(), std::greater<>());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

  double g_alpha = levels.back();
  std::size_t inside = 0;  // draws with density >= current level
  for (double level : levels) {
    while (inside < draw_density.size() && draw_density[inside] >= level) ++inside;
    if (static_cast<double>(inside) / n >= 1.0 - alpha) {
      g_alpha = level;
      break;
    }
  }

  std::vector<Run> runs = superlevel_runs(density.density, g_alpha);

  // Suppress KDE ripple: a run narrower than two grid cells is merged into a
  // neighboring run within two cells, or dropped when isolated.
  bool changed = true;
  while (changed && runs.size() > 1) {
    changed = false;
    for (std::size_t k = 0; k < runs.size(); ++k) {
      if (runs[k].last - runs[k].first >= 2) continue;
      const std::size_t gap_prev =
          k > 0 ? runs[k].first - runs[k - 1].last : std::numeric_limits<std::size_t>::max();
      const std::size_t gap_next = k + 1 < runs.size()
                                       ? runs[k + 1].first - runs[k].last
                                       : std::numeric_limits<std::size_t>::max();
      if (gap_prev <= 2 && gap_prev <= gap_next) {
        runs[k - 1].last = runs[k].last;
        runs.erase(runs.begin() + static_cast<std::ptrdiff_t>(k));
      } else if (gap_next <= 2) {
        runs[k + 1].first = runs[k].first;
        runs.erase(runs.begin() + static_cast<std::ptrdiff_t>(k));
      } else {
        runs.erase(runs.begin() + static_cast<std::ptrdiff_t>(k));
      }
      changed = true;
      break;
    }
  }
  // Never return an empty region: keep the run holding the density peak.
  if (runs.empty()) {
    const std::size_t peak = static_cast<std::size_t>(
        std::max_element(density.density.begin(), density.density.end()) -
        density.density.begin());
    runs = superlevel_runs(density.density, g_alpha);
    for (const Run& r : runs)
      if (peak >= r.first && peak <= r.last) {
        runs = {r};
        break;
      }
  }

  HpdRegion out;
  out.alpha = alpha;
  out.threshold = g_alpha;
  for (const Run& r : runs) {
    out.segments.emplace_back(density.grid[r.first], density.grid[r.last]);
    std::size_t best = r.first;
    for (std::size_t i = r.first + 1; i <= r.last; ++i)
      if (density.density[i] > density.density[best]) best = i;
    out.modes.push_back(density.grid[best]);
  }
  std::size_t covered = 0;
  for (double d : draws)
    for (const auto& [lo, hi] : out.segments)
      if (d >= lo && d <= hi) {
        ++covered;
        break;
      }
  out.mass = static_cast<double>(covered) / n;
  return out;
}

namespace {

struct GmmRun {
  GmmFit fit;
  bool collapsed = false;
};

GmmRun run_gmm_em(const std::vector<double>& draws, double m1, double m2,
                  double sd0, double range) {
  GmmRun run;
  std::array<double, 2> w{0.5, 0.5}, mu{m1, m2}, sd{sd0, sd0};
  const double n = static_cast<double>(draws.size());
  double prev_ll = -std::numeric_limits<double>::infinity();
  std::vector<double> resp(draws.size());

  for (int iter = 0; iter < 50; ++iter) {
    double ll = 0.0;
    std::array<double, 2> rsum{0.0, 0.0}, rmean{0.0, 0.0}, rvar{0.0, 0.0};
    for (std::size_t i = 0; i < draws.size(); ++i) {
      std::array<double, 2> logp;
      for (int k = 0; k < 2; ++k) {
        const double z = (draws[i] - mu[static_cast<std::size_t>(k)]) /
                         sd[static_cast<std::size_t>(k)];
        logp[static_cast<std::size_t>(k)] =
            std::log(w[static_cast<std::size_t>(k)]) -
            0.5 * z * z - std::log(sd[static_cast<std::size_t>(k)]) +
            std::log(kInvSqrt2Pi);
      }
      const double mx = std::max(logp[0], logp[1]);
      const double denom = std::exp(logp[0] - mx) + std::exp(logp[1] - mx);
      ll += mx + std::log(denom);
      resp[i] = std::exp(logp[0] - mx) / denom;  // responsibility of component 0
    }
    for (std::size_t i = 0; i < draws.size(); ++i) {
      rsum[0] += resp[i];
      rsum[1] += 1.0 - resp[i];
      rmean[0] += resp[i] * draws[i];
      rmean[1] += (1.0 - resp[i]) * draws[i];
    }
    for (int k = 0; k < 2; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      if (!(rsum[ku] > 0.0)) {
        run.collapsed = true;
        run.fit.loglik = ll;
        return run;
      }
      rmean[ku] /= rsum[ku];
    }
    for (std::size_t i = 0; i < draws.size(); ++i) {
      rvar[0] += resp[i] * (draws[i] - rmean[0]) * (draws[i] - rmean[0]);
      rvar[1] += (1.0 - resp[i]) * (draws[i] - rmean[1]) * (draws[i] - rmean[1]);
    }
    for (int k = 0; k < 2; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      w[ku] = rsum[ku] / n;
      mu[ku] = rmean[ku];
      sd[ku] = std::sqrt(rvar[ku] / rsum[ku]);
      if (!(sd[ku] >= 1e-6 * range)) {
        run.collapsed = true;
        run.fit.loglik = ll;
        return run;
      }
    }
    run.fit = GmmFit{w, mu, sd, ll, false};
    if (ll - prev_ll < 1e-4 && iter > 0) {
      run.fit.converged = true;
      break;
    }
    prev_ll = ll;
  }
  return run;
}

}  // namespace

GmmFit fit_gmm2(std::span<const double> draws) {
  check_draws(draws, 20, "fit_gmm2");
  std::vector<double> sorted(draws.begin(), draws.end());
  std::sort(sorted.begin(), sorted.end());
  const double range = sorted.back() - sorted.front();
  if (!(range > 0.0)) throw ValidationError("fit_gmm2: all draws identical");
  const double sd0 = std::max(sample_sd(draws), 1e-3 * range);
  std::vector<double> data(draws.begin(), draws.end());

  // Mean initializations at random quantile pairs; the fixed seed and the
  // sorted quantile lookup keep the fit invariant to input order.
  Rng rng(derive_seed(0x676d6d32ULL, "init"));
  GmmFit best;
  bool have_best = false;
  for (int attempt = 0; attempt < 10; ++attempt) {
    double u1 = rng.uniform01();
    double u2 = rng.uniform01();
    if (u1 > u2) std::swap(u1, u2);
    const double m1 = quantile(sorted, u1);
    const double m2 = quantile(sorted, u2);
    // Start each component at a scale tied to the separation of the two
    // means: full-sample sds make the components swallow each other before
    // they can localize on unbalanced mixtures.
    const double init_sd = std::max(0.25 * (m2 - m1), 1e-3 * range);
    GmmRun run = run_gmm_em(data, m1, m2, init_sd, range);
    if (run.collapsed) continue;
    if (!have_best || run.fit.loglik > best.loglik) {
      best = run.fit;
      have_best = true;
    }
  }
  if (!have_best) {
    // Persistent collapse: report a flagged single-component-style fit.
    const double mean = std::accumulate(data.begin(), data.end(), 0.0) /
                        static_cast<double>(data.size());
    best.weights = {0.5, 0.5};
    best.means = {mean, mean};
    best.sds = {sd0, sd0};
    best.loglik = -std::numeric_limits<double>::infinity();
    best.converged = false;
    return best;
  }
  if (best.means[0] > best.means[1]) {
    std::swap(best.means[0], best.means[1]);
    std::swap(best.sds[0], best.sds[1]);
    std::swap(best.weights[0], best.weights[1]);
  }
  return best;
}

GmmFit fit_gmm2_once(std::span<const double> draws, double init_m1, double init_m2) {
  check_draws(draws, 20, "fit_gmm2");
  if (!std::isfinite(init_m1) || !std::isfinite(init_m2))
    throw ValidationError("fit_gmm2: non-finite initialization");
  std::vector<double> sorted(draws.begin(), draws.end());
  std::sort(sorted.begin(), sorted.end());
  const double range = sorted.back() - sorted.front();
  if (!(range > 0.0)) throw ValidationError("fit_gmm2: all draws identical");
  const double sd0 = std::max(sample_sd(draws), 1e-3 * range);
  std::vector<double> data(draws.begin(), draws.end());

  const double init_sd =
      std::max(0.25 * std::abs(init_m2 - init_m1), 1e-3 * range);
  GmmRun run = run_gmm_em(data, init_m1, init_m2, init_sd, range);
  if (run.collapsed) {
    const double mean = std::accumulate(data.begin(), data.end(), 0.0) /
                        static_cast<double>(data.size());
    return GmmFit{{0.5, 0.5}, {mean, mean}, {sd0, sd0},
                  -std::numeric_limits<double>::infinity(), false};
  }
  GmmFit out = run.fit;
  if (out.means[0] > out.means[1]) {
    std::swap(out.means[0], out.means[1]);
    std::swap(out.sds[0], out.sds[1]);
    std::swap(out.weights[0], out.weights[1]);
  }
  return out;
}

CurveEstimate curve_bands(const PosteriorDraws& draws, const Dataset& data,
                          std::span<const double> grid, std::uint64_t seed) {
  if (draws.size() == 0) throw ValidationError("curve_bands: no posterior draws");
  if (data.x.size() != data.y.size() || data.x.empty())
    throw ValidationError("curve_bands: invalid dataset");
  if (grid.empty()) throw ValidationError("curve_bands: empty grid");

  Eigen::Map<const Eigen::VectorXd> ymap(data.y.data(),
                                         static_cast<Eigen::Index>(data.y.size()));
  const double data_mean = ymap.mean();
  PredictiveSampler sampler(data.x, ymap.array() - data_mean, draws.theta_star,
                            {grid.begin(), grid.end()});

  const Eigen::Index q = static_cast<Eigen::Index>(grid.size());
  std::vector<Eigen::VectorXd> paths;
  paths.reserve(draws.size());
  Rng rng(derive_seed(seed, "curve"));
  Eigen::VectorXd z(q);
  std::size_t skipped = 0;
  for (std::size_t d = 0; d < draws.size(); ++d) {
    // Draw the innovations first so skipping a draw does not shift the
    // stream for later draws.
    for (Eigen::Index i = 0; i < q; ++i) z(i) = rng.normal();
    try {
      const PredictiveSampler::Conditional& c = sampler.at(draws.t[d]);
      const double sd_scale = std::sqrt(draws.sigma_sq[d]);
      paths.push_back(c.mean + sd_scale * (c.chol * z));
    } catch (const DgpError&) {
      ++skipped;
    }
  }
  if (paths.empty() ||
      static_cast<double>(skipped) > 0.01 * static_cast<double>(draws.size()))
    throw DgpError("curve_bands: more than 1% of draws failed to factorize");

  CurveEstimate out;
  out.grid.assign(grid.begin(), grid.end());
  out.skipped = skipped;
  out.mean.resize(grid.size());
  out.lower.resize(grid.size());
  out.upper.resize(grid.size());
  std::vector<double> column(paths.size());
  for (Eigen::Index i = 0; i < q; ++i) {
    double sum = 0.0;
    for (std::size_t p = 0; p < paths.size(); ++p) {
      column[p] = paths[p](i) + data_mean;
      sum += column[p];
    }
    const auto iu = static_cast<std::size_t>(i);
    out.mean[iu] = sum / static_cast<double>(paths.size());
    out.lower[iu] = quantile(column, 0.025);
    out.upper[iu] = quantile(column, 0.975);
  }
  return out;
}

}  // namespace dgp
