#include "dgp/mcem.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>

#include "dgp/parallel.hpp"

namespace dgp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double lbeta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

}  // namespace

double TPrior::log_pdf(double t) const {
  if (!(t > a && t < b)) return -kInf;
  if (kind == TPriorKind::uniform) return -std::log(b - a);
  const double u = (t - a) / (b - a);
  return (alpha - 1.0) * std::log(u) + (beta - 1.0) * std::log1p(-u) -
         lbeta(alpha, beta) - std::log(b - a);
}

double TPrior::sample(Rng& rng) const {
  if (kind == TPriorKind::uniform) return rng.uniform(a, b);
  const double g1 = rng.gamma(alpha);
  const double g2 = rng.gamma(beta);
  return a + (b - a) * g1 / (g1 + g2);
}

void validate(const TPrior& prior) {
  if (!std::isfinite(prior.a) || !std::isfinite(prior.b) || !(prior.a < prior.b))
    throw ValidationError("t prior: domain must satisfy a < b");
  if (prior.kind == TPriorKind::beta &&
      (!(prior.alpha > 0.0) || !(prior.beta > 0.0)))
    throw ValidationError("t prior: beta shapes must be positive");
}

void validate(const McemConfig& cfg) {
  if (cfg.mstep_sample < 1 || cfg.mstep_sample >= cfg.chain_length)
    throw ValidationError("mcem config: need 1 <= J < D");
  if (!(cfg.tol > 0.0)) throw ValidationError("mcem config: tol must be positive");
  if (!(cfg.a_sigma > 0.0) || !(cfg.b_sigma > 0.0))
    throw ValidationError("mcem config: IG prior parameters must be positive");
  if (cfg.max_iter < 1) throw ValidationError("mcem config: max_iter must be >= 1");
  if (cfg.final_draws < 1 || cfg.burn_in < 0 || cfg.thin < 1)
    throw ValidationError("mcem config: invalid final chain sizes");
  if (!(cfg.init_tau0 > 0.0)) throw ValidationError("mcem config: init_tau0 must be positive");
  validate(cfg.t_prior);
  if (cfg.mode == McemMode::multiple) {
    if (cfg.sub_intervals.empty())
      throw ValidationError("mcem config: multiple mode needs sub-intervals");
    for (std::size_t k = 0; k < cfg.sub_intervals.size(); ++k) {
      const auto& [lo, hi] = cfg.sub_intervals[k];
      if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi))
        throw ValidationError("mcem config: bad sub-interval");
      if (k > 0 && lo < cfg.sub_intervals[k - 1].second)
        throw ValidationError("mcem config: sub-intervals must be disjoint and ordered");
    }
  } else if (!cfg.sub_intervals.empty()) {
    throw ValidationError("mcem config: sub-intervals only valid in multiple mode");
  }
  if (cfg.mode == McemMode::oracle) {
    for (double t : cfg.oracle_t)
      if (!std::isfinite(t)) throw ValidationError("mcem config: non-finite oracle point");
  } else if (!cfg.oracle_t.empty()) {
    throw ValidationError("mcem config: oracle points only valid in oracle mode");
  }
}

std::vector<double> PosteriorDraws::t_column(std::size_t k) const {
  std::vector<double> out;
  out.reserve(t.size());
  for (const auto& v : t) {
    if (k >= v.size()) throw ValidationError("t_column: coordinate out of range");
    out.push_back(v[k]);
  }
  return out;
}

std::vector<double> PosteriorDraws::t_pooled() const {
  std::vector<double> out;
  for (const auto& v : t) out.insert(out.end(), v.begin(), v.end());
  return out;
}

MhStepResult mh_step_t(MarginalEvaluator& eval, double current_t, double sigma_sq,
                       const TPrior& prior, Rng& rng) {
  const double proposal = rng.uniform(prior.a, prior.b);
  const std::array<double, 1> prop{proposal};
  const std::array<double, 1> cur{current_t};
  MhStepResult out{current_t, false, false};
  double log_ratio;
  try {
    const double ll_prop = eval.loglik(prop, sigma_sq);
    const double ll_cur = eval.loglik(cur, sigma_sq);
    log_ratio = ll_prop + prior.log_pdf(proposal) - ll_cur - prior.log_pdf(current_t);
  } catch (const DgpError&) {
    out.eval_failed = true;
    return out;
  }
  if (std::log(rng.uniform01()) < log_ratio) {
    out.t = proposal;
    out.accepted = true;
  }
  return out;
}

double gibbs_sigma_sq(MarginalEvaluator& eval, std::span<const double> t,
                      double a_sigma, double b_sigma, Rng& rng) {
  const auto f = eval.factor(t);
  const double shape = 0.5 * static_cast<double>(eval.n()) + a_sigma;
  const double scale = 0.5 * f.quad_form + b_sigma;
  return rng.inverse_gamma(shape, scale);
}

// ---------------------------------------------------------------------------
// M-step machinery

namespace {

// Subsample with duplicate constraint vectors grouped so each unique vector
// is factored once per objective evaluation.
struct MStepProblem {
  MarginalEvaluator* eval = nullptr;
  std::vector<std::vector<double>> unique_t;
  std::vector<std::size_t> group;
  std::vector<double> sigma_sq;
};

MStepProblem make_problem(MarginalEvaluator& eval,
                          std::span<const std::vector<double>> t_sub,
                          std::span<const double> sigma_sq_sub) {
  if (t_sub.size() != sigma_sq_sub.size() || t_sub.empty())
    throw ValidationError("m_step: empty or mismatched subsample");
  MStepProblem p;
  p.eval = &eval;
  p.sigma_sq.assign(sigma_sq_sub.begin(), sigma_sq_sub.end());
  std::map<std::vector<double>, std::size_t> seen;
  for (const auto& t : t_sub) {
    auto [it, inserted] = seen.try_emplace(t, p.unique_t.size());
    if (inserted) p.unique_t.push_back(t);
    p.group.push_back(it->second);
  }
  return p;
}

// Negative of the summed per-problem subsample averages; +inf when any
// factorization fails under the candidate theta.
double neg_q(std::span<MStepProblem> problems, const Theta& theta, int threads) {
  std::vector<double> partial(problems.size(), 0.0);
  std::vector<char> failed(problems.size(), 0);
  parallel_for(problems.size(), threads, [&](std::size_t s) {
    MStepProblem& p = problems[s];
    p.eval->set_theta(theta);
    std::vector<MarginalEvaluator::TFactor> factors;
    factors.reserve(p.unique_t.size());
    try {
      for (const auto& t : p.unique_t) factors.push_back(p.eval->factor(t));
      double sum = 0.0;
      for (std::size_t j = 0; j < p.sigma_sq.size(); ++j)
        sum += p.eval->loglik(factors[p.group[j]], p.sigma_sq[j]);
      partial[s] = sum / static_cast<double>(p.sigma_sq.size());
    } catch (const DgpError&) {
      failed[s] = 1;
    }
  });
  double total = 0.0;
  for (std::size_t s = 0; s < problems.size(); ++s) {
    if (failed[s]) return kInf;
    total += partial[s];
  }
  return -total;
}

struct Box2 {
  std::array<double, 2> lo, hi;
  std::array<double, 2> clamp(std::array<double, 2> v) const {
    for (int i = 0; i < 2; ++i) v[i] = std::min(std::max(v[i], lo[i]), hi[i]);
    return v;
  }
};

struct NmOutcome {
  std::array<double, 2> x{};
  double f = kInf;
  bool converged = false;
};

// Nelder-Mead on two variables with vertices clamped to the box.
template <typename F>
NmOutcome nelder_mead_2d(F&& objective, std::array<double, 2> x0, double step,
                         const Box2& box, int max_evals, double x_tol) {
  struct Vertex {
    std::array<double, 2> x;
    double f;
  };
  std::array<Vertex, 3> simplex;
  int evals = 0;
  auto eval_at = [&](std::array<double, 2> v) {
    ++evals;
    return objective(v[0], v[1]);
  };

  simplex[0] = {box.clamp(x0), 0.0};
  simplex[0].f = eval_at(simplex[0].x);
  for (int i = 0; i < 2; ++i) {
    auto v = simplex[0].x;
    v[i] = (v[i] + step <= box.hi[i]) ? v[i] + step : v[i] - step;
    simplex[i + 1] = {box.clamp(v), 0.0};
    simplex[i + 1].f = eval_at(simplex[i + 1].x);
  }

  NmOutcome out;
  while (evals < max_evals) {
    std::sort(simplex.begin(), simplex.end(),
              [](const Vertex& a, const Vertex& b) { return a.f < b.f; });
    const double spread = std::max(
        std::max(std::abs(simplex[1].x[0] - simplex[0].x[0]),
                 std::abs(simplex[2].x[0] - simplex[0].x[0])),
        std::max(std::abs(simplex[1].x[1] - simplex[0].x[1]),
                 std::abs(simplex[2].x[1] - simplex[0].x[1])));
    if (spread < x_tol) {
      out.converged = true;
      break;
    }
    const std::array<double, 2> centroid{(simplex[0].x[0] + simplex[1].x[0]) / 2.0,
                                         (simplex[0].x[1] + simplex[1].x[1]) / 2.0};
    auto blend = [&](double coef) {
      std::array<double, 2> v{centroid[0] + coef * (simplex[2].x[0] - centroid[0]),
                              centroid[1] + coef * (simplex[2].x[1] - centroid[1])};
      return box.clamp(v);
    };
    const auto xr = blend(-1.0);
    const double fr = eval_at(xr);
    if (fr < simplex[0].f) {
      const auto xe = blend(-2.0);
      const double fe = eval_at(xe);
      simplex[2] = fe < fr ? Vertex{xe, fe} : Vertex{xr, fr};
    } else if (fr < simplex[1].f) {
      simplex[2] = {xr, fr};
    } else {
      const auto xc = blend(fr < simplex[2].f ? -0.5 : 0.5);
      const double fc = eval_at(xc);
      if (fc < std::min(fr, simplex[2].f)) {
        simplex[2] = {xc, fc};
      } else {
        for (int i = 1; i < 3; ++i) {
          for (int k = 0; k < 2; ++k)
            simplex[i].x[k] = simplex[0].x[k] + 0.5 * (simplex[i].x[k] - simplex[0].x[k]);
          simplex[i].f = eval_at(simplex[i].x);
        }
      }
    }
  }
  std::sort(simplex.begin(), simplex.end(),
            [](const Vertex& a, const Vertex& b) { return a.f < b.f; });
  out.x = simplex[0].x;
  out.f = simplex[0].f;
  return out;
}

Box2 resolve_box(const ThetaBounds& bounds) {
  if (!bounds.log_h_lo || !bounds.log_h_hi)
    throw ValidationError("m_step: length-scale bounds not resolved");
  return Box2{{bounds.log_tau0_lo, *bounds.log_h_lo},
              {bounds.log_tau0_hi, *bounds.log_h_hi}};
}

MStepResult optimize_theta(std::span<MStepProblem> problems, const Theta& warm,
                           const ThetaBounds& bounds, int max_evals_per_phase,
                           int threads) {
  const Box2 box = resolve_box(bounds);
  auto objective = [&](double log_tau0, double log_h) {
    return neg_q(problems, Theta{std::exp(log_tau0), std::exp(log_h)}, threads);
  };
  const std::array<double, 2> v0 = box.clamp({std::log(warm.tau0), std::log(warm.h)});

  NmOutcome first = nelder_mead_2d(objective, v0, 0.05, box, max_evals_per_phase, 1e-7);
  std::array<double, 2> v1{first.x[0] + 0.1, first.x[1] - 0.1};
  NmOutcome second = nelder_mead_2d(objective, box.clamp(v1), 0.05, box,
                                    max_evals_per_phase, 1e-7);
  const NmOutcome& best = second.f < first.f ? second : first;

  MStepResult out;
  out.budget_exhausted = !first.converged || !second.converged;
  // Never step downhill from the warm start.
  const double f_warm = objective(v0[0], v0[1]);
  if (f_warm <= best.f) {
    out.theta = Theta{std::exp(v0[0]), std::exp(v0[1])};
    out.q_value = -f_warm;
  } else {
    out.theta = Theta{std::exp(best.x[0]), std::exp(best.x[1])};
    out.q_value = -best.f;
  }
  return out;
}

}  // namespace

MStepResult m_step(MarginalEvaluator& eval,
                   std::span<const std::vector<double>> t_sub,
                   std::span<const double> sigma_sq_sub, const Theta& theta_current,
                   const ThetaBounds& bounds, int max_evals_per_phase) {
  MStepProblem p = make_problem(eval, t_sub, sigma_sq_sub);
  return optimize_theta({&p, 1}, theta_current, bounds, max_evals_per_phase, 1);
}

// ---------------------------------------------------------------------------
// Single-dataset MCEM

namespace {

Eigen::VectorXd center(const std::vector<double>& y, double* mean_out) {
  Eigen::Map<const Eigen::VectorXd> m(y.data(), static_cast<Eigen::Index>(y.size()));
  const double mean = m.mean();
  if (mean_out) *mean_out = mean;
  return m.array() - mean;
}

double x_range(const std::vector<double>& x) {
  auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  return *hi - *lo;
}

}  // namespace

Mcem::Mcem(McemConfig cfg, const Dataset& data)
    : cfg_(std::move(cfg)),
      eval_(data.x, center(data.y, &data_mean_)) {
  validate(cfg_);
  if (data.x.size() != data.y.size())
    throw ValidationError("mcem: x and y length mismatch");
  if (data.x.size() < 3) throw ValidationError("mcem: need at least 3 observations");
  for (std::size_t i = 0; i < data.x.size(); ++i)
    if (!std::isfinite(data.x[i]) || !std::isfinite(data.y[i]))
      throw ValidationError("mcem: non-finite data");
  const double range = x_range(data.x);
  if (!(range > 0.0)) throw ValidationError("mcem: degenerate input grid");

  bounds_ = cfg_.bounds;
  if (!bounds_.log_h_lo) bounds_.log_h_lo = std::log(0.01 * range);
  if (!bounds_.log_h_hi) bounds_.log_h_hi = std::log(10.0 * range);

  const double h0 = cfg_.init_h > 0.0 ? cfg_.init_h : range / 4.0;
  state_.theta_hat =
      Theta{std::clamp(cfg_.init_tau0, std::exp(bounds_.log_tau0_lo),
                       std::exp(bounds_.log_tau0_hi)),
            std::clamp(h0, std::exp(*bounds_.log_h_lo), std::exp(*bounds_.log_h_hi))};
  state_.theta_trace.push_back(state_.theta_hat);
  eval_.set_theta(state_.theta_hat);

  switch (cfg_.mode) {
    case McemMode::single:
      coord_intervals_ = {{cfg_.t_prior.a, cfg_.t_prior.b}};
      use_t_prior_pdf_ = true;
      break;
    case McemMode::multiple:
      coord_intervals_ = cfg_.sub_intervals;
      use_t_prior_pdf_ = false;
      break;
    case McemMode::oracle:
      coord_intervals_.clear();
      use_t_prior_pdf_ = false;
      state_.last_t = cfg_.oracle_t;
      break;
  }
}

void Mcem::refresh_factor() { tf_ = eval_.factor(state_.last_t); }

void Mcem::prior_step(Rng& rng) {
  if (cfg_.mode == McemMode::oracle) return;  // t fixed; factor already current
  const int max_attempts = 100;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    std::vector<double> t;
    if (cfg_.mode == McemMode::single) {
      t = {cfg_.t_prior.sample(rng)};
    } else {
      t.reserve(coord_intervals_.size());
      for (const auto& [lo, hi] : coord_intervals_) t.push_back(rng.uniform(lo, hi));
    }
    try {
      tf_ = eval_.factor(t);
    } catch (const DegenerateConstraintError&) {
      continue;
    }
    state_.last_t = std::move(t);
    return;
  }
  throw DgpError("mcem: could not draw valid constraint vector from the prior");
}

void Mcem::chain_step(Rng& rng) {
  const std::size_t m = coord_intervals_.size();
  for (std::size_t k = 0; k < m; ++k) {
    ++mh_attempts_;
    const auto& [lo, hi] = coord_intervals_[k];
    const double proposal = rng.uniform(lo, hi);
    std::vector<double> cand = state_.last_t;
    cand[k] = proposal;
    MarginalEvaluator::TFactor tf_cand;
    try {
      tf_cand = eval_.factor(cand);
    } catch (const DgpError&) {
      ++eval_failures_;
      continue;  // automatic rejection
    }
    double log_ratio = -0.5 * (tf_cand.logdet_a - tf_.logdet_a) -
                       0.5 * (tf_cand.quad_form - tf_.quad_form) / state_.last_sigma_sq;
    if (use_t_prior_pdf_)
      log_ratio += cfg_.t_prior.log_pdf(proposal) - cfg_.t_prior.log_pdf(state_.last_t[k]);
    if (std::log(rng.uniform01()) < log_ratio) {
      state_.last_t = std::move(cand);
      tf_ = tf_cand;
      ++mh_accepts_;
    }
  }
}

EStepDraws Mcem::collect(int steps, Rng& rng, bool from_prior) {
  EStepDraws out;
  out.t.reserve(static_cast<std::size_t>(steps));
  out.sigma_sq.reserve(static_cast<std::size_t>(steps));
  const double shape = 0.5 * static_cast<double>(eval_.n()) + cfg_.a_sigma;
  for (int d = 0; d < steps; ++d) {
    if (from_prior)
      prior_step(rng);
    else
      chain_step(rng);
    state_.last_sigma_sq =
        rng.inverse_gamma(shape, 0.5 * tf_.quad_form + cfg_.b_sigma);
    out.t.push_back(state_.last_t);
    out.sigma_sq.push_back(state_.last_sigma_sq);
  }
  return out;
}

EStepDraws Mcem::run_e_step(Rng& rng) {
  const bool first = state_.iteration == 0;
  if (!first || cfg_.mode == McemMode::oracle) refresh_factor();
  const long attempts_before = mh_attempts_;
  const long failures_before = eval_failures_;
  EStepDraws draws = collect(cfg_.chain_length, rng, first);
  const long attempts = mh_attempts_ - attempts_before;
  const long failures = eval_failures_ - failures_before;
  if (attempts > 0 && failures == attempts)
    throw DgpError("mcem: every MH proposal failed in one E-step iteration");
  if (mh_attempts_ > 0)
    state_.accept_rate =
        static_cast<double>(mh_accepts_) / static_cast<double>(mh_attempts_);
  return draws;
}

Theta Mcem::run_m_step(const EStepDraws& draws, Rng& rng) {
  const std::size_t d = draws.sigma_sq.size();
  const std::size_t j = std::min<std::size_t>(static_cast<std::size_t>(cfg_.mstep_sample), d);
  const auto idx = rng.sample_without_replacement(d, j);
  std::vector<std::vector<double>> t_sub;
  std::vector<double> sigma_sub;
  t_sub.reserve(j);
  sigma_sub.reserve(j);
  for (std::size_t i : idx) {
    t_sub.push_back(draws.t[i]);
    sigma_sub.push_back(draws.sigma_sq[i]);
  }
  MStepResult res = m_step(eval_, t_sub, sigma_sub, state_.theta_hat, bounds_,
                           cfg_.mstep_max_evals);
  mstep_budget_hit_ = mstep_budget_hit_ || res.budget_exhausted;
  return res.theta;
}

PosteriorDraws Mcem::run() {
  for (int i = 1; i <= cfg_.max_iter; ++i) {
    Rng chain_rng(derive_seed(cfg_.seed, "estep-chain"));
    EStepDraws draws = run_e_step(chain_rng);
    Rng sub_rng(derive_seed(cfg_.seed, "estep-sub"));
    const Theta next = run_m_step(draws, sub_rng);
    const double delta = std::hypot(next.tau0 - state_.theta_hat.tau0,
                                    next.h - state_.theta_hat.h);
    state_.theta_hat = next;
    state_.theta_trace.push_back(next);
    eval_.set_theta(next);
    state_.iteration = i;
    if (delta < cfg_.tol) {
      state_.converged = true;
      break;
    }
  }
  return run_final_chain();
}

// Final sampling pass at theta-star.
PosteriorDraws Mcem::run_final_chain() {
  refresh_factor();
  const long attempts_before = mh_attempts_;
  const long accepts_before = mh_accepts_;
  Rng final_rng(derive_seed(cfg_.seed, "final"));
  const int total = cfg_.burn_in + cfg_.final_draws * cfg_.thin;
  EStepDraws chain = collect(total, final_rng, false);

  PosteriorDraws out;
  out.theta_star = state_.theta_hat;
  out.t.reserve(static_cast<std::size_t>(cfg_.final_draws));
  out.sigma_sq.reserve(static_cast<std::size_t>(cfg_.final_draws));
  for (int d = cfg_.burn_in; d < total; d += cfg_.thin) {
    out.t.push_back(chain.t[static_cast<std::size_t>(d)]);
    out.sigma_sq.push_back(chain.sigma_sq[static_cast<std::size_t>(d)]);
  }
  const long final_attempts = mh_attempts_ - attempts_before;
  out.meta.config = cfg_;
  out.meta.seed = cfg_.seed;
  out.meta.mh_attempts = final_attempts;
  out.meta.acceptance_rate =
      final_attempts > 0
          ? static_cast<double>(mh_accepts_ - accepts_before) /
                static_cast<double>(final_attempts)
          : 1.0;
  out.meta.proposal_failures = eval_failures_;
  out.meta.converged = state_.converged;
  out.meta.mstep_budget_hit = mstep_budget_hit_;
  out.meta.iterations = state_.iteration;
  out.meta.data_mean = data_mean_;
  return out;
}

PosteriorDraws run_mcem(const McemConfig& cfg, const Dataset& data,
                        McemState* state_out) {
  Mcem runner(cfg, data);
  PosteriorDraws out = runner.run();
  if (state_out) *state_out = runner.state();
  return out;
}

PosteriorDraws run_mcem_multiple(const McemConfig& cfg, const Dataset& data,
                                 McemState* state_out) {
  if (cfg.mode != McemMode::multiple)
    throw ValidationError("run_mcem_multiple: config mode must be multiple");
  return run_mcem(cfg, data, state_out);
}

// ---------------------------------------------------------------------------
// Pooled multi-subject MCEM

std::pair<double, double> ig_prior_from_pooled(std::span<const Dataset> data) {
  // Residual variance of a window-5 running-mean detrend on centered series.
  double sum_sq = 0.0;
  long count = 0;
  for (const auto& d : data) {
    const Eigen::VectorXd yc = center(d.y, nullptr);
    const Eigen::Index n = yc.size();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index lo = std::max<Eigen::Index>(0, i - 2);
      const Eigen::Index hi = std::min<Eigen::Index>(n - 1, i + 2);
      const double local = yc.segment(lo, hi - lo + 1).mean();
      const double r = yc(i) - local;
      sum_sq += r * r;
      ++count;
    }
  }
  if (count == 0) throw ValidationError("ig_prior_from_pooled: no data");
  const double v = sum_sq / static_cast<double>(count);
  if (!(v > 0.0)) throw ValidationError("ig_prior_from_pooled: zero residual variance");
  // shape 3, scale 2v gives IG mean v and IG standard deviation v.
  return {3.0, 2.0 * v};
}

PooledResult run_mcem_pooled(const McemConfig& cfg, std::span<const Dataset> data) {
  validate(cfg);
  if (data.empty()) throw ValidationError("run_mcem_pooled: no subjects");
  for (std::size_t s = 1; s < data.size(); ++s)
    if (data[s].x != data[0].x)
      throw ValidationError("run_mcem_pooled: subjects must share the input grid");

  const std::size_t n_subjects = data.size();
  std::vector<Mcem> runners;
  runners.reserve(n_subjects);
  for (const auto& d : data) runners.emplace_back(cfg, d);

  Theta theta = runners[0].state_.theta_hat;
  const ThetaBounds bounds = runners[0].bounds_;
  const int threads = cfg.threads;
  bool converged = false;
  bool budget_hit = false;
  int iterations = 0;
  std::vector<Theta> trace{theta};

  std::vector<EStepDraws> draws(n_subjects);
  for (int i = 1; i <= cfg.max_iter; ++i) {
    parallel_for(n_subjects, threads, [&](std::size_t s) {
      Rng chain_rng(derive_seed(cfg.seed, "estep-chain"));
      draws[s] = runners[s].run_e_step(chain_rng);
    });

    std::vector<MStepProblem> problems;
    problems.reserve(n_subjects);
    for (std::size_t s = 0; s < n_subjects; ++s) {
      Rng sub_rng(derive_seed(cfg.seed, "estep-sub"));
      const std::size_t d = draws[s].sigma_sq.size();
      const std::size_t j =
          std::min<std::size_t>(static_cast<std::size_t>(cfg.mstep_sample), d);
      const auto idx = sub_rng.sample_without_replacement(d, j);
      std::vector<std::vector<double>> t_sub;
      std::vector<double> sigma_sub;
      for (std::size_t k : idx) {
        t_sub.push_back(draws[s].t[k]);
        sigma_sub.push_back(draws[s].sigma_sq[k]);
      }
      problems.push_back(make_problem(runners[s].eval_, t_sub, sigma_sub));
    }
    MStepResult res = optimize_theta(problems, theta, bounds, cfg.mstep_max_evals, threads);
    budget_hit = budget_hit || res.budget_exhausted;
    const double delta = std::hypot(res.theta.tau0 - theta.tau0, res.theta.h - theta.h);
    theta = res.theta;
    trace.push_back(theta);
    iterations = i;
    for (auto& r : runners) {
      r.state_.theta_hat = theta;
      r.state_.iteration = i;
      r.eval_.set_theta(theta);
      r.state_.converged = false;
    }
    if (delta < cfg.tol) {
      converged = true;
      break;
    }
  }

  PooledResult out;
  out.theta_star = theta;
  out.subjects.resize(n_subjects);
  parallel_for(n_subjects, threads, [&](std::size_t s) {
    runners[s].state_.converged = converged;
    runners[s].mstep_budget_hit_ = budget_hit;
    out.subjects[s] = runners[s].run_final_chain();
  });

  out.state.theta_hat = theta;
  out.state.iteration = iterations;
  out.state.theta_trace = trace;
  out.state.converged = converged;
  double rate_sum = 0.0;
  for (const auto& s : out.subjects) rate_sum += s.meta.acceptance_rate;
  out.state.accept_rate = rate_sum / static_cast<double>(n_subjects);
  return out;
}

}  // namespace dgp
