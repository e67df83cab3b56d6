#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dgp/dgp.hpp"
#include "dgp/random.hpp"

namespace dgp {

enum class TPriorKind { uniform, beta };

// Prior on a scalar stationary point over [a, b]. The beta kind applies
// Beta(alpha, beta) shapes to (t - a) / (b - a).
struct TPrior {
  TPriorKind kind = TPriorKind::uniform;
  double a = 0.0;
  double b = 1.0;
  double alpha = 3.0;
  double beta = 3.0;

  double log_pdf(double t) const;
  double sample(Rng& rng) const;
};

void validate(const TPrior& prior);

enum class McemMode { single, multiple, oracle };

struct ThetaBounds {
  double log_tau0_lo = -5.0;
  double log_tau0_hi = 5.0;
  // Length-scale box defaults to [0.01 range(x), 10 range(x)], filled in at
  // run time when left unset.
  std::optional<double> log_h_lo;
  std::optional<double> log_h_hi;
};

struct McemConfig {
  int chain_length = 2000;   // D, E-step draws per iteration
  int mstep_sample = 200;    // J, M-step subsample size
  double tol = 1e-4;         // EM stop on ||theta(i+1) - theta(i)||
  double a_sigma = 0.5;
  double b_sigma = 0.5;
  TPrior t_prior;
  McemMode mode = McemMode::single;
  // multiple mode: disjoint ascending proposal intervals, one per coordinate.
  std::vector<std::pair<double, double>> sub_intervals;
  // oracle mode: fixed constraint locations; empty means unconstrained GPR.
  std::vector<double> oracle_t;
  int max_iter = 100;
  ThetaBounds bounds;
  int final_draws = 4000;
  int burn_in = 1000;
  int thin = 2;
  std::uint64_t seed = 1;
  double init_tau0 = 1.0;
  double init_h = 0.0;       // <= 0: range(x) / 4
  int mstep_max_evals = 200; // per optimizer phase
  int threads = 1;           // pooled runs only
};

void validate(const McemConfig& cfg);

struct McemMetadata {
  McemConfig config;  // echo of the run configuration
  std::uint64_t seed = 0;
  double acceptance_rate = 1.0;  // final chain; 1 when no MH proposals are made
  long mh_attempts = 0;
  long proposal_failures = 0;    // likelihood or separation failures, counted as rejections
  bool converged = false;
  bool mstep_budget_hit = false;
  int iterations = 0;
  double data_mean = 0.0;
};

struct PosteriorDraws {
  std::vector<std::vector<double>> t;  // one constraint vector per draw
  std::vector<double> sigma_sq;
  Theta theta_star;
  McemMetadata meta;

  std::size_t size() const { return sigma_sq.size(); }
  // Draws of coordinate k.
  std::vector<double> t_column(std::size_t k) const;
  // All coordinates stacked into one sample.
  std::vector<double> t_pooled() const;
};

struct McemState {
  Theta theta_hat;
  int iteration = 0;
  std::vector<double> last_t;
  double last_sigma_sq = 1.0;
  std::vector<Theta> theta_trace;
  double accept_rate = 1.0;
  bool converged = false;
};

struct EStepDraws {
  std::vector<std::vector<double>> t;
  std::vector<double> sigma_sq;
};

struct MhStepResult {
  double t = 0.0;
  bool accepted = false;
  bool eval_failed = false;
};

// One independence Metropolis-Hastings step for a scalar stationary point:
// the proposal is uniform on the prior domain, accepted with probability
// min(1, p(y|t*) pi(t*) / (p(y|t) pi(t))) computed in log space. A failed
// likelihood evaluation at the proposal counts as a rejection.
MhStepResult mh_step_t(MarginalEvaluator& eval, double current_t, double sigma_sq,
                       const TPrior& prior, Rng& rng);

// Draw from the sigma^2 full conditional IG(n/2 + a_sigma,
// y^T A(t)^-1 y / 2 + b_sigma).
double gibbs_sigma_sq(MarginalEvaluator& eval, std::span<const double> t,
                      double a_sigma, double b_sigma, Rng& rng);

struct MStepResult {
  Theta theta;
  double q_value = 0.0;       // subsample-averaged log marginal likelihood at theta
  bool budget_exhausted = false;
};

// Maximizes the subsample average of log p(y | t_j, sigma_j^2, theta) over
// (log tau0, log h) inside the bounds box, warm-started at theta_current.
// Derivative-free simplex search with one restart from a perturbed point.
MStepResult m_step(MarginalEvaluator& eval,
                   std::span<const std::vector<double>> t_sub,
                   std::span<const double> sigma_sq_sub, const Theta& theta_current,
                   const ThetaBounds& bounds, int max_evals_per_phase = 200);

struct PooledResult;

// Single-dataset Monte Carlo EM (single, multiple, and oracle modes; oracle
// with an empty constraint set is plain GP regression).
class Mcem {
 public:
  Mcem(McemConfig cfg, const Dataset& data);

  // One E-step at the current theta-hat. Iteration 1 draws t directly from
  // the prior with a Gibbs sigma^2 at each step; later iterations alternate
  // MH and Gibbs from the previous final chain position.
  EStepDraws run_e_step(Rng& rng);

  Theta run_m_step(const EStepDraws& draws, Rng& rng);

  // Full Algorithm: EM to convergence (or max_iter), then a final chain of
  // burn_in + final_draws * thin steps at theta-star, thinned.
  PosteriorDraws run();

  const McemState& state() const { return state_; }
  const McemConfig& config() const { return cfg_; }
  double data_mean() const { return data_mean_; }
  MarginalEvaluator& evaluator() { return eval_; }

 private:
  friend PooledResult run_mcem_pooled(const McemConfig& cfg,
                                      std::span<const Dataset> data);

  void chain_step(Rng& rng);
  void prior_step(Rng& rng);
  void refresh_factor();
  EStepDraws collect(int steps, Rng& rng, bool from_prior);
  PosteriorDraws run_final_chain();

  McemConfig cfg_;
  double data_mean_ = 0.0;
  MarginalEvaluator eval_;
  McemState state_;
  ThetaBounds bounds_;
  // proposal interval and prior term per coordinate
  std::vector<std::pair<double, double>> coord_intervals_;
  bool use_t_prior_pdf_ = false;
  MarginalEvaluator::TFactor tf_;  // factor at (theta, last_t); refresh after theta moves
  long mh_attempts_ = 0;
  long mh_accepts_ = 0;
  long eval_failures_ = 0;
  bool mstep_budget_hit_ = false;
};

PosteriorDraws run_mcem(const McemConfig& cfg, const Dataset& data,
                        McemState* state_out = nullptr);
PosteriorDraws run_mcem_multiple(const McemConfig& cfg, const Dataset& data,
                                 McemState* state_out = nullptr);

struct PooledResult {
  std::vector<PosteriorDraws> subjects;
  Theta theta_star;
  McemState state;
};

// Multi-subject variant: subjects share the input grid and the kernel
// hyperparameters; each subject carries its own (t, sigma^2) chain. The
// M-step maximizes the sum of per-subject subsample averages.
PooledResult run_mcem_pooled(const McemConfig& cfg, std::span<const Dataset> data);

// Weakly informative IG prior moment-matched to the pooled residual variance
// of a centered running-mean detrend (window 5): mean = sd = pooled variance.
std::pair<double, double> ig_prior_from_pooled(std::span<const Dataset> data);

}  // namespace dgp
