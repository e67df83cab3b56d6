#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dgp/mcem.hpp"
#include "dgp/simstudy.hpp"
#include "dgp/summarize.hpp"
#include "oracles.hpp"

using dgp::Dataset;
using dgp::McemConfig;
using dgp::McemMode;
using dgp::Theta;
using dgp::TPrior;
using dgp::TPriorKind;

namespace {

// Dense unit-variance constrained Gram + I via explicit inverses, mirroring
// the reference construction used in the dgp tests.
Eigen::MatrixXd ref_marginal_a(const std::vector<double>& x,
                               const std::vector<double>& t, const Theta& th) {
  const Eigen::Index n = static_cast<Eigen::Index>(x.size());
  const Eigen::Index m = static_cast<Eigen::Index>(t.size());
  const double h_sq = th.h * th.h;
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      k(i, j) = oracles::ref_se(x[i], x[j], 1.0, th.h);
  if (m > 0) {
    Eigen::MatrixXd k01(n, m), k11(m, m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j) {
        const double d = x[i] - t[j];
        k01(i, j) = std::exp(-0.5 * d * d / h_sq) * d / h_sq;
      }
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j) {
        const double d = t[i] - t[j];
        k11(i, j) = std::exp(-0.5 * d * d / h_sq) * (1.0 - d * d / h_sq) / h_sq;
      }
    k -= k01 * k11.inverse() * k01.transpose();
  }
  Eigen::MatrixXd a = th.tau0 * th.tau0 * k;
  a.diagonal().array() += 1.0;
  return a;
}

// y ~ N(0, sigma^2 A(t_gen)) under the generating parameters.
std::vector<double> draw_dgp_observations(const std::vector<double>& x,
                                          const std::vector<double>& t_gen,
                                          const Theta& th, double sigma_sq,
                                          dgp::Rng& rng) {
  const Eigen::MatrixXd cov = sigma_sq * ref_marginal_a(x, t_gen, th);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  Eigen::VectorXd z(cov.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
  const Eigen::VectorXd y = llt.matrixL() * z;
  return {y.data(), y.data() + y.size()};
}

Dataset small_smooth_dataset(int n, std::uint64_t seed) {
  dgp::Rng rng(seed);
  Dataset d;
  for (int i = 0; i < n; ++i) d.x.push_back(rng.uniform(0.0, 2.0));
  std::sort(d.x.begin(), d.x.end());
  for (double x : d.x) d.y.push_back(dgp::f_true(x) + rng.normal(0.0, 0.25));
  return d;
}

McemConfig quick_config() {
  McemConfig cfg;
  cfg.chain_length = 120;
  cfg.mstep_sample = 30;
  cfg.max_iter = 5;
  cfg.final_draws = 150;
  cfg.burn_in = 60;
  cfg.thin = 2;
  cfg.mstep_max_evals = 80;
  cfg.seed = 77;
  return cfg;
}

}  // namespace

TEST_CASE("TPrior uniform and beta densities") {
  TPrior uni{TPriorKind::uniform, 0.0, 2.0};
  CHECK(uni.log_pdf(1.3) == doctest::Approx(-std::log(2.0)));
  CHECK(uni.log_pdf(0.0) == -std::numeric_limits<double>::infinity());
  CHECK(uni.log_pdf(2.5) == -std::numeric_limits<double>::infinity());

  TPrior beta{TPriorKind::beta, 0.0, 2.0, 3.0, 3.0};
  CHECK(beta.log_pdf(0.6) == doctest::Approx(beta.log_pdf(1.4)).epsilon(1e-12));
  CHECK(beta.log_pdf(-0.1) == -std::numeric_limits<double>::infinity());

  // The density integrates to one over the domain.
  const int cells = 20000;
  double integral = 0.0;
  for (int i = 0; i < cells; ++i) {
    const double lo = 2.0 * i / cells, hi = 2.0 * (i + 1) / cells;
    const double mid = 0.5 * (lo + hi);
    integral += (hi - lo) * std::exp(beta.log_pdf(mid));
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("TPrior sampling matches the target distribution") {
  dgp::Rng rng(101);
  TPrior uni{TPriorKind::uniform, 0.5, 2.5};
  std::vector<double> draws;
  for (int i = 0; i < 5000; ++i) draws.push_back(uni.sample(rng));
  const double ks = oracles::ks_statistic(
      draws, [](double t) { return std::clamp((t - 0.5) / 2.0, 0.0, 1.0); });
  CHECK(ks <= 1.63 / std::sqrt(5000.0));

  TPrior beta{TPriorKind::beta, 0.0, 2.0, 3.0, 3.0};
  std::vector<double> bd;
  for (int i = 0; i < 20000; ++i) bd.push_back(beta.sample(rng));
  for (double d : bd) CHECK((d > 0.0 && d < 2.0));
  CHECK(oracles::sample_mean(bd) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("TPrior and McemConfig validation") {
  CHECK_THROWS_AS(dgp::validate(TPrior{TPriorKind::uniform, 1.0, 1.0}),
                  dgp::ValidationError);
  CHECK_THROWS_AS(dgp::validate(TPrior{TPriorKind::beta, 0.0, 1.0, 0.0, 3.0}),
                  dgp::ValidationError);

  McemConfig cfg;
  cfg.mstep_sample = cfg.chain_length;  // J must stay below D
  CHECK_THROWS_AS(dgp::validate(cfg), dgp::ValidationError);

  McemConfig overlap;
  overlap.mode = McemMode::multiple;
  overlap.sub_intervals = {{0.0, 1.2}, {1.0, 2.0}};
  CHECK_THROWS_AS(dgp::validate(overlap), dgp::ValidationError);
  overlap.sub_intervals = {{0.0, 1.0}, {1.0, 2.0}};
  CHECK_NOTHROW(dgp::validate(overlap));

  McemConfig stray;
  stray.sub_intervals = {{0.0, 1.0}};  // only valid in multiple mode
  CHECK_THROWS_AS(dgp::validate(stray), dgp::ValidationError);

  McemConfig stray_oracle;
  stray_oracle.oracle_t = {0.5};
  CHECK_THROWS_AS(dgp::validate(stray_oracle), dgp::ValidationError);

  McemConfig bad_tol;
  bad_tol.tol = 0.0;
  CHECK_THROWS_AS(dgp::validate(bad_tol), dgp::ValidationError);
}

TEST_CASE("mh_step_t accepts every proposal under a flat likelihood") {
  const Dataset d = small_smooth_dataset(10, 301);
  Eigen::Map<const Eigen::VectorXd> y(d.y.data(), 10);
  dgp::MarginalEvaluator eval(d.x, y.array() - y.mean());
  eval.set_theta(Theta{1e-8, 0.5});  // likelihood flat in t
  const TPrior prior{TPriorKind::uniform, 0.0, 2.0};
  dgp::Rng rng(401);
  double t = 1.0;
  int accepted = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto res = dgp::mh_step_t(eval, t, 1.0, prior, rng);
    if (res.accepted) ++accepted;
    CHECK_FALSE(res.eval_failed);
    t = res.t;
  }
  CHECK(accepted >= 9990);
}

TEST_CASE("gibbs_sigma_sq full conditional with zero observations") {
  std::vector<double> x;
  for (int i = 0; i < 50; ++i) x.push_back(2.0 * i / 49.0);
  dgp::MarginalEvaluator eval(x, Eigen::VectorXd::Zero(50));
  eval.set_theta(Theta{1.5, 0.5});
  const std::vector<double> t = {1.0};
  // y = 0 makes the scale collapse to b_sigma; shape is n/2 + a_sigma = 25.5.
  dgp::Rng rng(501);
  std::vector<double> draws;
  for (int i = 0; i < 20000; ++i)
    draws.push_back(dgp::gibbs_sigma_sq(eval, t, 0.5, 0.5, rng));
  const double mean = oracles::sample_mean(draws);
  const double se = oracles::sample_sd(draws) / std::sqrt(20000.0);
  CHECK(std::abs(mean - 0.5 / 24.5) <= 3.0 * se);
}

TEST_CASE("gibbs_sigma_sq matches the inverse-gamma moment oracle") {
  const Dataset d = small_smooth_dataset(10, 303);
  Eigen::Map<const Eigen::VectorXd> ymap(d.y.data(), 10);
  const Eigen::VectorXd yc = ymap.array() - ymap.mean();
  dgp::MarginalEvaluator eval(d.x, yc);
  eval.set_theta(Theta{1.2, 0.6});
  const std::vector<double> t = {0.8};
  const auto f = eval.factor(t);
  const double shape = 5.0 + 0.5;
  const double scale = 0.5 * f.quad_form + 0.5;

  dgp::Rng rng(503);
  std::vector<double> draws;
  for (int i = 0; i < 30000; ++i)
    draws.push_back(dgp::gibbs_sigma_sq(eval, t, 0.5, 0.5, rng));
  const double mean = oracles::sample_mean(draws);
  const double se = oracles::sample_sd(draws) / std::sqrt(30000.0);
  CHECK(std::abs(mean - scale / (shape - 1.0)) <= 3.0 * se);
}

TEST_CASE("e-step produces exactly D paired draws") {
  McemConfig cfg = quick_config();
  cfg.chain_length = 100;
  cfg.mstep_sample = 10;
  cfg.t_prior = {TPriorKind::uniform, 0.0, 2.0};
  dgp::Mcem runner(cfg, small_smooth_dataset(12, 305));
  dgp::Rng rng(601);
  const auto draws = runner.run_e_step(rng);
  CHECK(draws.t.size() == 100);
  CHECK(draws.sigma_sq.size() == 100);
  for (double s : draws.sigma_sq) CHECK(s > 0.0);
}

TEST_CASE("iteration-1 draws follow the uniform prior") {
  McemConfig cfg = quick_config();
  cfg.chain_length = 10000;
  cfg.mstep_sample = 100;
  cfg.t_prior = {TPriorKind::uniform, 0.0, 2.0};
  Dataset d;
  d.x = {0.0, 0.5, 1.0, 1.5, 2.0};
  d.y = {0.1, -0.2, 0.3, 0.0, -0.1};
  dgp::Mcem runner(cfg, d);
  dgp::Rng rng(603);
  const auto draws = runner.run_e_step(rng);
  std::vector<double> t;
  for (const auto& v : draws.t) t.push_back(v[0]);
  const double ks = oracles::ks_statistic(
      t, [](double u) { return std::clamp(u / 2.0, 0.0, 1.0); });
  CHECK(ks <= 1.63 / std::sqrt(10000.0));
}

TEST_CASE("e-step is deterministic in the rng seed") {
  McemConfig cfg = quick_config();
  const Dataset d = small_smooth_dataset(12, 307);
  dgp::Mcem a(cfg, d), b(cfg, d);
  dgp::Rng ra(605), rb(605);
  const auto da = a.run_e_step(ra);
  const auto db = b.run_e_step(rb);
  CHECK(da.t == db.t);
  CHECK(da.sigma_sq == db.sigma_sq);
}

TEST_CASE("m_step matches a dense grid-search oracle on a subsample average") {
  dgp::Rng rng(701);
  std::vector<double> x;
  for (int i = 0; i < 25; ++i) x.push_back(rng.uniform(0.0, 2.0));
  std::sort(x.begin(), x.end());
  std::vector<double> y;
  for (double xi : x) y.push_back(dgp::f_true(xi) + 0.15 * rng.normal());
  Eigen::Map<const Eigen::VectorXd> ymap(y.data(), 25);
  const Eigen::VectorXd yc = ymap.array() - ymap.mean();

  // A plausible E-step subsample: constraints near both stationary regions,
  // noise values near the truth.
  const std::vector<std::vector<double>> t_sub = {{0.5},  {0.45}, {0.42},
                                                  {1.4},  {1.5},  {0.48}};
  const std::vector<double> s_sub = {0.02, 0.025, 0.03, 0.022, 0.028, 0.021};

  // Both the optimizer and the oracle search the same box.
  dgp::ThetaBounds bounds;
  bounds.log_tau0_lo = -1.2;
  bounds.log_tau0_hi = 2.5;
  bounds.log_h_lo = -1.9;
  bounds.log_h_hi = 0.5;

  auto oracle_q = [&](double log_tau0, double log_h) {
    const Theta th{std::exp(log_tau0), std::exp(log_h)};
    double q = 0.0;
    for (std::size_t j = 0; j < t_sub.size(); ++j)
      q += oracles::dense_mvn_logpdf(yc, s_sub[j] * ref_marginal_a(x, t_sub[j], th));
    return q / static_cast<double>(t_sub.size());
  };
  const auto [gu, gv] = oracles::grid_argmax_2d(oracle_q, -1.2, 2.5, -1.9, 0.5, 0.01);
  // The oracle surface must peak strictly inside the box for the comparison
  // to be meaningful.
  REQUIRE(gu > -1.1);
  REQUIRE(gu < 2.4);
  REQUIRE(gv > -1.8);
  REQUIRE(gv < 0.4);

  dgp::MarginalEvaluator eval(x, yc);
  const auto res = dgp::m_step(eval, t_sub, s_sub, Theta{1.0, 0.5}, bounds, 200);
  const double lu = std::log(res.theta.tau0);
  const double lv = std::log(res.theta.h);
  CHECK(std::abs(lu - gu) <= 0.05);
  CHECK(std::abs(lv - gv) <= 0.05);
  // The optimizer must do at least as well as the dense grid, up to the grid
  // resolution itself.
  CHECK(oracle_q(lu, lv) >= oracle_q(gu, gv) - 0.01);
  CHECK(res.q_value == doctest::Approx(oracle_q(lu, lv)).epsilon(1e-9));
}

TEST_CASE("m_step never degrades the objective below the warm start") {
  const Dataset d = small_smooth_dataset(15, 309);
  Eigen::Map<const Eigen::VectorXd> ymap(d.y.data(), 15);
  const Eigen::VectorXd yc = ymap.array() - ymap.mean();
  dgp::MarginalEvaluator eval(d.x, yc);

  dgp::Rng rng(703);
  std::vector<std::vector<double>> t_sub;
  std::vector<double> s_sub;
  for (int j = 0; j < 5; ++j) {
    t_sub.push_back({rng.uniform(0.1, 1.9)});
    s_sub.push_back(rng.uniform(0.05, 0.5));
  }
  dgp::ThetaBounds bounds;
  bounds.log_h_lo = std::log(0.02);
  bounds.log_h_hi = std::log(20.0);
  const Theta warm{0.8, 0.7};
  const auto res = dgp::m_step(eval, t_sub, s_sub, warm, bounds, 200);

  eval.set_theta(warm);
  double q_warm = 0.0;
  for (int j = 0; j < 5; ++j) q_warm += eval.loglik(t_sub[j], s_sub[j]);
  q_warm /= 5.0;
  CHECK(res.q_value >= q_warm - 1e-9);
}

TEST_CASE("m_step respects the bounds box") {
  const Dataset d = small_smooth_dataset(15, 311);
  Eigen::Map<const Eigen::VectorXd> ymap(d.y.data(), 15);
  dgp::MarginalEvaluator eval(d.x, ymap.array() - ymap.mean());
  const std::vector<std::vector<double>> t_sub = {{0.8}};
  const std::vector<double> s_sub = {0.2};
  dgp::ThetaBounds bounds;
  bounds.log_tau0_lo = -0.1;
  bounds.log_tau0_hi = 0.1;
  bounds.log_h_lo = std::log(0.45);
  bounds.log_h_hi = std::log(0.55);
  const auto res = dgp::m_step(eval, t_sub, s_sub, Theta{1.0, 0.5}, bounds, 120);
  CHECK(res.theta.tau0 >= std::exp(-0.1) - 1e-12);
  CHECK(res.theta.tau0 <= std::exp(0.1) + 1e-12);
  CHECK(res.theta.h >= 0.45 - 1e-12);
  CHECK(res.theta.h <= 0.55 + 1e-12);
}

TEST_CASE("default tolerance matches the published setting") {
  CHECK(McemConfig{}.tol == 1e-4);
}

TEST_CASE("oracle mode keeps t fixed and skips MH") {
  McemConfig cfg = quick_config();
  cfg.mode = McemMode::oracle;
  cfg.oracle_t = {0.7};
  const auto draws = dgp::run_mcem(cfg, small_smooth_dataset(12, 313));
  CHECK(draws.size() == 150);
  for (const auto& t : draws.t) {
    REQUIRE(t.size() == 1);
    CHECK(t[0] == 0.7);
  }
  CHECK(draws.meta.mh_attempts == 0);
  CHECK(draws.meta.acceptance_rate == 1.0);
}

TEST_CASE("oracle mode with no constraints is plain GP regression") {
  McemConfig cfg = quick_config();
  cfg.mode = McemMode::oracle;
  const auto draws = dgp::run_mcem(cfg, small_smooth_dataset(12, 315));
  for (const auto& t : draws.t) CHECK(t.empty());
  CHECK(draws.meta.mh_attempts == 0);
}

TEST_CASE("run_mcem is deterministic in (seed, config, data)") {
  McemConfig cfg = quick_config();
  cfg.t_prior = {TPriorKind::uniform, 0.0, 2.0};
  const Dataset d = small_smooth_dataset(20, 317);
  const auto a = dgp::run_mcem(cfg, d);
  const auto b = dgp::run_mcem(cfg, d);
  CHECK(a.t == b.t);
  CHECK(a.sigma_sq == b.sigma_sq);
  CHECK(a.theta_star.tau0 == b.theta_star.tau0);
  CHECK(a.theta_star.h == b.theta_star.h);

  McemConfig other = cfg;
  other.seed = 78;
  const auto c = dgp::run_mcem(other, d);
  CHECK(a.sigma_sq != c.sigma_sq);
}

TEST_CASE("beta prior keeps every accepted draw strictly inside the domain") {
  McemConfig cfg = quick_config();
  cfg.chain_length = 150;
  cfg.mstep_sample = 30;
  cfg.max_iter = 3;
  cfg.t_prior = {TPriorKind::beta, 0.0, 2.0, 3.0, 3.0};
  const auto draws = dgp::run_mcem(cfg, small_smooth_dataset(20, 319));
  for (const auto& t : draws.t) {
    REQUIRE(t.size() == 1);
    CHECK(t[0] > 0.0);
    CHECK(t[0] < 2.0);
  }
}

TEST_CASE("multiple mode with one sub-interval reduces to single mode") {
  const Dataset d = small_smooth_dataset(20, 321);
  McemConfig single = quick_config();
  single.t_prior = {TPriorKind::uniform, 0.0, 2.0};

  McemConfig multi = quick_config();
  multi.mode = McemMode::multiple;
  multi.sub_intervals = {{0.0, 2.0}};

  const auto a = dgp::run_mcem(single, d);
  const auto b = dgp::run_mcem_multiple(multi, d);
  CHECK(a.t == b.t);
  CHECK(a.sigma_sq == b.sigma_sq);
  CHECK(a.theta_star.tau0 == b.theta_star.tau0);
  CHECK(a.theta_star.h == b.theta_star.h);
}

TEST_CASE("multiple mode recovers both stationary points of the benchmark") {
  dgp::SyntheticSpec spec;
  spec.seed = 3;
  const Dataset d = dgp::generate_dataset(spec, 0);

  McemConfig cfg;
  cfg.mode = McemMode::multiple;
  cfg.sub_intervals = {{0.0, 1.0}, {1.0, 2.0}};
  cfg.chain_length = 800;
  cfg.mstep_sample = 100;
  cfg.max_iter = 30;
  cfg.final_draws = 1000;
  cfg.burn_in = 400;
  cfg.thin = 1;
  cfg.seed = 2026;
  const auto draws = dgp::run_mcem_multiple(cfg, d);
  const auto t1 = draws.t_column(0);
  const auto t2 = draws.t_column(1);
  CHECK(std::abs(oracles::sample_mean(t1) - dgp::kTrueT1) <= 0.08);
  CHECK(std::abs(oracles::sample_mean(t2) - dgp::kTrueT2) <= 0.08);
}

TEST_CASE("length scale is recovered within a factor of two (median)") {
  // High signal-to-noise regime where the length scale is identifiable from
  // a single realization: tau^2 = tau0^2 sigma^2 = 1 against sigma = 0.1.
  std::vector<double> h_hat;
  for (int rep = 0; rep < 20; ++rep) {
    dgp::Rng rng(dgp::derive_seed(9000, "self-consistency", rep));
    std::vector<double> x;
    for (int i = 0; i < 40; ++i) x.push_back(rng.uniform(0.0, 2.0));
    std::sort(x.begin(), x.end());
    Dataset d;
    d.x = x;
    d.y = draw_dgp_observations(x, {0.7}, Theta{10.0, 0.4}, 0.01, rng);

    McemConfig cfg;
    cfg.chain_length = 150;
    cfg.mstep_sample = 30;
    cfg.max_iter = 12;
    cfg.final_draws = 50;
    cfg.burn_in = 50;
    cfg.thin = 1;
    cfg.mstep_max_evals = 120;
    cfg.t_prior = {TPriorKind::uniform, 0.0, 2.0};
    cfg.seed = dgp::derive_seed(9001, "fit", rep);
    const auto draws = dgp::run_mcem(cfg, d);
    h_hat.push_back(draws.theta_star.h);
  }
  std::sort(h_hat.begin(), h_hat.end());
  const double median = 0.5 * (h_hat[9] + h_hat[10]);
  CHECK(median >= 0.2);
  CHECK(median <= 0.8);
}

TEST_CASE("pooled run with one subject reduces to run_mcem") {
  const Dataset d = small_smooth_dataset(20, 323);
  McemConfig cfg = quick_config();
  cfg.t_prior = {TPriorKind::uniform, 0.0, 2.0};
  const auto solo = dgp::run_mcem(cfg, d);
  const std::vector<Dataset> subjects = {d};
  const auto pooled = dgp::run_mcem_pooled(cfg, subjects);
  REQUIRE(pooled.subjects.size() == 1);
  CHECK(pooled.subjects[0].t == solo.t);
  CHECK(pooled.subjects[0].sigma_sq == solo.sigma_sq);
  CHECK(pooled.theta_star.tau0 == solo.theta_star.tau0);
  CHECK(pooled.theta_star.h == solo.theta_star.h);
}

TEST_CASE("identical subjects get identical posteriors") {
  const Dataset d = small_smooth_dataset(20, 325);
  McemConfig cfg = quick_config();
  cfg.t_prior = {TPriorKind::uniform, 0.0, 2.0};
  const std::vector<Dataset> subjects = {d, d};
  const auto pooled = dgp::run_mcem_pooled(cfg, subjects);
  REQUIRE(pooled.subjects.size() == 2);
  CHECK(pooled.subjects[0].t == pooled.subjects[1].t);
  CHECK(pooled.subjects[0].sigma_sq == pooled.subjects[1].sigma_sq);
}

TEST_CASE("pooled subjects must share the input grid") {
  Dataset a = small_smooth_dataset(12, 327);
  Dataset b = a;
  b.x[3] += 0.01;
  const std::vector<Dataset> subjects = {a, b};
  CHECK_THROWS_AS(dgp::run_mcem_pooled(quick_config(), subjects),
                  dgp::ValidationError);
}

TEST_CASE("pooled fit localizes subject-specific dips") {
  std::vector<double> x;
  for (int i = 0; i <= 30; ++i) x.push_back(80.0 + 2.0 * i);
  const std::vector<double> centers = {100.0, 110.0};
  std::vector<Dataset> subjects;
  dgp::Rng noise(901);
  for (double c : centers) {
    // A parabolic dip: exactly one stationary point in the window, with the
    // slope growing away from it so no flat shoulder competes for mass.
    Dataset d;
    d.x = x;
    for (double xi : x)
      d.y.push_back(3.0 + 0.004 * (xi - c) * (xi - c) + noise.normal(0.0, 0.3));
    subjects.push_back(std::move(d));
  }

  McemConfig cfg;
  cfg.chain_length = 400;
  cfg.mstep_sample = 60;
  cfg.max_iter = 20;
  cfg.final_draws = 800;
  cfg.burn_in = 300;
  cfg.thin = 1;
  cfg.seed = 903;
  cfg.t_prior = {TPriorKind::uniform, 82.0, 138.0};
  const auto pooled = dgp::run_mcem_pooled(cfg, subjects);

  for (std::size_t s = 0; s < 2; ++s) {
    const auto t = pooled.subjects[s].t_column(0);
    const auto density = dgp::kde(t, 82.0, 138.0);
    const auto region = dgp::hpd(density, t, 0.05);
    REQUIRE(!region.modes.empty());
    double best_mode = region.modes[0];
    for (double m : region.modes)
      if (density.value_at(m) > density.value_at(best_mode)) best_mode = m;
    CHECK(std::abs(best_mode - centers[s]) <= 6.0);
  }
}

TEST_CASE("ig_prior_from_pooled moment-matches the detrended residuals") {
  Dataset d;
  d.x = {0.0, 1.0, 2.0, 3.0, 4.0, 5.0};
  d.y = {1.0, -1.0, 1.0, -1.0, 1.0, -1.0};
  const std::vector<Dataset> subjects = {d};
  const auto [a, b] = dgp::ig_prior_from_pooled(subjects);
  CHECK(a == 3.0);
  // Hand-computed window-5 running-mean residuals for the alternating series
  // (windows truncated at the edges): squared residuals (2/3)^2, 1, (4/5)^2,
  // (4/5)^2, 1, (2/3)^2 -> v = (8/9 + 2 + 32/25) / 6 = 469/675.
  const double v = 469.0 / 675.0;
  CHECK(b == doctest::Approx(2.0 * v).epsilon(1e-9));
  // Shape 3 with scale 2v gives an IG with mean = sd = v.
  CHECK(b / (a - 1.0) == doctest::Approx(v).epsilon(1e-9));

  Dataset flat;
  flat.x = {0.0, 1.0, 2.0};
  flat.y = {1.0, 1.0, 1.0};
  const std::vector<Dataset> degenerate = {flat};
  CHECK_THROWS_AS(dgp::ig_prior_from_pooled(degenerate), dgp::ValidationError);
  CHECK_THROWS_AS(dgp::ig_prior_from_pooled(std::vector<Dataset>{}),
                  dgp::ValidationError);
}

TEST_CASE("separation failures are rejected and counted") {
  Dataset d;
  for (int i = 0; i < 10; ++i) {
    d.x.push_back(i / 9.0);
    d.y.push_back(std::sin(3.0 * d.x.back()) + 0.1 * ((i % 2) ? 1.0 : -1.0));
  }
  McemConfig cfg;
  cfg.mode = McemMode::multiple;
  // Two hairline sub-intervals around 0.5: with h pinned at 1 the separation
  // floor is 1e-3, so roughly half of all proposal pairs are too close.
  cfg.sub_intervals = {{0.499, 0.5}, {0.5, 0.501}};
  cfg.bounds.log_h_lo = 0.0;
  cfg.bounds.log_h_hi = 0.0;
  cfg.init_h = 1.0;
  cfg.chain_length = 100;
  cfg.mstep_sample = 20;
  cfg.max_iter = 1;
  cfg.final_draws = 60;
  cfg.burn_in = 40;
  cfg.thin = 1;
  cfg.seed = 905;
  const auto draws = dgp::run_mcem_multiple(cfg, d);
  CHECK(draws.size() == 60);
  CHECK(draws.meta.proposal_failures > 0);
  for (const auto& t : draws.t) CHECK(t[1] - t[0] >= 1e-3);
}

TEST_CASE("an unsatisfiable constraint geometry aborts with a diagnostic") {
  Dataset d;
  for (int i = 0; i < 10; ++i) {
    d.x.push_back(i / 9.0);
    d.y.push_back(std::cos(2.0 * d.x.back()));
  }
  McemConfig cfg;
  cfg.mode = McemMode::multiple;
  // Maximum separation 2e-4 can never reach the 1e-3 floor at h = 1.
  cfg.sub_intervals = {{0.4999, 0.5}, {0.5, 0.5001}};
  cfg.bounds.log_h_lo = 0.0;
  cfg.bounds.log_h_hi = 0.0;
  cfg.init_h = 1.0;
  cfg.chain_length = 50;
  cfg.mstep_sample = 10;
  cfg.seed = 907;
  CHECK_THROWS_AS(dgp::run_mcem_multiple(cfg, d), dgp::DgpError);
}
