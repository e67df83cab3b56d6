#include "dgp/runner.hpp"

#include <Eigen/Core>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "dgp/csv.hpp"
#include "dgp/summarize.hpp"

namespace dgp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DgpError("cannot write " + path.string());
  out << content;
}

void write_json(const fs::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

json versions_json() {
  return json{{"artifact", kArtifactVersion},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                            std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

json jitter_ladder_json() {
  json ladder = json::array();
  for (double j : kJitterLadder) ladder.push_back(j);
  return ladder;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream stream(s);
  while (std::getline(stream, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("cannot parse " + what + " '" + s + "'");
  }
}

TPrior parse_prior(const std::string& text, double a, double b) {
  TPrior prior;
  prior.a = a;
  prior.b = b;
  if (text == "uniform") {
    prior.kind = TPriorKind::uniform;
  } else if (text.rfind("beta:", 0) == 0) {
    const auto shapes = split_list(text.substr(5), ',');
    if (shapes.size() != 2)
      throw ValidationError("prior '" + text + "': expected beta:alpha,beta");
    prior.kind = TPriorKind::beta;
    prior.alpha = parse_double(shapes[0], "beta shape");
    prior.beta = parse_double(shapes[1], "beta shape");
  } else {
    throw ValidationError("unknown prior '" + text + "'");
  }
  validate(prior);
  return prior;
}

// mode grammar: single | multiple:<interior breaks> | oracle[:<points>]
void apply_mode(McemConfig& mcem, const std::string& text, double a, double b) {
  mcem.sub_intervals.clear();
  mcem.oracle_t.clear();
  if (text == "single") {
    mcem.mode = McemMode::single;
    return;
  }
  if (text == "oracle" || text == "oracle:") {
    mcem.mode = McemMode::oracle;
    return;
  }
  if (text.rfind("multiple:", 0) == 0) {
    mcem.mode = McemMode::multiple;
    std::vector<double> breaks;
    for (const std::string& s : split_list(text.substr(9), ','))
      breaks.push_back(parse_double(s, "break point"));
    if (breaks.empty()) throw ValidationError("multiple mode needs break points");
    std::vector<double> edges{a};
    for (double v : breaks) {
      if (!(v > edges.back() && v < b))
        throw ValidationError("break points must be ascending inside the interval");
      edges.push_back(v);
    }
    edges.push_back(b);
    for (std::size_t i = 0; i + 1 < edges.size(); ++i)
      mcem.sub_intervals.emplace_back(edges[i], edges[i + 1]);
    return;
  }
  if (text.rfind("oracle:", 0) == 0) {
    mcem.mode = McemMode::oracle;
    for (const std::string& s : split_list(text.substr(7), ','))
      mcem.oracle_t.push_back(parse_double(s, "oracle point"));
    return;
  }
  throw ValidationError("unknown mode '" + text + "'");
}

std::string draws_csv(const PosteriorDraws& draws) {
  std::string out;
  const std::size_t m = draws.t.empty() ? 0 : draws.t.front().size();
  for (std::size_t k = 0; k < m; ++k) out += "t" + std::to_string(k + 1) + ",";
  out += "sigma_sq\n";
  for (std::size_t d = 0; d < draws.size(); ++d) {
    for (std::size_t k = 0; k < m; ++k) out += fmt(draws.t[d][k]) + ",";
    out += fmt(draws.sigma_sq[d]) + "\n";
  }
  return out;
}

json hpd_json(const HpdRegion& region) {
  json segments = json::array();
  for (const auto& [lo, hi] : region.segments) segments.push_back({lo, hi});
  return json{{"alpha", region.alpha},     {"threshold", region.threshold},
              {"segments", segments},      {"modes", region.modes},
              {"mass", region.mass},       {"m_hat", region.count()}};
}

json gmm_json(const GmmFit& fit) {
  return json{{"weights", fit.weights}, {"means", fit.means},
              {"sds", fit.sds},         {"loglik", fit.loglik},
              {"converged", fit.converged}};
}

std::string curve_csv(const CurveEstimate& curve) {
  std::string out = "x,mean,lower,upper\n";
  for (std::size_t i = 0; i < curve.grid.size(); ++i)
    out += fmt(curve.grid[i]) + "," + fmt(curve.mean[i]) + "," +
           fmt(curve.lower[i]) + "," + fmt(curve.upper[i]) + "\n";
  return out;
}

json theta_json(const Theta& theta) {
  return json{{"tau0", theta.tau0}, {"h", theta.h}};
}

json fit_meta(const PosteriorDraws& draws) {
  return json{{"seed", draws.meta.seed},
              {"theta_star", theta_json(draws.theta_star)},
              {"acceptance_rate", draws.meta.acceptance_rate},
              {"mh_attempts", draws.meta.mh_attempts},
              {"proposal_failures", draws.meta.proposal_failures},
              {"converged", draws.meta.converged},
              {"mstep_budget_hit", draws.meta.mstep_budget_hit},
              {"iterations", draws.meta.iterations},
              {"data_mean", draws.meta.data_mean}};
}

std::vector<double> curve_grid(const std::vector<double>& x, int points = 100) {
  std::vector<double> grid(static_cast<std::size_t>(points));
  const double lo = x.front(), hi = x.back();
  for (int i = 0; i < points; ++i)
    grid[static_cast<std::size_t>(i)] =
        lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  return grid;
}

struct Interval {
  double a, b;
};

Interval resolve_interval(const RunConfig& cfg, const std::vector<double>& x) {
  Interval iv{x.front(), x.back()};
  if (cfg.have_interval) {
    iv = {cfg.interval_a, cfg.interval_b};
    if (!(iv.a < iv.b)) throw ValidationError("interval must satisfy a < b");
    if (iv.a < x.front() || iv.b > x.back())
      throw ValidationError("interval must lie within the data range");
  }
  return iv;
}

}  // namespace

void apply_json_config(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what(), 0);
  }

  if (j.contains("task")) {
    const std::string t = j["task"];
    if (t == "fit") cfg.task = Task::fit;
    else if (t == "simstudy") cfg.task = Task::simstudy;
    else if (t == "multisubject") cfg.task = Task::multisubject;
    else throw ValidationError("config: unknown task '" + t + "'");
  }
  if (j.contains("data")) cfg.data_path = j["data"];
  if (j.contains("out")) cfg.out_dir = j["out"];
  if (j.contains("interval")) {
    const auto& iv = j["interval"];
    if (!iv.is_array() || iv.size() != 2)
      throw ValidationError("config: interval must be [a, b]");
    cfg.have_interval = true;
    cfg.interval_a = iv[0];
    cfg.interval_b = iv[1];
  }
  if (j.contains("prior")) cfg.prior = j["prior"];
  if (j.contains("mode")) cfg.mode = j["mode"];
  if (j.contains("seed")) cfg.seed = j["seed"];
  if (j.contains("threads")) cfg.threads = j["threads"];
  if (j.contains("replicates")) cfg.replicates = j["replicates"];
  if (j.contains("n")) cfg.n = j["n"];
  if (j.contains("sigma")) cfg.sigma = j["sigma"];
  if (j.contains("methods")) cfg.methods = j["methods"];
  if (j.contains("group_col")) cfg.group_col = j["group_col"];
  if (j.contains("emit")) {
    const auto& e = j["emit"];
    if (e.contains("draws")) cfg.emit_draws = e["draws"];
    if (e.contains("hpd")) cfg.emit_hpd = e["hpd"];
    if (e.contains("gmm")) cfg.emit_gmm = e["gmm"];
    if (e.contains("curves")) cfg.emit_curves = e["curves"];
  }
  if (j.contains("mcem")) {
    const auto& m = j["mcem"];
    if (m.contains("chain_length")) cfg.mcem.chain_length = m["chain_length"];
    if (m.contains("mstep_sample")) cfg.mcem.mstep_sample = m["mstep_sample"];
    if (m.contains("tol")) cfg.mcem.tol = m["tol"];
    if (m.contains("a_sigma")) cfg.mcem.a_sigma = m["a_sigma"];
    if (m.contains("b_sigma")) cfg.mcem.b_sigma = m["b_sigma"];
    if (m.contains("max_iter")) cfg.mcem.max_iter = m["max_iter"];
    if (m.contains("final_draws")) cfg.mcem.final_draws = m["final_draws"];
    if (m.contains("burn_in")) cfg.mcem.burn_in = m["burn_in"];
    if (m.contains("thin")) cfg.mcem.thin = m["thin"];
    if (m.contains("init_tau0")) cfg.mcem.init_tau0 = m["init_tau0"];
    if (m.contains("init_h")) cfg.mcem.init_h = m["init_h"];
    if (m.contains("mstep_max_evals")) cfg.mcem.mstep_max_evals = m["mstep_max_evals"];
  }
}

int run_fit(const RunConfig& cfg) {
  if (cfg.data_path.empty() || cfg.out_dir.empty())
    throw ValidationError("fit: --data and --out are required");
  const SubjectTable table = ingest_csv(cfg.data_path);
  if (table.subjects.size() != 1)
    throw ValidationError("fit expects a single-subject table; use multisubject");
  const Dataset data = table.dataset(0);
  const Interval iv = resolve_interval(cfg, data.x);

  McemConfig mcem = cfg.mcem;
  mcem.seed = cfg.seed;
  mcem.t_prior = parse_prior(cfg.prior, iv.a, iv.b);
  apply_mode(mcem, cfg.mode, iv.a, iv.b);
  validate(mcem);

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  json meta{{"task", "fit"},
            {"status", "failed"},
            {"data", cfg.data_path},
            {"subject", table.subjects[0].id},
            {"interval", {iv.a, iv.b}},
            {"prior", cfg.prior},
            {"mode", cfg.mode},
            {"seed", cfg.seed},
            {"jitter_ladder", jitter_ladder_json()},
            {"versions", versions_json()}};
  try {
    const PosteriorDraws draws = run_mcem(mcem, data);
    const CurveEstimate curve =
        curve_bands(draws, data, curve_grid(data.x), mcem.seed);

    std::vector<std::string> flags;
    if (!draws.meta.converged) flags.push_back("not_converged");
    if (draws.meta.mstep_budget_hit) flags.push_back("mstep_budget_hit");
    if (curve.skipped > 0) flags.push_back("curve_draws_skipped");

    if (cfg.emit_draws) write_text(out / "draws.csv", draws_csv(draws));
    if (cfg.emit_curves) write_text(out / "curve.csv", curve_csv(curve));
    const bool has_t = !draws.t.empty() && !draws.t.front().empty();
    if (has_t) {
      const std::vector<double> pooled = draws.t_pooled();
      if (cfg.emit_hpd) {
        const KdeResult density = kde(pooled, iv.a, iv.b);
        write_json(out / "hpd.json", hpd_json(hpd(density, pooled, 0.05)));
      }
      if (cfg.emit_gmm) write_json(out / "gmm.json", gmm_json(fit_gmm2(pooled)));
    }

    meta.merge_patch(fit_meta(draws));
    meta["curve_skipped"] = curve.skipped;
    meta["has_t_draws"] = has_t;
    meta["flags"] = flags;
    meta["status"] = flags.empty() ? "ok" : "flagged";
    write_json(out / "meta.json", meta);
    return flags.empty() ? 0 : 2;
  } catch (const std::exception& e) {
    meta["error"] = e.what();
    write_json(out / "meta.json", meta);
    throw;
  }
}

namespace {

json method_report_json(const MethodReport& mr) {
  json j{{"method", method_name(mr.method)},
         {"replicates_used", mr.replicates_used},
         {"failures", mr.failures},
         {"rmse_curve", mr.rmse_curve},
         {"mean_rmse", mr.mean_rmse},
         {"band_width_at_one", mr.band_width_at_one},
         {"converged_frac", mr.converged_frac},
         {"has_t", mr.has_t}};
  if (mr.has_t) {
    j["rmse_t1"] = mr.rmse_t1;
    j["rmse_t2"] = mr.rmse_t2;
    j["missing_t1"] = mr.missing_t1;
    j["missing_t2"] = mr.missing_t2;
    j["m_hist"] = mr.m_hist;
    j["frac_m2"] = mr.frac_m2;
    j["avg_hpd1"] = {mr.avg_hpd1.first, mr.avg_hpd1.second};
    j["avg_hpd2"] = {mr.avg_hpd2.first, mr.avg_hpd2.second};
    j["endpoint_excluded_frac"] = mr.endpoint_excluded_frac;
  }
  return j;
}

}  // namespace

int run_simstudy(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw ValidationError("simstudy: --out is required");
  SyntheticSpec spec;
  spec.n = cfg.n;
  spec.sigma = cfg.sigma;
  spec.replicates = cfg.replicates;
  spec.seed = cfg.seed;
  spec.mcem = cfg.mcem;
  validate(spec);
  std::vector<Method> methods;
  for (const std::string& name : split_list(cfg.methods, ',')) {
    const auto m = parse_method(name);
    if (!m) throw ValidationError("unknown method '" + name + "'");
    methods.push_back(*m);
  }
  if (methods.empty()) throw ValidationError("simstudy: no methods given");

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  json meta{{"task", "simstudy"},   {"status", "failed"},
            {"replicates", spec.replicates}, {"n", spec.n},
            {"sigma", spec.sigma},  {"seed", spec.seed},
            {"methods", cfg.methods},
            {"jitter_ladder", jitter_ladder_json()},
            {"versions", versions_json()}};
  try {
    const RmseReport report = run_replicates(spec, methods, cfg.threads);

    json rj{{"t1_true", kTrueT1},
            {"t2_true", kTrueT2},
            {"test_grid", report.test_grid},
            {"methods", json::array()}};
    std::string curves = "method,x,rmse\n";
    std::string summary =
        "method,replicates_used,failures,mean_rmse,band_width_at_one,"
        "converged_frac,rmse_t1,rmse_t2,frac_m2\n";
    bool flagged = false;
    for (const MethodReport& mr : report.methods) {
      rj["methods"].push_back(method_report_json(mr));
      for (std::size_t i = 0; i < report.test_grid.size(); ++i)
        curves += method_name(mr.method) + "," + fmt(report.test_grid[i]) + "," +
                  fmt(mr.rmse_curve[i]) + "\n";
      summary += method_name(mr.method) + "," + std::to_string(mr.replicates_used) +
                 "," + std::to_string(mr.failures) + "," + fmt(mr.mean_rmse) + "," +
                 fmt(mr.band_width_at_one) + "," + fmt(mr.converged_frac) + "," +
                 (mr.has_t ? fmt(mr.rmse_t1) : "") + "," +
                 (mr.has_t ? fmt(mr.rmse_t2) : "") + "," +
                 (mr.has_t ? fmt(mr.frac_m2) : "") + "\n";
      if (mr.failures > 0 || mr.converged_frac < 1.0) flagged = true;
    }
    write_json(out / "report.json", rj);
    write_text(out / "rmse_curves.csv", curves);
    write_text(out / "summary.csv", summary);

    meta["status"] = flagged ? "flagged" : "ok";
    write_json(out / "meta.json", meta);
    return flagged ? 2 : 0;
  } catch (const std::exception& e) {
    meta["error"] = e.what();
    write_json(out / "meta.json", meta);
    throw;
  }
}

int run_multisubject(const RunConfig& cfg) {
  if (cfg.data_path.empty() || cfg.out_dir.empty())
    throw ValidationError("multisubject: --data and --out are required");
  if (cfg.group_col != "group" && cfg.group_col != "condition" && cfg.group_col != "none")
    throw ValidationError("group-col must be group, condition, or none");
  const SubjectTable table = ingest_csv(cfg.data_path);
  const Interval iv = resolve_interval(cfg, table.x);
  {
    std::map<std::string, int> ids;
    for (const SubjectColumn& s : table.subjects)
      if (++ids[s.id] > 1)
        throw ValidationError("duplicate subject id '" + s.id + "'");
  }

  // Pool subjects by the chosen label, preserving first-seen order.
  std::vector<std::string> group_order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t s = 0; s < table.subjects.size(); ++s) {
    std::string key;
    if (cfg.group_col == "group") key = table.subjects[s].group;
    else if (cfg.group_col == "condition") key = table.subjects[s].condition;
    if (key.empty()) key = "all";
    if (!groups.count(key)) group_order.push_back(key);
    groups[key].push_back(s);
  }

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  json meta{{"task", "multisubject"},
            {"status", "failed"},
            {"data", cfg.data_path},
            {"interval", {iv.a, iv.b}},
            {"prior", cfg.prior},
            {"group_col", cfg.group_col},
            {"seed", cfg.seed},
            {"subjects", table.subjects.size()},
            {"jitter_ladder", jitter_ladder_json()},
            {"versions", versions_json()}};
  try {
    json gmm_subjects = json::object();
    json gmm_groups = json::object();
    json meta_groups = json::object();
    bool flagged = false;

    for (const std::string& gname : group_order) {
      const std::vector<std::size_t>& members = groups[gname];
      std::vector<Dataset> data;
      data.reserve(members.size());
      for (std::size_t s : members) data.push_back(table.dataset(s));

      McemConfig mcem = cfg.mcem;
      mcem.seed = derive_seed(cfg.seed, gname);
      mcem.t_prior = parse_prior(cfg.prior, iv.a, iv.b);
      apply_mode(mcem, cfg.mode, iv.a, iv.b);
      const auto [a_sig, b_sig] = ig_prior_from_pooled(data);
      mcem.a_sigma = a_sig;
      mcem.b_sigma = b_sig;
      mcem.threads = cfg.threads;
      validate(mcem);

      const PooledResult result = run_mcem_pooled(mcem, data);
      if (!result.state.converged) flagged = true;

      std::array<double, 2> mean_sum{0.0, 0.0}, sd_sum{0.0, 0.0};
      int gmm_count = 0;
      std::vector<double> group_pooled;
      for (std::size_t k = 0; k < members.size(); ++k) {
        const SubjectColumn& col = table.subjects[members[k]];
        const PosteriorDraws& draws = result.subjects[k];
        const fs::path sdir = out / "subjects" / col.id;
        fs::create_directories(sdir);

        if (cfg.emit_draws) write_text(sdir / "draws.csv", draws_csv(draws));
        if (cfg.emit_curves) {
          const CurveEstimate curve =
              curve_bands(draws, data[k], curve_grid(table.x), mcem.seed);
          write_text(sdir / "curve.csv", curve_csv(curve));
          if (curve.skipped > 0) flagged = true;
        }
        const std::vector<double> pooled = draws.t_pooled();
        if (cfg.emit_gmm)
          group_pooled.insert(group_pooled.end(), pooled.begin(), pooled.end());
        if (cfg.emit_hpd) {
          const KdeResult density = kde(pooled, iv.a, iv.b);
          write_json(sdir / "hpd.json", hpd_json(hpd(density, pooled, 0.05)));
        }
        if (cfg.emit_gmm) {
          const GmmFit fit = fit_gmm2(pooled);
          json sj = gmm_json(fit);
          sj["group"] = gname;
          gmm_subjects[col.id] = sj;
          if (fit.converged) {
            for (int c = 0; c < 2; ++c) {
              mean_sum[static_cast<std::size_t>(c)] += fit.means[static_cast<std::size_t>(c)];
              sd_sum[static_cast<std::size_t>(c)] += fit.sds[static_cast<std::size_t>(c)];
            }
            ++gmm_count;
          } else {
            flagged = true;
          }
        }
      }
      if (cfg.emit_gmm && gmm_count > 0) {
        const double n = static_cast<double>(gmm_count);
        // Primary group summary: one mixture over the pooled draws of every
        // subject in the group. The per-subject averages are kept alongside;
        // they are noisier because each subject's fit sees only its own draws.
        const GmmFit pooled_fit = fit_gmm2(group_pooled);
        gmm_groups[gname] = json{
            {"subjects", gmm_count},
            {"pooled_means", {pooled_fit.means[0], pooled_fit.means[1]}},
            {"pooled_sds", {pooled_fit.sds[0], pooled_fit.sds[1]}},
            {"pooled_weights", {pooled_fit.weights[0], pooled_fit.weights[1]}},
            {"pooled_converged", pooled_fit.converged},
            {"mean_means", {mean_sum[0] / n, mean_sum[1] / n}},
            {"mean_sds", {sd_sum[0] / n, sd_sum[1] / n}},
            {"sd_averaging", "arithmetic mean of per-subject component sds"}};
        if (!pooled_fit.converged) flagged = true;
      }
      meta_groups[gname] =
          json{{"subjects", members.size()},
               {"theta_star", theta_json(result.theta_star)},
               {"iterations", result.state.iteration},
               {"converged", result.state.converged},
               {"mean_acceptance_rate", result.state.accept_rate},
               {"a_sigma", a_sig},
               {"b_sigma", b_sig},
               {"seed", mcem.seed}};
    }

    if (cfg.emit_gmm)
      write_json(out / "gmm.json",
                 json{{"subjects", gmm_subjects}, {"groups", gmm_groups}});
    meta["groups"] = meta_groups;
    meta["status"] = flagged ? "flagged" : "ok";
    write_json(out / "meta.json", meta);
    return flagged ? 2 : 0;
  } catch (const std::exception& e) {
    meta["error"] = e.what();
    write_json(out / "meta.json", meta);
    throw;
  }
}

int run_task(const RunConfig& cfg) {
  switch (cfg.task) {
    case Task::fit: return run_fit(cfg);
    case Task::simstudy: return run_simstudy(cfg);
    case Task::multisubject: return run_multisubject(cfg);
  }
  throw ValidationError("unknown task");
}

}  // namespace dgp
