#include <CLI11.hpp>
#include <iostream>
#include <string>

#include "dgp/runner.hpp"

namespace {

// The config file must be applied before flag parsing so that flags given on
// the command line override file values.
std::string find_config(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

void parse_interval(const std::string& text, dgp::RunConfig& cfg) {
  if (text.empty()) return;
  const auto comma = text.find(',');
  if (comma == std::string::npos)
    throw dgp::ValidationError("--interval expects a,b");
  try {
    cfg.interval_a = std::stod(text.substr(0, comma));
    cfg.interval_b = std::stod(text.substr(comma + 1));
  } catch (const std::exception&) {
    throw dgp::ValidationError("--interval expects numeric a,b");
  }
  cfg.have_interval = true;
}

}  // namespace

int main(int argc, char** argv) {
  dgp::RunConfig cfg;
  try {
    const std::string config_path = find_config(argc, argv);
    if (!config_path.empty()) dgp::apply_json_config(cfg, config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"Stationary-point inference for noisy curves via "
               "derivative-constrained Gaussian processes"};
  app.require_subcommand(0, 1);
  std::string config_path_echo;
  app.add_option("--config", config_path_echo, "JSON config file mirroring the flags");

  std::string interval_text;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", cfg.out_dir, "Output directory");
    sub->add_option("--seed", cfg.seed, "Master RNG seed");
    sub->add_option("--threads", cfg.threads, "Worker threads (0 = hardware)");
    sub->add_option("--config", config_path_echo, "JSON config file (already applied)");
    sub->add_option("--chain-length", cfg.mcem.chain_length, "E-step draws per iteration");
    sub->add_option("--mstep-sample", cfg.mcem.mstep_sample, "M-step subsample size");
    sub->add_option("--tol", cfg.mcem.tol, "EM convergence tolerance");
    sub->add_option("--max-iter", cfg.mcem.max_iter, "EM iteration cap");
    sub->add_option("--final-draws", cfg.mcem.final_draws, "Posterior draws kept");
    sub->add_option("--burn-in", cfg.mcem.burn_in, "Final chain burn-in");
    sub->add_option("--thin", cfg.mcem.thin, "Final chain thinning");
    sub->add_option("--a-sigma", cfg.mcem.a_sigma, "IG prior shape");
    sub->add_option("--b-sigma", cfg.mcem.b_sigma, "IG prior scale");
    sub->add_option("--init-tau0", cfg.mcem.init_tau0, "Initial tau0");
    sub->add_option("--init-h", cfg.mcem.init_h, "Initial length scale (<= 0: range/4)");
  };

  CLI::App* fit = app.add_subcommand("fit", "Fit a single observed series");
  fit->add_option("--data", cfg.data_path, "Input CSV (x plus one subject column)");
  fit->add_option("--interval", interval_text, "Analysis interval a,b");
  fit->add_option("--prior", cfg.prior, "uniform | beta:A,B");
  fit->add_option("--mode", cfg.mode, "single | multiple:<breaks> | oracle[:<points>]");
  fit->add_flag_callback("--no-draws", [&] { cfg.emit_draws = false; });
  fit->add_flag_callback("--no-hpd", [&] { cfg.emit_hpd = false; });
  fit->add_flag_callback("--no-gmm", [&] { cfg.emit_gmm = false; });
  fit->add_flag_callback("--no-curves", [&] { cfg.emit_curves = false; });
  add_common(fit);

  CLI::App* sim = app.add_subcommand("simstudy", "Synthetic benchmark study");
  sim->add_option("--replicates", cfg.replicates, "Replicate count");
  sim->add_option("--n", cfg.n, "Observations per replicate");
  sim->add_option("--sigma", cfg.sigma, "Noise standard deviation");
  sim->add_option("--methods", cfg.methods, "Comma list: gpr,single,multiple,oracle");
  add_common(sim);

  CLI::App* multi = app.add_subcommand("multisubject", "Pooled multi-subject fit");
  multi->add_option("--data", cfg.data_path, "Input CSV (x plus subject columns)");
  multi->add_option("--group-col", cfg.group_col, "Pooling label: group | condition | none");
  multi->add_option("--interval", interval_text, "Analysis interval a,b");
  multi->add_option("--prior", cfg.prior, "uniform | beta:A,B");
  multi->add_option("--mode", cfg.mode, "single | multiple:<breaks> | oracle[:<points>]");
  add_common(multi);

  CLI11_PARSE(app, argc, argv);

  if (fit->parsed()) cfg.task = dgp::Task::fit;
  else if (sim->parsed()) cfg.task = dgp::Task::simstudy;
  else if (multi->parsed()) cfg.task = dgp::Task::multisubject;
  else if (config_path_echo.empty() && find_config(argc, argv).empty()) {
    std::cerr << app.help();
    return 1;
  }

  try {
    parse_interval(interval_text, cfg);
    return dgp::run_task(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
