#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "freshness/analysis.hpp"
#include "freshness/estimators.hpp"
#include "freshness/io.hpp"
#include "freshness/policy.hpp"
#include "freshness/simulate.hpp"

namespace freshness::cli {

struct CommonOpts {
  std::string chain_path;
  std::string out_path;
  std::string format = "csv";
  std::uint64_t seed = 1;
};

struct EstimatorOpts {
  std::vector<std::string> estimators;
  std::string tau = "auto";
  std::string boundaries = "auto";
  int max_points = -1;
};

namespace detail {

inline Vector resolve_rates(const std::string& mu_text, int n) {
  auto vals = parse_number_list(mu_text);
  if (vals.size() == 1) return Vector::Constant(n, vals[0]);
  if (static_cast<int>(vals.size()) != n)
    throw ParseError("--mu takes one rate or one rate per state");
  Vector rates(n);
  for (int i = 0; i < n; ++i) rates(i) = vals[i];
  return rates;
}

inline std::vector<MapPoints> scan_map_points(const TransitionKernel& kernel) {
  return all_map_points(kernel, default_horizon(kernel),
                        default_grid_step(kernel.chain()));
}

inline EstimatorSpec resolve_spec(const TransitionKernel& kernel,
                                  EstimatorKind kind,
                                  const EstimatorOpts& opts) {
  EstimatorSpec spec;
  spec.kind = kind;
  if (kind == EstimatorKind::TauMap) {
    if (opts.tau == "auto")
      spec.tau = tau_star(scan_map_points(kernel));
    else {
      auto vals = parse_number_list(opts.tau, /*allow_inf=*/true);
      if (vals.size() != 1) throw ParseError("--tau takes a single age");
      spec.tau = vals[0];
    }
  }
  if (kind == EstimatorKind::PMap) {
    if (opts.boundaries == "auto") {
      if (opts.max_points >= 0)
        spec.boundaries =
            boundaries_from_points(scan_map_points(kernel), opts.max_points);
    } else {
      std::istringstream in(opts.boundaries);
      std::string part;
      while (std::getline(in, part, ';'))
        spec.boundaries.push_back(parse_number_list(part, /*allow_inf=*/true));
      if (static_cast<int>(spec.boundaries.size()) != kernel.chain().n_states)
        throw ParseError("--boundaries needs one list per state");
    }
  }
  return spec;
}

inline std::vector<EstimatorKind> resolve_kinds(const EstimatorOpts& opts) {
  std::vector<EstimatorKind> kinds;
  if (opts.estimators.empty()) {
    kinds = {EstimatorKind::Martingale, EstimatorKind::TauMap,
             EstimatorKind::PMap};
  } else {
    for (const auto& name : opts.estimators)
      kinds.push_back(parse_estimator(name));
  }
  return kinds;
}

}  // namespace detail

inline void cmd_validate(const CommonOpts& g, std::ostream& out) {
  Ctmc chain = load_chain(g.chain_path);
  TransitionKernel kernel(chain);
  const SpectrumClass& sc = kernel.spectrum();
  std::ostringstream body;
  if (!chain.label.empty()) body << "label: " << chain.label << '\n';
  body << "states: " << chain.n_states << '\n';
  body << "stationary:";
  for (int i = 0; i < chain.n_states; ++i)
    body << (i ? "," : " ") << format_number(chain.stationary(i));
  body << '\n';
  static const char* kNames[] = {"Reversible", "RealSpectrum",
                                 "ComplexSpectrum"};
  body << "spectrum: " << kNames[static_cast<int>(sc.kind)] << '\n';
  body << "reversible: " << (kernel.reversible() ? "yes" : "no") << '\n';
  if (kernel.reversible())
    body << "d2: " << format_number(kernel.decomposition()->spectral_gap())
         << '\n';
  if (sc.kind == SpectrumKind::ComplexSpectrum)
    body << "max-imag: " << format_number(sc.max_imag) << '\n';
  write_output(g.out_path, body.str(), out);
}

inline void cmd_mbf(const CommonOpts& g, const EstimatorOpts& est,
                    const std::string& mu_text, std::ostream& out) {
  Ctmc chain = load_chain(g.chain_path);
  TransitionKernel kernel(chain);
  Vector rates = detail::resolve_rates(mu_text, chain.n_states);

  OutputTable table;
  table.columns = {"estimator", "mbf", "avg_sampling_rate", "method"};
  for (int i = 0; i < chain.n_states; ++i)
    table.columns.push_back("mu_" + std::to_string(i + 1));
  for (int i = 0; i < chain.n_states; ++i)
    table.columns.push_back("fresh_" + std::to_string(i + 1));

  for (EstimatorKind kind : detail::resolve_kinds(est)) {
    EstimatorSpec spec = detail::resolve_spec(kernel, kind, est);
    MbfReport rep =
        mbf_general(kernel, induced_plan(kernel, spec, rates), rates);
    std::vector<Cell> row{text_cell(estimator_name(kind)), num_cell(rep.mbf),
                          num_cell(rep.avg_sampling_rate),
                          text_cell(rep.method)};
    for (int i = 0; i < chain.n_states; ++i) row.push_back(num_cell(rates(i)));
    for (int i = 0; i < chain.n_states; ++i)
      row.push_back(num_cell(rep.per_state_freshness(i)));
    table.add_row(std::move(row));
  }
  write_output(g.out_path, table.render(g.format), out);
}

inline void cmd_map_points(const CommonOpts& g, double horizon,
                           double grid_step, std::ostream& out,
                           std::ostream& info) {
  Ctmc chain = load_chain(g.chain_path);
  TransitionKernel kernel(chain);
  double h = horizon > 0 ? horizon : default_horizon(kernel);
  double step = grid_step > 0 ? grid_step : default_grid_step(chain);
  auto points = all_map_points(kernel, h, step);

  OutputTable table;
  table.columns = {"state", "k", "time", "from", "to", "truncated"};
  for (const auto& p : points)
    for (size_t k = 0; k < p.times.size(); ++k)
      table.add_row({int_cell(p.state + 1), int_cell(static_cast<long>(k + 1)),
                     num_cell(p.times[k]), int_cell(p.values[k] + 1),
                     int_cell(p.values[k + 1] + 1),
                     int_cell(p.truncated ? 1 : 0)});
  info << "tau-star: " << format_number(tau_star(points)) << '\n';
  write_output(g.out_path, table.render(g.format), out);
}

inline void cmd_simulate(const CommonOpts& g, const EstimatorOpts& est,
                         const std::string& mu_text, long samples, long warmup,
                         int batches, int reps, std::ostream& out) {
  Ctmc chain = load_chain(g.chain_path);
  TransitionKernel kernel(chain);
  Vector rates = detail::resolve_rates(mu_text, chain.n_states);
  SamplingPolicy policy;
  policy.rates = rates;

  SimConfig cfg;
  cfg.seed = g.seed;
  cfg.n_samples = samples;
  cfg.warmup_samples = warmup;
  cfg.n_batches = batches;

  OutputTable table;
  table.columns = {"estimator", "mbf_closed", "mbf_sim",   "std_error",
                   "omega_sim", "n_samples",  "reps"};
  for (EstimatorKind kind : detail::resolve_kinds(est)) {
    EstimatorSpec spec = detail::resolve_spec(kernel, kind, est);
    StagePlan plan = induced_plan(kernel, spec, rates);
    MbfReport closed = mbf_general(kernel, plan, rates);
    SimResult r = reps > 1 ? pool(replicate(chain, plan, policy, cfg, reps))
                           : simulate(chain, plan, policy, cfg);
    table.add_row({text_cell(estimator_name(kind)), num_cell(closed.mbf),
                   num_cell(r.empirical_mbf), num_cell(r.std_error),
                   num_cell(r.empirical_omega), int_cell(r.n_samples),
                   int_cell(reps)});
  }
  write_output(g.out_path, table.render(g.format), out);
}

inline void cmd_optimize(const CommonOpts& g, const EstimatorOpts& est,
                         const std::string& estimator, double budget,
                         const std::string& grid_text, double grid_lo,
                         double grid_hi, int grid_points, double bisect_tol,
                         std::ostream& out, std::ostream& info) {
  Ctmc chain = load_chain(g.chain_path);
  TransitionKernel kernel(chain);
  EstimatorKind kind = parse_estimator(estimator);
  EstimatorSpec spec = detail::resolve_spec(kernel, kind, est);

  std::vector<double> grid;
  if (!grid_text.empty())
    grid = parse_number_list(grid_text);
  else if (grid_lo > 0 && grid_hi > 0)
    grid = geometric_grid(grid_lo, grid_hi, grid_points);

  ConstrainedSolution sol =
      solve_constrained(kernel, spec, budget, grid, bisect_tol);

  for (const auto& [gam, w] : sol.omega_trace)
    info << "gamma=" << format_number(gam) << " omega=" << format_number(w)
         << '\n';
  const char* kind_name = sol.policy.is_simple() ? "simple" : "semi-simple";
  info << "result: " << kind_name << '\n';

  const int s = chain.n_states;
  int rs = sol.policy.randomized_state;
  if (g.format == "json") {
    std::ostringstream body;
    body << "{\n";
    body << "  \"kind\": \"" << kind_name << "\",\n";
    body << "  \"estimator\": \"" << estimator_name(kind) << "\",\n";
    body << "  \"budget\": " << format_number(budget) << ",\n";
    body << "  \"gamma\": " << format_number(sol.gamma) << ",\n";
    body << "  \"policy_epsilon\": " << format_number(sol.policy_epsilon)
         << ",\n";
    body << "  \"mbf\": " << format_number(sol.report.mbf) << ",\n";
    body << "  \"avg_sampling_rate\": "
         << format_number(sol.report.avg_sampling_rate) << ",\n";
    body << "  \"method\": \"" << json_escape(sol.report.method) << "\",\n";
    body << "  \"rates\": [";
    for (int i = 0; i < s; ++i)
      body << (i ? ", " : "") << format_number(sol.policy.rates(i));
    body << "],\n";
    if (!sol.policy.is_simple()) {
      body << "  \"randomized\": {\"state\": " << rs + 1
           << ", \"rate_a\": " << format_number(sol.policy.rates(rs))
           << ", \"rate_b\": " << format_number(sol.policy.other_rate)
           << ", \"p\": " << format_number(sol.policy.prob) << "},\n";
    }
    body << "  \"trace\": [";
    for (size_t k = 0; k < sol.omega_trace.size(); ++k)
      body << (k ? ", " : "") << '[' << format_number(sol.omega_trace[k].first)
           << ", " << format_number(sol.omega_trace[k].second) << ']';
    body << "]\n}\n";
    write_output(g.out_path, body.str(), out);
    return;
  }

  OutputTable table;
  table.columns = {"state", "rate_a", "rate_b", "p",    "mbf",
                   "avg_sampling_rate", "gamma", "kind", "budget"};
  for (int i = 0; i < s; ++i) {
    double rate_b = i == rs ? sol.policy.other_rate : sol.policy.rates(i);
    double p = i == rs ? sol.policy.prob : 1.0;
    table.add_row({int_cell(i + 1), num_cell(sol.policy.rates(i)),
                   num_cell(rate_b), num_cell(p), num_cell(sol.report.mbf),
                   num_cell(sol.report.avg_sampling_rate),
                   num_cell(sol.gamma), text_cell(kind_name),
                   num_cell(budget)});
  }
  write_output(g.out_path, table.render(g.format), out);
}

inline void cmd_sweep_budget(const CommonOpts& g, const EstimatorOpts& est,
                             const std::string& budgets_text, int grid_points,
                             double bisect_tol, std::ostream& out) {
  Ctmc chain = load_chain(g.chain_path);
  TransitionKernel kernel(chain);
  auto budgets = parse_number_list(budgets_text);
  std::sort(budgets.begin(), budgets.end());
  const int s = chain.n_states;

  // Resolve each estimator once so MAP scans are not repeated per budget.
  std::vector<EstimatorKind> kinds = detail::resolve_kinds(est);
  std::vector<EstimatorSpec> specs;
  for (EstimatorKind kind : kinds) {
    EstimatorSpec spec = detail::resolve_spec(kernel, kind, est);
    if (kind == EstimatorKind::PMap && spec.boundaries.empty())
      spec.boundaries = resolved_boundaries(kernel, spec);
    specs.push_back(std::move(spec));
  }

  OutputTable table;
  table.columns = {"budget"};
  for (EstimatorKind kind : kinds) {
    table.columns.push_back("uniform_" + estimator_name(kind));
    table.columns.push_back("optimal_" + estimator_name(kind));
  }
  for (double budget : budgets) {
    std::vector<Cell> row{num_cell(budget)};
    for (size_t e = 0; e < kinds.size(); ++e) {
      MbfReport uniform =
          evaluate_policy(kernel, specs[e], SamplingPolicy::uniform(s, budget));
      auto grid =
          geometric_grid(1e-3 * budget, 10.0 * budget, grid_points);
      ConstrainedSolution sol =
          solve_constrained(kernel, specs[e], budget, grid, bisect_tol);
      row.push_back(num_cell(uniform.mbf));
      row.push_back(num_cell(sol.report.mbf));
    }
    table.add_row(std::move(row));
  }
  write_output(g.out_path, table.render(g.format), out);
}

inline void cmd_sweep_stages(const CommonOpts& g, double mu,
                             const std::string& stages_text,
                             std::ostream& out) {
  Ctmc chain = load_chain(g.chain_path);
  TransitionKernel kernel(chain);
  const int s = chain.n_states;
  Vector rates = Vector::Constant(s, mu);
  auto points = detail::scan_map_points(kernel);

  auto stage_vals = parse_number_list(stages_text);
  std::vector<int> stages;
  for (double v : stage_vals) {
    if (v < 1 || v != std::floor(v))
      throw ParseError("--stages takes positive integers");
    stages.push_back(static_cast<int>(v));
  }
  std::sort(stages.begin(), stages.end());

  // Subsampling draws from the first nine detected points, as available.
  int pool_size = 0;
  for (const auto& p : points)
    pool_size = std::max(pool_size,
                         static_cast<int>(std::min<size_t>(9, p.times.size())));
  auto mbf_for = [&](const std::vector<std::vector<double>>& bounds) {
    return mbf_general(kernel, p_map_plan(kernel, rates, bounds), rates).mbf;
  };
  double reference = mbf_for(boundaries_from_points(points, 9));

  OutputTable table;
  table.columns = {"k", "truncation", "periodic", "reference"};
  for (int k : stages) {
    double trunc = mbf_for(boundaries_from_points(points, k));

    // Smallest stride whose multiples m, 2m, ... within the pool keep
    // exactly k points; the subsample skips the earliest points unless
    // the stride is 1.
    int stride = 0;
    for (int m = 1; m <= pool_size; ++m)
      if (pool_size / m == k) {
        stride = m;
        break;
      }
    double periodic = std::numeric_limits<double>::quiet_NaN();
    if (stride > 0) {
      std::vector<std::vector<double>> bounds(points.size());
      for (size_t i = 0; i < points.size(); ++i) {
        int avail = static_cast<int>(std::min<size_t>(9, points[i].times.size()));
        bounds[i].push_back(0.0);
        for (int idx = stride - 1; idx < avail; idx += stride)
          bounds[i].push_back(points[i].times[idx]);
        bounds[i].push_back(kInf);
      }
      periodic = mbf_for(bounds);
    }
    table.add_row({int_cell(k), num_cell(trunc), num_cell(periodic),
                   num_cell(reference)});
  }
  write_output(g.out_path, table.render(g.format), out);
}

inline int run(const std::vector<std::string>& args, std::ostream& out,
               std::ostream& err) {
  CLI::App app{"freshness of structured estimators over query-sampled chains"};
  app.require_subcommand(1);
  app.fallthrough();

  CommonOpts g;
  app.add_option("--chain", g.chain_path, "chain definition file (json)")
      ->required();
  app.add_option("--out", g.out_path, "output path; default stdout");
  app.add_option("--format", g.format, "csv or json")
      ->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--seed", g.seed, "base seed for simulation");

  EstimatorOpts est;
  std::string mu_text = "1";
  std::string tau_text = "auto";

  auto add_estimator_opts = [&](CLI::App* cmd, bool multi) {
    if (multi)
      cmd->add_option("--estimator", est.estimators,
                      "martingale, tau-map, or p-map; repeatable")
          ->delimiter(',');
    cmd->add_option("--tau", est.tau, "tau-map switch age, a number, inf, or auto");
    cmd->add_option("--boundaries", est.boundaries,
                    "p-map boundaries: auto, or ';'-separated per-state lists");
    cmd->add_option("--max-points", est.max_points,
                    "keep only the first K MAP points for auto boundaries");
  };

  CLI::App* validate = app.add_subcommand("validate", "check a chain file");

  CLI::App* mbf = app.add_subcommand("mbf", "closed-form freshness");
  add_estimator_opts(mbf, true);
  mbf->add_option("--mu", mu_text, "sampling rate, single or per-state list");

  CLI::App* map_points =
      app.add_subcommand("map-points", "MAP estimate transition points");
  double horizon = 0.0, grid_step = 0.0;
  map_points->add_option("--horizon", horizon, "scan horizon; 0 = auto");
  map_points->add_option("--grid-step", grid_step, "scan step; 0 = auto");

  CLI::App* simulate_cmd =
      app.add_subcommand("simulate", "event-driven empirical freshness");
  add_estimator_opts(simulate_cmd, true);
  simulate_cmd->add_option("--mu", mu_text);
  long samples = 100000, warmup = -1;
  int batches = 50, reps = 1;
  simulate_cmd->add_option("--samples", samples, "epochs per run");
  simulate_cmd->add_option("--warmup", warmup, "discarded epochs; -1 = 1%");
  simulate_cmd->add_option("--batches", batches, "batch count for errors");
  simulate_cmd->add_option("--reps", reps, "independent replications");

  CLI::App* optimize =
      app.add_subcommand("optimize", "budgeted rate allocation");
  add_estimator_opts(optimize, false);
  std::string opt_estimator = "martingale";
  std::string grid_text;
  double budget = 0.0, grid_lo = 0.0, grid_hi = 0.0, bisect_tol = 1e-4;
  int grid_points = 64;
  optimize->add_option("--estimator", opt_estimator,
                       "martingale, tau-map, or p-map");
  optimize->add_option("--budget", budget, "average sampling rate cap")
      ->required();
  optimize->add_option("--grid", grid_text, "explicit action rates");
  optimize->add_option("--grid-lo", grid_lo, "grid floor; 0 = budget/1000");
  optimize->add_option("--grid-hi", grid_hi, "grid cap; 0 = 10x budget");
  optimize->add_option("--grid-points", grid_points, "grid size");
  optimize->add_option("--bisect-tol", bisect_tol, "relative budget tolerance");

  CLI::App* sweep_budget =
      app.add_subcommand("sweep-budget", "uniform vs optimal over budgets");
  add_estimator_opts(sweep_budget, true);
  std::string budgets_text;
  sweep_budget->add_option("--budgets", budgets_text, "budget list")
      ->required();
  sweep_budget->add_option("--grid-points", grid_points, "optimizer grid size");
  sweep_budget->add_option("--bisect-tol", bisect_tol);

  CLI::App* sweep_stages =
      app.add_subcommand("sweep-stages", "freshness vs stage count");
  double mu_uniform = 1.0;
  std::string stages_text = "1,2,3,4,5,6,7,8,9";
  sweep_stages->add_option("--mu", mu_uniform, "uniform sampling rate");
  sweep_stages->add_option("--stages", stages_text, "stage counts");

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("freshness");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*validate) cmd_validate(g, out);
    if (*mbf) cmd_mbf(g, est, mu_text, out);
    if (*map_points) cmd_map_points(g, horizon, grid_step, out, err);
    if (*simulate_cmd)
      cmd_simulate(g, est, mu_text, samples, warmup, batches, reps, out);
    if (*optimize)
      cmd_optimize(g, est, opt_estimator, budget, grid_text, grid_lo, grid_hi,
                   grid_points, bisect_tol, out, err);
    if (*sweep_budget)
      cmd_sweep_budget(g, est, budgets_text, grid_points, bisect_tol, out);
    if (*sweep_stages) cmd_sweep_stages(g, mu_uniform, stages_text, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    bool input_error = dynamic_cast<const ParseError*>(&e) ||
                       dynamic_cast<const InvalidRate*>(&e) ||
                       dynamic_cast<const NotIrreducible*>(&e) ||
                       dynamic_cast<const NotReversible*>(&e) ||
                       dynamic_cast<const BudgetInfeasible*>(&e);
    return input_error ? 2 : 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace freshness::cli
