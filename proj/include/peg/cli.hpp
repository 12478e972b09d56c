#pragma once

// Command-line front end: peg fit | infer | simulate | generate.
// Every report embeds its resolved configuration; passing a report back via
// --config reproduces it.

#include <peg/report.hpp>

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace peg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

namespace detail {

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("'" + path + "' is not valid JSON: " + e.what());
  }
}

// A config file may be a bare config object or a report embedding one.
inline json load_config(const std::string& path, const std::string& command) {
  json j = read_json_file(path);
  if (j.contains("config")) {
    if (j.value("command", command) != command)
      throw UsageError("'" + path + "' is a " + j.value("command", std::string("?")) + " report, not " + command);
    return j.at("config");
  }
  return j;
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot write '" + path + "'");
  f << text;
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(::peg::detail::trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!::peg::detail::trim(cur).empty()) out.push_back(::peg::detail::trim(cur));
  return out;
}

inline ColumnSchema schema_from(const json& cfg) {
  std::string path = cfg.value("schema", std::string());
  return path.empty() ? ColumnSchema{} : ColumnSchema::from_file(path);
}

inline ModelIndexSet propensity_columns(const Dataset& d, const json& names) {
  if (names.empty()) return ModelIndexSet::full(d.K());
  std::vector<Index> idx{0};
  for (const auto& n : names) {
    auto c = d.column(n.get<std::string>());
    if (!c) throw UsageError("propensity column '" + n.get<std::string>() + "' is not an adjuster column");
    if (*c != 0) idx.push_back(*c);
  }
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return ModelIndexSet(std::move(idx));
}

inline json names_of(const Dataset& d, const ModelIndexSet& M) {
  json j = json::array();
  for (Index k : M) j.push_back(column_name(d, k));
  return j;
}

inline json base_report(const std::string& command, const json& cfg) {
  return {{"command", command}, {"version", kVersion}, {"config", cfg}};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fit

inline json fit_defaults() {
  return {{"data", ""},       {"schema", ""},     {"corstr", "exch"}, {"lambda", "auto"},
          {"grid_points", 30}, {"propensity", json::array()}, {"alpha", 0.05}};
}

inline json run_fit(const json& cfg) {
  const std::string data_path = cfg.at("data").get<std::string>();
  if (data_path.empty()) throw UsageError("fit: --data is required");
  Dataset d = load_dataset(data_path, detail::schema_from(cfg));
  CorrelationKind kind = parse_correlation_kind(cfg.at("corstr").get<std::string>());
  double alpha = cfg.at("alpha").get<double>();
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
  ModelIndexSet pcols = detail::propensity_columns(d, cfg.at("propensity"));
  PropensityModel pm = fit_propensity(d, pcols);
  MomentEngine eng(d, pm);

  json report = detail::base_report("fit", cfg);
  PenalizedFit fit;
  const json& lam = cfg.at("lambda");
  if (lam.is_string() && lam.get<std::string>() == "auto") {
    int points = cfg.at("grid_points").get<int>();
    if (points < 1) throw UsageError("grid_points must be positive");
    PenalizedFit unpen = penalized_g_fit(eng, kind, ScadPenalty{0.0});
    TuneResult tr = tune_lambda(eng, kind, default_lambda_grid(eng, unpen, points));
    fit = tr.selected_fit();
    json dric = json::array();
    for (double v : tr.dric) dric.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    report["tuning"] = {{"grid", tr.grid}, {"dric", dric}, {"lambda_star", tr.lambda_star}};
  } else {
    double lambda = lam.is_number() ? lam.get<double>() : std::stod(lam.get<std::string>());
    fit = penalized_g_fit(eng, kind, ScadPenalty{lambda});
  }
  report["n"] = d.n();
  report["columns"] = d.column_names();
  report["propensity"] = {{"columns", detail::names_of(d, pcols)}, {"beta", vector_json(pm.beta)}};
  report["fit"] = fit_json(fit, d);
  try {
    report["naive_intervals"] = intervals_json(sandwich_ci(fit, alpha), d);
  } catch (const NumericalError& e) {
    report["naive_intervals"] = nullptr;
    report["warnings"].push_back(e.what());
  }
  if (fit.correlation_clamped) report["warnings"].push_back("working correlation estimate was clamped");
  if (!fit.converged) report["warnings"].push_back("MM iterations did not converge");
  return report;
}

// ---------------------------------------------------------------------------
// infer

inline json infer_defaults() {
  return {{"method", ""}, {"fit", ""}, {"data", ""}, {"alpha", 0.05}, {"boot", 1000}, {"seed", nullptr}, {"cv_folds", 5}};
}

inline json run_infer(const json& cfg) {
  Method method = parse_method(cfg.at("method").get<std::string>());
  const std::string fit_path = cfg.at("fit").get<std::string>();
  if (fit_path.empty()) throw UsageError("infer: --fit is required");
  json fitrep = detail::read_json_file(fit_path);
  if (fitrep.value("command", std::string()) != "fit") throw UsageError("'" + fit_path + "' is not a fit report");
  const json& fcfg = fitrep.at("config");
  std::string data_path = cfg.at("data").get<std::string>();
  if (data_path.empty()) data_path = fcfg.at("data").get<std::string>();
  Dataset d = load_dataset(data_path, detail::schema_from(fcfg));
  CorrelationKind kind = parse_correlation_kind(fcfg.at("corstr").get<std::string>());
  PenalizedFit fit = fit_from_json(fitrep.at("fit"), kind);
  if (fit.K != d.K() || fitrep.at("n").get<Index>() != d.n())
    throw UsageError("data does not match the fit report (n or K differ)");
  const double alpha = cfg.at("alpha").get<double>();
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
  const bool needs_seed = method == Method::uposi || method == Method::os_lasso || method == Method::os_dantzig;
  if (needs_seed && cfg.at("seed").is_null()) throw UsageError("infer --method " + to_string(method) + " requires --seed");
  const std::uint64_t seed = cfg.at("seed").is_null() ? 0 : cfg.at("seed").get<std::uint64_t>();

  json report = detail::base_report("infer", cfg);
  report["method"] = to_string(method);
  report["alpha"] = alpha;
  report["selected"] = detail::names_of(d, fit.selected);
  if (method == Method::naive) {
    report["intervals"] = intervals_json(sandwich_ci(fit, alpha), d);
    return report;
  }
  PropensityModel pm = fit_propensity(d, detail::propensity_columns(d, fitrep.at("propensity").at("columns")));
  if (method == Method::uposi) {
    UposiReport u = uposi_infer(d, pm, fit, alpha, cfg.at("boot").get<int>(), seed);
    report.update(uposi_json(u, d));
    if (u.omega_flagged) report["warnings"].push_back("selected design nearly singular (small eigenvalue diagnostic)");
    if (u.degenerate_bootstrap) report["warnings"].push_back("bootstrap maxima have a zero median");
    return report;
  }
  DscoreOptions opt;
  opt.method = weight_method(method);
  opt.alpha = alpha;
  opt.folds = cfg.at("cv_folds").get<int>();
  opt.seed = seed;
  report.update(dscore_json(infer_all(d, pm, fit, opt), d));
  return report;
}

// ---------------------------------------------------------------------------
// simulate / generate

inline json simulate_defaults() {
  json j = sim_config_json(SimConfig{});
  j["seed"] = nullptr;
  return j;
}

inline SimConfig sim_config_from(const json& cfg) {
  if (cfg.at("seed").is_null()) throw UsageError("simulate requires --seed");
  SimConfig c;
  merge_sim_config(c, cfg);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Penalized G-estimation with post-selection inference", "peg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: $PEG_THREADS or 1)")->check(CLI::NonNegativeNumber);

  // fit
  auto* fit = app.add_subcommand("fit", "tune lambda by DRIC and fit the penalized model");
  std::string f_config, f_data, f_schema, f_corstr, f_lambda, f_prop, f_out = "-";
  int f_points = 30;
  double f_alpha = 0.05;
  fit->add_option("--config", f_config, "config file or previous fit report");
  fit->add_option("--data", f_data, "long-format CSV");
  fit->add_option("--schema", f_schema, "column mapping JSON");
  fit->add_option("--corstr", f_corstr, "working correlation: ind, exch, ar1, un");
  fit->add_option("--lambda", f_lambda, "'auto' (DRIC) or a fixed value");
  fit->add_option("--grid-points", f_points, "lambda grid size for auto tuning");
  fit->add_option("--propensity", f_prop, "comma-separated propensity columns (default: all)");
  fit->add_option("--alpha", f_alpha, "level for the naive intervals");
  fit->add_option("--out", f_out, "output JSON ('-' for stdout)");

  // infer
  auto* inf = app.add_subcommand("infer", "post-selection inference for a fitted model");
  std::string i_config, i_method, i_fit, i_data, i_out = "-";
  double i_alpha = 0.05;
  int i_boot = 1000, i_folds = 5;
  std::uint64_t i_seed = 0;
  inf->add_option("--config", i_config, "config file or previous infer report");
  inf->add_option("--method", i_method, std::string("one of: ") + kMethodList);
  inf->add_option("--fit", i_fit, "fit report from 'peg fit'");
  inf->add_option("--data", i_data, "CSV (default: the fit's data)");
  inf->add_option("--alpha", i_alpha, "1 - confidence level");
  inf->add_option("--boot", i_boot, "bootstrap replicates (uposi)");
  inf->add_option("--seed", i_seed, "random seed");
  inf->add_option("--cv-folds", i_folds, "cross-validation folds (os-lasso, os-dantzig)");
  inf->add_option("--out", i_out, "output JSON ('-' for stdout)");

  // simulate
  auto* sim = app.add_subcommand("simulate", "replicated simulation study");
  std::string s_config, s_methods, s_corstr, s_out = "-", s_plot, s_report;
  Index s_n = 0, s_K = 0, s_J = 0;
  int s_reps = 0, s_boot = 0;
  double s_alpha = 0.05;
  std::uint64_t s_seed = 0;
  sim->add_option("--config", s_config, "simulation config or previous simulation report");
  sim->add_option("--n", s_n, "subjects");
  sim->add_option("--K", s_K, "adjuster columns");
  sim->add_option("--J", s_J, "sessions per subject");
  sim->add_option("--corstr", s_corstr, "analysis working correlation");
  sim->add_option("--reps", s_reps, "replications");
  sim->add_option("--methods", s_methods, std::string("comma-separated subset of: ") + kMethodList);
  sim->add_option("--alpha", s_alpha, "1 - confidence level");
  sim->add_option("--boot", s_boot, "bootstrap replicates for uposi");
  sim->add_option("--seed", s_seed, "random seed (required)");
  sim->add_option("--out", s_out, "metrics CSV ('-' for stdout)");
  sim->add_option("--plot-data", s_plot, "per-replication CSV for plotting");
  sim->add_option("--report", s_report, "JSON report with config and per-replication results");

  // generate
  auto* gen = app.add_subcommand("generate", "write one simulated dataset as CSV");
  Index g_n = 200, g_K = 20, g_J = 6;
  std::uint64_t g_seed = 0, g_rep = 0;
  std::string g_out = "-";
  gen->add_option("--n", g_n, "subjects");
  gen->add_option("--K", g_K, "adjuster columns");
  gen->add_option("--J", g_J, "sessions per subject");
  gen->add_option("--seed", g_seed, "random seed")->required();
  gen->add_option("--rep", g_rep, "replication index");
  gen->add_option("--out", g_out, "output CSV ('-' for stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto given = [](CLI::App* sc, const char* name) { return sc->count(name) > 0; };
  if (threads > 0) set_thread_count(threads);
  try {
    if (fit->parsed()) {
      json cfg = fit_defaults();
      if (!f_config.empty()) cfg.update(detail::load_config(f_config, "fit"));
      if (given(fit, "--data")) cfg["data"] = f_data;
      if (given(fit, "--schema")) cfg["schema"] = f_schema;
      if (given(fit, "--corstr")) cfg["corstr"] = f_corstr;
      if (given(fit, "--lambda")) {
        if (f_lambda == "auto") {
          cfg["lambda"] = "auto";
        } else {
          auto v = ::peg::detail::parse_number(f_lambda);
          if (!v || *v < 0) throw UsageError("--lambda must be 'auto' or a non-negative number");
          cfg["lambda"] = *v;
        }
      }
      if (given(fit, "--grid-points")) cfg["grid_points"] = f_points;
      if (given(fit, "--propensity")) cfg["propensity"] = detail::split_list(f_prop);
      if (given(fit, "--alpha")) cfg["alpha"] = f_alpha;
      detail::write_text(f_out, detail::dump(run_fit(cfg)), out);
    } else if (inf->parsed()) {
      json cfg = infer_defaults();
      if (!i_config.empty()) cfg.update(detail::load_config(i_config, "infer"));
      if (given(inf, "--method")) cfg["method"] = i_method;
      if (given(inf, "--fit")) cfg["fit"] = i_fit;
      if (given(inf, "--data")) cfg["data"] = i_data;
      if (given(inf, "--alpha")) cfg["alpha"] = i_alpha;
      if (given(inf, "--boot")) cfg["boot"] = i_boot;
      if (given(inf, "--seed")) cfg["seed"] = i_seed;
      if (given(inf, "--cv-folds")) cfg["cv_folds"] = i_folds;
      if (cfg.at("method").get<std::string>().empty())
        throw UsageError(std::string("infer: --method is required (one of: ") + kMethodList + ")");
      detail::write_text(i_out, detail::dump(run_infer(cfg)), out);
    } else if (sim->parsed()) {
      json cfg = simulate_defaults();
      if (!s_config.empty()) cfg.update(detail::load_config(s_config, "simulate"));
      if (given(sim, "--n")) cfg["n"] = s_n;
      if (given(sim, "--K")) cfg["K"] = s_K;
      if (given(sim, "--J")) cfg["J"] = s_J;
      if (given(sim, "--corstr")) cfg["corstr"] = s_corstr;
      if (given(sim, "--reps")) cfg["reps"] = s_reps;
      if (given(sim, "--methods")) cfg["methods"] = detail::split_list(s_methods);
      if (given(sim, "--alpha")) cfg["alpha"] = s_alpha;
      if (given(sim, "--boot")) cfg["boot"] = s_boot;
      if (given(sim, "--seed")) cfg["seed"] = s_seed;
      SimConfig sc = sim_config_from(cfg);
      cfg = sim_config_json(sc);
      AggregateMetrics agg = run_replications(sc);
      std::ostringstream csv;
      write_metrics_csv(csv, agg);
      detail::write_text(s_out, csv.str(), out);
      if (!s_plot.empty()) {
        std::ostringstream plot;
        write_plot_data(plot, agg);
        detail::write_text(s_plot, plot.str(), out);
      }
      if (!s_report.empty()) {
        json report = detail::base_report("simulate", cfg);
        report["results"] = aggregate_json(agg);
        detail::write_text(s_report, detail::dump(report), out);
      }
    } else if (gen->parsed()) {
      SimConfig sc;
      sc.n = g_n;
      sc.K = g_K;
      sc.J = g_J;
      sc.seed = g_seed;
      SimDataset sd = generate_dataset(sc, TrueParams::for_K(g_K), g_rep);
      std::ostringstream csv;
      write_dataset(csv, sd.data);
      detail::write_text(g_out, csv.str(), out);
    }
  } catch (const UsageError& e) {
    err << "peg: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "peg: data error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "peg: numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const json::exception& e) {
    err << "peg: malformed configuration: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "peg: usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace peg::cli
