#pragma once

// JSON serialization of fits and inference results.

#include <peg/simlab.hpp>

#include <json.hpp>

namespace peg {

using json = nlohmann::json;

inline json vector_json(const Vector& v) {
  json j = json::array();
  for (Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

inline Vector vector_from_json(const json& j) {
  Vector v(static_cast<Index>(j.size()));
  for (Index i = 0; i < v.size(); ++i) v(i) = j.at(static_cast<std::size_t>(i)).is_null() ? std::nan("") : j.at(static_cast<std::size_t>(i)).get<double>();
  return v;
}

inline json matrix_json(const Matrix& m) {
  json j = json::array();
  for (Index r = 0; r < m.rows(); ++r) j.push_back(vector_json(m.row(r).transpose()));
  return j;
}

inline Matrix matrix_from_json(const json& j) {
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j.at(0).size()) : 0;
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (static_cast<Index>(j.at(static_cast<std::size_t>(r)).size()) != cols) throw DataError("ragged matrix in report");
    m.row(r) = vector_from_json(j.at(static_cast<std::size_t>(r))).transpose();
  }
  return m;
}

inline json correlation_json(const WorkingCorrelation& c) {
  json j{{"kind", to_string(c.kind)}, {"rho", c.rho}};
  if (c.kind == CorrelationKind::unstructured) j["R"] = matrix_json(c.R);
  return j;
}

inline WorkingCorrelation correlation_from_json(const json& j) {
  WorkingCorrelation c;
  c.kind = parse_correlation_kind(j.at("kind").get<std::string>());
  c.rho = j.value("rho", 0.0);
  if (c.kind == CorrelationKind::unstructured) c.R = matrix_from_json(j.at("R"));
  return c;
}

inline std::string column_name(const Dataset& d, Index k) { return d.column_names()[static_cast<std::size_t>(k)]; }

inline json intervals_json(const std::vector<Interval>& ivs, const Dataset& d) {
  json j = json::array();
  for (const auto& iv : ivs)
    j.push_back({{"coefficient", column_name(d, iv.k)}, {"index", iv.k}, {"estimate", iv.estimate},
                 {"lower", iv.lower}, {"upper", iv.upper}});
  return j;
}

inline json fit_json(const PenalizedFit& fit, const Dataset& d) {
  json sel = json::array(), names = json::array();
  for (Index k : fit.selected) {
    sel.push_back(k);
    names.push_back(column_name(d, k));
  }
  return {{"K", fit.K},
          {"delta", vector_json(fit.delta())},
          {"psi", vector_json(fit.psi())},
          {"sigma2", fit.sigma2},
          {"correlation", correlation_json(fit.corr)},
          {"correlation_clamped", fit.correlation_clamped},
          {"lambda", fit.penalty.lambda},
          {"scad_a", fit.penalty.a},
          {"epsilon", fit.epsilon},
          {"selected_index", sel},
          {"selected", names},
          {"iterations", fit.iterations},
          {"converged", fit.converged},
          {"sandwich_cov", matrix_json(fit.sandwich_cov)}};
}

inline PenalizedFit fit_from_json(const json& j, CorrelationKind kind) {
  PenalizedFit fit;
  fit.K = j.at("K").get<Index>();
  Vector delta = vector_from_json(j.at("delta")), psi = vector_from_json(j.at("psi"));
  if (delta.size() != fit.K || psi.size() != fit.K) throw DataError("fit report: coefficient length differs from K");
  fit.theta.resize(2 * fit.K);
  fit.theta << delta, psi;
  fit.sigma2 = j.at("sigma2").get<double>();
  fit.corr = correlation_from_json(j.at("correlation"));
  fit.kind = kind;
  fit.correlation_clamped = j.value("correlation_clamped", false);
  fit.penalty = ScadPenalty{j.at("lambda").get<double>(), j.value("scad_a", 3.7)};
  fit.lambda_star = fit.penalty.lambda;
  fit.epsilon = j.value("epsilon", 1e-6);
  fit.selected = ModelIndexSet(j.at("selected_index").get<std::vector<Index>>());
  fit.iterations = j.value("iterations", 0);
  fit.converged = j.value("converged", false);
  if (j.contains("sandwich_cov")) fit.sandwich_cov = matrix_from_json(j.at("sandwich_cov"));
  return fit;
}

inline json uposi_json(const UposiReport& r, const Dataset& d) {
  return {{"intervals", intervals_json(r.intervals, d)},
          {"half_lengths", r.half_lengths},
          {"C_G", r.C_G},
          {"C_W", r.C_W},
          {"theta_l1_standardized", r.theta_l1},
          {"omega", r.omega},
          {"omega_flagged", r.omega_flagged},
          {"bootstrap_degenerate", r.degenerate_bootstrap},
          {"replicates", r.replicates},
          {"bootstrap_seed", r.seed}};
}

inline json dscore_json(const DscoreReport& r, const Dataset& d) {
  json coords = json::array();
  for (const auto& o : r.results) {
    double p = 2.0 * (1.0 - boost::math::cdf(boost::math::normal_distribution<double>(), std::abs(o.score_stat)));
    coords.push_back({{"coefficient", column_name(d, o.k)},
                      {"index", o.k},
                      {"psi_hat", o.psi_hat},
                      {"psi_tilde", o.psi_tilde},
                      {"lower", o.lower},
                      {"upper", o.upper},
                      {"se", o.se},
                      {"partial_info_standardized", o.partial_info},
                      {"sigma_S_standardized", o.sigma_S},
                      {"score_stat", o.score_stat},
                      {"score_p_value", p},
                      {"lambda_w", o.lambda_w}});
  }
  return {{"weights", to_string(r.method)}, {"intervals", intervals_json(to_intervals(r), d)}, {"coordinates", coords}};
}

inline json sim_config_json(const SimConfig& c) {
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  return {{"n", c.n},         {"K", c.K},         {"J", c.J},
          {"tau", c.tau},     {"sigma2_eps", c.sigma2_eps}, {"rho", c.rho},
          {"corstr", to_string(c.corstr)}, {"reps", c.reps}, {"seed", c.seed},
          {"methods", methods}, {"alpha", c.alpha}, {"boot", c.boot},
          {"cv_folds", c.cv_folds}, {"lambda_points", c.lambda_points}};
}

inline void merge_sim_config(SimConfig& c, const json& j) {
  c.n = j.value("n", c.n);
  c.K = j.value("K", c.K);
  c.J = j.value("J", c.J);
  c.tau = j.value("tau", c.tau);
  c.sigma2_eps = j.value("sigma2_eps", c.sigma2_eps);
  c.rho = j.value("rho", c.rho);
  if (j.contains("corstr")) c.corstr = parse_correlation_kind(j.at("corstr").get<std::string>());
  c.reps = j.value("reps", c.reps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
  }
  c.alpha = j.value("alpha", c.alpha);
  c.boot = j.value("boot", c.boot);
  c.cv_folds = j.value("cv_folds", c.cv_folds);
  c.lambda_points = j.value("lambda_points", c.lambda_points);
}

inline json nullable(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

inline json aggregate_json(const AggregateMetrics& agg) {
  json methods = json::array();
  for (const auto& s : agg.methods)
    methods.push_back({{"method", to_string(s.method)},
                       {"reps_ok", s.reps_ok},
                       {"failures", s.failures},
                       {"avg_ci_length", s.avg_ci_length},
                       {"fcr", s.fcr},
                       {"power", nullable(s.power)}});
  json reps = json::array();
  for (const auto& r : agg.replications) {
    json jr{{"rep", r.rep}, {"ok", r.ok}};
    if (!r.ok) {
      jr["error"] = r.error;
    } else {
      jr["lambda"] = r.lambda_star;
      jr["selected"] = r.selected.indices();
      jr["psi_hat"] = vector_json(r.psi_hat);
      json jm = json::array();
      for (const auto& mo : r.methods) {
        json e{{"method", to_string(mo.method)}, {"ok", mo.ok}};
        if (mo.ok) {
          json ivs = json::array();
          for (const auto& iv : mo.intervals) ivs.push_back({iv.k, iv.estimate, iv.lower, iv.upper});
          e["intervals"] = ivs;
          e["avg_length"] = mo.metrics.avg_length;
          e["fcr"] = mo.metrics.fcr;
          e["power"] = nullable(mo.metrics.power);
        } else {
          e["error"] = mo.error;
        }
        jm.push_back(e);
      }
      jr["methods"] = jm;
    }
    reps.push_back(jr);
  }
  return {{"reps_ok", agg.reps_ok},   {"failures", agg.failures}, {"fn_pct", agg.fn_pct},
          {"fp_pct", agg.fp_pct},     {"exact_pct", agg.exact_pct}, {"afp", agg.afp},
          {"methods", methods},       {"replications", reps}};
}

}  // namespace peg
