#pragma once

// Simulation study: data-generating process with time-varying confounding,
// replicated comparisons of the inferential methods, and summary metrics.

#include <peg/dscore.hpp>
#include <peg/uposi.hpp>

#include <ostream>
#include <sstream>

namespace peg {

enum class Method { naive, uposi, os_full, os_lasso, os_dantzig };

inline constexpr const char* kMethodList = "naive, uposi, os-full, os-lasso, os-dantzig";

inline std::string to_string(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::uposi: return "uposi";
    case Method::os_full: return "os-full";
    case Method::os_lasso: return "os-lasso";
    case Method::os_dantzig: return "os-dantzig";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "naive") return Method::naive;
  if (s == "uposi") return Method::uposi;
  if (s == "os-full") return Method::os_full;
  if (s == "os-lasso") return Method::os_lasso;
  if (s == "os-dantzig") return Method::os_dantzig;
  throw UsageError("unknown method '" + std::string(s) + "' (expected one of: " + kMethodList + ")");
}

inline WeightMethod weight_method(Method m) {
  switch (m) {
    case Method::os_full: return WeightMethod::full;
    case Method::os_lasso: return WeightMethod::lasso;
    case Method::os_dantzig: return WeightMethod::dantzig;
    default: throw UsageError("not a one-step method: " + to_string(m));
  }
}

struct SimConfig {
  Index n = 800;
  Index K = 20;
  Index J = 6;
  double tau = 0.3;
  double sigma2_eps = 1.0;
  double rho = 0.8;
  CorrelationKind corstr = CorrelationKind::exchangeable;
  int reps = 50;
  std::uint64_t seed = 1;
  std::vector<Method> methods{Method::naive, Method::uposi, Method::os_lasso, Method::os_dantzig};
  double alpha = 0.05;
  int boot = 1000;
  int cv_folds = 5;
  int lambda_points = 30;

  void validate() const {
    if (K < 7) throw UsageError("simulation needs K >= 7");
    if (J < 2) throw UsageError("simulation needs J >= 2");
    if (n < 2) throw UsageError("simulation needs n >= 2");
    if (reps < 1) throw UsageError("simulation needs at least one replication");
    if (!(tau >= 0.0 && tau < 1.0)) throw UsageError("tau must lie in [0, 1)");
    if (!(sigma2_eps >= 0.0)) throw UsageError("sigma2_eps must be non-negative");
    if (!(rho > -1.0 / static_cast<double>(J - 1) && rho < 1.0)) throw UsageError("rho out of range for exchangeable errors");
    if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
  }
};

struct TrueParams {
  Vector beta;   // 7: intercept, L1..L6
  Vector delta;  // K + 5: intercept, L1..L6, X1..X_{K-6}, four nonlinear terms
  Vector psi;    // K + 1: intercept, L1..L6, X1..X_{K-6}

  static TrueParams for_K(Index K) {
    TrueParams tp;
    tp.beta.resize(7);
    tp.beta << 0, 1, -1.1, 1.2, 0.75, -0.9, 1.2;
    tp.delta = Vector::Zero(K + 5);
    tp.delta.head(7) << 1, 1, 1.2, 1.2, -0.9, 0.8, -1;
    for (Index r = 1; r <= std::min<Index>(20, K - 6); ++r) tp.delta(6 + r) = 1.0;
    tp.delta.tail(4) << -0.8, 1, 1.2, -1.5;
    tp.psi = Vector::Zero(K + 1);
    tp.psi.head(7) << 1, 1, -1, -0.9, 0.8, 1, 0;
    return tp;
  }
};

inline constexpr Index kUnmeasuredX = 10;

/// Index r of the unmeasured X_r: X10, or the last X when fewer than ten are generated.
inline Index unmeasured_x(Index K) { return std::min<Index>(kUnmeasuredX, K - 6); }

struct SimTruth {
  Vector psi;  // aligned to analysis columns (length K)
  std::vector<Vector> mu;    // treatment-free mean per subject/session
  std::vector<Vector> blip;  // gamma per subject/session
  std::vector<Vector> x_unmeasured;
};

struct SimDataset {
  Dataset data;
  SimTruth truth;
};

inline std::vector<std::string> simulation_column_names(Index K) {
  std::vector<std::string> names{"(Intercept)"};
  for (int l = 1; l <= 6; ++l) names.push_back("L" + std::to_string(l));
  for (Index r = 1; r <= K - 6; ++r)
    if (r != unmeasured_x(K)) names.push_back("X" + std::to_string(r));
  return names;
}

/// Analysis column of each generating coefficient index (-1 when unmeasured).
inline std::vector<Index> analysis_column_map(Index K) {
  std::vector<Index> map;
  for (Index c = 0; c <= 6; ++c) map.push_back(c);
  Index next = 7;
  for (Index r = 1; r <= K - 6; ++r) map.push_back(r == unmeasured_x(K) ? -1 : next++);
  return map;
}

inline SimDataset generate_dataset(const SimConfig& cfg, const TrueParams& tp, std::uint64_t rep) {
  cfg.validate();
  const Index K = cfg.K, J = cfg.J, nx = K - 6, nlx = K - 2;
  Matrix VLX(nlx, nlx);
  for (Index r = 0; r < nlx; ++r)
    for (Index s = 0; s < nlx; ++s) VLX(r, s) = std::pow(cfg.tau, static_cast<double>(std::abs(r - s)));
  Matrix LLX = VLX.llt().matrixL();
  Matrix Re = Matrix::Constant(J, J, cfg.rho);
  Re.diagonal().setOnes();
  Matrix Le = (cfg.sigma2_eps * Re).llt().matrixL();
  if (cfg.sigma2_eps == 0.0) Le.setZero();
  auto colmap = analysis_column_map(K);

  SimDataset out;
  out.truth.psi = Vector::Zero(K);
  for (std::size_t g = 0; g < colmap.size(); ++g)
    if (colmap[g] >= 0) out.truth.psi(colmap[g]) = tp.psi(static_cast<Index>(g));

  auto eng = make_stream(cfg.seed, rep, 0x5151);
  NormalSampler normal;
  std::vector<Subject> subjects;
  subjects.reserve(static_cast<std::size_t>(cfg.n));
  Vector z(nlx), lx(nlx), prev_lx(nlx), eps_z(J);
  for (Index i = 0; i < cfg.n; ++i) {
    Subject s;
    s.id = std::to_string(i + 1);
    s.h.resize(J, K);
    s.y.resize(J);
    s.a.resize(J);
    Vector mu(J), blip(J), x10(J);
    prev_lx.setZero();
    double prev_a = 0.0;
    const double l1 = normal(eng), l2 = normal(eng);  // baseline
    for (Index j = 0; j < J; ++j) {
      for (Index r = 0; r < nlx; ++r) z(r) = normal(eng);
      Vector mean(nlx);
      mean.head(4) = 0.3 * prev_lx.head(4) + Vector::Constant(4, 0.3 * prev_a);
      mean.tail(nx) = 0.5 * prev_lx.tail(nx);
      lx = mean + LLX * z;
      // l(1..6), x(1..K-6)
      Vector l(7);
      l << 1.0, l1, l2, lx(0), lx(1), lx(2), lx(3);
      double eta = tp.beta.dot(l);
      int a = NormalSampler::uniform(eng) < expit(eta) ? 1 : 0;
      Vector g(K + 1);  // generating covariates: intercept, L1..L6, X1..X_{K-6}
      g.head(7) = l;
      g.tail(nx) = lx.tail(nx);
      double m = tp.delta.head(K + 1).dot(g);
      m += tp.delta(K + 1) * l(1) * l(5) + tp.delta(K + 2) * l(3) * l(4) + tp.delta(K + 3) * std::sin(l(3) - l(4)) +
           tp.delta(K + 4) * std::cos(2.0 * l(5));
      mu(j) = m;
      blip(j) = a * tp.psi.dot(g);
      x10(j) = g(6 + unmeasured_x(K));
      for (std::size_t c = 0; c < colmap.size(); ++c)
        if (colmap[c] >= 0) s.h(j, colmap[c]) = g(static_cast<Index>(c));
      s.a(j) = a;
      prev_lx = lx;
      prev_a = a;
    }
    for (Index j = 0; j < J; ++j) eps_z(j) = normal(eng);
    s.y = mu + blip + Le * eps_z;
    out.truth.mu.push_back(mu);
    out.truth.blip.push_back(blip);
    out.truth.x_unmeasured.push_back(x10);
    subjects.push_back(std::move(s));
  }
  out.data = Dataset(std::move(subjects), simulation_column_names(K));
  return out;
}

/// Propensity columns of the simulation design: intercept and L1..L6.
inline ModelIndexSet simulation_propensity_columns() { return ModelIndexSet({0, 1, 2, 3, 4, 5, 6}); }

struct RepMetrics {
  double avg_length = 0.0;
  double fcr = 0.0;
  double power = std::numeric_limits<double>::quiet_NaN();  // undefined without selected nonzero truths
};

/// Per-replication average length, false coverage proportion and power over
/// the selected coordinates.
inline RepMetrics compute_metrics(const std::vector<Interval>& intervals, const Vector& psi_true) {
  RepMetrics m;
  if (intervals.empty()) throw UsageError("compute_metrics: no intervals");
  int miss = 0, nonzero = 0, reject = 0;
  double len = 0.0;
  for (const auto& iv : intervals) {
    double truth = psi_true(iv.k);
    len += iv.length();
    miss += !iv.covers(truth);
    if (truth != 0.0) {
      ++nonzero;
      reject += !iv.covers(0.0);
    }
  }
  const double d = static_cast<double>(intervals.size());
  m.avg_length = len / d;
  m.fcr = miss / d;
  if (nonzero > 0) m.power = static_cast<double>(reject) / nonzero;
  return m;
}

struct SelectionOutcome {
  bool false_negative = false;
  bool false_positive = false;
  bool exact = false;
  int n_false_positive = 0;
};

inline SelectionOutcome selection_outcome(const ModelIndexSet& selected, const Vector& psi_true) {
  SelectionOutcome s;
  for (Index k = 1; k < psi_true.size(); ++k) {
    bool truly = psi_true(k) != 0.0, sel = selected.contains(k);
    if (truly && !sel) s.false_negative = true;
    if (!truly && sel) ++s.n_false_positive;
  }
  s.false_positive = s.n_false_positive > 0;
  s.exact = !s.false_negative && !s.false_positive;
  return s;
}

struct MethodOutcome {
  Method method = Method::naive;
  bool ok = false;
  std::string error;
  std::vector<Interval> intervals;
  std::vector<OneStepResult> one_step;  // one-step methods only
  RepMetrics metrics;
};

struct RepOutcome {
  std::uint64_t rep = 0;
  bool ok = false;
  std::string error;
  double lambda_star = 0.0;
  ModelIndexSet selected;
  Vector psi_hat;
  SelectionOutcome selection;
  std::vector<MethodOutcome> methods;
};

/// One replication: generate, fit the propensity model, tune lambda, and run
/// every requested method.
inline RepOutcome run_replication(const SimConfig& cfg, const TrueParams& tp, std::uint64_t rep) {
  RepOutcome out;
  out.rep = rep;
  try {
    SimDataset sim = generate_dataset(cfg, tp, rep);
    PropensityModel pm = fit_propensity(sim.data, simulation_propensity_columns());
    MomentEngine eng(sim.data, pm);
    FitControls ctl;
    PenalizedFit unpen = penalized_g_fit(eng, cfg.corstr, ScadPenalty{0.0}, ctl);
    TuneResult tr = tune_lambda(eng, cfg.corstr, default_lambda_grid(eng, unpen, cfg.lambda_points), ctl);
    const PenalizedFit& fit = tr.selected_fit();
    out.lambda_star = tr.lambda_star;
    out.selected = fit.selected;
    out.psi_hat = fit.psi();
    out.selection = selection_outcome(fit.selected, sim.truth.psi);
    out.ok = true;
    for (Method m : cfg.methods) {
      MethodOutcome mo;
      mo.method = m;
      try {
        switch (m) {
          case Method::naive:
            mo.intervals = sandwich_ci(fit, cfg.alpha);
            break;
          case Method::uposi:
            mo.intervals = uposi_infer(sim.data, pm, fit, cfg.alpha, cfg.boot, splitmix64(cfg.seed ^ (rep + 1))).intervals;
            break;
          default: {
            DscoreOptions opt;
            opt.method = weight_method(m);
            opt.alpha = cfg.alpha;
            opt.folds = cfg.cv_folds;
            opt.seed = splitmix64(cfg.seed + 0x9e37 * (rep + 1));
            DscoreReport r = infer_all(sim.data, pm, fit, opt);
            mo.one_step = r.results;
            mo.intervals = to_intervals(r);
          }
        }
        mo.metrics = compute_metrics(mo.intervals, sim.truth.psi);
        mo.ok = true;
      } catch (const Error& e) {
        mo.error = e.what();
      }
      out.methods.push_back(std::move(mo));
    }
  } catch (const Error& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

struct MethodSummary {
  Method method = Method::naive;
  int reps_ok = 0;
  int failures = 0;
  double avg_ci_length = 0.0;
  double fcr = 0.0;
  double power = std::numeric_limits<double>::quiet_NaN();
  int power_reps = 0;
};

struct AggregateMetrics {
  SimConfig config;
  int reps_ok = 0;
  int failures = 0;
  double fn_pct = 0.0;
  double fp_pct = 0.0;
  double exact_pct = 0.0;
  double afp = 0.0;
  std::vector<MethodSummary> methods;
  std::vector<RepOutcome> replications;

  const MethodSummary& method(Method m) const {
    for (const auto& s : methods)
      if (s.method == m) return s;
    throw UsageError("method not part of this simulation: " + to_string(m));
  }
};

inline AggregateMetrics aggregate(const SimConfig& cfg, std::vector<RepOutcome> reps) {
  AggregateMetrics agg;
  agg.config = cfg;
  for (Method m : cfg.methods) agg.methods.push_back({m});
  for (const auto& r : reps) {
    if (!r.ok) {
      ++agg.failures;
      continue;
    }
    ++agg.reps_ok;
    agg.fn_pct += r.selection.false_negative;
    agg.fp_pct += r.selection.false_positive;
    agg.exact_pct += r.selection.exact;
    agg.afp += r.selection.n_false_positive;
    for (std::size_t c = 0; c < r.methods.size(); ++c) {
      const auto& mo = r.methods[c];
      auto& s = agg.methods[c];
      if (!mo.ok) {
        ++s.failures;
        continue;
      }
      ++s.reps_ok;
      s.avg_ci_length += mo.metrics.avg_length;
      s.fcr += mo.metrics.fcr;
      if (!std::isnan(mo.metrics.power)) {
        s.power = (s.power_reps == 0 ? 0.0 : s.power) + mo.metrics.power;
        ++s.power_reps;
      }
    }
  }
  if (agg.reps_ok > 0) {
    const double d = agg.reps_ok;
    agg.fn_pct *= 100.0 / d;
    agg.fp_pct *= 100.0 / d;
    agg.exact_pct *= 100.0 / d;
    agg.afp /= d;
  }
  for (auto& s : agg.methods) {
    if (s.reps_ok > 0) {
      s.avg_ci_length /= s.reps_ok;
      s.fcr /= s.reps_ok;
    }
    if (s.power_reps > 0) s.power /= s.power_reps;
  }
  agg.replications = std::move(reps);
  return agg;
}

/// Runs replications first .. first + count - 1 (default: all of cfg.reps)
/// in parallel; replication r always uses stream (seed, r).
inline AggregateMetrics run_replications(const SimConfig& cfg, std::uint64_t first = 0, int count = -1) {
  cfg.validate();
  if (count < 0) count = cfg.reps;
  TrueParams tp = TrueParams::for_K(cfg.K);
  std::vector<RepOutcome> reps(static_cast<std::size_t>(count));
  parallel_for(reps.size(), [&](std::size_t r) { reps[r] = run_replication(cfg, tp, first + r); });
  return aggregate(cfg, std::move(reps));
}

namespace detail {
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "NA";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}
}  // namespace detail

inline void write_metrics_csv(std::ostream& out, const AggregateMetrics& agg) {
  const auto& c = agg.config;
  out << "n,K,J,corstr,method,reps_ok,failures,avg_ci_length,fcr,power,fn_pct,fp_pct,exact_pct,afp\n";
  for (const auto& s : agg.methods) {
    out << c.n << ',' << c.K << ',' << c.J << ',' << to_string(c.corstr) << ',' << to_string(s.method) << ','
        << s.reps_ok << ',' << (s.failures + agg.failures) << ',' << detail::csv_number(s.avg_ci_length) << ','
        << detail::csv_number(s.fcr) << ',' << detail::csv_number(s.power) << ',' << detail::csv_number(agg.fn_pct)
        << ',' << detail::csv_number(agg.fp_pct) << ',' << detail::csv_number(agg.exact_pct) << ','
        << detail::csv_number(agg.afp) << '\n';
  }
}

/// Per-replication series for plotting: one row per (replication, method).
inline void write_plot_data(std::ostream& out, const AggregateMetrics& agg) {
  out << "rep,method,selected,ci_length,fcr,power\n";
  for (const auto& r : agg.replications) {
    if (!r.ok) continue;
    for (const auto& mo : r.methods) {
      if (!mo.ok) continue;
      out << r.rep << ',' << to_string(mo.method) << ',' << r.selected.size() << ','
          << detail::csv_number(mo.metrics.avg_length) << ',' << detail::csv_number(mo.metrics.fcr) << ','
          << detail::csv_number(mo.metrics.power) << '\n';
    }
  }
}

}  // namespace peg
