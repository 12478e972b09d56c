// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Simulation sizes are fixed; expect a long run on a single core.

#include <peg/peg.hpp>

#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <random>

using namespace peg;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0, double e = 0, double g = 0) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a, b, c, d, e, g);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

SimConfig sim(Index n, Index K, CorrelationKind kind, int reps, std::vector<Method> methods) {
  SimConfig c;
  c.n = n;
  c.K = K;
  c.corstr = kind;
  c.reps = reps;
  c.seed = 20240601;
  c.methods = std::move(methods);
  return c;
}

AggregateMetrics run(const SimConfig& c, const char* label) {
  auto t0 = std::chrono::steady_clock::now();
  auto agg = run_replications(c);
  std::printf("  [%s] n=%ld K=%ld %s reps=%d ok=%ld  (%.0f s)\n", label, static_cast<long>(c.n),
              static_cast<long>(c.K), to_string(c.corstr).c_str(), c.reps, static_cast<long>(agg.reps_ok),
              seconds_since(t0));
  for (const auto& m : agg.methods)
    std::printf("      %-10s fcr=%.3f power=%.3f length=%.3f failures=%ld\n", to_string(m.method).c_str(), m.fcr,
                m.power, m.avg_ci_length, static_cast<long>(m.failures));
  std::fflush(stdout);
  return agg;
}

const MethodOutcome* outcome(const RepOutcome& r, Method m) {
  for (const auto& mo : r.methods)
    if (mo.method == m && mo.ok) return &mo;
  return nullptr;
}

// ---------------------------------------------------------------------------

void oracle_equivalence() {
  auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    testing_support::ToyOptions o;
    o.n = 20 + 3 * t / 2;
    o.K = 2 + t % 4;
    o.J = 2 + t % 3;
    o.ragged = t % 2 == 1;
    Dataset d = testing_support::toy_dataset(o, 1000 + t);
    PropensityModel pm = fit_propensity(d);
    PenalizedFit fit = penalized_g_fit(d, pm, CorrelationKind::independent, ScadPenalty{0.0});
    auto [W, G] = testing_support::reference_moments(d, pm, WorkingCorrelation::independent(), 1.0);
    Vector direct = W.fullPivLu().solve(G);
    worst = std::max(worst, sup_norm(fit.theta - direct));
  }
  double secs = seconds_since(t0);
  report(1, worst <= 1e-8 && secs < 10.0, fmt("max |theta - W^-1 G| = %.2e over 20 datasets, %.2f s", worst, secs));
}

void scad_closed_form() {
  std::mt19937_64 eng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int mismatches = 0, checked = 0;
  auto check = [&](double t, double lambda, double a) {
    double expected;
    if (t <= lambda)
      expected = lambda;
    else if (t < a * lambda)
      expected = (a * lambda - t) / (a - 1.0);
    else
      expected = 0.0;
    ++checked;
    if (scad_derivative(t, ScadPenalty{lambda, a}) != expected) ++mismatches;
  };
  for (int i = 0; i < 1000; ++i) {
    double lambda = 0.01 + 2.0 * u(eng), a = 2.0 + 1e-3 + 4.0 * u(eng);
    double t = 1.2 * a * lambda * u(eng);
    check(t, lambda, a);
    check(lambda, lambda, a);
    check(a * lambda, lambda, a);
  }
  report(2, mismatches == 0, fmt("%.0f evaluations, %.0f mismatches (incl. t = lambda and t = a lambda)", checked, mismatches));
}

void z_regrouping() {
  testing_support::ToyOptions o;
  o.n = 30;
  o.K = 6;
  o.J = 4;
  o.ragged = true;
  Dataset d = testing_support::toy_dataset(o, 33);
  PropensityModel pm = fit_propensity(d);
  double worst = 0.0;
  for (auto corr : {WorkingCorrelation::independent(), WorkingCorrelation::exchangeable(0.4), WorkingCorrelation::ar1(0.6)}) {
    const double sigma2 = 1.7;
    ZVectors z = build_z_vectors(d, pm, corr, sigma2);
    MomentMatrices mm = moment_matrices(d, pm, corr, sigma2, ModelIndexSet::full(d.K()));
    Vector mean = z.Z.colwise().mean().transpose();
    for (Index c = 0; c < z.Z.cols(); ++c) {
      double target = c < z.block_one() ? mm.G(z.g_entry(c)) : mm.W(z.w_entry(c).first, z.w_entry(c).second);
      worst = std::max(worst, std::abs(mean(c) - target));
    }
  }
  report(3, worst <= 1e-12, fmt("max |mean Z - moment entry| = %.2e (n=30, K=6; ind/exch/ar1)", worst));
}

void bootstrap_box() {
  bool box_ok = true, monotone = true;
  int runs = 0;
  for (int t = 0; t < 6; ++t) {
    testing_support::ToyOptions o;
    o.n = 40 + 10 * t;
    o.K = 3 + t % 3;
    Dataset d = testing_support::toy_dataset(o, 500 + t);
    PropensityModel pm = fit_propensity(d);
    ZVectors z = build_z_vectors(d, pm, WorkingCorrelation::exchangeable(0.3), 1.0);
    double prev_g = std::numeric_limits<double>::infinity(), prev_w = prev_g;
    for (double alpha : {0.01, 0.05, 0.1, 0.2, 0.5}) {
      auto q = multiplier_bootstrap(z, 400 + 100 * t, alpha, 77 + t);
      const double rn = std::sqrt(static_cast<double>(q.n));
      int inside = 0;
      for (int j = 0; j < q.replicates; ++j) inside += (q.g(j) <= rn * q.C_G && q.w(j) <= rn * q.C_W) ? 1 : 0;
      box_ok = box_ok && inside >= (1.0 - alpha) * q.replicates;
      monotone = monotone && q.C_G <= prev_g && q.C_W <= prev_w;
      prev_g = q.C_G;
      prev_w = q.C_W;
      ++runs;
    }
  }
  report(4, box_ok && monotone,
         std::string("box coverage >= 1 - alpha in all ") + std::to_string(runs) + " runs: " + (box_ok ? "yes" : "no") +
             "; quantiles monotone in alpha: " + (monotone ? "yes" : "no"));
}

// ---------------------------------------------------------------------------

void selection_and_normality() {
  // first 50 replications serve the selection criterion, all 200 the one-step criterion
  auto agg = run(sim(1200, 20, CorrelationKind::exchangeable, 200, {Method::os_lasso}), "n1200 K20");
  int exact = 0, fn_free = 0, used50 = 0;
  std::vector<double> stat;
  int covered = 0;
  for (const auto& r : agg.replications) {
    if (!r.ok) continue;
    if (r.rep < 50) {
      ++used50;
      exact += r.selection.exact ? 1 : 0;
      fn_free += r.selection.false_negative ? 0 : 1;
    }
    const MethodOutcome* mo = outcome(r, Method::os_lasso);
    if (!mo) continue;
    for (const auto& os : mo->one_step)
      if (os.k == 1) {
        stat.push_back((os.psi_tilde - 1.0) / os.se);
        covered += (os.lower <= 1.0 && 1.0 <= os.upper) ? 1 : 0;
      }
  }
  double pe = used50 ? 100.0 * exact / used50 : 0.0, pf = used50 ? 100.0 * fn_free / used50 : 0.0;
  report(5, pe >= 90.0 && pf >= 90.0, fmt("EXACT %.1f%% (need >= 90), FN-free %.1f%% (need >= 90), %.0f reps", pe, pf, used50));

  double mean = 0.0, var = 0.0;
  for (double s : stat) mean += s;
  const double m = static_cast<double>(stat.size());
  mean /= std::max(m, 1.0);
  for (double s : stat) var += (s - mean) * (s - mean);
  var /= std::max(m - 1.0, 1.0);
  double cov = m > 0 ? covered / m : 0.0;
  bool pass = m >= 150 && var >= 0.8 && var <= 1.25 && cov >= 0.90 && cov <= 0.99;
  report(9, pass, fmt("standardized psi~_1: mean %.3f, variance %.3f (need [0.8, 1.25]), coverage %.3f (need [0.90, 0.99]), %.0f reps",
                      mean, var, cov, m));
}

void fcr_power_length() {
  const std::vector<Method> all{Method::naive, Method::uposi, Method::os_lasso, Method::os_dantzig};
  bool fcr_ok = true, power_ok = true;
  std::string fcr_detail, power_detail;
  for (auto kind : {CorrelationKind::independent, CorrelationKind::exchangeable, CorrelationKind::ar1}) {
    auto agg = run(sim(800, 20, kind, 50, all), "n800 K20");
    double l = agg.method(Method::os_lasso).fcr, dz = agg.method(Method::os_dantzig).fcr, u = agg.method(Method::uposi).fcr;
    fcr_ok = fcr_ok && l <= 0.08 && dz <= 0.08 && u <= 0.08;
    fcr_detail += to_string(kind) + fmt(" lasso %.3f dantzig %.3f uposi %.3f; ", l, dz, u);
    if (kind == CorrelationKind::exchangeable) {
      double pl = agg.method(Method::os_lasso).power, pd = agg.method(Method::os_dantzig).power,
             pn = agg.method(Method::naive).power;
      power_ok = power_ok && pl >= 0.95 && pd >= 0.95 && pn >= 0.95;
      power_detail += fmt("n800 K20 lasso %.3f dantzig %.3f naive %.3f; ", pl, pd, pn);
    }
  }
  auto big = run(sim(500, 100, CorrelationKind::exchangeable, 50, {Method::naive, Method::uposi}), "n500 K100");
  double nf = big.method(Method::naive).fcr, uf = big.method(Method::uposi).fcr;
  bool order = nf > uf;
  fcr_detail += fmt("n500 K100 naive %.3f > uposi %.3f", nf, uf);
  report(6, fcr_ok && order, fcr_detail);

  auto mid = run(sim(500, 50, CorrelationKind::exchangeable, 50, {Method::uposi}), "n500 K50");
  double up = mid.method(Method::uposi).power;
  bool uposi_ok = !(up > 0.10);
  power_detail = fmt("n500 K50 uposi %.3f (need <= 0.10); ", up) + power_detail;

  auto wide = run(sim(800, 50, CorrelationKind::exchangeable, 50, all), "n800 K50");
  double pl = wide.method(Method::os_lasso).power, pd = wide.method(Method::os_dantzig).power,
         pn = wide.method(Method::naive).power;
  power_ok = power_ok && pl >= 0.95 && pd >= 0.95 && pn >= 0.95;
  power_detail += fmt("n800 K50 lasso %.3f dantzig %.3f naive %.3f", pl, pd, pn);
  report(7, uposi_ok && power_ok, power_detail);

  int wider = 0, compared = 0;
  for (const auto& r : wide.replications) {
    const MethodOutcome* u = outcome(r, Method::uposi);
    const MethodOutcome* l = outcome(r, Method::os_lasso);
    if (!r.ok || !u || !l) continue;
    ++compared;
    wider += u->metrics.avg_length > l->metrics.avg_length ? 1 : 0;
  }
  report(8, wider >= 45 && compared == 50, fmt("UPoSI wider than OS.LASSO in %.0f of %.0f reps (need >= 45/50)", wider, compared));
}

void weight_equivalences() {
  double worst_full = 0.0, worst_dz_zero = 0.0, worst_feas = 0.0, worst_kkt = 0.0;
  int coords = 0;
  for (int t = 0; t < 8; ++t) {
    SimConfig c;
    c.n = 400;
    c.K = t % 2 ? 20 : 12;
    c.seed = 900 + t;
    auto sd0 = generate_dataset(c, TrueParams::for_K(c.K), 0);
    PropensityModel pm = fit_propensity(sd0.data, simulation_propensity_columns());
    Standardized st = standardize(sd0.data);
    PenalizedFit fit = penalized_g_fit(st.data, pm, CorrelationKind::exchangeable, ScadPenalty{0.02});
    ScoreDecomposition sd = efficient_scores(st.data, pm, fit.theta, fit.corr, fit.sigma2);
    for (Index k = 0; k < c.K; ++k) {
      ++coords;
      auto full = estimate_weights(sd, k, WeightMethod::full, 0.0);
      auto lasso0 = estimate_weights(sd, k, WeightMethod::lasso, 0.0);
      worst_full = std::max(worst_full, sup_norm(full.w - lasso0.w));
      Vector b(c.K - 1);
      Matrix A(c.K - 1, c.K - 1);
      auto nu = nuisance_indices(c.K, k);
      for (Index r = 0; r < c.K - 1; ++r) {
        b(r) = sd.info(nu[r], k);
        for (Index s = 0; s < c.K - 1; ++s) A(r, s) = sd.info(nu[r], nu[s]);
      }
      const double bmax = sup_norm(b);
      worst_dz_zero = std::max(worst_dz_zero, sup_norm(estimate_weights(sd, k, WeightMethod::dantzig, bmax).w));
      worst_dz_zero = std::max(worst_dz_zero, sup_norm(estimate_weights(sd, k, WeightMethod::dantzig, 2 * bmax).w));
      for (double frac : {0.5, 0.1, 0.01}) {
        const double lam = frac * bmax;
        auto dz = estimate_weights(sd, k, WeightMethod::dantzig, lam);
        worst_feas = std::max(worst_feas, sup_norm(b - A * dz.w) / lam - 1.0);
        auto la = estimate_weights(sd, k, WeightMethod::lasso, lam);
        Vector grad = A * la.w - b;
        for (Index j = 0; j < grad.size(); ++j) {
          double v = la.w(j) != 0.0 ? std::abs(grad(j) + lam * (la.w(j) > 0 ? 1.0 : -1.0)) : std::max(std::abs(grad(j)) - lam, 0.0);
          worst_kkt = std::max(worst_kkt, v / lam);
        }
      }
    }
  }
  bool pass = worst_full <= 1e-6 && worst_dz_zero == 0.0 && worst_feas <= 1e-9 && worst_kkt <= 1e-6;
  report(10, pass,
         fmt("|lasso(0) - full| %.1e, |dantzig(bmax)| %.1e, dantzig excess %.1e, lasso KKT %.1e over %.0f coordinates",
             worst_full, worst_dz_zero, worst_feas, worst_kkt, coords));
}

void determinism() {
  SimConfig c;
  c.n = 200;
  c.K = 12;
  c.reps = 4;
  c.boot = 500;
  c.seed = 31;
  c.methods = {Method::naive, Method::uposi, Method::os_full, Method::os_lasso, Method::os_dantzig};
  std::vector<std::string> dumps;
  for (int threads : {1, 4, 8}) {
    set_thread_count(threads);
    dumps.push_back(aggregate_json(run_replications(c)).dump());
  }
  set_thread_count(1);
  bool same = dumps[0] == dumps[1] && dumps[0] == dumps[2];
  report(11, same, std::string("simulation reports at 1/4/8 threads ") + (same ? "bitwise identical" : "differ"));
}

}  // namespace

int main() {
  auto t0 = std::chrono::steady_clock::now();
  oracle_equivalence();
  scad_closed_form();
  z_regrouping();
  bootstrap_box();
  weight_equivalences();
  determinism();
  selection_and_normality();
  fcr_power_length();
  std::printf("acceptance: %d failing criteria, %.0f s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
