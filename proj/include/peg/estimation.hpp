#pragma once

// Penalized G-estimation of theta = (delta, psi): SCAD-penalized efficient
// score solved by MM iterations, DRIC tuning and the naive sandwich
// comparator.
//
// Layout of theta and of every full-model moment matrix: the first K entries
// are the treatment-free coefficients delta, the next K are the blip
// coefficients psi. For a submodel M the blip block is restricted to M.

#include <peg/core.hpp>

#include <boost/math/distributions/normal.hpp>

#include <limits>
#include <map>
#include <memory>
#include <optional>

namespace peg {

struct ScadPenalty {
  double lambda = 0.0;
  double a = 3.7;

  void validate() const {
    if (!(lambda >= 0.0)) throw UsageError("SCAD lambda must be >= 0");
    if (!(a > 2.0)) throw UsageError("SCAD a must exceed 2");
  }
};

/// First derivative of the SCAD penalty at t >= 0.
inline double scad_derivative(double t, const ScadPenalty& p) {
  if (t <= p.lambda) return p.lambda;
  return std::max(p.a * p.lambda - t, 0.0) / (p.a - 1.0);
}

/// SCAD penalty value at t >= 0.
inline double scad_value(double t, const ScadPenalty& p) {
  const double l = p.lambda, a = p.a;
  if (t <= l) return l * t;
  if (t <= a * l) return (2.0 * a * l * t - t * t - l * l) / (2.0 * (a - 1.0));
  return l * l * (a + 1.0) / 2.0;
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(0.0, 1.0), p);
}

/// Averaged G-estimating equation system W theta = G for submodel M.
struct MomentMatrices {
  Matrix W;
  Vector G;
  ModelIndexSet M;
  Index K = 0;

  Index order() const { return W.rows(); }

  /// Positions of the submodel coordinates inside the full-model ordering.
  static std::vector<Index> positions(Index K, const ModelIndexSet& M) {
    std::vector<Index> pos;
    for (Index k = 0; k < K; ++k) pos.push_back(k);
    for (Index m : M) pos.push_back(K + m);
    return pos;
  }

  /// Restricts a full-model system to submodel M.
  MomentMatrices restrict_to(const ModelIndexSet& sub) const {
    if (M.size() != K) throw UsageError("restrict_to needs a full-model system");
    sub.check_within(K);
    auto pos = positions(K, sub);
    const Index q = static_cast<Index>(pos.size());
    MomentMatrices out;
    out.K = K;
    out.M = sub;
    out.W.resize(q, q);
    out.G.resize(q);
    for (Index r = 0; r < q; ++r) {
      out.G(r) = G(pos[r]);
      for (Index c = 0; c < q; ++c) out.W(r, c) = W(pos[r], pos[c]);
    }
    return out;
  }
};

namespace detail {

/// Correlation matrices per session count; unbalanced subjects use the
/// leading J_i x J_i block of the structure.
class CorrelationTable {
 public:
  CorrelationTable(const WorkingCorrelation& corr, const Dataset& d) {
    for (const auto& s : d.subjects()) {
      Index J = s.sessions();
      if (!by_J_.count(J)) by_J_.emplace(J, materialize_correlation(corr, J));
    }
  }
  const CorrelationMatrices& operator()(Index J) const { return by_J_.at(J); }

 private:
  std::map<Index, CorrelationMatrices> by_J_;
};

}  // namespace detail

/// Direct per-subject evaluation of W(M), G(M):
///   W = n^-1 sum_i [H_i, (a_i - e_i).H_i(M)]' V_i^-1 [H_i, a_i.H_i(M)]
///   G = n^-1 sum_i [H_i, (a_i - e_i).H_i(M)]' V_i^-1 Y_i
/// with V_i = sigma2 * R_i.
inline MomentMatrices moment_matrices(const Dataset& d, const PropensityModel& pm, const WorkingCorrelation& corr,
                                      double sigma2, const ModelIndexSet& M) {
  M.check_within(d.K());
  if (!(sigma2 > 0.0)) throw NumericalError("moment_matrices: dispersion must be positive");
  if (static_cast<Index>(pm.fitted.size()) != d.n()) throw UsageError("propensity model does not match dataset");
  const Index K = d.K(), q = K + M.size();
  detail::CorrelationTable table(corr, d);
  MomentMatrices mm;
  mm.K = K;
  mm.M = M;
  mm.W = Matrix::Zero(q, q);
  mm.G = Vector::Zero(q);
  for (Index i = 0; i < d.n(); ++i) {
    const Subject& s = d.subject(i);
    const Vector& e = pm.fitted[static_cast<std::size_t>(i)];
    const Index J = s.sessions();
    Matrix D(J, q), X(J, q);
    D.leftCols(K) = s.h;
    X.leftCols(K) = s.h;
    for (Index c = 0; c < M.size(); ++c) {
      D.col(K + c) = (s.a - e).cwiseProduct(s.h.col(M[c]));
      X.col(K + c) = s.a.cwiseProduct(s.h.col(M[c]));
    }
    Matrix VinvD = table(J).R_inverse * D / sigma2;
    mm.W.noalias() += VinvD.transpose() * X;
    mm.G.noalias() += VinvD.transpose() * s.y;
  }
  mm.W /= static_cast<double>(d.n());
  mm.G /= static_cast<double>(d.n());
  return mm;
}

/// Precomputed cross-session moments so that W and G can be re-evaluated for
/// any (correlation, dispersion) in O(J^2 K^2) instead of a pass over the
/// data. Falls back to direct evaluation when the cache would be too large.
class MomentEngine {
 public:
  static constexpr std::size_t kCacheBytesLimit = std::size_t{512} << 20;

  MomentEngine(const Dataset& d, const PropensityModel& pm) : d_(&d), pm_(&pm) {
    if (static_cast<Index>(pm.fitted.size()) != d.n()) throw UsageError("propensity model does not match dataset");
    K_ = d.K();
    const Index p = 2 * K_;
    std::map<Index, std::vector<Index>> members;
    for (Index i = 0; i < d.n(); ++i) members[d.subject(i).sessions()].push_back(i);
    std::size_t bytes = 0;
    for (const auto& [J, ids] : members)
      bytes += static_cast<std::size_t>(J * (J + 1) / 2) * static_cast<std::size_t>(p * p) * sizeof(double);
    cached_ = bytes <= kCacheBytesLimit;
    if (!cached_) return;
    for (const auto& [J, ids] : members) {
      Group g;
      g.J = J;
      const Index ng = static_cast<Index>(ids.size());
      std::vector<Matrix> Dj(static_cast<std::size_t>(J), Matrix(ng, p)), Xj(static_cast<std::size_t>(J), Matrix(ng, p));
      Matrix Yj(ng, J);
      for (Index r = 0; r < ng; ++r) {
        const Subject& s = d.subject(ids[static_cast<std::size_t>(r)]);
        const Vector& e = pm.fitted[static_cast<std::size_t>(ids[static_cast<std::size_t>(r)])];
        for (Index j = 0; j < J; ++j) {
          auto& D = Dj[static_cast<std::size_t>(j)];
          auto& X = Xj[static_cast<std::size_t>(j)];
          D.row(r).head(K_) = s.h.row(j);
          D.row(r).tail(K_) = (s.a(j) - e(j)) * s.h.row(j);
          X.row(r).head(K_) = s.h.row(j);
          X.row(r).tail(K_) = s.a(j) * s.h.row(j);
          Yj(r, j) = s.y(j);
        }
      }
      for (Index j = 0; j < J; ++j) {
        for (Index jp = j; jp < J; ++jp) {
          const auto& Dj_ = Dj[static_cast<std::size_t>(j)];
          const auto& Djp = Dj[static_cast<std::size_t>(jp)];
          Matrix C = Dj_.transpose() * Xj[static_cast<std::size_t>(jp)];
          Vector gv = Dj_.transpose() * Yj.col(jp);
          if (jp != j) {
            C.noalias() += Djp.transpose() * Xj[static_cast<std::size_t>(j)];
            gv.noalias() += Djp.transpose() * Yj.col(j);
          }
          g.blocks.push_back(std::move(C));
          g.rhs.push_back(std::move(gv));
        }
      }
      groups_.push_back(std::move(g));
    }
  }

  const Dataset& data() const { return *d_; }
  const PropensityModel& propensity() const { return *pm_; }
  Index K() const { return K_; }
  bool cached() const { return cached_; }

  /// Full-model W (2K x 2K) and G for V_i = sigma2 * R_i.
  MomentMatrices full(const WorkingCorrelation& corr, double sigma2) const {
    if (!(sigma2 > 0.0)) throw NumericalError("dispersion must be positive");
    if (!cached_) return moment_matrices(*d_, *pm_, corr, sigma2, ModelIndexSet::full(K_));
    const Index p = 2 * K_;
    MomentMatrices mm;
    mm.K = K_;
    mm.M = ModelIndexSet::full(K_);
    mm.W = Matrix::Zero(p, p);
    mm.G = Vector::Zero(p);
    for (const auto& g : groups_) {
      CorrelationMatrices cm = materialize_correlation(corr, g.J);
      std::size_t b = 0;
      for (Index j = 0; j < g.J; ++j)
        for (Index jp = j; jp < g.J; ++jp, ++b) {
          double w = cm.R_inverse(j, jp);
          if (w == 0.0) continue;
          mm.W.noalias() += w * g.blocks[b];
          mm.G.noalias() += w * g.rhs[b];
        }
    }
    const double scale = 1.0 / (sigma2 * static_cast<double>(d_->n()));
    mm.W *= scale;
    mm.G *= scale;
    return mm;
  }

  /// e_i = Y_i - [H_i, A_i.H_i] theta.
  std::vector<Vector> residuals(const Vector& theta) const {
    if (theta.size() != 2 * K_) throw UsageError("theta must have length 2K");
    std::vector<Vector> out;
    out.reserve(static_cast<std::size_t>(d_->n()));
    for (const auto& s : d_->subjects())
      out.push_back(s.y - s.h * theta.head(K_) - s.a.cwiseProduct(s.h * theta.tail(K_)));
    return out;
  }

  /// Rows: per-subject full-model efficient scores [H_i, (A_i - e_i).H_i]' V_i^-1 e_i.
  Matrix subject_scores(const std::vector<Vector>& resid, const WorkingCorrelation& corr, double sigma2) const {
    detail::CorrelationTable table(corr, *d_);
    Matrix S(d_->n(), 2 * K_);
    for (Index i = 0; i < d_->n(); ++i) {
      const Subject& s = d_->subject(i);
      const Vector& e = pm_->fitted[static_cast<std::size_t>(i)];
      Vector v = table(s.sessions()).R_inverse * resid[static_cast<std::size_t>(i)] / sigma2;
      S.row(i).head(K_) = (s.h.transpose() * v).transpose();
      S.row(i).tail(K_) = (s.h.transpose() * (s.a - e).cwiseProduct(v)).transpose();
    }
    return S;
  }

  /// sum_i e_i' V_i^-1 e_i.
  double weighted_rss(const std::vector<Vector>& resid, const WorkingCorrelation& corr, double sigma2) const {
    detail::CorrelationTable table(corr, *d_);
    double total = 0.0;
    for (Index i = 0; i < d_->n(); ++i) {
      const Vector& e = resid[static_cast<std::size_t>(i)];
      total += e.dot(table(e.size()).R_inverse * e);
    }
    return total / sigma2;
  }

  /// Moment dispersion estimate sum e^2 / (N - 2K).
  double dispersion(const std::vector<Vector>& resid) const {
    const Index dof = d_->total_sessions() - 2 * K_;
    if (dof <= 0) throw NumericalError("not enough sessions to estimate the dispersion (need N > 2K)");
    double ss = 0.0;
    for (const auto& e : resid) ss += e.squaredNorm();
    return ss / static_cast<double>(dof);
  }

 private:
  struct Group {
    Index J = 0;
    std::vector<Matrix> blocks;  // upper-triangular (j <= j') symmetrized sums
    std::vector<Vector> rhs;
  };

  const Dataset* d_;
  const PropensityModel* pm_;
  Index K_ = 0;
  bool cached_ = false;
  std::vector<Group> groups_;
};

inline constexpr double kMaxConditionNumber = 1e12;

// rcond() alone reports 1 for an exactly zero pivot
inline bool well_conditioned(const Eigen::PartialPivLU<Matrix>& lu) {
  if (lu.matrixLU().size() == 0) return true;
  Vector piv = lu.matrixLU().diagonal().cwiseAbs();
  double rc = lu.rcond();
  return std::isfinite(rc) && rc * kMaxConditionNumber >= 1.0 && piv.minCoeff() * kMaxConditionNumber > piv.maxCoeff();
}

/// Unpenalized G-estimate: solves W theta = G by LU with a conditioning check.
inline Vector g_estimate(const MomentMatrices& mm) {
  if (mm.W.rows() != mm.W.cols() || mm.W.rows() != mm.G.size()) throw UsageError("g_estimate: dimension mismatch");
  Eigen::PartialPivLU<Matrix> lu(mm.W);
  if (!well_conditioned(lu))
    throw NumericalError("G-estimating equations are ill-conditioned (condition number > 1e12); "
                         "reduce the model (collinear or redundant adjusters?)");
  return lu.solve(mm.G);
}

// ---------------------------------------------------------------------------
// MM iterations

inline constexpr double kSelectionThreshold = 0.001;

struct FitControls {
  int max_iter = 200;
  double tol = 1e-6;
  double epsilon = 1e-6;
  std::optional<Vector> initial;                      // theta^(0); default: independence G-estimate
  std::optional<WorkingCorrelation> fixed_correlation;  // skip correlation refresh
};

/// Diagonal of Sigma_lambda(theta): zero for delta and the blip intercept,
/// q_lambda(|psi_m|) / (epsilon + |psi_m|) for the remaining blip coefficients.
inline Vector mm_penalty_weights(const Vector& theta, Index K, const ScadPenalty& p, double epsilon) {
  Vector w = Vector::Zero(theta.size());
  if (p.lambda == 0.0) return w;
  for (Index m = 1; m < K; ++m) {
    double t = std::abs(theta(K + m));
    w(K + m) = scad_derivative(t, p) / (epsilon + t);
  }
  return w;
}

/// One MM update for a fixed system: solves (W + Sigma_lambda(theta)) theta' = G.
inline Vector mm_step(const MomentMatrices& mm, const Vector& theta, const ScadPenalty& p, double epsilon) {
  Matrix A = mm.W;
  A.diagonal() += mm_penalty_weights(theta, mm.K, p, epsilon);
  Eigen::PartialPivLU<Matrix> lu(A);
  Vector next = lu.solve(mm.G);
  if (!next.allFinite()) throw NumericalError("MM step produced non-finite estimates");
  return next;
}

/// {0} union {m >= 1 : |psi_m| >= 0.001}.
inline ModelIndexSet selected_set(const Eigen::Ref<const Vector>& psi) {
  std::vector<Index> idx{0};
  for (Index m = 1; m < psi.size(); ++m)
    if (std::abs(psi(m)) >= kSelectionThreshold) idx.push_back(m);
  return ModelIndexSet(std::move(idx));
}

struct PenalizedFit {
  Vector theta;  // (delta, psi), length 2K
  Index K = 0;
  double sigma2 = 1.0;
  WorkingCorrelation corr;
  CorrelationKind kind = CorrelationKind::independent;
  ScadPenalty penalty;
  double epsilon = 1e-6;
  double lambda_star = 0.0;
  ModelIndexSet selected;
  int iterations = 0;
  bool converged = false;
  bool correlation_clamped = false;
  Matrix sandwich_cov;  // over (delta, psi_B); empty when the bread is singular

  auto delta() const { return theta.head(K); }
  auto psi() const { return theta.tail(K); }
};

namespace detail {

inline Matrix sandwich_covariance(const MomentEngine& eng, const PenalizedFit& fit, const MomentMatrices& full) {
  const Index K = eng.K();
  const ModelIndexSet& B = fit.selected;
  auto pos = MomentMatrices::positions(K, B);
  MomentMatrices sub = full.restrict_to(B);
  Vector pen = mm_penalty_weights(fit.theta, K, fit.penalty, fit.epsilon);
  Matrix bread = sub.W;
  for (Index r = 0; r < bread.rows(); ++r) bread(r, r) += pen(pos[r]);
  Eigen::PartialPivLU<Matrix> lu(bread);
  if (!well_conditioned(lu)) return {};
  auto resid = eng.residuals(fit.theta);
  Matrix S = eng.subject_scores(resid, fit.corr, fit.sigma2);
  Matrix SB(S.rows(), static_cast<Index>(pos.size()));
  for (Index c = 0; c < SB.cols(); ++c) SB.col(c) = S.col(pos[c]);
  const double n = static_cast<double>(eng.data().n());
  Matrix meat = SB.transpose() * SB / n;
  Matrix binv = lu.inverse();
  Matrix cov = binv * meat * binv.transpose() / n;
  return 0.5 * (cov + cov.transpose());
}

}  // namespace detail

/// SCAD-penalized G-estimation by MM iterations. Each iteration refreshes the
/// dispersion and working correlation from the current residuals, then solves
/// (W + Sigma_lambda) theta = G. Blip coefficients below 0.001 in magnitude
/// are set to zero at the end when lambda > 0.
inline PenalizedFit penalized_g_fit(const MomentEngine& eng, CorrelationKind kind, const ScadPenalty& p,
                                    const FitControls& ctl = {}) {
  p.validate();
  const Index K = eng.K();
  PenalizedFit fit;
  fit.K = K;
  fit.kind = kind;
  fit.penalty = p;
  fit.epsilon = ctl.epsilon;
  fit.lambda_star = p.lambda;

  Vector theta;
  if (ctl.initial) {
    if (ctl.initial->size() != 2 * K) throw UsageError("initial theta must have length 2K");
    theta = *ctl.initial;
  } else {
    theta = g_estimate(eng.full(WorkingCorrelation::independent(), 1.0));
  }

  MomentMatrices mm;
  for (int it = 1; it <= ctl.max_iter; ++it) {
    auto resid = eng.residuals(theta);
    fit.sigma2 = eng.dispersion(resid);
    if (ctl.fixed_correlation) {
      fit.corr = *ctl.fixed_correlation;
    } else {
      auto est = estimate_correlation(std::span<const Vector>(resid), kind, fit.sigma2);
      fit.corr = std::move(est.corr);
      fit.correlation_clamped = est.clamped;
    }
    mm = eng.full(fit.corr, fit.sigma2);
    Vector next = mm_step(mm, theta, p, ctl.epsilon);
    double change = sup_norm(next - theta);
    theta = std::move(next);
    fit.iterations = it;
    if (change < ctl.tol) {
      fit.converged = true;
      break;
    }
  }
  if (p.lambda > 0.0)
    for (Index m = 1; m < K; ++m)
      if (std::abs(theta(K + m)) < kSelectionThreshold) theta(K + m) = 0.0;
  fit.theta = std::move(theta);
  fit.selected = selected_set(fit.theta.tail(K));
  fit.sandwich_cov = detail::sandwich_covariance(eng, fit, mm);
  return fit;
}

inline PenalizedFit penalized_g_fit(const Dataset& d, const PropensityModel& pm, CorrelationKind kind,
                                    const ScadPenalty& p, const FitControls& ctl = {}) {
  MomentEngine eng(d, pm);
  return penalized_g_fit(eng, kind, p, ctl);
}

// ---------------------------------------------------------------------------
// Tuning

struct TuneResult {
  double lambda_star = 0.0;
  std::size_t best = 0;
  std::vector<double> grid;
  std::vector<double> dric;  // +inf for non-converged fits
  std::vector<PenalizedFit> fits;
  PenalizedFit reference;  // lambda = 0 fit supplying V for the criterion

  const PenalizedFit& selected_fit() const { return fits[best]; }
};

/// Degrees of freedom K + #{m >= 1 : |psi_m| >= 0.001} + 1.
inline double dric_df(const PenalizedFit& fit) {
  return static_cast<double>(fit.K + fit.selected.size() - 1 + 1);
}

/// Default grid: 30 log-spaced values over [0.01, 2] * sigma * sqrt(log K / n),
/// sigma from the unpenalized fit.
inline std::vector<double> default_lambda_grid(const MomentEngine& eng, const PenalizedFit& unpenalized, int points = 30,
                                               double lo = 0.01, double hi = 2.0) {
  double sigma = std::sqrt(unpenalized.sigma2);
  if (!(sigma > 0.0) || !std::isfinite(sigma)) sigma = 1.0;
  double logk = std::max(std::log(static_cast<double>(eng.K())), 1.0);
  double c = sigma * std::sqrt(logk / static_cast<double>(eng.data().n()));
  return log_spaced(lo * c, hi * c, points);
}

namespace detail {

// Index of the smallest finite value, the last one among equals.
inline std::optional<std::size_t> argmin_last(const std::vector<double>& v) {
  std::optional<std::size_t> best;
  for (std::size_t g = 0; g < v.size(); ++g)
    if (std::isfinite(v[g]) && (!best || v[g] <= v[*best])) best = g;
  return best;
}

}  // namespace detail

/// Fits every lambda on the grid and returns the DRIC minimizer
///   DRIC(lambda) = sum_i e_i' V_ref^-1 e_i + log(n) * df(lambda),
/// where V_ref comes from the unpenalized fit. Ties go to the larger lambda.
inline TuneResult tune_lambda(const MomentEngine& eng, CorrelationKind kind, std::vector<double> grid,
                              const FitControls& ctl = {}, double scad_a = 3.7) {
  if (grid.empty()) throw UsageError("tune_lambda: empty lambda grid");
  std::sort(grid.begin(), grid.end());
  TuneResult out;
  out.reference = penalized_g_fit(eng, kind, ScadPenalty{0.0, scad_a}, ctl);
  out.grid = grid;
  out.fits.resize(grid.size());
  out.dric.assign(grid.size(), std::numeric_limits<double>::infinity());
  const double logn = std::log(static_cast<double>(eng.data().n()));
  parallel_for(grid.size(), [&](std::size_t g) {
    out.fits[g] = penalized_g_fit(eng, kind, ScadPenalty{grid[g], scad_a}, ctl);
    const auto& f = out.fits[g];
    if (!f.converged) return;
    double rss = eng.weighted_rss(eng.residuals(f.theta), out.reference.corr, out.reference.sigma2);
    out.dric[g] = rss + logn * dric_df(f);
  });
  auto best = detail::argmin_last(out.dric);
  if (!best) throw NumericalError("tune_lambda: no penalized fit converged on the grid");
  out.best = *best;
  out.lambda_star = grid[out.best];
  return out;
}

/// Tuning with the default grid.
inline TuneResult tune_lambda(const MomentEngine& eng, CorrelationKind kind, const FitControls& ctl = {}) {
  PenalizedFit unpen = penalized_g_fit(eng, kind, ScadPenalty{0.0}, ctl);
  return tune_lambda(eng, kind, default_lambda_grid(eng, unpen), ctl);
}

// ---------------------------------------------------------------------------
// Naive sandwich inference

struct Interval {
  Index k = 0;  // blip coordinate
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;

  double length() const { return upper - lower; }
  bool covers(double v) const { return lower <= v && v <= upper; }
};

/// Wald intervals psi_k +/- z_{1-alpha/2} se_k over the selected blip
/// coordinates, from the sandwich covariance of the penalized fit.
inline std::vector<Interval> sandwich_ci(const PenalizedFit& fit, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
  if (fit.sandwich_cov.size() == 0) throw NumericalError("sandwich bread matrix is singular");
  const double z = normal_quantile(1.0 - alpha / 2.0);
  std::vector<Interval> out;
  for (Index c = 0; c < fit.selected.size(); ++c) {
    Index k = fit.selected[c];
    double var = fit.sandwich_cov(fit.K + c, fit.K + c);
    double se = std::sqrt(std::max(var, 0.0));
    double est = fit.theta(fit.K + k);
    out.push_back({k, est, est - z * se, est + z * se});
  }
  return out;
}

}  // namespace peg
