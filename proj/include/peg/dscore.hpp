#pragma once

// Decorrelated-score inference: per-coordinate nuisance weights, the one-step
// improved estimator, Wald intervals and the score statistic.

#include <peg/estimation.hpp>
#include <peg/lp.hpp>

namespace peg {

struct ScoreDecomposition {
  Matrix scores;    // n x K, per-subject blip scores
  Vector mean;      // K
  Matrix info;      // K x K, n^-1 sum S_i S_i'
  Matrix jacobian;  // K x K, blip-blip block of W at the fit
  Index n = 0;
  Index K = 0;
};

/// Blip scores S_i = [(A_i - e_i).H_i]' V_i^-1 e_i at theta.
inline ScoreDecomposition efficient_scores(const Dataset& d, const PropensityModel& pm, const Vector& theta,
                                           const WorkingCorrelation& corr, double sigma2) {
  const Index K = d.K();
  if (theta.size() != 2 * K) throw UsageError("theta must have length 2K");
  MomentEngine eng(d, pm);
  // direct W is enough here; the cache would cost more than it saves
  MomentMatrices mm = moment_matrices(d, pm, corr, sigma2, ModelIndexSet::full(K));
  Matrix S = eng.subject_scores(eng.residuals(theta), corr, sigma2);
  ScoreDecomposition sd;
  sd.n = d.n();
  sd.K = K;
  sd.scores = S.rightCols(K);
  sd.mean = sd.scores.colwise().mean().transpose();
  sd.info = sd.scores.transpose() * sd.scores / static_cast<double>(sd.n);
  sd.info = 0.5 * (sd.info + sd.info.transpose());
  sd.jacobian = mm.W.bottomRightCorner(K, K);
  return sd;
}

inline ScoreDecomposition efficient_scores(const Dataset& d, const PropensityModel& pm, const PenalizedFit& fit) {
  return efficient_scores(d, pm, fit.theta, fit.corr, fit.sigma2);
}

enum class WeightMethod { full, lasso, dantzig };

inline std::string to_string(WeightMethod m) {
  switch (m) {
    case WeightMethod::full: return "full";
    case WeightMethod::lasso: return "lasso";
    case WeightMethod::dantzig: return "dantzig";
  }
  return "?";
}

struct WeightEstimate {
  Vector w;
  WeightMethod method = WeightMethod::full;
  double lambda_w = 0.0;
  Index k = 0;
};

/// Indices other than k, in order.
inline std::vector<Index> nuisance_indices(Index K, Index k) {
  std::vector<Index> nu;
  for (Index j = 0; j < K; ++j)
    if (j != k) nu.push_back(j);
  return nu;
}

namespace detail {

struct Partition {
  Matrix A;  // I_{nu nu}
  Vector b;  // I_{nu psi_k}
  double c = 0.0;  // I_{kk}
};

inline Partition partition(const Matrix& info, Index k) {
  const Index K = info.rows();
  if (k < 0 || k >= K) throw UsageError("coordinate out of range");
  auto nu = nuisance_indices(K, k);
  Partition p;
  p.A.resize(K - 1, K - 1);
  p.b.resize(K - 1);
  for (Index r = 0; r < K - 1; ++r) {
    p.b(r) = info(nu[r], k);
    for (Index s = 0; s < K - 1; ++s) p.A(r, s) = info(nu[r], nu[s]);
  }
  p.c = info(k, k);
  return p;
}

inline double soft_threshold(double x, double t) {
  return x > t ? x - t : (x < -t ? x + t : 0.0);
}

// Coordinate descent on 1/2 w'Aw - w'b + lambda ||w||_1.
inline Vector lasso_cd(const Matrix& A, const Vector& b, double lambda, Vector w, double tol = 1e-8) {
  const Index m = b.size();
  Vector grad = A * w - b;
  for (int sweep = 0; sweep < 200000; ++sweep) {
    double max_change = 0.0;
    for (Index j = 0; j < m; ++j) {
      const double ajj = A(j, j);
      if (!(ajj > 0.0)) continue;
      double z = ajj * w(j) - grad(j);
      double next = soft_threshold(z, lambda) / ajj;
      double delta = next - w(j);
      if (delta != 0.0) {
        grad.noalias() += delta * A.col(j);
        w(j) = next;
        max_change = std::max(max_change, std::abs(delta) * std::sqrt(ajj));
      }
    }
    if (max_change < tol * 1e-3) break;
  }
  return w;
}

// Sparse weights at every lambda in the grid, solved from the largest lambda
// down with warm starts. Results are returned in grid order.
inline std::vector<Vector> sparse_weight_path(const Partition& part, WeightMethod method,
                                              const std::vector<double>& grid) {
  const Index m = part.b.size();
  std::vector<std::size_t> order(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) order[g] = g;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return grid[x] > grid[y]; });
  std::vector<Vector> out(grid.size());
  const double bmax = sup_norm(part.b);
  if (method == WeightMethod::lasso) {
    Vector w = Vector::Zero(m);
    for (std::size_t g : order) {
      w = lasso_cd(part.A, part.b, grid[g], w);
      out[g] = w;
    }
    return out;
  }
  // variables (u, v) >= 0, w = u - v
  Matrix A(2 * m, 2 * m);
  A << part.A, -part.A, -part.A, part.A;
  ParametricLp lp(Vector::Ones(2 * m), A);
  Vector rhs(2 * m);
  for (std::size_t g : order) {
    if (grid[g] >= bmax) {
      out[g] = Vector::Zero(m);
      continue;
    }
    rhs << Vector::Constant(m, grid[g]) + part.b, Vector::Constant(m, grid[g]) - part.b;
    LpResult res = lp.solve(rhs);
    if (res.status != LpStatus::optimal) throw NumericalError("dantzig weight program has no optimal solution");
    out[g] = res.x.head(m) - res.x.tail(m);
  }
  return out;
}

}  // namespace detail

inline WeightEstimate estimate_weights(const Matrix& info, Index k, WeightMethod method, double lambda_w) {
  if (!(lambda_w >= 0.0)) throw UsageError("lambda_w must be non-negative");
  auto part = detail::partition(info, k);
  WeightEstimate we;
  we.method = method;
  we.lambda_w = lambda_w;
  we.k = k;
  const Index m = part.b.size();
  if (m == 0) {
    we.w = Vector();
    return we;
  }
  switch (method) {
    case WeightMethod::full: {
      Eigen::PartialPivLU<Matrix> lu(part.A);
      if (!well_conditioned(lu))
        throw NumericalError("nuisance information matrix is singular; use the lasso or dantzig weights");
      we.w = lu.solve(part.b);
      we.lambda_w = 0.0;
      break;
    }
    case WeightMethod::lasso:
    case WeightMethod::dantzig:
      we.w = detail::sparse_weight_path(part, method, {lambda_w}).front();
      break;
  }
  return we;
}

inline WeightEstimate estimate_weights(const ScoreDecomposition& sd, Index k, WeightMethod method, double lambda_w) {
  return estimate_weights(sd.info, k, method, lambda_w);
}

/// ||I_{nu psi} - I_{nu nu} w||_inf.
inline double weight_residual(const Matrix& info, const WeightEstimate& we) {
  auto part = detail::partition(info, we.k);
  return part.b.size() ? sup_norm(part.b - part.A * we.w) : 0.0;
}

/// Subject-level fold labels in [0, folds) from a seeded permutation.
inline std::vector<int> make_folds(Index n, int folds, std::uint64_t seed) {
  if (folds < 2 || n < folds) throw UsageError("cross-validation needs 2 <= folds <= n");
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  auto eng = make_stream(seed, 0, 0xF01D);
  for (Index i = n - 1; i > 0; --i) {
    auto j = static_cast<Index>(eng() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) out[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])] = static_cast<int>(r % folds);
  return out;
}

struct CvResult {
  double lambda_star = 0.0;
  std::vector<double> grid;
  Matrix fold_loss;  // grid x folds
  Vector loss;       // summed over folds
};

/// Picks lambda_w by subject-level cross-validation with validation loss
/// w' I_nn^val w - 2 w' I_np^val. Ties go to the larger lambda_w.
inline CvResult cv_select_lambda_w(const ScoreDecomposition& sd, Index k, WeightMethod method,
                                   std::vector<double> grid, const std::vector<int>& folds) {
  if (grid.empty()) throw UsageError("cv_select_lambda_w: empty grid");
  if (static_cast<Index>(folds.size()) != sd.n) throw UsageError("fold labels do not match the number of subjects");
  std::sort(grid.begin(), grid.end());
  const int F = *std::max_element(folds.begin(), folds.end()) + 1;
  CvResult cv;
  cv.grid = grid;
  cv.fold_loss = Matrix::Zero(static_cast<Index>(grid.size()), F);
  if (grid.size() == 1) {
    cv.lambda_star = grid[0];
    cv.loss = Vector::Zero(1);
    return cv;
  }
  const Index K = sd.K;
  Matrix total = sd.scores.transpose() * sd.scores;
  for (int f = 0; f < F; ++f) {
    Matrix val = Matrix::Zero(K, K);
    Index nv = 0;
    for (Index i = 0; i < sd.n; ++i)
      if (folds[static_cast<std::size_t>(i)] == f) {
        val.noalias() += sd.scores.row(i).transpose() * sd.scores.row(i);
        ++nv;
      }
    const Index nt = sd.n - nv;
    if (nv == 0 || nt == 0) throw UsageError("every fold needs training and validation subjects");
    Matrix train = (total - val) / static_cast<double>(nt);
    val /= static_cast<double>(nv);
    auto pv = detail::partition(val, k);
    std::vector<Vector> path;
    if (method == WeightMethod::full) {
      path.assign(grid.size(), estimate_weights(train, k, method, 0.0).w);
    } else {
      path = detail::sparse_weight_path(detail::partition(train, k), method, grid);
    }
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const Vector& w = path[g];
      cv.fold_loss(static_cast<Index>(g), f) = w.dot(pv.A * w) - 2.0 * w.dot(pv.b);
    }
  }
  cv.loss = cv.fold_loss.rowwise().sum();
  std::size_t best = 0;
  for (std::size_t g = 0; g < grid.size(); ++g)
    if (cv.loss(static_cast<Index>(g)) <= cv.loss(static_cast<Index>(best))) best = g;
  cv.lambda_star = grid[best];
  return cv;
}

/// S_k - w' S_nu at the plug-in estimates.
inline double decorrelated_score(const Vector& mean_score, Index k, const Vector& w) {
  const Index K = mean_score.size();
  if (w.size() != K - 1) throw UsageError("weight vector must have length K - 1");
  auto nu = nuisance_indices(K, k);
  double s = mean_score(k);
  for (Index r = 0; r < K - 1; ++r) s -= w(r) * mean_score(nu[r]);
  return s;
}

inline double decorrelated_score(const ScoreDecomposition& sd, Index k, const Vector& w) {
  return decorrelated_score(sd.mean, k, w);
}

struct OneStepResult {
  Index k = 0;
  double psi_hat = 0.0;
  double psi_tilde = 0.0;
  double partial_info = 0.0;
  double sigma_S = 0.0;
  double se = 0.0;  // sqrt(sigma_S) / (sqrt(n) partial_info)
  double lower = 0.0;
  double upper = 0.0;
  double score_stat = 0.0;
  double lambda_w = 0.0;

  double length() const { return upper - lower; }
};

/// psi_tilde = psi_hat - Sdd / I_{k|nu},  CI = psi_tilde +/- z sqrt(sigma_S) / (sqrt(n) I_{k|nu}),
/// T_n = sqrt(n) Sdd(psi_k = 0) / sqrt(sigma_S) with the fitted-point weights.
inline OneStepResult one_step(const ScoreDecomposition& sd, double psi_hat, Index k, const WeightEstimate& we,
                              double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
  auto part = detail::partition(sd.info, k);
  const Vector& w = we.w;
  OneStepResult r;
  r.k = k;
  r.psi_hat = psi_hat;
  r.lambda_w = we.lambda_w;
  r.partial_info = part.c - w.dot(part.b);
  if (!(r.partial_info > 1e-10)) throw NumericalError("degenerate partial information for blip coordinate " + std::to_string(k));
  double sdd = decorrelated_score(sd, k, w);
  r.psi_tilde = psi_hat - sdd / r.partial_info;
  r.sigma_S = std::max(part.c - 2.0 * w.dot(part.b) + w.dot(part.A * w), 0.0);
  const double rootn = std::sqrt(static_cast<double>(sd.n));
  r.se = std::sqrt(r.sigma_S) / (rootn * r.partial_info);
  const double z = normal_quantile(1.0 - alpha / 2.0);
  r.lower = r.psi_tilde - z * r.se;
  r.upper = r.psi_tilde + z * r.se;
  // moving psi_k from psi_hat to 0 shifts the scores by J(:, k) psi_hat
  Vector shifted = sd.mean + sd.jacobian.col(k) * psi_hat;
  double sdd0 = decorrelated_score(shifted, k, w);
  r.score_stat = r.sigma_S > 0.0 ? rootn * sdd0 / std::sqrt(r.sigma_S) : 0.0;
  return r;
}

struct DscoreOptions {
  WeightMethod method = WeightMethod::lasso;
  double alpha = 0.05;
  int folds = 5;
  int grid_points = 20;
  std::uint64_t seed = 0;
};

struct DscoreReport {
  WeightMethod method = WeightMethod::lasso;
  double alpha = 0.05;
  std::vector<OneStepResult> results;  // original scale
};

/// One-step inference for every selected blip coordinate. Continuous
/// adjusters are standardized; estimates and intervals are mapped back.
inline DscoreReport infer_all(const Dataset& d, const PropensityModel& pm, const PenalizedFit& fit,
                              const DscoreOptions& opt) {
  const Index K = d.K();
  Standardized st = standardize(d);
  Vector theta = fit.theta;
  for (Index k = 0; k < K; ++k) {
    theta(k) *= st.scale(k);
    theta(K + k) *= st.scale(k);
  }
  ScoreDecomposition sd = efficient_scores(st.data, pm, theta, fit.corr, fit.sigma2);
  std::vector<int> folds;
  if (opt.method != WeightMethod::full) folds = make_folds(d.n(), opt.folds, opt.seed);
  DscoreReport rep;
  rep.method = opt.method;
  rep.alpha = opt.alpha;
  rep.results.resize(static_cast<std::size_t>(fit.selected.size()));
  parallel_for(rep.results.size(), [&](std::size_t c) {
    const Index k = fit.selected[static_cast<Index>(c)];
    double lambda_w = 0.0;
    if (opt.method != WeightMethod::full) {
      double bmax = sup_norm(detail::partition(sd.info, k).b);
      if (bmax > 0.0) {
        auto grid = log_spaced(1e-3 * bmax, bmax, opt.grid_points);
        lambda_w = cv_select_lambda_w(sd, k, opt.method, grid, folds).lambda_star;
      }
    }
    WeightEstimate we = estimate_weights(sd, k, opt.method, lambda_w);
    OneStepResult r = one_step(sd, theta(K + k), k, we, opt.alpha);
    const double s = st.scale(k);
    r.psi_hat /= s;
    r.psi_tilde /= s;
    r.se /= s;
    r.lower /= s;
    r.upper /= s;
    rep.results[c] = r;
  });
  return rep;
}

inline std::vector<Interval> to_intervals(const DscoreReport& rep) {
  std::vector<Interval> out;
  for (const auto& r : rep.results) out.push_back({r.k, r.psi_tilde, r.lower, r.upper});
  return out;
}

}  // namespace peg
