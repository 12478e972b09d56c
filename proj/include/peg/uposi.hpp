#pragma once

// Universal post-selection inference for penalized G-estimation: joint
// sup-norm quantiles of the estimation errors of W and G by multiplier
// bootstrap, simultaneous regions and coordinate-wise intervals.

#include <peg/estimation.hpp>

namespace peg {

/// Per-subject contributions to G (block I) and to the k <= k' entries of the
/// four W blocks (block II). Averaging a column reproduces the matching entry
/// of the full-model moment system.
struct ZVectors {
  Matrix Z;  // n x (2K^2 + 4K)
  Index K = 0;

  static Index width(Index K) { return 2 * K * K + 4 * K; }
  Index block_one() const { return 2 * K; }

  /// Entry of G reproduced by column c < 2K.
  Index g_entry(Index c) const { return c; }

  /// (row, col) of W reproduced by column c >= 2K.
  std::pair<Index, Index> w_entry(Index c) const {
    Index t = c - 2 * K;
    const Index tri = K * (K + 1) / 2;
    Index family = t / tri, r = t % tri;
    Index k = 0;
    while (r >= K - k) {
      r -= K - k;
      ++k;
    }
    Index kp = k + r;
    Index row_off = (family >= 2) ? K : 0;
    Index col_off = (family % 2 == 1) ? K : 0;
    return {row_off + k, col_off + kp};
  }
};

/// Builds Z_i for every subject with V_i = sigma2 * R_i (full model).
inline ZVectors build_z_vectors(const Dataset& d, const PropensityModel& pm, const WorkingCorrelation& corr,
                                double sigma2) {
  if (!(sigma2 > 0.0)) throw NumericalError("dispersion must be positive");
  const Index K = d.K(), p = ZVectors::width(K);
  detail::CorrelationTable table(corr, d);
  ZVectors z;
  z.K = K;
  z.Z.resize(d.n(), p);
  for (Index i = 0; i < d.n(); ++i) {
    const Subject& s = d.subject(i);
    const Vector& e = pm.fitted[static_cast<std::size_t>(i)];
    const Index J = s.sessions();
    Matrix D(J, 2 * K), R(J, 2 * K + 1);
    D.leftCols(K) = s.h;
    D.rightCols(K) = (s.a - e).asDiagonal() * s.h;
    R.col(0) = s.y;
    R.middleCols(1, K) = s.h;
    R.rightCols(K) = s.a.asDiagonal() * s.h;
    Matrix P = D.transpose() * (table(J).R_inverse * R) / sigma2;  // 2K x (2K+1)
    Index c = 0;
    for (Index k = 0; k < 2 * K; ++k) z.Z(i, c++) = P(k, 0);
    for (int family = 0; family < 4; ++family) {
      Index row_off = family >= 2 ? K : 0, col_off = family % 2 == 1 ? K : 0;
      for (Index k = 0; k < K; ++k)
        for (Index kp = k; kp < K; ++kp) z.Z(i, c++) = P(row_off + k, 1 + col_off + kp);
    }
  }
  return z;
}

struct BootstrapQuantiles {
  double C_G = 0.0;
  double C_W = 0.0;
  double alpha = 0.05;
  int replicates = 0;
  std::uint64_t seed = 0;
  bool degenerate = false;  // a median of the replicate maxima was zero
  Vector g;                 // ||S*_j(I)||_inf per replicate
  Vector w;                 // ||S*_j(II)||_inf per replicate
  Index n = 0;
};

/// Median-scaled joint quantile: t = empirical (1 - alpha) quantile of
/// max(g_j / m_G, w_j / m_W); C = t * m / sqrt(n). The box
/// {g <= sqrt(n) C_G, w <= sqrt(n) C_W} holds at least (1 - alpha) R of the
/// replicates; bounds are nudged outward if rounding would break that.
inline void joint_quantiles(BootstrapQuantiles& q, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("alpha must lie in (0, 1)");
  q.alpha = alpha;
  const Index R = q.g.size();
  const double rootn = std::sqrt(static_cast<double>(q.n));
  auto median = [](Vector v) {
    std::sort(v.data(), v.data() + v.size());
    Index m = v.size();
    return m % 2 ? v(m / 2) : 0.5 * (v(m / 2 - 1) + v(m / 2));
  };
  const double mG = median(q.g), mW = median(q.w);
  q.degenerate = !(mG > 0.0) || !(mW > 0.0);
  const Index need = std::max<Index>(1, static_cast<Index>(std::ceil((1.0 - alpha) * static_cast<double>(R) - 1e-9)));

  if (!(mG > 0.0) && !(mW > 0.0)) {
    q.C_G = q.g.maxCoeff() / rootn;
    q.C_W = q.w.maxCoeff() / rootn;
  } else {
    Vector t(R);
    for (Index j = 0; j < R; ++j) {
      double a = mG > 0.0 ? q.g(j) / mG : 0.0;
      double b = mW > 0.0 ? q.w(j) / mW : 0.0;
      t(j) = std::max(a, b);
    }
    std::vector<double> sorted(t.data(), t.data() + R);
    std::sort(sorted.begin(), sorted.end());
    const double that = sorted[static_cast<std::size_t>(std::min(need, R) - 1)];
    q.C_G = mG > 0.0 ? that * mG / rootn : q.g.maxCoeff() / rootn;
    q.C_W = mW > 0.0 ? that * mW / rootn : q.w.maxCoeff() / rootn;
  }
  auto inside = [&] {
    Index count = 0;
    for (Index j = 0; j < R; ++j) count += (q.g(j) <= rootn * q.C_G && q.w(j) <= rootn * q.C_W);
    return count;
  };
  for (int guard = 0; guard < 64 && inside() < need; ++guard) {
    q.C_G = std::nextafter(q.C_G, std::numeric_limits<double>::infinity());
    q.C_W = std::nextafter(q.C_W, std::numeric_limits<double>::infinity());
  }
}

/// Multiplier bootstrap of S_n = n^-1/2 sum_i r_i (Z_i - Zbar) with standard
/// normal multipliers. Replicate j draws its multipliers from stream (seed, j),
/// and replicates are evaluated in fixed-size chunks, so the result does not
/// depend on the number of worker threads.
inline BootstrapQuantiles multiplier_bootstrap(const ZVectors& z, int replicates, double alpha, std::uint64_t seed) {
  if (replicates < 200) throw UsageError("multiplier bootstrap needs at least 200 replicates");
  const Index n = z.Z.rows(), p = z.Z.cols(), split = z.block_one();
  if (n < 2) throw UsageError("multiplier bootstrap needs at least two subjects");
  Matrix Zc = z.Z.rowwise() - z.Z.colwise().mean();
  const double inv_rootn = 1.0 / std::sqrt(static_cast<double>(n));

  BootstrapQuantiles q;
  q.replicates = replicates;
  q.seed = seed;
  q.n = n;
  q.g.resize(replicates);
  q.w.resize(replicates);
  constexpr int kChunk = 32;
  const std::size_t chunks = static_cast<std::size_t>((replicates + kChunk - 1) / kChunk);
  parallel_for(chunks, [&](std::size_t c) {
    const int first = static_cast<int>(c) * kChunk;
    const int width = std::min(kChunk, replicates - first);
    Matrix r(n, width);
    for (int j = 0; j < width; ++j) {
      auto eng = make_stream(seed, static_cast<std::uint64_t>(first + j), 0xB007);
      NormalSampler normal;
      for (Index i = 0; i < n; ++i) r(i, j) = normal(eng);
    }
    Matrix S = (Zc.transpose() * r) * inv_rootn;  // p x width
    for (int j = 0; j < width; ++j) {
      q.g(first + j) = S.col(j).head(split).cwiseAbs().maxCoeff();
      q.w(first + j) = p > split ? S.col(j).tail(p - split).cwiseAbs().maxCoeff() : 0.0;
    }
  });
  joint_quantiles(q, alpha);
  return q;
}

struct UposiReport {
  std::vector<Interval> intervals;  // original scale
  std::vector<double> half_lengths;
  double C_G = 0.0;
  double C_W = 0.0;
  double theta_l1 = 0.0;  // standardized scale
  double omega = 0.0;
  bool omega_flagged = false;
  bool degenerate_bootstrap = false;
  double alpha = 0.05;
  int replicates = 0;
  std::uint64_t seed = 0;
};

/// theta restricted to the submodel coordinates (delta, psi_M).
inline Vector restrict_theta(const Vector& theta, Index K, const ModelIndexSet& M) {
  auto pos = MomentMatrices::positions(K, M);
  Vector out(static_cast<Index>(pos.size()));
  for (Index r = 0; r < out.size(); ++r) out(r) = theta(pos[r]);
  return out;
}

/// Coordinate-wise intervals psi_k +/- ||c_k' W(M)^-1||_1 (C_G + C_W ||theta||_1)
/// for every blip coordinate of the submodel. theta is the full-model vector
/// on the same scale as mm.
inline UposiReport uposi_intervals(const Vector& theta, const MomentMatrices& mm, const BootstrapQuantiles& q) {
  const Index K = mm.K;
  Eigen::PartialPivLU<Matrix> lu(mm.W);
  if (!well_conditioned(lu)) throw NumericalError("W(M) is singular; UPoSI intervals undefined");
  Matrix Winv = lu.inverse();
  Vector theta_M = restrict_theta(theta, K, mm.M);
  UposiReport rep;
  rep.C_G = q.C_G;
  rep.C_W = q.C_W;
  rep.alpha = q.alpha;
  rep.replicates = q.replicates;
  rep.seed = q.seed;
  rep.degenerate_bootstrap = q.degenerate;
  rep.theta_l1 = theta_M.lpNorm<1>();
  const double radius = q.C_G + q.C_W * rep.theta_l1;
  for (Index c = 0; c < mm.M.size(); ++c) {
    Index k = mm.M[c];
    double half = Winv.row(K + c).lpNorm<1>() * radius;
    double est = theta(K + k);
    rep.intervals.push_back({k, est, est - half, est + half});
    rep.half_lengths.push_back(half);
  }
  return rep;
}

/// Membership in {theta : ||W(M)(theta_hat - theta)||_inf <= C_G + C_W ||theta_hat||_1};
/// both vectors are restricted to the submodel coordinates.
inline bool uposi_region_check(const Vector& theta, const Vector& theta_hat, const MomentMatrices& mm,
                               const BootstrapQuantiles& q) {
  if (theta.size() != mm.order() || theta_hat.size() != mm.order())
    throw UsageError("uposi_region_check: theta must have dimension K + |M|");
  double lhs = sup_norm(mm.W * (theta_hat - theta));
  return lhs <= q.C_G + q.C_W * theta_hat.lpNorm<1>();
}

struct EigenDiagnostic {
  double omega = 0.0;
  bool flagged = false;
  std::vector<double> per_model;
};

/// Smallest eigenvalue of the symmetric part of W(M) over the given
/// submodels (restricted full-model systems). Flagged when it is negligible
/// relative to the largest entry of W.
inline EigenDiagnostic eigen_diagnostic(const std::vector<MomentMatrices>& systems) {
  EigenDiagnostic out;
  out.omega = std::numeric_limits<double>::infinity();
  double scale = 0.0;
  for (const auto& mm : systems) {
    Matrix sym = 0.5 * (mm.W + mm.W.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
    double lmin = es.eigenvalues().minCoeff();
    out.per_model.push_back(lmin);
    out.omega = std::min(out.omega, lmin);
    scale = std::max(scale, mm.W.cwiseAbs().maxCoeff());
  }
  out.flagged = !(out.omega > 1e-8 * std::max(scale, 1e-300));
  return out;
}

/// The selected model and each of its one-column deletions (intercept kept).
inline std::vector<ModelIndexSet> deletion_family(const ModelIndexSet& M) {
  std::vector<ModelIndexSet> out{M};
  for (Index c = 1; c < M.size(); ++c) {
    std::vector<Index> idx;
    for (Index t = 0; t < M.size(); ++t)
      if (t != c) idx.push_back(M[t]);
    out.emplace_back(std::move(idx));
  }
  return out;
}

/// Full UPoSI pipeline for a penalized fit: standardize continuous adjusters,
/// bootstrap the joint quantiles, build intervals on the standardized scale
/// and map them back to the original scale.
inline UposiReport uposi_infer(const Dataset& d, const PropensityModel& pm, const PenalizedFit& fit, double alpha,
                               int replicates, std::uint64_t seed) {
  const Index K = d.K();
  Standardized st = standardize(d);
  Vector theta = fit.theta;
  for (Index k = 0; k < K; ++k) {
    theta(k) *= st.scale(k);
    theta(K + k) *= st.scale(k);
  }
  MomentMatrices full = moment_matrices(st.data, pm, fit.corr, fit.sigma2, ModelIndexSet::full(K));
  MomentMatrices sel = full.restrict_to(fit.selected);
  ZVectors z = build_z_vectors(st.data, pm, fit.corr, fit.sigma2);
  BootstrapQuantiles q = multiplier_bootstrap(z, replicates, alpha, seed);
  UposiReport rep = uposi_intervals(theta, sel, q);
  for (std::size_t c = 0; c < rep.intervals.size(); ++c) {
    auto& iv = rep.intervals[c];
    double s = st.scale(iv.k);
    rep.half_lengths[c] /= s;
    iv.estimate = fit.theta(K + iv.k);
    iv.lower = iv.estimate - rep.half_lengths[c];
    iv.upper = iv.estimate + rep.half_lengths[c];
  }
  std::vector<MomentMatrices> family;
  for (const auto& M : deletion_family(fit.selected)) family.push_back(full.restrict_to(M));
  auto diag = eigen_diagnostic(family);
  rep.omega = diag.omega;
  rep.omega_flagged = diag.flagged;
  return rep;
}

}  // namespace peg
