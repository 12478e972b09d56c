#pragma once

// Dense tableau simplex for small linear programs
//   min c'x  s.t.  A x <= b,  x >= 0:
// a two-phase primal method, and a dual method for re-solving after the
// right-hand side changes (parametric paths with c >= 0).

#include <peg/common.hpp>

namespace peg {

enum class LpStatus { optimal, infeasible, unbounded, iteration_limit };

struct LpResult {
  LpStatus status = LpStatus::optimal;
  Vector x;
  double objective = 0.0;
  int pivots = 0;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tableau {
 public:
  Tableau(Index rows, Index cols) : T_(RowMatrix::Zero(rows + 1, cols + 1)), basis_(static_cast<std::size_t>(rows)) {}

  RowMatrix& T() { return T_; }
  const RowMatrix& T() const { return T_; }
  std::vector<Index>& basis() { return basis_; }
  Index rows() const { return T_.rows() - 1; }
  Index cols() const { return T_.cols() - 1; }

  void pivot(Index r, Index c) {
    T_.row(r) /= T_(r, c);
    Vector f = T_.col(c);
    f(r) = 0.0;
    Eigen::Matrix<double, 1, Eigen::Dynamic> pr = T_.row(r);
    T_.noalias() -= f * pr;
    T_(r, c) = 1.0;
    for (Index i = 0; i <= rows(); ++i)
      if (i != r) T_(i, c) = 0.0;
    basis_[static_cast<std::size_t>(r)] = c;
  }

  // Minimizes the objective held in the last row (reduced costs; T(m, n) = -value).
  // Columns >= allowed are never entered. Dantzig pricing, switching to Bland's
  // rule after a run of degenerate pivots.
  LpStatus optimize(Index allowed, int& pivots, int max_pivots) {
    constexpr double eps = 1e-11;
    int degenerate_run = 0;
    const Index m = rows();
    while (pivots < max_pivots) {
      const bool bland = degenerate_run > 50;
      Index enter = -1;
      double best = -eps;
      for (Index j = 0; j < allowed; ++j) {
        double rc = T_(m, j);
        if (rc < best) {
          enter = j;
          if (bland) break;
          best = rc;
        }
      }
      if (enter < 0) return LpStatus::optimal;
      Index leave = -1;
      double ratio = 0.0;
      for (Index i = 0; i < m; ++i) {
        double a = T_(i, enter);
        if (a <= eps) continue;
        double r = T_(i, cols()) / a;
        if (leave < 0 || r < ratio - 1e-14 ||
            (r <= ratio + 1e-14 && basis_[static_cast<std::size_t>(i)] < basis_[static_cast<std::size_t>(leave)])) {
          leave = i;
          ratio = r;
        }
      }
      if (leave < 0) return LpStatus::unbounded;
      degenerate_run = ratio <= 1e-14 ? degenerate_run + 1 : 0;
      pivot(leave, enter);
      ++pivots;
    }
    return LpStatus::iteration_limit;
  }

  // Dual simplex from a dual-feasible basis (all reduced costs >= 0).
  LpStatus dual_optimize(Index allowed, int& pivots, int max_pivots) {
    constexpr double eps = 1e-11;
    const Index m = rows(), rhs = cols();
    while (pivots < max_pivots) {
      Index leave = -1;
      double worst = -1e-12;
      for (Index i = 0; i < m; ++i)
        if (T_(i, rhs) < worst) {
          worst = T_(i, rhs);
          leave = i;
        }
      if (leave < 0) return LpStatus::optimal;
      Index enter = -1;
      double ratio = 0.0;
      for (Index j = 0; j < allowed; ++j) {
        double a = T_(leave, j);
        if (a >= -eps) continue;
        double r = std::max(T_(rows(), j), 0.0) / -a;
        if (enter < 0 || r < ratio - 1e-14) {
          enter = j;
          ratio = r;
        }
      }
      if (enter < 0) return LpStatus::infeasible;
      pivot(leave, enter);
      ++pivots;
    }
    return LpStatus::iteration_limit;
  }

 private:
  RowMatrix T_;
  std::vector<Index> basis_;
};

}  // namespace detail

inline LpResult solve_lp(const Vector& c, const Matrix& A, const Vector& b, int max_pivots = 100000) {
  const Index m = A.rows(), n = A.cols();
  if (c.size() != n || b.size() != m) throw UsageError("solve_lp: dimension mismatch");
  std::vector<Index> negative;
  for (Index i = 0; i < m; ++i)
    if (b(i) < 0.0) negative.push_back(i);
  const Index n_art = static_cast<Index>(negative.size());
  // columns: x (n) | slacks (m) | artificials (n_art) | rhs
  detail::Tableau tab(m, n + m + n_art);
  detail::RowMatrix& T = tab.T();
  const Index rhs = n + m + n_art;
  Index art = 0;
  for (Index i = 0; i < m; ++i) {
    double sign = b(i) < 0.0 ? -1.0 : 1.0;
    T.row(i).head(n) = sign * A.row(i);
    T(i, n + i) = sign;
    T(i, rhs) = sign * b(i);
    if (sign < 0.0) {
      T(i, n + m + art) = 1.0;
      tab.basis()[static_cast<std::size_t>(i)] = n + m + art;
      ++art;
    } else {
      tab.basis()[static_cast<std::size_t>(i)] = n + i;
    }
  }
  LpResult res;
  if (n_art > 0) {
    // phase 1: minimize the sum of artificials
    for (Index i : negative) T.row(m) -= T.row(i);
    for (Index a = 0; a < n_art; ++a) T(m, n + m + a) = 0.0;
    LpStatus st = tab.optimize(n + m, res.pivots, max_pivots);
    if (st == LpStatus::iteration_limit) {
      res.status = st;
      return res;
    }
    if (-T(m, rhs) > 1e-9 * std::max(1.0, b.cwiseAbs().maxCoeff())) {
      res.status = LpStatus::infeasible;
      return res;
    }
    // drive remaining artificials out of the basis
    for (Index i = 0; i < m; ++i) {
      if (tab.basis()[static_cast<std::size_t>(i)] < n + m) continue;
      for (Index j = 0; j < n + m; ++j)
        if (std::abs(T(i, j)) > 1e-11) {
          tab.pivot(i, j);
          break;
        }
    }
    T.row(m).setZero();
  }
  T.row(m).head(n) = c.transpose();
  for (Index i = 0; i < m; ++i) {
    Index bj = tab.basis()[static_cast<std::size_t>(i)];
    if (bj < n && c(bj) != 0.0) T.row(m) -= c(bj) * T.row(i);
  }
  res.status = tab.optimize(n + m, res.pivots, max_pivots);
  res.x = Vector::Zero(n);
  for (Index i = 0; i < m; ++i) {
    Index bj = tab.basis()[static_cast<std::size_t>(i)];
    if (bj < n) res.x(bj) = std::max(T(i, rhs), 0.0);
  }
  res.objective = c.dot(res.x);
  return res;
}

/// Re-solves min c'x s.t. A x <= b, x >= 0 for a sequence of right-hand
/// sides, warm-starting each from the previous optimal basis with the dual
/// simplex. Requires c >= 0, so the all-slack basis is dual feasible.
class ParametricLp {
 public:
  ParametricLp(const Vector& c, const Matrix& A) : n_(A.cols()), m_(A.rows()), tab_(A.rows(), A.cols() + A.rows()) {
    if (c.size() != n_) throw UsageError("ParametricLp: dimension mismatch");
    if ((c.array() < 0.0).any()) throw UsageError("ParametricLp: costs must be non-negative");
    c_ = c;
    auto& T = tab_.T();
    for (Index i = 0; i < m_; ++i) {
      T.row(i).head(n_) = A.row(i);
      T(i, n_ + i) = 1.0;
      tab_.basis()[static_cast<std::size_t>(i)] = n_ + i;
    }
    T.row(m_).head(n_) = c.transpose();
  }

  LpResult solve(const Vector& b, int max_pivots = 100000) {
    if (b.size() != m_) throw UsageError("ParametricLp: rhs dimension mismatch");
    auto& T = tab_.T();
    const Index rhs = n_ + m_;
    // B^-1 sits in the slack columns
    T.col(rhs).head(m_) = T.block(0, n_, m_, m_) * b;
    double value = 0.0;
    for (Index i = 0; i < m_; ++i) {
      Index bj = tab_.basis()[static_cast<std::size_t>(i)];
      if (bj < n_) value += c_(bj) * T(i, rhs);
    }
    T(m_, rhs) = -value;
    LpResult res;
    res.status = tab_.dual_optimize(n_ + m_, res.pivots, max_pivots);
    res.x = Vector::Zero(n_);
    for (Index i = 0; i < m_; ++i) {
      Index bj = tab_.basis()[static_cast<std::size_t>(i)];
      if (bj < n_) res.x(bj) = std::max(T(i, rhs), 0.0);
    }
    res.objective = c_.dot(res.x);
    return res;
  }

 private:
  Index n_, m_;
  Vector c_;
  detail::Tableau tab_;
};

}  // namespace peg
