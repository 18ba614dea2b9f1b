#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "bilmpc/types.hpp"

namespace bilmpc {

struct LpResult {
  enum class Status { Optimal, Infeasible, Unbounded };
  Status status = Status::Infeasible;
  Vec x;
  double objective = 0.0;
};

namespace detail {

/// Dense two-phase primal simplex for  min c'x  s.t.  Ax = b, x >= 0.
/// Bland's rule throughout, so it terminates on degenerate problems.
class SimplexTableau {
 public:
  SimplexTableau(const Mat& A, const Vec& b, const Vec& c) : m_(A.rows()), n_(A.cols()) {
    T_.resize(m_ + 1, n_ + m_ + 1);
    T_.setZero();
    T_.topLeftCorner(m_, n_) = A;
    T_.col(n_ + m_).head(m_) = b;
    for (Index i = 0; i < m_; ++i) {
      if (T_(i, n_ + m_) < 0) T_.row(i) = -T_.row(i);
      T_(i, n_ + i) = 1.0;  // artificial
    }
    basis_.resize(static_cast<size_t>(m_));
    for (Index i = 0; i < m_; ++i) basis_[static_cast<size_t>(i)] = n_ + i;
    c_ = c;
  }

  LpResult solve() {
    // Phase 1: minimize the sum of artificials.
    Vec phase1 = Vec::Zero(n_ + m_);
    phase1.tail(m_).setOnes();
    set_cost(phase1, n_ + m_);
    run(n_ + m_);
    if (T_(m_, n_ + m_) < -1e-8) {
      LpResult r;
      r.status = LpResult::Status::Infeasible;
      return r;
    }
    pivot_out_artificials();

    // Phase 2 over the original columns only.
    Vec full = Vec::Zero(n_ + m_);
    full.head(n_) = c_;
    set_cost(full, n_);
    const bool bounded = run(n_);

    LpResult r;
    r.x = Vec::Zero(n_);
    for (Index i = 0; i < m_; ++i) {
      const Index bi = basis_[static_cast<size_t>(i)];
      if (bi < n_) r.x[bi] = T_(i, n_ + m_);
    }
    if (!bounded) {
      r.status = LpResult::Status::Unbounded;
      return r;
    }
    r.status = LpResult::Status::Optimal;
    r.objective = c_.dot(r.x);
    return r;
  }

 private:
  void set_cost(const Vec& cost, Index ncols) {
    T_.row(m_).setZero();
    T_.row(m_).head(cost.size()) = cost.transpose();
    // Reduce over the current basis.
    for (Index i = 0; i < m_; ++i) {
      const Index bi = basis_[static_cast<size_t>(i)];
      if (bi < cost.size() && std::abs(T_(m_, bi)) > 0)
        T_.row(m_) -= T_(m_, bi) * T_.row(i);
    }
    (void)ncols;
  }

  /// Returns false when unbounded.
  bool run(Index ncols) {
    const double tol = 1e-10;
    while (true) {
      // Bland: first column with negative reduced cost.
      Index enter = -1;
      for (Index j = 0; j < ncols; ++j) {
        if (T_(m_, j) < -tol) {
          enter = j;
          break;
        }
      }
      if (enter < 0) return true;

      Index leave = -1;
      double best = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < m_; ++i) {
        if (T_(i, enter) > tol) {
          const double ratio = T_(i, n_ + m_) / T_(i, enter);
          if (ratio < best - tol ||
              (ratio < best + tol &&
               (leave < 0 || basis_[static_cast<size_t>(i)] < basis_[static_cast<size_t>(leave)]))) {
            best = ratio;
            leave = i;
          }
        }
      }
      if (leave < 0) return false;
      pivot(leave, enter);
    }
  }

  void pivot(Index row, Index col) {
    T_.row(row) /= T_(row, col);
    for (Index i = 0; i <= m_; ++i) {
      if (i != row && std::abs(T_(i, col)) > 0) T_.row(i) -= T_(i, col) * T_.row(row);
    }
    basis_[static_cast<size_t>(row)] = col;
  }

  /// After phase 1, drive artificials at zero level out of the basis.
  void pivot_out_artificials() {
    for (Index i = 0; i < m_; ++i) {
      if (basis_[static_cast<size_t>(i)] < n_) continue;
      Index col = -1;
      for (Index j = 0; j < n_; ++j) {
        if (std::abs(T_(i, j)) > 1e-9) {
          col = j;
          break;
        }
      }
      if (col >= 0) pivot(i, col);
      // else: redundant row, artificial stays basic at zero; harmless since
      // phase 2 never pivots on artificial columns.
    }
  }

  Index m_, n_;
  Mat T_;
  Vec c_;
  std::vector<Index> basis_;
};

}  // namespace detail

/// max  obj'theta  s.t.  H theta <= h  with free theta.
/// Solved as a standard-form LP via theta = tp - tn, slack s.
inline LpResult lp_solve_max(const Vec& obj, const Mat& H, const Vec& h) {
  const Index n = obj.size(), m = H.rows();
  require(H.cols() == n || m == 0, "lp_solve_max: column mismatch");
  require(h.size() == m, "lp_solve_max: rhs mismatch");

  Mat A(m, 2 * n + m);
  A.setZero();
  if (m > 0) {
    A.leftCols(n) = H;
    A.middleCols(n, n) = -H;
    A.rightCols(m).setIdentity();
  }
  Vec c = Vec::Zero(2 * n + m);
  c.head(n) = -obj;
  c.segment(n, n) = obj;

  if (m == 0) {
    LpResult r;
    r.status = obj.isZero(0.0) ? LpResult::Status::Optimal : LpResult::Status::Unbounded;
    r.x = Vec::Zero(n);
    return r;
  }

  detail::SimplexTableau tab(A, h, c);
  LpResult r = tab.solve();
  if (r.status == LpResult::Status::Optimal) {
    Vec theta = r.x.head(n) - r.x.segment(n, n);
    r.x = theta;
    r.objective = obj.dot(theta);
  }
  return r;
}

struct ChebyshevResult {
  bool feasible = false;  //< polyhedron has points at all
  Vec center;
  double radius = -std::numeric_limits<double>::infinity();
};

/// Largest inscribed ball of {theta : H theta <= h}, radius capped at r_cap.
/// A negative radius means the set has empty interior (or is empty).
inline ChebyshevResult chebyshev_center(const Mat& H, const Vec& h, double r_cap = 1e3) {
  const Index n = H.cols(), m = H.rows();
  ChebyshevResult out;
  if (m == 0) {
    out.feasible = true;
    out.center = Vec::Zero(n);
    out.radius = r_cap;
    return out;
  }

  std::vector<Index> keep;
  for (Index i = 0; i < m; ++i) {
    const double norm = H.row(i).norm();
    if (norm <= 1e-14) {
      if (h[i] < -1e-12) return out;  // 0 <= h_i violated: empty set
      continue;
    }
    keep.push_back(i);
  }

  const Index mk = static_cast<Index>(keep.size());
  // Variables (theta, r): maximize r subject to H theta + ||H_i|| r <= h
  // and r <= r_cap.
  Mat Hx(mk + 1, n + 1);
  Vec hx(mk + 1);
  for (Index i = 0; i < mk; ++i) {
    const Index src = keep[static_cast<size_t>(i)];
    Hx.row(i).head(n) = H.row(src);
    Hx(i, n) = H.row(src).norm();
    hx[i] = h[src];
  }
  Hx.row(mk).setZero();
  Hx(mk, n) = 1.0;
  hx[mk] = r_cap;

  Vec obj = Vec::Zero(n + 1);
  obj[n] = 1.0;
  LpResult lp = lp_solve_max(obj, Hx, hx);
  if (lp.status != LpResult::Status::Optimal) return out;  // cannot happen for r -> -inf feasible sets
  out.center = lp.x.head(n);
  out.radius = lp.x[n];
  out.feasible = out.radius >= -1e-9;
  return out;
}

}  // namespace bilmpc
