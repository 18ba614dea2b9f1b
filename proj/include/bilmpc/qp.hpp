#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bilmpc/types.hpp"

namespace bilmpc {

struct QpSolution {
  Vec y;
  std::vector<Index> active;  //< sorted constraint row indices
  Vec dual;                   //< multipliers for the active rows (>= 0)
  Index iterations = 0;
};

/// Strictly convex inequality-constrained QP
///   min 1/2 y'Q y + c'y   s.t.  P y <= p
/// solved with the dual active-set method of Goldfarb and Idnani: start at
/// the unconstrained minimum and add violated constraints one at a time,
/// taking dual steps (dropping blocking constraints) as needed.  The
/// factorizations are recomputed per step, which is fine at the small sizes
/// this library works with.
///
/// Throws InfeasibleError when {y : Py <= p} is empty and SingularError when
/// Q is not positive definite.
inline QpSolution solve_qp(const Mat& Q, const Vec& c, const Mat& P, const Vec& p,
                           double tol = 1e-11) {
  const Index n = Q.rows(), m = P.rows();
  require(Q.cols() == n && c.size() == n, "solve_qp: objective dims");
  require(m == 0 || P.cols() == n, "solve_qp: constraint dims");
  require(p.size() == m, "solve_qp: rhs dims");

  Eigen::LLT<Mat> llt(Q);
  if (llt.info() != Eigen::Success) throw SingularError("solve_qp: Q not positive definite");

  const double scale = 1.0 + c.cwiseAbs().maxCoeff() + (m > 0 ? p.cwiseAbs().maxCoeff() : 0.0);
  const double feas_tol = std::max(tol, 1e-10 * scale);

  QpSolution sol;
  sol.y = llt.solve(-c);
  std::vector<Index> active;
  std::vector<double> u;

  // slack of row i in >= 0 convention
  auto slack = [&](Index i) { return p[i] - P.row(i).dot(sol.y); };

  auto solve_subspace = [&](const std::vector<Index>& act, const Vec& rhs_primal) {
    // Returns (z, r): z = step of y, r = rate of change of active duals when
    // the incoming normal moves with unit dual step.
    const Index q = static_cast<Index>(act.size());
    Mat N(n, q);
    for (Index j = 0; j < q; ++j) N.col(j) = -P.row(act[static_cast<size_t>(j)]).transpose();
    const Mat Ginv_np = llt.solve(rhs_primal);
    if (q == 0) return std::make_pair(Vec(Ginv_np), Vec(Vec::Zero(0)));
    const Mat GinvN = llt.solve(N);
    const Mat M = N.transpose() * GinvN;
    Eigen::LDLT<Mat> mldlt(M);
    Vec r = mldlt.solve(N.transpose() * Ginv_np);
    Vec z = Ginv_np - GinvN * r;
    return std::make_pair(z, r);
  };

  const Index max_steps = 50 * (m + 1) + 50;
  for (sol.iterations = 0; sol.iterations < max_steps; ++sol.iterations) {
    // Most violated constraint; lowest index breaks ties for determinism.
    Index viol = -1;
    double worst = -feas_tol;
    for (Index i = 0; i < m; ++i) {
      if (std::find(active.begin(), active.end(), i) != active.end()) continue;
      const double s = slack(i);
      if (s < worst) {
        worst = s;
        viol = i;
      }
    }
    if (viol < 0) break;  // dual feasible and primal feasible: done

    const Vec nplus = -P.row(viol).transpose();
    double u_plus = 0.0;

    // Inner loop: take primal/dual steps until constraint `viol` is active.
    bool resolved = false;
    for (Index inner = 0; inner < max_steps; ++inner) {
      auto [z, r] = solve_subspace(active, nplus);
      const double denom = z.dot(nplus);

      // Dual step length t1 (blocking active constraint).
      double t1 = std::numeric_limits<double>::infinity();
      Index drop = -1;
      for (size_t j = 0; j < active.size(); ++j) {
        if (r[static_cast<Index>(j)] > tol) {
          const double tj = u[j] / r[static_cast<Index>(j)];
          if (tj < t1 - 1e-14) {
            t1 = tj;
            drop = static_cast<Index>(j);
          }
        }
      }

      if (denom <= 1e-14 * nplus.squaredNorm()) {
        // No primal progress possible in this subspace.
        if (!std::isfinite(t1)) throw InfeasibleError("solve_qp: infeasible constraint set");
        // Pure dual step: drop the blocking constraint.
        for (size_t j = 0; j < active.size(); ++j) u[j] -= t1 * r[static_cast<Index>(j)];
        u_plus += t1;
        active.erase(active.begin() + drop);
        u.erase(u.begin() + drop);
        continue;
      }

      const double viol_amount = -(p[viol] - P.row(viol).dot(sol.y));  // > 0
      const double t2 = viol_amount > 0 ? viol_amount / denom : 0.0;
      const double t = std::min(t1, t2);

      sol.y += t * z;
      for (size_t j = 0; j < active.size(); ++j) u[j] -= t * r[static_cast<Index>(j)];
      u_plus += t;

      if (t == t2) {
        // Constraint reaches activity; admit it.
        active.push_back(viol);
        u.push_back(u_plus);
        resolved = true;
        break;
      }
      active.erase(active.begin() + drop);
      u.erase(u.begin() + drop);
    }
    if (!resolved && viol >= 0) {
      // inner loop exhausted without activation
      throw Error("solve_qp: step limit exceeded");
    }
  }

  // Polish: re-solve the equality KKT on the final active set so stationarity
  // holds to machine precision.  Multipliers are nonnegative up to roundoff
  // by construction; clamp the dust.
  if (active.empty()) {
    sol.y = llt.solve(-c);
  } else {
    const Index q = static_cast<Index>(active.size());
    Mat Pa(q, n);
    Vec pa(q);
    for (Index j = 0; j < q; ++j) {
      Pa.row(j) = P.row(active[static_cast<size_t>(j)]);
      pa[j] = p[active[static_cast<size_t>(j)]];
    }
    const Mat GinvPt = llt.solve(Pa.transpose());
    const Mat W = Pa * GinvPt;
    Eigen::LDLT<Mat> wldlt(W);
    const Vec lam = wldlt.solve(-(Pa * llt.solve(c) + pa));
    sol.y = llt.solve(-(c + Pa.transpose() * lam));
    u.assign(lam.data(), lam.data() + q);
    for (auto& uj : u) uj = std::max(uj, 0.0);
  }

  std::vector<size_t> order(active.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return active[a] < active[b]; });
  std::vector<Index> act_sorted;
  Vec dual_sorted(static_cast<Index>(order.size()));
  for (size_t i = 0; i < order.size(); ++i) {
    act_sorted.push_back(active[order[i]]);
    dual_sorted[static_cast<Index>(i)] = u[order[i]];
  }
  sol.active = std::move(act_sorted);
  sol.dual = std::move(dual_sorted);
  return sol;
}

/// KKT residuals of a candidate solution of the QP above; used by tests.
struct QpKktResidual {
  double stationarity = 0.0;
  double primal = 0.0;
  double complementarity = 0.0;
  double dual_sign = 0.0;

  double max() const {
    return std::max(std::max(stationarity, primal), std::max(complementarity, dual_sign));
  }
};

inline QpKktResidual qp_kkt_residual(const Mat& Q, const Vec& c, const Mat& P, const Vec& p,
                                     const QpSolution& sol) {
  QpKktResidual r;
  Vec grad = Q * sol.y + c;
  for (size_t j = 0; j < sol.active.size(); ++j)
    grad += sol.dual[static_cast<Index>(j)] * P.row(sol.active[j]).transpose();
  r.stationarity = grad.cwiseAbs().maxCoeff();
  if (P.rows() > 0) {
    r.primal = ((P * sol.y - p).array().max(0.0)).maxCoeff();
    for (size_t j = 0; j < sol.active.size(); ++j) {
      const Index i = sol.active[j];
      r.complementarity = std::max(
          r.complementarity, std::abs(sol.dual[static_cast<Index>(j)] * (p[i] - P.row(i).dot(sol.y))));
      r.dual_sign = std::max(r.dual_sign, -sol.dual[static_cast<Index>(j)]);
    }
  }
  return r;
}

}  // namespace bilmpc
