#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "bilmpc/coupled_qp.hpp"
#include "bilmpc/parallel.hpp"
#include "bilmpc/qp.hpp"
#include "bilmpc/sensitivities.hpp"

namespace bilmpc {

struct OracleReport {
  double max_rel_dev = 0.0;
  Index worst_index = -1;
  bool pass = false;
};

/// Central finite differences of a scalar function.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& y, double h) {
  Vec g(y.size());
  for (Index i = 0; i < y.size(); ++i) {
    Vec yp = y, ym = y;
    yp[i] += h;
    ym[i] -= h;
    g[i] = (f(yp) - f(ym)) / (2.0 * h);
  }
  return g;
}

/// Central finite differences of a vector function (Jacobian columns).
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& g, const Vec& y, double h) {
  const Vec g0 = g(y);
  Mat J(g0.size(), y.size());
  for (Index i = 0; i < y.size(); ++i) {
    Vec yp = y, ym = y;
    yp[i] += h;
    ym[i] -= h;
    J.col(i) = (g(yp) - g(ym)) / (2.0 * h);
  }
  return J;
}

inline double default_fd_step(const Vec& y) { return 1e-6 * (1.0 + y.cwiseAbs().maxCoeff()); }

/// Check an analytic gradient against central differences of f.
inline OracleReport fd_check_gradient(const std::function<double(const Vec&)>& f,
                                      const Vec& grad_analytic, const Vec& y, double h = 0.0,
                                      double threshold = 1e-5) {
  if (h <= 0.0) h = default_fd_step(y);
  const Vec g_fd = fd_gradient(f, y, h);
  OracleReport rep;
  const double scale = 1.0 + grad_analytic.cwiseAbs().maxCoeff();
  for (Index i = 0; i < y.size(); ++i) {
    const double dev = std::abs(g_fd[i] - grad_analytic[i]) / scale;
    if (dev > rep.max_rel_dev) {
      rep.max_rel_dev = dev;
      rep.worst_index = i;
    }
  }
  rep.pass = rep.max_rel_dev <= threshold;
  return rep;
}

/// Check an analytic Hessian against central differences of the gradient.
inline OracleReport fd_check_hessian(const std::function<Vec(const Vec&)>& grad,
                                     const Mat& hess_analytic, const Vec& y, double h = 0.0,
                                     double threshold = 1e-4) {
  if (h <= 0.0) h = default_fd_step(y);
  const Mat H_fd = fd_jacobian(grad, y, h);
  OracleReport rep;
  const double scale = 1.0 + hess_analytic.cwiseAbs().maxCoeff();
  for (Index i = 0; i < H_fd.rows(); ++i) {
    for (Index j = 0; j < H_fd.cols(); ++j) {
      const double dev = std::abs(H_fd(i, j) - hess_analytic(i, j)) / scale;
      if (dev > rep.max_rel_dev) {
        rep.max_rel_dev = dev;
        rep.worst_index = i * H_fd.cols() + j;
      }
    }
  }
  rep.pass = rep.max_rel_dev <= threshold;
  return rep;
}

/// Solve [H J'; J 0] w = rhs with a dense rank-revealing factorization.
inline Vec dense_saddle_solve(const Mat& M, const Vec& rhs) {
  Eigen::FullPivLU<Mat> lu(M);
  if (!lu.isInvertible()) throw SingularError("dense_saddle_solve: singular KKT matrix");
  return lu.solve(rhs);
}

/// Dense reference solve of an assembled coupled-QP KKT system; the oracle
/// for the banded sweeps.
inline Vec dense_kkt_solve(const KktSystem& k) {
  return dense_saddle_solve(k.dense_matrix(), k.dense_rhs());
}

/// Interleaved solution vector of a SchurSolution (for comparisons).
inline Vec interleave(const KktSystem& k, const SchurSolution& sol) {
  Vec w(k.size());
  Index at = 0;
  for (Index i = 0; i < k.N; ++i) {
    w.segment(at, k.nx) = sol.lambda_qp[static_cast<size_t>(i)];
    at += k.nx;
    w.segment(at, k.xi_dim()) = sol.dy[i + 1];
    at += k.xi_dim();
  }
  return w;
}

/// Solve the coupled QP with explicit slack variables (no elimination):
/// variables (dy_1..dy_N, s_1..s_N), multipliers for coupling and the
/// active-face equations.  Returns the dy blocks; the oracle for the
/// slack-elimination exactness property.
inline Trajectory dense_slack_qp_solve(const SensitivityPack& pack, const SplitProblem& s,
                                       const Trajectory& z, double mu) {
  const Index nxi = s.nu + s.nx, N = s.N;
  Index ns = 0;
  for (const auto& P : pack.active_jac) ns += P.rows();
  const Index n_dy = N * nxi;
  const Index n_c = N * s.nx;
  const Index dim = n_dy + ns + n_c + ns;

  Mat M = Mat::Zero(dim, dim);
  Vec rhs = Vec::Zero(dim);
  auto dy_at = [&](Index k) { return (k - 1) * nxi; };  // k = 1..N
  std::vector<Index> s_at(static_cast<size_t>(N) + 1, 0);
  {
    Index at = n_dy;
    for (Index k = 1; k <= N; ++k) {
      s_at[static_cast<size_t>(k)] = at;
      at += pack.active_jac[static_cast<size_t>(k - 1)].rows();
    }
  }
  const Index lam_at = n_dy + ns;
  const Index nu_at = n_dy + ns + n_c;

  // Objective blocks: 1/2 dy'H dy + g'dy + 1/2 mu ||s||^2.
  for (Index k = 1; k <= N; ++k) {
    M.block(dy_at(k), dy_at(k), nxi, nxi) = pack.H.diag[static_cast<size_t>(k)];
    rhs.segment(dy_at(k), nxi) = -pack.g[static_cast<size_t>(k)];
    if (k < N) {
      M.block(dy_at(k), dy_at(k + 1), nxi, nxi) = pack.H.upper[static_cast<size_t>(k)];
      M.block(dy_at(k + 1), dy_at(k), nxi, nxi) = pack.H.upper[static_cast<size_t>(k)].transpose();
    }
  }
  for (Index i = 0; i < ns; ++i) M(n_dy + i, n_dy + i) = mu;

  // Coupling rows: Dt_k dy_k + Et_k dy_{k+1} = -c_k (dy_0 = 0).
  for (Index k = 0; k < N; ++k) {
    const Index row = lam_at + k * s.nx;
    if (k >= 1) {
      const Mat Dt = linearized_D(s, k, z[k + 1]);
      M.block(row, dy_at(k), s.nx, nxi) = Dt;
      M.block(dy_at(k), row, nxi, s.nx) = Dt.transpose();
    }
    const Mat Et = linearized_E(s, k, z[k]);
    M.block(row, dy_at(k + 1), s.nx, nxi) = Et;
    M.block(dy_at(k + 1), row, nxi, s.nx) = Et.transpose();
    rhs.segment(row, s.nx) = -pack.c[static_cast<size_t>(k)];
  }

  // Active-face rows: P_hat_k dy_k - s_k = 0.
  Index nu_row = nu_at;
  for (Index k = 1; k <= N; ++k) {
    const Mat& P = pack.active_jac[static_cast<size_t>(k - 1)];
    if (P.rows() == 0) continue;
    M.block(nu_row, dy_at(k), P.rows(), nxi) = P;
    M.block(dy_at(k), nu_row, nxi, P.rows()) = P.transpose();
    M.block(nu_row, s_at[static_cast<size_t>(k)], P.rows(), P.rows()) =
        -Mat::Identity(P.rows(), P.rows());
    M.block(s_at[static_cast<size_t>(k)], nu_row, P.rows(), P.rows()) =
        -Mat::Identity(P.rows(), P.rows());
    nu_row += P.rows();
  }

  const Vec w = dense_saddle_solve(M, rhs);
  Trajectory dy;
  dy.xi.resize(static_cast<size_t>(N) + 1);
  dy.xi[0] = Vec::Zero(s.nx);
  for (Index k = 1; k <= N; ++k) dy.xi[static_cast<size_t>(k)] = w.segment(dy_at(k), nxi);
  return dy;
}

/// Classical backward Riccati pass + forward rollout for the linear (C = 0),
/// inequality-free special case; the reference for the banded sweeps.
inline Trajectory riccati_lqr(const SplitProblem& s) {
  for (const auto& Ci : s.dynamics.C)
    require(Ci.cwiseAbs().maxCoeff() == 0.0, "riccati_lqr: bilinear terms must vanish");
  const Index N = s.N;
  const Mat& A = s.dynamics.A;
  const Mat& B = s.dynamics.B;

  // Terminal blocks live in Qloc_at(N) = diag(R_{N-1}, Q_N) + rho I.
  auto Qx = [&](Index k) {  // state cost of stage k = 1..N
    return Mat(s.cost_hessian(k).bottomRightCorner(s.nx, s.nx));
  };
  auto qx = [&](Index k) { return Vec(s.qloc_at(k).tail(s.nx)); };
  auto Ru = [&](Index k) {  // input cost of u_{k-1}
    return Mat(s.cost_hessian(k).topLeftCorner(s.nu, s.nu));
  };
  auto ru = [&](Index k) { return Vec(s.qloc_at(k).head(s.nu)); };

  Mat P = Qx(N);
  Vec p = qx(N);
  std::vector<Mat> K(static_cast<size_t>(N));
  std::vector<Vec> kff(static_cast<size_t>(N));
  for (Index k = N - 1; k >= 0; --k) {
    const Vec wt = -s.d[static_cast<size_t>(k)];  // Bw w_k
    const Mat M = Ru(k + 1) + B.transpose() * P * B;
    Eigen::LLT<Mat> llt(M);
    if (llt.info() != Eigen::Success)
      throw InvalidProblem("riccati_lqr: input-cost block not positive definite (unbounded)");
    K[static_cast<size_t>(k)] = llt.solve(B.transpose() * P * A);
    kff[static_cast<size_t>(k)] = llt.solve(B.transpose() * (P * wt + p) + ru(k + 1));
    const Mat Acl = A - B * K[static_cast<size_t>(k)];
    const Vec qk = (k == 0) ? s.q0 : qx(k);
    const Mat Qk = (k == 0) ? s.Q0 : Qx(k);
    p = qk + Acl.transpose() * (P * (wt - B * kff[static_cast<size_t>(k)]) + p) -
        K[static_cast<size_t>(k)].transpose() * ru(k + 1);
    Mat Pn = Qk + A.transpose() * P * Acl;
    P = 0.5 * (Pn + Pn.transpose());
  }

  std::vector<Vec> x{s.x_init}, u;
  for (Index k = 0; k < N; ++k) {
    const Vec uk = -K[static_cast<size_t>(k)] * x.back() - kff[static_cast<size_t>(k)];
    const Vec xn = A * x.back() + B * uk - s.d[static_cast<size_t>(k)];
    u.push_back(uk);
    x.push_back(xn);
  }
  return pack_trajectory(x, u);
}

struct GridOracleResult {
  std::vector<Vec> u;
  double cost = std::numeric_limits<double>::infinity();
  Trajectory trajectory;
};

struct NoFeasiblePoint : Error {
  using Error::Error;
};

namespace detail {

inline std::pair<double, double> input_interval(const Polyhedron& u_set) {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < u_set.rows(); ++i) {
    const double a = u_set.P(i, 0), b = u_set.p[i];
    if (a > 1e-14) hi = std::min(hi, b / a);
    else if (a < -1e-14) lo = std::max(lo, b / a);
  }
  require(std::isfinite(lo) && std::isfinite(hi) && lo < hi,
          "grid_oracle: input set must be a bounded interval");
  return {lo, hi};
}

}  // namespace detail

/// Exhaustive grid search over admissible inputs for tiny instances
/// (n_u = 1, N <= 3): simulate, keep the feasible minimizer, then refine once
/// on a 10x finer sub-grid around the incumbent.
inline GridOracleResult grid_oracle(const BilinearMpcProblem& p, const Vec& x0,
                                    Index grid_res = 201) {
  require(p.nu() == 1, "grid_oracle: n_u must be 1");
  require(p.N <= 3, "grid_oracle: N must be <= 3");
  require(grid_res >= 2, "grid_oracle: need at least 2 grid points");
  const auto [lo, hi] = detail::input_interval(p.u_set);

  auto sweep = [&](const Vec& center, double halfwidth, Index res) {
    GridOracleResult best;
    const Index combos = static_cast<Index>(std::pow(static_cast<double>(res), static_cast<double>(p.N)));
    std::vector<Vec> u(static_cast<size_t>(p.N), Vec::Zero(1));
    for (Index c = 0; c < combos; ++c) {
      Index rem = c;
      bool in_range = true;
      for (Index k = 0; k < p.N; ++k) {
        const Index idx = rem % res;
        rem /= res;
        double val = center[k] - halfwidth + 2.0 * halfwidth * static_cast<double>(idx) /
                                                 static_cast<double>(res - 1);
        if (val < lo - 1e-12 || val > hi + 1e-12) {
          in_range = false;
          break;
        }
        u[static_cast<size_t>(k)][0] = std::clamp(val, lo, hi);
      }
      if (!in_range) continue;
      const Trajectory t = simulate(p, x0, u);
      bool feasible = true;
      for (Index k = 1; k <= p.N && feasible; ++k)
        feasible = p.x_set.contains(t.state(k, p.nx()), 1e-9);
      if (!feasible) continue;
      const double cost = ocp_cost(p, t);
      if (cost < best.cost) {
        best.cost = cost;
        best.u = u;
        best.trajectory = t;
      }
    }
    return best;
  };

  Vec mid = Vec::Constant(p.N, 0.5 * (lo + hi));
  GridOracleResult coarse = sweep(mid, 0.5 * (hi - lo), grid_res);
  if (!std::isfinite(coarse.cost))
    throw NoFeasiblePoint("grid_oracle: no feasible rollout on the grid");

  const double cell = (hi - lo) / static_cast<double>(grid_res - 1);
  Vec center(p.N);
  for (Index k = 0; k < p.N; ++k) center[k] = coarse.u[static_cast<size_t>(k)][0];
  GridOracleResult fine = sweep(center, cell, 21);  // spacing = cell / 10
  return std::isfinite(fine.cost) && fine.cost < coarse.cost ? fine : coarse;
}

struct KktResidual {
  double stationarity = 0.0;
  double primal = 0.0;
  double complementarity = 0.0;
};

/// First-order residuals of the split problem at a primal-dual candidate,
/// using the stage multipliers for the inequality part.  Stage 0 is pinned by
/// the initial condition and carries no residual.
inline KktResidual kkt_residual(const SplitProblem& s, const Trajectory& y,
                                const std::vector<Vec>& lambda,
                                const std::vector<std::vector<Index>>& active_rows,
                                const std::vector<Vec>& stage_duals) {
  KktResidual r;
  std::vector<Vec> grad = grad_lagrangian(s, y, lambda);
  for (Index k = 1; k <= s.N; ++k) {
    Vec gk = grad[static_cast<size_t>(k)];
    const auto& rows = active_rows[static_cast<size_t>(k - 1)];
    const Vec& nu = stage_duals[static_cast<size_t>(k - 1)];
    for (size_t j = 0; j < rows.size(); ++j)
      gk += nu[static_cast<Index>(j)] * s.xi_set.P.row(rows[j]).transpose();
    r.stationarity = std::max(r.stationarity, gk.cwiseAbs().maxCoeff());

    if (s.xi_set.rows() > 0) {
      const Vec slack = s.xi_set.p - s.xi_set.P * y[k];
      r.primal = std::max(r.primal, std::max(0.0, -slack.minCoeff()));
      for (size_t j = 0; j < rows.size(); ++j)
        r.complementarity =
            std::max(r.complementarity, std::abs(nu[static_cast<Index>(j)] * slack[rows[j]]));
    }
  }
  for (const auto& ck : coupling_residual(s, y))
    r.primal = std::max(r.primal, ck.cwiseAbs().maxCoeff());
  return r;
}

/// Dense convex-QP reference for the linear (C = 0) case: condense the states
/// onto the inputs and solve the strictly convex inequality-constrained QP
/// exactly.  Returns the optimal trajectory.
inline Trajectory condensed_qp_solve(const BilinearMpcProblem& p, const Vec& x0) {
  for (const auto& Ci : p.dynamics.C)
    require(Ci.cwiseAbs().maxCoeff() == 0.0, "condensed_qp_solve: requires C = 0");
  const Index nx = p.nx(), nu = p.nu(), N = p.N;
  const Mat& A = p.dynamics.A;
  const Mat& B = p.dynamics.B;

  // x_k = Phi_k x0 + sum_j Gam_{k,j} u_j + off_k  (k = 1..N)
  std::vector<Mat> Phi(static_cast<size_t>(N) + 1);
  std::vector<Vec> off(static_cast<size_t>(N) + 1);
  Phi[0] = Mat::Identity(nx, nx);
  off[0] = Vec::Zero(nx);
  std::vector<std::vector<Mat>> Gam(static_cast<size_t>(N) + 1);
  for (Index k = 1; k <= N; ++k) {
    Phi[static_cast<size_t>(k)] = A * Phi[static_cast<size_t>(k - 1)];
    Vec w = p.nw() > 0 ? Vec(p.dynamics.Bw * p.w.col(k - 1)) : Vec(Vec::Zero(nx));
    off[static_cast<size_t>(k)] = A * off[static_cast<size_t>(k - 1)] + w;
    Gam[static_cast<size_t>(k)].resize(static_cast<size_t>(N), Mat::Zero(nx, nu));
    for (Index j = 0; j < k - 1; ++j)
      Gam[static_cast<size_t>(k)][static_cast<size_t>(j)] =
          A * Gam[static_cast<size_t>(k - 1)][static_cast<size_t>(j)];
    Gam[static_cast<size_t>(k)][static_cast<size_t>(k - 1)] = B;
  }

  Mat H = Mat::Zero(N * nu, N * nu);
  Vec f = Vec::Zero(N * nu);
  for (Index j = 0; j < N; ++j) {
    H.block(j * nu, j * nu, nu, nu) += p.cost.R[static_cast<size_t>(j)];
    f.segment(j * nu, nu) += p.cost.r[static_cast<size_t>(j)];
  }
  for (Index k = 1; k <= N; ++k) {
    const Mat& Qk = (k == N) ? p.cost.QN : p.cost.Q[static_cast<size_t>(k)];
    const Vec& qk = (k == N) ? p.cost.qN : p.cost.q[static_cast<size_t>(k)];
    const Vec base = Phi[static_cast<size_t>(k)] * x0 + off[static_cast<size_t>(k)];
    for (Index j = 0; j < N; ++j) {
      const Mat& Gkj = Gam[static_cast<size_t>(k)][static_cast<size_t>(j)];
      if (Gkj.cwiseAbs().maxCoeff() == 0.0) continue;
      f.segment(j * nu, nu) += Gkj.transpose() * (Qk * base + qk);
      for (Index j2 = 0; j2 < N; ++j2) {
        const Mat& Gkj2 = Gam[static_cast<size_t>(k)][static_cast<size_t>(j2)];
        if (Gkj2.cwiseAbs().maxCoeff() == 0.0) continue;
        H.block(j * nu, j2 * nu, nu, nu) += Gkj.transpose() * Qk * Gkj2;
      }
    }
  }

  // Constraints: P_u u_j <= p_u and P_x x_k <= p_x for k = 1..N.
  const Index mu_rows = p.u_set.rows(), mx_rows = p.x_set.rows();
  Mat Pc(N * mu_rows + N * mx_rows, N * nu);
  Vec pc(Pc.rows());
  Pc.setZero();
  Index row = 0;
  for (Index j = 0; j < N; ++j) {
    if (mu_rows == 0) break;
    Pc.block(row, j * nu, mu_rows, nu) = p.u_set.P;
    pc.segment(row, mu_rows) = p.u_set.p;
    row += mu_rows;
  }
  for (Index k = 1; k <= N; ++k) {
    if (mx_rows == 0) break;
    const Vec base = Phi[static_cast<size_t>(k)] * x0 + off[static_cast<size_t>(k)];
    for (Index j = 0; j < N; ++j)
      Pc.block(row, j * nu, mx_rows, nu) =
          p.x_set.P * Gam[static_cast<size_t>(k)][static_cast<size_t>(j)];
    pc.segment(row, mx_rows) = p.x_set.p - p.x_set.P * base;
    row += mx_rows;
  }
  Pc.conservativeResize(row, Eigen::NoChange);
  pc.conservativeResize(row);

  H = 0.5 * (H + H.transpose());
  const QpSolution qs = solve_qp(H, f, Pc, pc);
  std::vector<Vec> u(static_cast<size_t>(N));
  for (Index j = 0; j < N; ++j) u[static_cast<size_t>(j)] = qs.y.segment(j * nu, nu);
  return simulate(p, x0, u);
}

}  // namespace bilmpc
