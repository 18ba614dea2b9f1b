#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "bilmpc/problem.hpp"

namespace bilmpc {

/// Symmetric block-tridiagonal matrix: diagonal blocks diag[k] and cross
/// blocks upper[k] sitting between stages k and k+1.  The lower blocks are
/// the transposes.
struct BlockTridiag {
  std::vector<Mat> diag;   //< N+1 blocks (block 0 is n_x, the rest n_u+n_x)
  std::vector<Mat> upper;  //< N blocks

  Mat dense() const {
    Index total = 0;
    for (const auto& b : diag) total += b.rows();
    Mat out = Mat::Zero(total, total);
    Index at = 0;
    for (size_t k = 0; k < diag.size(); ++k) {
      const Index nk = diag[k].rows();
      out.block(at, at, nk, nk) = diag[k];
      if (k + 1 < diag.size()) {
        const Index nn = diag[k + 1].rows();
        out.block(at, at + nk, nk, nn) = upper[k];
        out.block(at + nk, at, nn, nk) = upper[k].transpose();
      }
      at += nk;
    }
    return out;
  }

  double inf_norm() const { return dense().cwiseAbs().rowwise().sum().maxCoeff(); }
};

/// Everything Algorithm step 2 produces at the current stage solutions.
struct SensitivityPack {
  std::vector<Vec> g;          //< gradients of F_k, k = 0..N
  std::vector<Vec> c;          //< coupling residuals, k = 0..N-1
  BlockTridiag H;              //< exact Lagrangian Hessian (+ sigma I)
  std::vector<Mat> active_jac; //< rows of P_xi active at y_k, k = 1..N
  std::vector<std::vector<Index>> active_rows;
  double sigma = 0.0;
};

/// g_0 = Q_0 y_0 + q_0,  g_k = diag(R_{k-1}, Q_k) y_k + [r_{k-1}; q_k].
inline std::vector<Vec> eval_gradients(const SplitProblem& s, const Trajectory& y) {
  require(y.horizon() == s.N, "eval_gradients: horizon");
  std::vector<Vec> g(static_cast<size_t>(s.N) + 1);
  g[0] = s.Q0 * y[0] + s.q0;
  for (Index k = 1; k <= s.N; ++k)
    g[static_cast<size_t>(k)] = s.cost_hessian(k) * y[k] + s.qloc_at(k);
  return g;
}

inline std::vector<Vec> eval_residuals(const SplitProblem& s, const Trajectory& y) {
  return coupling_residual(s, y);
}

/// Exact Hessian of the plain Lagrangian of the split problem plus sigma I.
/// Only the cross blocks depend on the duals: the bilinear coupling
/// contributes C_i' lambda_k between x_k and [u_k]_i.
inline BlockTridiag eval_hessian(const SplitProblem& s, const std::vector<Vec>& lambda,
                                 double sigma = 0.0) {
  require(static_cast<Index>(lambda.size()) == s.N, "eval_hessian: lambda count");
  BlockTridiag H;
  H.diag.resize(static_cast<size_t>(s.N) + 1);
  H.upper.resize(static_cast<size_t>(s.N));

  H.diag[0] = s.Q0;
  H.diag[0].diagonal().array() += sigma;
  for (Index k = 1; k <= s.N; ++k) {
    H.diag[static_cast<size_t>(k)] = s.cost_hessian(k);
    H.diag[static_cast<size_t>(k)].diagonal().array() += sigma;
  }

  for (Index k = 0; k < s.N; ++k) {
    const Vec& lam = lambda[static_cast<size_t>(k)];
    const Index rows = (k == 0) ? s.nx : s.nu + s.nx;
    Mat S = Mat::Zero(rows, s.nu + s.nx);
    const Index row0 = (k == 0) ? 0 : s.nu;  // x_k rows within xi_k
    for (Index i = 0; i < s.nu; ++i) {
      const Mat& Ci = s.dynamics.C[static_cast<size_t>(i)];
      S.block(row0, i, s.nx, 1) = Ci.transpose() * lam;
    }
    H.upper[static_cast<size_t>(k)] = std::move(S);
  }
  return H;
}

/// Active rows of P_xi at each stage solution, by geometric tolerance.
inline std::vector<std::vector<Index>> detect_active(const SplitProblem& s, const Trajectory& y,
                                                     double tol_act = 1e-8) {
  std::vector<std::vector<Index>> act(static_cast<size_t>(s.N));
  for (Index k = 1; k <= s.N; ++k) {
    const Vec slack = s.xi_set.p - s.xi_set.P * y[k];
    for (Index i = 0; i < slack.size(); ++i)
      if (slack[i] <= tol_act) act[static_cast<size_t>(k - 1)].push_back(i);
  }
  return act;
}

/// Materialize the active Jacobians (rows taken verbatim from P_xi).
inline std::vector<Mat> active_jacobians(const SplitProblem& s,
                                         const std::vector<std::vector<Index>>& active_rows) {
  std::vector<Mat> jac(active_rows.size());
  for (size_t k = 0; k < active_rows.size(); ++k) {
    const auto& rows = active_rows[k];
    Mat P(static_cast<Index>(rows.size()), s.nu + s.nx);
    for (size_t j = 0; j < rows.size(); ++j) P.row(static_cast<Index>(j)) = s.xi_set.P.row(rows[j]);
    jac[k] = std::move(P);
  }
  return jac;
}

/// Full step-2 evaluation.  When stage active sets are available from the
/// explicit maps they are used verbatim; otherwise detection falls back to
/// the geometric tolerance.
inline SensitivityPack eval_sensitivities(const SplitProblem& s, const Trajectory& y,
                                          const std::vector<Vec>& lambda,
                                          const std::vector<std::vector<Index>>* map_active = nullptr,
                                          double sigma = 0.0, double tol_act = 1e-8) {
  SensitivityPack pack;
  pack.g = eval_gradients(s, y);
  pack.c = eval_residuals(s, y);
  pack.H = eval_hessian(s, lambda, sigma);
  pack.active_rows = map_active ? *map_active : detect_active(s, y, tol_act);
  pack.active_jac = active_jacobians(s, pack.active_rows);
  pack.sigma = sigma;
  return pack;
}

/// Gradient of the plain Lagrangian L0(xi, lambda) = sum F_k + sum lambda_k' c_k
/// with respect to xi, stage by stage.
inline std::vector<Vec> grad_lagrangian(const SplitProblem& s, const Trajectory& y,
                                        const std::vector<Vec>& lambda) {
  std::vector<Vec> g = eval_gradients(s, y);
  g[0] += detail::coupling_self_transposed(s, 0, y[1], lambda[0]);
  for (Index k = 1; k <= s.N; ++k) {
    g[static_cast<size_t>(k)] +=
        detail::coupling_prev_transposed(s, k, y[k - 1], lambda[static_cast<size_t>(k - 1)]);
    if (k < s.N)
      g[static_cast<size_t>(k)] +=
          detail::coupling_self_transposed(s, k, y[k + 1], lambda[static_cast<size_t>(k)]);
  }
  return g;
}

/// Scalar L0 value; used by the finite-difference oracles.
inline double lagrangian_value(const SplitProblem& s, const Trajectory& y,
                               const std::vector<Vec>& lambda) {
  double val = s.objective(y);
  const auto c = coupling_residual(s, y);
  for (size_t k = 0; k < c.size(); ++k) val += lambda[k].dot(c[k]);
  return val;
}

}  // namespace bilmpc
