#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bilmpc/types.hpp"

namespace bilmpc {

/// Discrete-time bilinear dynamics
///   x+ = A x + B u + sum_i C[i] x u_i + Bw w.
struct BilinearDynamics {
  Mat A;                //< n_x x n_x
  Mat B;                //< n_x x n_u
  std::vector<Mat> C;   //< n_u matrices, each n_x x n_x
  Mat Bw;               //< n_x x n_w (n_w may be 0)

  Index nx() const { return A.rows(); }
  Index nu() const { return B.cols(); }
  Index nw() const { return Bw.cols(); }

  /// Stacked bilinear coefficients [C_1; ...; C_nu], (n_x*n_u) x n_x.
  Mat c_stack() const {
    Mat s(nx() * nu(), nx());
    for (Index i = 0; i < nu(); ++i) s.middleRows(i * nx(), nx()) = C[static_cast<size_t>(i)];
    return s;
  }
};

/// Polyhedron {v : P v <= p}. Zero rows means the whole space.
struct Polyhedron {
  Mat P;
  Vec p;

  Index rows() const { return P.rows(); }
  Index dim() const { return P.cols(); }

  bool contains(const Vec& v, double tol = 1e-9) const {
    if (rows() == 0) return true;
    return ((P * v - p).array() <= tol).all();
  }

  /// Axis-aligned box lo <= v <= hi. Infinite bounds are skipped.
  static Polyhedron box(const Vec& lo, const Vec& hi) {
    const Index n = lo.size();
    std::vector<std::pair<Vec, double>> rows;
    for (Index i = 0; i < n; ++i) {
      if (std::isfinite(hi[i])) {
        Vec r = Vec::Zero(n);
        r[i] = 1.0;
        rows.emplace_back(r, hi[i]);
      }
      if (std::isfinite(lo[i])) {
        Vec r = Vec::Zero(n);
        r[i] = -1.0;
        rows.emplace_back(r, -lo[i]);
      }
    }
    Polyhedron out;
    out.P.resize(static_cast<Index>(rows.size()), n);
    out.p.resize(static_cast<Index>(rows.size()));
    for (Index i = 0; i < out.P.rows(); ++i) {
      out.P.row(i) = rows[static_cast<size_t>(i)].first.transpose();
      out.p[i] = rows[static_cast<size_t>(i)].second;
    }
    return out;
  }

  static Polyhedron unconstrained(Index n) {
    Polyhedron out;
    out.P.resize(0, n);
    out.p.resize(0);
    return out;
  }
};

/// Quadratic stage costs  l_k(x,u) = 1/2 x'Q_k x + q_k'x + 1/2 u'R_k u + r_k'u
/// plus terminal  l_N(x) = 1/2 x'QN x + qN'x.  Per-stage storage; uniform
/// problems replicate one block.
struct StageCost {
  std::vector<Mat> Q;   //< k = 0..N-1
  std::vector<Vec> q;
  std::vector<Mat> R;   //< k = 0..N-1
  std::vector<Vec> r;
  Mat QN;
  Vec qN;

  static StageCost uniform(Mat Q, Vec q, Mat R, Vec r, Mat QN, Vec qN, Index N) {
    StageCost c;
    c.Q.assign(static_cast<size_t>(N), Q);
    c.q.assign(static_cast<size_t>(N), q);
    c.R.assign(static_cast<size_t>(N), R);
    c.r.assign(static_cast<size_t>(N), r);
    c.QN = std::move(QN);
    c.qN = std::move(qN);
    return c;
  }
};

/// Full OCP instance: dynamics, constraint sets, costs, horizon and the
/// disturbance forecast over the horizon (one column per step).
struct BilinearMpcProblem {
  BilinearDynamics dynamics;
  Polyhedron x_set;  //< on R^{n_x}
  Polyhedron u_set;  //< on R^{n_u}
  StageCost cost;
  Index N = 0;
  Mat w;             //< n_w x N forecast, columns k = 0..N-1

  Index nx() const { return dynamics.nx(); }
  Index nu() const { return dynamics.nu(); }
  Index nw() const { return dynamics.nw(); }
};

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> issues;

  void fail(const std::string& msg) {
    ok = false;
    issues.push_back(msg);
  }
};

namespace detail {

/// Smallest Cholesky pivot of a symmetric matrix, or -inf when the
/// factorization fails outright.
inline double min_cholesky_pivot(const Mat& M) {
  Eigen::LLT<Mat> llt(M);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  return llt.matrixL().toDenseMatrix().diagonal().minCoeff();
}

inline bool is_positive_definite(const Mat& M, double tol = 1e-10) {
  if (M.rows() != M.cols()) return false;
  if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + M.cwiseAbs().maxCoeff()))
    return false;
  return min_cholesky_pivot(M) > tol;
}

}  // namespace detail

inline ValidationReport validate_problem(const BilinearMpcProblem& p) {
  ValidationReport rep;
  const Index nx = p.dynamics.A.rows();
  const Index nu = p.dynamics.B.cols();
  const Index nw = p.dynamics.Bw.cols();

  if (p.dynamics.A.cols() != nx || nx < 1) rep.fail("A must be square with n_x >= 1");
  if (p.dynamics.B.rows() != nx) rep.fail("B row count differs from A");
  if (nu < 1) rep.fail("n_u must be >= 1");
  if (static_cast<Index>(p.dynamics.C.size()) != nu)
    rep.fail("C must hold one matrix per input channel");
  for (size_t i = 0; i < p.dynamics.C.size(); ++i) {
    if (p.dynamics.C[i].rows() != nx || p.dynamics.C[i].cols() != nx)
      rep.fail("C[" + std::to_string(i) + "] must be n_x x n_x");
  }
  if (p.dynamics.Bw.rows() != nx && nw > 0) rep.fail("Bw row count differs from A");

  if (p.x_set.rows() > 0 && p.x_set.dim() != nx) rep.fail("Px column count differs from n_x");
  if (p.x_set.P.rows() != p.x_set.p.size()) rep.fail("Px/px row mismatch");
  if (p.u_set.rows() > 0 && p.u_set.dim() != nu) rep.fail("Pu column count differs from n_u");
  if (p.u_set.P.rows() != p.u_set.p.size()) rep.fail("Pu/pu row mismatch");

  if (p.N < 1) rep.fail("horizon N must be >= 1");
  if (static_cast<Index>(p.cost.Q.size()) != p.N || static_cast<Index>(p.cost.R.size()) != p.N ||
      static_cast<Index>(p.cost.q.size()) != p.N || static_cast<Index>(p.cost.r.size()) != p.N)
    rep.fail("cost must provide N stage blocks");

  for (size_t k = 0; k < p.cost.Q.size(); ++k) {
    const Mat& Q = p.cost.Q[k];
    if (Q.rows() != nx || Q.cols() != nx)
      rep.fail("Q[" + std::to_string(k) + "] must be n_x x n_x");
    else if (!detail::is_positive_definite(Q))
      rep.fail("Q[" + std::to_string(k) + "] not positive definite");
    if (p.cost.q[k].size() != nx) rep.fail("q[" + std::to_string(k) + "] length differs from n_x");
  }
  for (size_t k = 0; k < p.cost.R.size(); ++k) {
    const Mat& R = p.cost.R[k];
    if (R.rows() != nu || R.cols() != nu)
      rep.fail("R[" + std::to_string(k) + "] must be n_u x n_u");
    else if (!detail::is_positive_definite(R))
      rep.fail("R[" + std::to_string(k) + "] not positive definite");
    if (p.cost.r[k].size() != nu) rep.fail("r[" + std::to_string(k) + "] length differs from n_u");
  }
  if (p.cost.QN.rows() != nx || p.cost.QN.cols() != nx)
    rep.fail("QN must be n_x x n_x");
  else if (!detail::is_positive_definite(p.cost.QN))
    rep.fail("QN not positive definite");
  if (p.cost.qN.size() != nx) rep.fail("qN length differs from n_x");

  if (nw > 0) {
    if (p.w.rows() != nw) rep.fail("disturbance forecast row count differs from n_w");
    if (p.w.cols() < p.N) rep.fail("disturbance forecast must cover k = 0..N-1");
  }
  return rep;
}

/// One dynamics step  A x + B u + sum_i C_i x u_i + Bw w.
inline Vec step_dynamics(const BilinearDynamics& dyn, const Vec& x, const Vec& u, const Vec& w) {
  require(x.size() == dyn.nx(), "step_dynamics: x size");
  require(u.size() == dyn.nu(), "step_dynamics: u size");
  require(w.size() == dyn.nw(), "step_dynamics: w size");
  Vec next = dyn.A * x + dyn.B * u;
  for (Index i = 0; i < dyn.nu(); ++i) next += u[i] * (dyn.C[static_cast<size_t>(i)] * x);
  if (dyn.nw() > 0) next += dyn.Bw * w;
  return next;
}

/// Stage-grouped trajectory: xi[0] = x_0 (n_x), xi[k] = [u_{k-1}; x_k]
/// (n_u + n_x) for k = 1..N.
struct Trajectory {
  std::vector<Vec> xi;

  Index horizon() const { return static_cast<Index>(xi.size()) - 1; }

  const Vec& operator[](Index k) const { return xi[static_cast<size_t>(k)]; }
  Vec& operator[](Index k) { return xi[static_cast<size_t>(k)]; }

  /// x_k for k = 0..N.
  Vec state(Index k, Index nx) const {
    return k == 0 ? xi[0] : Vec(xi[static_cast<size_t>(k)].tail(nx));
  }
  /// u_k for k = 0..N-1 (stored in stage k+1).
  Vec input(Index k, Index nu) const { return xi[static_cast<size_t>(k + 1)].head(nu); }

  static Trajectory zero(Index N, Index nx, Index nu) {
    Trajectory t;
    t.xi.resize(static_cast<size_t>(N) + 1);
    t.xi[0] = Vec::Zero(nx);
    for (Index k = 1; k <= N; ++k) t.xi[static_cast<size_t>(k)] = Vec::Zero(nu + nx);
    return t;
  }

  Vec stacked() const {
    Index total = 0;
    for (const auto& v : xi) total += v.size();
    Vec out(total);
    Index at = 0;
    for (const auto& v : xi) {
      out.segment(at, v.size()) = v;
      at += v.size();
    }
    return out;
  }

  void set_stacked(const Vec& v) {
    Index at = 0;
    for (auto& blk : xi) {
      blk = v.segment(at, blk.size());
      at += blk.size();
    }
  }
};

/// pack: (x_0..x_N, u_0..u_{N-1}) -> stage-grouped trajectory.
inline Trajectory pack_trajectory(const std::vector<Vec>& x, const std::vector<Vec>& u) {
  require(x.size() == u.size() + 1, "pack_trajectory: need one more state than inputs");
  Trajectory t;
  t.xi.resize(x.size());
  t.xi[0] = x[0];
  for (size_t k = 1; k < x.size(); ++k) {
    Vec blk(u[k - 1].size() + x[k].size());
    blk << u[k - 1], x[k];
    t.xi[k] = blk;
  }
  return t;
}

/// unpack: inverse of pack_trajectory.
inline std::pair<std::vector<Vec>, std::vector<Vec>> unpack_trajectory(const Trajectory& t,
                                                                       Index nx, Index nu) {
  std::vector<Vec> x, u;
  x.push_back(t.xi[0]);
  for (size_t k = 1; k < t.xi.size(); ++k) {
    require(t.xi[k].size() == nx + nu, "unpack_trajectory: stage size");
    u.push_back(t.xi[k].head(nu));
    x.push_back(t.xi[k].tail(nx));
  }
  return {x, u};
}

/// Splitting of the OCP into adjacent-stage couplings
///   D_k xi_k + E_k xi_{k+1} + (S xi_{k+1} (x) I)' G_k xi_k = d_k
/// with per-stage convex sets and proximal stage costs.
struct SplitProblem {
  std::vector<Mat> D;     //< k = 0..N-1 (D[0] is n_x x n_x)
  std::vector<Mat> E;     //< k = 0..N-1, each n_x x (n_u+n_x)
  Mat S;                  //< n_u x (n_u+n_x) stage input selector
  std::vector<Mat> G;     //< k = 0..N-1 (G[0] is (n_x n_u) x n_x)
  std::vector<Vec> d;     //< k = 0..N-1
  Vec x_init;             //< Xi_0 = {x_init}
  Polyhedron xi_set;      //< Xi_k for k = 1..N (stage-invariant)
  Polyhedron u_set;       //< original input set (for projections)
  Polyhedron x_set;       //< original state set
  std::vector<Mat> Qloc;  //< k = 1..N: diag(R_{k-1}, Q_k) + rho I
  std::vector<Vec> qloc;  //< k = 1..N: [r_{k-1}; q_k]
  Mat Q0;                 //< F_0 quadratic block
  Vec q0;
  double rho = 0.0;
  Index nx = 0, nu = 0, N = 0;
  BilinearDynamics dynamics;  //< kept for Hessian cross blocks

  Index xi_dim(Index k) const { return k == 0 ? nx : nu + nx; }

  const Mat& Qloc_at(Index k) const { return Qloc[static_cast<size_t>(k - 1)]; }
  const Vec& qloc_at(Index k) const { return qloc[static_cast<size_t>(k - 1)]; }

  /// Stage cost Hessian of the plain (rho = 0) objective, diag(R_{k-1}, Q_k).
  Mat cost_hessian(Index k) const {
    Mat H = Qloc_at(k);
    H.diagonal().array() -= rho;
    return H;
  }

  /// Decoupled objective sum F_0(xi_0) + ... + F_N(xi_N).
  double objective(const Trajectory& t) const {
    double val = 0.5 * t[0].dot(Q0 * t[0]) + q0.dot(t[0]);
    for (Index k = 1; k <= N; ++k)
      val += 0.5 * t[k].dot(cost_hessian(k) * t[k]) + qloc_at(k).dot(t[k]);
    return val;
  }
};

/// Build splitting coefficients from a validated problem.  rho enters the
/// local stage Hessians only.
inline SplitProblem build_split(const BilinearMpcProblem& p, const Vec& x_init, double rho) {
  ValidationReport rep = validate_problem(p);
  if (!rep.ok) {
    std::string msg = "build_split: invalid problem:";
    for (const auto& s : rep.issues) msg += " [" + s + "]";
    throw InvalidProblem(msg);
  }
  require(x_init.size() == p.nx(), "build_split: x_init size");
  require(rho >= 0.0, "build_split: rho must be nonnegative");

  const Index nx = p.nx(), nu = p.nu(), N = p.N;
  SplitProblem s;
  s.nx = nx;
  s.nu = nu;
  s.N = N;
  s.rho = rho;
  s.x_init = x_init;
  s.dynamics = p.dynamics;

  s.D.resize(static_cast<size_t>(N));
  s.E.resize(static_cast<size_t>(N));
  s.G.resize(static_cast<size_t>(N));
  s.d.resize(static_cast<size_t>(N));

  s.S = Mat::Zero(nu, nu + nx);
  s.S.leftCols(nu).setIdentity();

  // G_k for k >= 1 stacks [0, C_i]; G_0 acts on xi_0 = x_0 directly.
  Mat g_tail = Mat::Zero(nx * nu, nu + nx);
  for (Index i = 0; i < nu; ++i)
    g_tail.block(i * nx, nu, nx, nx) = p.dynamics.C[static_cast<size_t>(i)];

  Mat e_k(nx, nu + nx);
  e_k << p.dynamics.B, -Mat::Identity(nx, nx);

  for (Index k = 0; k < N; ++k) {
    const auto ks = static_cast<size_t>(k);
    if (k == 0) {
      s.D[ks] = p.dynamics.A;
      s.G[ks] = p.dynamics.c_stack();
    } else {
      s.D[ks] = Mat::Zero(nx, nu + nx);
      s.D[ks].rightCols(nx) = p.dynamics.A;
      s.G[ks] = g_tail;
    }
    s.E[ks] = e_k;
    s.d[ks] = (p.nw() > 0) ? Vec(-p.dynamics.Bw * p.w.col(k)) : Vec(Vec::Zero(nx));
  }

  s.u_set = p.u_set;
  s.x_set = p.x_set;

  // Xi_k = U x X expressed over xi = [u; x].
  const Index mu_rows = p.u_set.rows(), mx_rows = p.x_set.rows();
  s.xi_set.P = Mat::Zero(mu_rows + mx_rows, nu + nx);
  s.xi_set.p.resize(mu_rows + mx_rows);
  if (mu_rows > 0) {
    s.xi_set.P.topLeftCorner(mu_rows, nu) = p.u_set.P;
    s.xi_set.p.head(mu_rows) = p.u_set.p;
  }
  if (mx_rows > 0) {
    s.xi_set.P.bottomRightCorner(mx_rows, nx) = p.x_set.P;
    s.xi_set.p.tail(mx_rows) = p.x_set.p;
  }

  s.Q0 = p.cost.Q[0];
  s.q0 = p.cost.q[0];
  s.Qloc.resize(static_cast<size_t>(N));
  s.qloc.resize(static_cast<size_t>(N));
  for (Index k = 1; k <= N; ++k) {
    const Mat& Qk = (k == N) ? p.cost.QN : p.cost.Q[static_cast<size_t>(k)];
    const Vec& qk = (k == N) ? p.cost.qN : p.cost.q[static_cast<size_t>(k)];
    const Mat& Rk = p.cost.R[static_cast<size_t>(k - 1)];
    const Vec& rk = p.cost.r[static_cast<size_t>(k - 1)];
    Mat Ql = Mat::Zero(nu + nx, nu + nx);
    Ql.topLeftCorner(nu, nu) = Rk;
    Ql.bottomRightCorner(nx, nx) = Qk;
    Ql.diagonal().array() += rho;
    s.Qloc[static_cast<size_t>(k - 1)] = Ql;
    Vec ql(nu + nx);
    ql << rk, qk;
    s.qloc[static_cast<size_t>(k - 1)] = ql;
  }
  return s;
}

namespace detail {

/// (E_{k-1} + mat(G_{k-1} z_{k-1}) S_k)' lam, matrix-vector work only.
inline Vec coupling_prev_transposed(const SplitProblem& s, Index k, const Vec& z_prev,
                                    const Vec& lam) {
  Vec out = s.E[static_cast<size_t>(k - 1)].transpose() * lam;
  const Vec gz = s.G[static_cast<size_t>(k - 1)] * z_prev;  // stacked C_i x_{k-1}
  // mat(gz) S has the n_u columns (C_i x) in the u block; transpose-apply:
  for (Index i = 0; i < s.nu; ++i) out[i] += gz.segment(i * s.nx, s.nx).dot(lam);
  return out;
}

/// (D_k + (S z_{k+1} (x) I)' G_k)' lam.
inline Vec coupling_self_transposed(const SplitProblem& s, Index k, const Vec& z_next,
                                    const Vec& lam) {
  Vec out = s.D[static_cast<size_t>(k)].transpose() * lam;
  const Vec u = s.S * z_next;
  // G_k' (u (x) I) lam = sum_i u_i * C_i' lam in the x block of xi_k.
  for (Index i = 0; i < s.nu; ++i) {
    const Vec ci_lam =
        s.G[static_cast<size_t>(k)].middleRows(i * s.nx, s.nx).transpose() * lam;
    out += u[i] * ci_lam;
  }
  return out;
}

}  // namespace detail

/// Bilinear coupling term (S xi_next (x) I)' G_k xi_k = sum_i u_i C_i x_k.
inline Vec coupling_bilinear(const SplitProblem& s, Index k, const Vec& xi_k, const Vec& xi_next) {
  const Vec gx = s.G[static_cast<size_t>(k)] * xi_k;  // stacked C_i x_k
  const Vec u = s.S * xi_next;
  Vec out = Vec::Zero(s.nx);
  for (Index i = 0; i < s.nu; ++i) out += u[i] * gx.segment(i * s.nx, s.nx);
  return out;
}

/// Coupling residuals c_k = D_k xi_k + E_k xi_{k+1} + bilinear - d_k, k = 0..N-1.
inline std::vector<Vec> coupling_residual(const SplitProblem& s, const Trajectory& t) {
  require(t.horizon() == s.N, "coupling_residual: horizon mismatch");
  require(t[0].size() == s.nx, "coupling_residual: xi_0 size");
  std::vector<Vec> c(static_cast<size_t>(s.N));
  for (Index k = 0; k < s.N; ++k) {
    require(t[k + 1].size() == s.nu + s.nx, "coupling_residual: stage size");
    c[static_cast<size_t>(k)] = s.D[static_cast<size_t>(k)] * t[k] +
                                s.E[static_cast<size_t>(k)] * t[k + 1] +
                                coupling_bilinear(s, k, t[k], t[k + 1]) - s.d[static_cast<size_t>(k)];
  }
  return c;
}

/// OCP objective sum l_k(x_k, u_k) + l_N(x_N) evaluated on a trajectory.
inline double ocp_cost(const BilinearMpcProblem& p, const Trajectory& t) {
  auto [x, u] = unpack_trajectory(t, p.nx(), p.nu());
  double val = 0.0;
  for (Index k = 0; k < p.N; ++k) {
    const auto ks = static_cast<size_t>(k);
    val += 0.5 * x[ks].dot(p.cost.Q[ks] * x[ks]) + p.cost.q[ks].dot(x[ks]);
    val += 0.5 * u[ks].dot(p.cost.R[ks] * u[ks]) + p.cost.r[ks].dot(u[ks]);
  }
  const Vec& xN = x[static_cast<size_t>(p.N)];
  val += 0.5 * xN.dot(p.cost.QN * xN) + p.cost.qN.dot(xN);
  return val;
}

/// Forward-simulate the problem dynamics from x0 under inputs u (one column
/// or vector per step), returning the packed trajectory.
inline Trajectory simulate(const BilinearMpcProblem& p, const Vec& x0, const std::vector<Vec>& u) {
  require(static_cast<Index>(u.size()) == p.N, "simulate: need N inputs");
  std::vector<Vec> x;
  x.push_back(x0);
  for (Index k = 0; k < p.N; ++k) {
    Vec w = p.nw() > 0 ? Vec(p.w.col(k)) : Vec(Vec::Zero(0));
    x.push_back(step_dynamics(p.dynamics, x.back(), u[static_cast<size_t>(k)], w));
  }
  return pack_trajectory(x, u);
}

}  // namespace bilmpc
