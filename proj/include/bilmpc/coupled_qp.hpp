#pragma once

#include <ostream>
#include <utility>
#include <vector>

#include "bilmpc/sensitivities.hpp"

namespace bilmpc {

/// Equality-constrained coupled QP reduced to its KKT system in the
/// interleaved ordering (lambda_0, dy_1, lambda_1, ..., lambda_{N-1}, dy_N).
/// dy_0 = 0 is already eliminated, and the 1/2 mu ||s_k||^2 slack penalty on
/// the active faces is folded into the diagonal blocks:
///   Qt_k = diag(R_{k-1}, Q_k) + sigma I + mu P_hat_k' P_hat_k.
struct KktSystem {
  Index nx = 0, nu = 0, N = 0;
  std::vector<Mat> Qt;      //< k = 1..N
  std::vector<Mat> Scross;  //< S_{k,k+1}, k = 1..N-1
  std::vector<Mat> Dt;      //< k = 1..N-1 (Dt_0 multiplies the eliminated dy_0)
  std::vector<Mat> Et;      //< k = 0..N-1
  std::vector<Vec> g;       //< g_1..g_N
  std::vector<Vec> c;       //< c_0..c_{N-1}
  double mu = 0.0;
  double sigma = 0.0;

  Index xi_dim() const { return nu + nx; }
  Index size() const { return N * nx + N * xi_dim(); }

  /// Dense symmetric system matrix, for oracles and debugging.
  Mat dense_matrix() const {
    const Index nxi = xi_dim();
    Mat M = Mat::Zero(size(), size());
    auto lam_at = [&](Index k) { return k == 0 ? Index(0) : k * (nx + nxi); };
    auto dy_at = [&](Index k) { return nx + (k - 1) * (nx + nxi); };
    for (Index k = 1; k <= N; ++k) {
      M.block(dy_at(k), dy_at(k), nxi, nxi) = Qt[static_cast<size_t>(k - 1)];
      // coupling constraint k-1: Et_{k-1} dy_k
      M.block(lam_at(k - 1), dy_at(k), nx, nxi) = Et[static_cast<size_t>(k - 1)];
      M.block(dy_at(k), lam_at(k - 1), nxi, nx) = Et[static_cast<size_t>(k - 1)].transpose();
      if (k < N) {
        M.block(lam_at(k), dy_at(k), nx, nxi) = Dt[static_cast<size_t>(k - 1)];
        M.block(dy_at(k), lam_at(k), nxi, nx) = Dt[static_cast<size_t>(k - 1)].transpose();
        M.block(dy_at(k), dy_at(k + 1), nxi, nxi) = Scross[static_cast<size_t>(k - 1)];
        M.block(dy_at(k + 1), dy_at(k), nxi, nxi) = Scross[static_cast<size_t>(k - 1)].transpose();
      }
    }
    return M;
  }

  Vec dense_rhs() const {
    const Index nxi = xi_dim();
    Vec r(size());
    Index at = 0;
    for (Index k = 0; k < N; ++k) {
      r.segment(at, nx) = -c[static_cast<size_t>(k)];
      at += nx;
      r.segment(at, nxi) = -g[static_cast<size_t>(k)];
      at += nxi;
    }
    return r;
  }

  /// Plain-text sparse triplets (row col value), one entry per line.
  void dump_triplets(std::ostream& os) const {
    const Mat M = dense_matrix();
    for (Index i = 0; i < M.rows(); ++i)
      for (Index j = 0; j < M.cols(); ++j)
        if (M(i, j) != 0.0) os << i << " " << j << " " << M(i, j) << "\n";
  }
};

/// Linearized coupling blocks at the reference z:
///   Dt_k = D_k + (S z_{k+1} (x) I)' G_k,   Et_k = E_k + mat(G_k z_k) S.
inline Mat linearized_D(const SplitProblem& s, Index k, const Vec& z_next) {
  Mat Dt = s.D[static_cast<size_t>(k)];
  const Vec u = s.S * z_next;
  for (Index i = 0; i < s.nu; ++i)
    Dt += u[i] * s.G[static_cast<size_t>(k)].middleRows(i * s.nx, s.nx);
  return Dt;
}

inline Mat linearized_E(const SplitProblem& s, Index k, const Vec& z_k) {
  Mat Et = s.E[static_cast<size_t>(k)];
  const Vec gz = s.G[static_cast<size_t>(k)] * z_k;
  for (Index i = 0; i < s.nu; ++i) Et.col(i) += gz.segment(i * s.nx, s.nx);
  return Et;
}

/// Assemble the KKT system of the coupled QP at linearization point z
/// (the current stage solutions).  The slack penalty enters the diagonal.
inline KktSystem assemble_kkt(const SensitivityPack& pack, const SplitProblem& s,
                              const Trajectory& z, double mu) {
  require(z.horizon() == s.N, "assemble_kkt: z horizon");
  KktSystem k;
  k.nx = s.nx;
  k.nu = s.nu;
  k.N = s.N;
  k.mu = mu;
  k.sigma = pack.sigma;

  k.Qt.resize(static_cast<size_t>(s.N));
  for (Index j = 1; j <= s.N; ++j) {
    Mat Q = pack.H.diag[static_cast<size_t>(j)];
    const Mat& Pa = pack.active_jac[static_cast<size_t>(j - 1)];
    if (Pa.rows() > 0) Q += mu * Pa.transpose() * Pa;
    k.Qt[static_cast<size_t>(j - 1)] = std::move(Q);
  }
  k.Scross.assign(pack.H.upper.begin() + 1, pack.H.upper.end());

  k.Dt.resize(static_cast<size_t>(s.N > 0 ? s.N - 1 : 0));
  k.Et.resize(static_cast<size_t>(s.N));
  for (Index j = 0; j < s.N; ++j) {
    if (j >= 1) k.Dt[static_cast<size_t>(j - 1)] = linearized_D(s, j, z[j + 1]);
    k.Et[static_cast<size_t>(j)] = linearized_E(s, j, z[j]);
  }

  k.g.assign(pack.g.begin() + 1, pack.g.end());
  k.c = pack.c;
  return k;
}

struct SchurSolution {
  Trajectory dy;             //< dy_0 = 0
  std::vector<Vec> lambda_qp;
  double residual = 0.0;     //< ||M w - rhs||_inf of the solved system
};

/// Backward/forward Schur-complement sweeps on the interleaved banded system.
/// Stages are grouped as w_0 = lambda_0, w_k = (dy_k, lambda_k), w_N = dy_N;
/// the backward pass eliminates w_N down to w_1, then lambda_0 is solved and
/// the forward pass recovers all blocks.  Throws SingularError when a pivot
/// block is not invertible (the caller escalates sigma and retries).
inline SchurSolution schur_solve(const KktSystem& k) {
  const Index nx = k.nx, nxi = k.xi_dim(), N = k.N;
  require(N >= 1, "schur_solve: empty horizon");

  auto block_size = [&](Index i) {  // group i = 0..N
    if (i == 0) return nx;
    if (i == N) return nxi;
    return nxi + nx;
  };

  // Diagonal blocks and rhs of the grouped tridiagonal system.
  std::vector<Mat> Mkk(static_cast<size_t>(N) + 1);
  std::vector<Vec> rhs(static_cast<size_t>(N) + 1);
  Mkk[0] = Mat::Zero(nx, nx);
  rhs[0] = -k.c[0];
  for (Index i = 1; i <= N; ++i) {
    const Index bs = block_size(i);
    Mat M = Mat::Zero(bs, bs);
    Vec r(bs);
    M.topLeftCorner(nxi, nxi) = k.Qt[static_cast<size_t>(i - 1)];
    r.head(nxi) = -k.g[static_cast<size_t>(i - 1)];
    if (i < N) {
      M.block(nxi, 0, nx, nxi) = k.Dt[static_cast<size_t>(i - 1)];
      M.block(0, nxi, nxi, nx) = k.Dt[static_cast<size_t>(i - 1)].transpose();
      r.tail(nx) = -k.c[static_cast<size_t>(i)];
    }
    Mkk[static_cast<size_t>(i)] = std::move(M);
    rhs[static_cast<size_t>(i)] = std::move(r);
  }

  // Off-diagonal blocks M_{i,i+1} (rows group i, cols group i+1).
  auto upper = [&](Index i) {
    Mat U = Mat::Zero(block_size(i), block_size(i + 1));
    if (i == 0) {
      U.topLeftCorner(nx, nxi) = k.Et[0];
    } else {
      U.topLeftCorner(nxi, nxi) = k.Scross[static_cast<size_t>(i - 1)];
      U.block(nxi, 0, nx, nxi) = k.Et[static_cast<size_t>(i)];
    }
    return U;
  };

  // Backward sweep: Schur-eliminate group i into group i-1.
  std::vector<Eigen::FullPivLU<Mat>> lu(static_cast<size_t>(N) + 1);
  std::vector<Mat> lower(static_cast<size_t>(N) + 1);  // M_{i,i-1} after updates
  for (Index i = N; i >= 1; --i) {
    lu[static_cast<size_t>(i)].compute(Mkk[static_cast<size_t>(i)]);
    if (!lu[static_cast<size_t>(i)].isInvertible())
      throw SingularError("schur_solve: singular stage block " + std::to_string(i));
    const Mat U = upper(i - 1);
    lower[static_cast<size_t>(i)] = U.transpose();
    const Mat X = lu[static_cast<size_t>(i)].solve(lower[static_cast<size_t>(i)]);
    const Vec rx = lu[static_cast<size_t>(i)].solve(rhs[static_cast<size_t>(i)]);
    Mkk[static_cast<size_t>(i - 1)] -= U * X;
    rhs[static_cast<size_t>(i - 1)] -= U * rx;
  }

  // lambda_0, then forward recovery.
  std::vector<Vec> w(static_cast<size_t>(N) + 1);
  Eigen::FullPivLU<Mat> lu0(Mkk[0]);
  if (!lu0.isInvertible()) throw SingularError("schur_solve: singular root block");
  w[0] = lu0.solve(rhs[0]);
  for (Index i = 1; i <= N; ++i)
    w[static_cast<size_t>(i)] = lu[static_cast<size_t>(i)].solve(
        rhs[static_cast<size_t>(i)] - lower[static_cast<size_t>(i)] * w[static_cast<size_t>(i - 1)]);

  SchurSolution sol;
  sol.dy.xi.resize(static_cast<size_t>(N) + 1);
  sol.dy.xi[0] = Vec::Zero(nx);
  sol.lambda_qp.resize(static_cast<size_t>(N));
  sol.lambda_qp[0] = w[0];
  for (Index i = 1; i <= N; ++i) {
    sol.dy.xi[static_cast<size_t>(i)] = w[static_cast<size_t>(i)].head(nxi);
    if (i < N) sol.lambda_qp[static_cast<size_t>(i)] = w[static_cast<size_t>(i)].tail(nx);
  }

  // Residual of the full (unreduced) system, assembled blockwise so the
  // check stays O(N).
  double res = 0.0;
  for (Index j = 0; j < N; ++j) {  // coupling rows
    Vec r = k.c[static_cast<size_t>(j)] + k.Et[static_cast<size_t>(j)] * sol.dy[j + 1];
    if (j >= 1) r += k.Dt[static_cast<size_t>(j - 1)] * sol.dy[j];
    res = std::max(res, r.cwiseAbs().maxCoeff());
  }
  for (Index j = 1; j <= N; ++j) {  // stationarity rows
    Vec r = k.g[static_cast<size_t>(j - 1)] + k.Qt[static_cast<size_t>(j - 1)] * sol.dy[j] +
            k.Et[static_cast<size_t>(j - 1)].transpose() * sol.lambda_qp[static_cast<size_t>(j - 1)];
    if (j >= 2) r += k.Scross[static_cast<size_t>(j - 2)].transpose() * sol.dy[j - 1];
    if (j < N) {
      r += k.Dt[static_cast<size_t>(j - 1)].transpose() * sol.lambda_qp[static_cast<size_t>(j)];
      r += k.Scross[static_cast<size_t>(j - 1)] * sol.dy[j + 1];
    }
    res = std::max(res, r.cwiseAbs().maxCoeff());
  }
  sol.residual = res;
  return sol;
}

}  // namespace bilmpc
