#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "bilmpc/coupled_qp.hpp"
#include "bilmpc/stage_solver.hpp"

namespace bilmpc {

struct SolverConfig {
  double rho = 1.0;       //< proximal weight (baked into the stage maps)
  double eps = 1e-6;      //< stop tolerance on ||c|| and rho||y - z||
  Index max_iter = 100;
  double mu_base = 1.0;   //< slack penalty schedule mu = mu_base / ||y - z||
  double mu_min = 1e2;
  double mu_max = 1e12;
  double eps_floor = 1e-8;
  std::vector<double> sigma_ladder = {0.0, 1e-6, 1e-4, 1e-2, 1.0};  //< scaled by max(1, ||H||_inf)
  int workers = 1;
  bool record_iterates = false;
  double explosion_factor = 1e6;
};

struct IterationRecord {
  Index iteration = 0;
  double c_inf = 0.0;        //< max_k ||c_k||_inf
  double prox_inf = 0.0;     //< max_k rho ||y_k - z_k||_inf
  double sigma = 0.0;
  double mu = 0.0;
  Index stage_fallbacks = 0;
  double stage_ms = 0.0;
  double kkt_ms = 0.0;
};

struct SolverState {
  Trajectory z;
  std::vector<Vec> lambda;
};

enum class SolveStatus { Converged, MaxIter, Error };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Converged: return "converged";
    case SolveStatus::MaxIter: return "max_iter";
    default: return "error";
  }
}

struct SolveResult {
  Trajectory trajectory;
  std::vector<Vec> duals;
  std::vector<Vec> stage_duals;
  std::vector<std::vector<Index>> active_sets;
  SolveStatus status = SolveStatus::Error;
  Index iterations = 0;
  double c_inf = 0.0;
  double prox_inf = 0.0;
  double stationarity_inf = 0.0;  //< grad of the plain Lagrangian at exit
  Vec u0;
  std::vector<IterationRecord> telemetry;
  std::vector<Trajectory> iterates;  //< filled when record_iterates is on
};

/// Projection of v onto {P u <= p}; identity when already inside.
inline Vec project_onto(const Polyhedron& set, const Vec& v) {
  if (set.rows() == 0 || set.contains(v, 0.0)) return v;
  const Mat I = Mat::Identity(v.size(), v.size());
  return solve_qp(I, Vec(-v), set.P, set.p).y;
}

/// Cold start: simulate the split dynamics under the projection of zero onto
/// the input set, so the initial coupling residual vanishes; duals start at 0.
inline SolverState cold_start(const SplitProblem& s) {
  SolverState st;
  const Vec u0 = project_onto(s.u_set, Vec::Zero(s.nu));
  st.z.xi.resize(static_cast<size_t>(s.N) + 1);
  st.z.xi[0] = s.x_init;
  Vec x = s.x_init;
  for (Index k = 0; k < s.N; ++k) {
    Vec xn = s.dynamics.A * x + s.dynamics.B * u0 - s.d[static_cast<size_t>(k)];  // -d_k = Bw w_k
    for (Index i = 0; i < s.nu; ++i) xn += u0[i] * (s.dynamics.C[static_cast<size_t>(i)] * x);
    Vec xi(s.nu + s.nx);
    xi << u0, xn;
    st.z.xi[static_cast<size_t>(k + 1)] = xi;
    x = xn;
  }
  st.lambda.assign(static_cast<size_t>(s.N), Vec::Zero(s.nx));
  return st;
}

/// Shift the previous solution one stage forward, duplicating the tail, and
/// pin the new initial state.
inline SolverState warm_start_shift(const SolveResult& prev, const Vec& new_x,
                                    const Mat& /*new_w*/ = Mat()) {
  const Index N = prev.trajectory.horizon();
  require(N >= 1, "warm_start_shift: empty trajectory");
  require(new_x.size() == prev.trajectory[0].size(), "warm_start_shift: x dimension");
  SolverState st;
  st.z.xi.resize(static_cast<size_t>(N) + 1);
  st.z.xi[0] = new_x;
  for (Index k = 1; k < N; ++k) st.z.xi[static_cast<size_t>(k)] = prev.trajectory[k + 1];
  st.z.xi[static_cast<size_t>(N)] = prev.trajectory[N];
  st.lambda.resize(static_cast<size_t>(N));
  for (Index k = 0; k + 1 < N; ++k) st.lambda[static_cast<size_t>(k)] = prev.duals[static_cast<size_t>(k + 1)];
  st.lambda[static_cast<size_t>(N - 1)] = prev.duals[static_cast<size_t>(N - 1)];
  return st;
}

namespace detail {

inline double max_stage_inf(const std::vector<Vec>& v) {
  double m = 0.0;
  for (const auto& x : v)
    if (x.size() > 0) m = std::max(m, x.cwiseAbs().maxCoeff());
  return m;
}

inline double trajectory_gap_inf(const Trajectory& a, const Trajectory& b) {
  double m = 0.0;
  for (size_t k = 0; k < a.xi.size(); ++k)
    m = std::max(m, (a.xi[k] - b.xi[k]).cwiseAbs().maxCoeff());
  return m;
}

}  // namespace detail

/// Algorithm main loop: parallel stage solves on the explicit maps,
/// sensitivity evaluation, termination test, coupled equality QP via the
/// banded Schur sweeps, full primal-dual update.
inline SolveResult solve(const SplitProblem& s, const StageMapSet& maps, const SolverConfig& cfg,
                         const SolverState& init) {
  require(cfg.rho == s.rho, "solve: config rho differs from the split (maps would be stale)");
  require(init.z.horizon() == s.N, "solve: init z horizon");
  require(static_cast<Index>(init.lambda.size()) == s.N, "solve: init lambda count");

  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };

  SolveResult res;
  Trajectory z = init.z;
  z.xi[0] = s.x_init;
  std::vector<Vec> lambda = init.lambda;

  double first_c_inf = -1.0;
  double best_score = std::numeric_limits<double>::infinity();
  bool exploded = false;

  for (Index it = 0; it < cfg.max_iter; ++it) {
    const auto t_stage = clock::now();
    const StageParams theta = assemble_theta(s, z, lambda, cfg.rho);
    StageSolveResult stage = solve_stages(maps, s, theta, s.x_init, cfg.workers);
    const double stage_ms = ms_since(t_stage);

    const std::vector<Vec> c = coupling_residual(s, stage.y);
    double c_inf = detail::max_stage_inf(c);
    double prox_inf = cfg.rho * detail::trajectory_gap_inf(stage.y, z);
    if (first_c_inf < 0) first_c_inf = c_inf;

    res.iterations = it + 1;
    if (cfg.record_iterates) res.iterates.push_back(stage.y);

    IterationRecord rec;
    rec.iteration = it;
    rec.c_inf = c_inf;
    rec.prox_inf = prox_inf;
    rec.stage_fallbacks = stage.fallback_count;
    rec.stage_ms = stage_ms;

    const double score = std::max(c_inf, prox_inf);
    if (score < best_score) {
      best_score = score;
      res.trajectory = stage.y;
      res.duals = lambda;
      res.stage_duals = stage.stage_duals;
      res.active_sets = stage.active_sets;
      res.c_inf = c_inf;
      res.prox_inf = prox_inf;
    }

    if (c_inf <= cfg.eps && prox_inf <= cfg.eps) {
      res.trajectory = stage.y;
      res.duals = lambda;
      res.stage_duals = stage.stage_duals;
      res.active_sets = stage.active_sets;
      res.c_inf = c_inf;
      res.prox_inf = prox_inf;
      res.status = SolveStatus::Converged;
      res.telemetry.push_back(rec);
      break;
    }
    if (c_inf > cfg.explosion_factor * std::max(first_c_inf, cfg.eps)) {
      exploded = true;
      res.telemetry.push_back(rec);
      break;
    }

    // Step 4: coupled QP with sigma escalation on singular pivots.
    const double gap = std::max(detail::trajectory_gap_inf(stage.y, z), cfg.eps_floor);
    const double mu = std::clamp(cfg.mu_base / gap, cfg.mu_min, cfg.mu_max);
    rec.mu = mu;

    const auto t_kkt = clock::now();
    std::optional<SchurSolution> sol;
    double h_scale = -1.0;
    for (double sig : cfg.sigma_ladder) {
      double sigma = sig;
      if (sig > 0) {
        if (h_scale < 0) h_scale = std::max(1.0, eval_hessian(s, lambda, 0.0).inf_norm());
        sigma = sig * h_scale;
      }
      const SensitivityPack pack =
          eval_sensitivities(s, stage.y, lambda, &stage.active_sets, sigma);
      const KktSystem kkt = assemble_kkt(pack, s, stage.y, mu);
      try {
        sol = schur_solve(kkt);
        rec.sigma = sigma;
        break;
      } catch (const SingularError&) {
        continue;
      }
    }
    rec.kkt_ms = ms_since(t_kkt);
    res.telemetry.push_back(rec);
    if (!sol) {
      res.status = SolveStatus::Error;
      return res;
    }

    // Step 5: full primal-dual update.
    for (Index k = 1; k <= s.N; ++k) z[k] = stage.y[k] + sol->dy[k];
    z.xi[0] = s.x_init;
    lambda = sol->lambda_qp;
  }

  if (res.status != SolveStatus::Converged) res.status = SolveStatus::MaxIter;
  (void)exploded;

  if (res.trajectory.xi.empty()) {
    res.trajectory = z;
    res.duals = lambda;
  }
  res.u0 = res.trajectory[1].head(s.nu);
  res.stationarity_inf = detail::max_stage_inf(grad_lagrangian(s, res.trajectory, res.duals));
  return res;
}

/// Receding-horizon controller wrapping the solver: owns the stage maps,
/// rebuilds the splitting each step and warm starts from the previous solve.
class Controller {
 public:
  Controller(BilinearMpcProblem problem, SolverConfig cfg)
      : problem_(std::move(problem)), cfg_(cfg) {
    const Vec x0 = Vec::Zero(problem_.nx());
    if (problem_.nw() > 0 && problem_.w.cols() < problem_.N)
      problem_.w = Mat::Zero(problem_.nw(), problem_.N);
    SplitProblem s = build_split(problem_, x0, cfg_.rho);
    maps_ = build_stage_maps(s);
  }

  /// Per-step cost update (e.g. a moving tracking reference).  The quadratic
  /// blocks must stay unchanged; otherwise the prebuilt maps are stale.
  void set_stage_cost(const StageCost& cost) {
    for (size_t k = 0; k < cost.Q.size(); ++k) {
      require(cost.Q[k] == problem_.cost.Q[k] && cost.R[k] == problem_.cost.R[k],
              "set_stage_cost: quadratic blocks must not change");
    }
    require(cost.QN == problem_.cost.QN, "set_stage_cost: terminal block must not change");
    problem_.cost = cost;
  }

  const BilinearMpcProblem& problem() const { return problem_; }
  const StageMapSet& maps() const { return maps_; }
  const std::optional<SolveResult>& last_result() const { return last_; }

  void reset() { last_.reset(); }

  /// One receding-horizon step: rebuild the splitting from the measured state
  /// and forecast, solve (warm started when possible), return the input to
  /// apply.  The input always satisfies the input constraints, whatever the
  /// solver status.
  std::pair<Vec, SolveResult> mpc_step(const Vec& x_meas, const Mat& forecast) {
    require(problem_.nw() == 0 || forecast.cols() >= problem_.N,
            "mpc_step: forecast shorter than the horizon");
    if (problem_.nw() > 0) problem_.w = forecast.leftCols(problem_.N);
    const SplitProblem s = build_split(problem_, x_meas, cfg_.rho);
    const SolverState st = last_ ? warm_start_shift(*last_, x_meas) : cold_start(s);
    SolveResult res = solve(s, maps_, cfg_, st);
    Vec u = res.u0;
    if (!s.u_set.contains(u, 0.0)) u = project_onto(s.u_set, u);
    last_ = res;
    return {u, std::move(res)};
  }

 private:
  BilinearMpcProblem problem_;
  SolverConfig cfg_;
  StageMapSet maps_;
  std::optional<SolveResult> last_;
};

}  // namespace bilmpc
