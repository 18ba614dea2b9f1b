#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "bilmpc/mpqp.hpp"
#include "bilmpc/parallel.hpp"
#include "bilmpc/problem.hpp"

namespace bilmpc {

/// Stage parameters theta_1..theta_N of the decoupled problems.
struct StageParams {
  std::vector<Vec> theta;  //< index k-1 holds theta_k

  const Vec& at(Index k) const { return theta[static_cast<size_t>(k - 1)]; }
};

/// Stage parameter assembly from the reference trajectory z and duals lambda.
/// Cost is O(N (n_x + n_u)^2): matrix-vector products only.
inline StageParams assemble_theta(const SplitProblem& s, const Trajectory& z,
                                  const std::vector<Vec>& lambda, double rho) {
  require(z.horizon() == s.N, "assemble_theta: z horizon");
  require(static_cast<Index>(lambda.size()) == s.N, "assemble_theta: lambda count");
  for (const auto& l : lambda) require(l.size() == s.nx, "assemble_theta: lambda size");

  StageParams params;
  params.theta.resize(static_cast<size_t>(s.N));
  for (Index k = 1; k <= s.N; ++k) {
    Vec th = s.qloc_at(k);
    th += detail::coupling_prev_transposed(s, k, z[k - 1], lambda[static_cast<size_t>(k - 1)]);
    if (k < s.N)
      th += detail::coupling_self_transposed(s, k, z[k + 1], lambda[static_cast<size_t>(k)]);
    th -= rho * z[k];
    params.theta[static_cast<size_t>(k - 1)] = std::move(th);
  }
  return params;
}

/// Per-stage solve output for Step 2.
struct StageSolveResult {
  Trajectory y;
  std::vector<std::vector<Index>> active_sets;  //< k-1 slot for stage k
  std::vector<Vec> stage_duals;
  Index fallback_count = 0;  //< solves that bypassed the explicit map
};

/// Maps per stage; stages with identical (Qc, Xi) share one map.
struct StageMapSet {
  std::vector<std::shared_ptr<const PwaSolutionMap>> unique_maps;
  std::vector<Index> map_of_stage;  //< k-1 -> index into unique_maps

  const PwaSolutionMap& at(Index k) const {
    return *unique_maps[static_cast<size_t>(map_of_stage[static_cast<size_t>(k - 1)])];
  }
  Index count() const { return static_cast<Index>(unique_maps.size()); }
};

/// Offline construction of all stage maps, deduplicated across stages.
inline StageMapSet build_stage_maps(const SplitProblem& s, const EnumerationOptions& opt = {}) {
  StageMapSet set;
  set.map_of_stage.resize(static_cast<size_t>(s.N), -1);
  for (Index k = 1; k <= s.N; ++k) {
    const StageMpqp q = stage_mpqp(s, k);
    Index found = -1;
    for (size_t i = 0; i < set.unique_maps.size(); ++i) {
      const StageMpqp& other = set.unique_maps[i]->mpqp;
      if (other.Qc == q.Qc && other.P == q.P && other.p == q.p) {
        found = static_cast<Index>(i);
        break;
      }
    }
    if (found < 0) {
      auto map = std::make_shared<PwaSolutionMap>(build_solution_map(q, opt));
      set.unique_maps.push_back(std::move(map));
      found = static_cast<Index>(set.unique_maps.size()) - 1;
    }
    set.map_of_stage[static_cast<size_t>(k - 1)] = found;
  }
  return set;
}

/// Algorithm step 1: y_0 = x_init and the N decoupled stage solves, run on a
/// worker pool.  Results are written per stage, so any pool size gives
/// bitwise identical output.
inline StageSolveResult solve_stages(const StageMapSet& maps, const SplitProblem& s,
                                     const StageParams& params, const Vec& x_init,
                                     int workers = 1) {
  require(static_cast<Index>(params.theta.size()) == s.N, "solve_stages: theta count");
  StageSolveResult out;
  out.y.xi.resize(static_cast<size_t>(s.N) + 1);
  out.y.xi[0] = x_init;
  out.active_sets.resize(static_cast<size_t>(s.N));
  out.stage_duals.resize(static_cast<size_t>(s.N));

  std::vector<Index> fallbacks(static_cast<size_t>(s.N), 0);
  parallel_for(s.N, workers, [&](Index i) {
    const Index k = i + 1;
    const PwaSolutionMap& map = maps.at(k);
    const Vec& th = params.at(k);
    PwaEval ev = eval_pwa(map, th);
    if (ev.found) {
      out.y.xi[static_cast<size_t>(k)] = ev.y;
      out.active_sets[static_cast<size_t>(i)] = ev.active_set;
      out.stage_duals[static_cast<size_t>(i)] = ev.dual;
    } else {
      const QpSolution qs = solve_active_set(map.mpqp, th);
      out.y.xi[static_cast<size_t>(k)] = qs.y;
      out.active_sets[static_cast<size_t>(i)] = qs.active;
      out.stage_duals[static_cast<size_t>(i)] = qs.dual;
      fallbacks[static_cast<size_t>(i)] = 1;
    }
  });
  for (Index v : fallbacks) out.fallback_count += v;
  return out;
}

}  // namespace bilmpc
