#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "bilmpc/lp.hpp"
#include "bilmpc/problem.hpp"
#include "bilmpc/qp.hpp"
#include "bilmpc/types.hpp"

namespace bilmpc {

/// Parametric stage QP  min 1/2 y'Qc y + theta'y  s.t.  P y <= p,
/// with the parameter entering the linear term only.
struct StageMpqp {
  Mat Qc;
  Mat P;
  Vec p;

  Index dim() const { return Qc.rows(); }
  Index rows() const { return P.rows(); }
};

inline StageMpqp stage_mpqp(const SplitProblem& s, Index k) {
  StageMpqp q;
  q.Qc = s.Qloc_at(k);
  q.P = s.xi_set.P;
  q.p = s.xi_set.p;
  return q;
}

/// Online fallback and enumeration oracle: exact primal-dual stage QP solve.
inline QpSolution solve_active_set(const StageMpqp& q, const Vec& theta) {
  return solve_qp(q.Qc, theta, q.P, q.p);
}

/// One critical region: over {theta : Hr theta <= hr} the optimizer is
/// y*(theta) = F theta + f with active multipliers Lambda theta + lambda0.
struct CriticalRegion {
  std::vector<Index> active_set;  //< sorted rows of P
  Mat F;
  Vec f;
  Mat Hr;   //< rows normalized to unit norm
  Vec hr;
  Mat Lambda;
  Vec lambda0;

  double membership_violation(const Vec& theta) const {
    if (Hr.rows() == 0) return 0.0;
    return (Hr * theta - hr).maxCoeff();
  }
};

/// Axis/hyperplane binary search tree over the critical regions.
struct SearchTree {
  struct Node {
    Vec a;
    double b = 0.0;
    Index left = -1;    //< a'theta <= b side
    Index right = -1;
    std::vector<Index> candidates;  //< region indices, leaves only

    bool leaf() const { return left < 0 && right < 0; }
  };
  std::vector<Node> nodes;  //< nodes[0] is the root when non-empty

  Index depth() const { return nodes.empty() ? 0 : depth_from(0); }

 private:
  Index depth_from(Index i) const {
    const Node& nd = nodes[static_cast<size_t>(i)];
    if (nd.leaf()) return 0;
    return 1 + std::max(depth_from(nd.left), depth_from(nd.right));
  }
};

struct EnumerationReport {
  Index candidates_examined = 0;
  Index licq_skipped = 0;
  Index empty_discarded = 0;
};

struct PwaSolutionMap {
  std::vector<CriticalRegion> regions;
  SearchTree tree;
  Polyhedron domain;  //< feasible parameter set; zero rows = all of R^n
  StageMpqp mpqp;     //< generating problem, kept for fallback and checks
  EnumerationReport report;

  Index dim() const { return mpqp.dim(); }
};

struct EnumerationOptions {
  Index region_cap = 20000;
  Index candidate_cap = 2000000;
  double interior_radius = 1e-9;
  double rank_tol = 1e-9;
};

namespace detail {

inline bool full_row_rank(const Mat& M, double tol) {
  if (M.rows() == 0) return true;
  Eigen::ColPivHouseholderQR<Mat> qr(M.transpose());
  qr.setThreshold(tol);
  return qr.rank() == M.rows();
}

/// Normalize region rows; returns false when a trivially false row makes the
/// region empty.
inline bool normalize_region(Mat& H, Vec& h) {
  std::vector<Index> keep;
  for (Index i = 0; i < H.rows(); ++i) {
    const double norm = H.row(i).norm();
    if (norm <= 1e-12) {
      if (h[i] < -1e-10) return false;
      continue;  // 0 <= h trivially true
    }
    H.row(i) /= norm;
    h[i] /= norm;
    keep.push_back(i);
  }
  if (static_cast<Index>(keep.size()) != H.rows()) {
    Mat H2(static_cast<Index>(keep.size()), H.cols());
    Vec h2(static_cast<Index>(keep.size()));
    for (size_t i = 0; i < keep.size(); ++i) {
      H2.row(static_cast<Index>(i)) = H.row(keep[i]);
      h2[static_cast<Index>(i)] = h[keep[i]];
    }
    H = std::move(H2);
    h = std::move(h2);
  }
  return true;
}

}  // namespace detail

/// Critical region of one active set, or nullopt when the region is empty or
/// violates LICQ (flagged via the licq output).
inline std::optional<CriticalRegion> region_for_active_set(const StageMpqp& q,
                                                           const std::vector<Index>& active,
                                                           const EnumerationOptions& opt,
                                                           bool* licq_ok = nullptr) {
  const Index n = q.dim(), m = q.rows();
  const Index na = static_cast<Index>(active.size());
  if (licq_ok) *licq_ok = true;

  Eigen::LLT<Mat> llt(q.Qc);
  if (llt.info() != Eigen::Success) throw SingularError("region_for_active_set: Qc not PD");

  Mat Pa(na, n);
  Vec pa(na);
  for (Index j = 0; j < na; ++j) {
    Pa.row(j) = q.P.row(active[static_cast<size_t>(j)]);
    pa[j] = q.p[active[static_cast<size_t>(j)]];
  }
  if (!detail::full_row_rank(Pa, opt.rank_tol)) {
    if (licq_ok) *licq_ok = false;
    return std::nullopt;
  }

  CriticalRegion cr;
  cr.active_set = active;

  const Mat Qinv = llt.solve(Mat::Identity(n, n));
  if (na == 0) {
    cr.F = -Qinv;
    cr.f = Vec::Zero(n);
    cr.Lambda.resize(0, n);
    cr.lambda0.resize(0);
  } else {
    const Mat QinvPt = llt.solve(Pa.transpose());   // n x na
    const Mat W = Pa * QinvPt;                      // na x na, PD under LICQ
    Eigen::LDLT<Mat> wldlt(W);
    cr.Lambda = -wldlt.solve(QinvPt.transpose());   // na x n
    cr.lambda0 = -wldlt.solve(pa);
    cr.F = -Qinv - QinvPt * cr.Lambda;
    cr.f = -QinvPt * cr.lambda0;
  }

  // Region: primal feasibility of inactive rows, dual feasibility of active.
  std::vector<Index> inactive;
  for (Index i = 0; i < m; ++i)
    if (std::find(active.begin(), active.end(), i) == active.end()) inactive.push_back(i);
  const Index ni = static_cast<Index>(inactive.size());

  Mat H(ni + na, n);
  Vec h(ni + na);
  for (Index j = 0; j < ni; ++j) {
    const Index i = inactive[static_cast<size_t>(j)];
    H.row(j) = q.P.row(i) * cr.F;
    h[j] = q.p[i] - q.P.row(i).dot(cr.f);
  }
  H.bottomRows(na) = -cr.Lambda;
  h.tail(na) = cr.lambda0;

  if (!detail::normalize_region(H, h)) return std::nullopt;
  cr.Hr = std::move(H);
  cr.hr = std::move(h);

  const ChebyshevResult cheb = chebyshev_center(cr.Hr, cr.hr);
  if (cheb.radius < opt.interior_radius) return std::nullopt;
  return cr;
}

/// Breadth-first enumeration over active sets seeded from the empty set.
/// Sets whose gradient rows are dependent are skipped (and their extensions
/// pruned, since supersets stay dependent).
inline PwaSolutionMap enumerate_regions(const StageMpqp& q,
                                        const EnumerationOptions& opt = {}) {
  const Index n = q.dim(), m = q.rows();
  require(q.P.rows() == q.p.size(), "enumerate_regions: P/p mismatch");
  if (m > 0) require(q.P.cols() == n, "enumerate_regions: P column mismatch");
  {
    const ChebyshevResult cheb = chebyshev_center(q.P, q.p);
    if (!cheb.feasible || cheb.radius < opt.interior_radius)
      throw InvalidProblem("enumerate_regions: constraint set needs a nonempty interior");
  }

  PwaSolutionMap map;
  map.mpqp = q;
  map.domain = Polyhedron::unconstrained(n);  // constant rhs: every theta is feasible

  std::deque<std::vector<Index>> queue;
  queue.push_back({});
  while (!queue.empty()) {
    std::vector<Index> active = std::move(queue.front());
    queue.pop_front();
    if (++map.report.candidates_examined > opt.candidate_cap)
      throw BudgetExceeded("enumerate_regions: candidate budget exceeded");

    bool licq = true;
    auto cr = region_for_active_set(q, active, opt, &licq);
    if (!licq) {
      ++map.report.licq_skipped;
      continue;  // supersets cannot regain independence
    }
    if (cr) {
      map.regions.push_back(std::move(*cr));
      if (static_cast<Index>(map.regions.size()) > opt.region_cap)
        throw BudgetExceeded("enumerate_regions: region budget exceeded");
    } else {
      ++map.report.empty_discarded;
    }

    if (static_cast<Index>(active.size()) < std::min(n, m)) {
      const Index start = active.empty() ? 0 : active.back() + 1;
      for (Index j = start; j < m; ++j) {
        std::vector<Index> child = active;
        child.push_back(j);
        queue.push_back(std::move(child));
      }
    }
  }

  std::sort(map.regions.begin(), map.regions.end(),
            [](const CriticalRegion& a, const CriticalRegion& b) {
              if (a.active_set.size() != b.active_set.size())
                return a.active_set.size() < b.active_set.size();
              return a.active_set < b.active_set;
            });
  return map;
}

namespace detail {

struct Hyperplane {
  Vec a;
  double b;
};

enum class Side { Left, Right, Both };

/// Where the region lies relative to {a'theta = b}; LP-exact, with unbounded
/// directions treated conservatively as straddling.
inline Side classify_region(const CriticalRegion& r, const Hyperplane& hp, double tol = 1e-9) {
  const LpResult up = lp_solve_max(hp.a, r.Hr, r.hr);
  if (up.status == LpResult::Status::Optimal && up.objective <= hp.b + tol) return Side::Left;
  const LpResult dn = lp_solve_max(Vec(-hp.a), r.Hr, r.hr);
  if (dn.status == LpResult::Status::Optimal && -dn.objective >= hp.b - tol) return Side::Right;
  return Side::Both;
}

inline Index build_tree_node(SearchTree& tree, const PwaSolutionMap& map,
                             std::vector<Index> regions,
                             const std::vector<Hyperplane>& planes, Index depth) {
  const Index me = static_cast<Index>(tree.nodes.size());
  tree.nodes.emplace_back();

  auto make_leaf = [&]() {
    tree.nodes[static_cast<size_t>(me)].candidates = regions;
    return me;
  };
  if (regions.size() <= 1 || depth > 64) return make_leaf();

  // Greedy: hyperplane whose worse child list is smallest.
  Index best_plane = -1;
  size_t best_score = regions.size();
  size_t best_both = regions.size();
  std::vector<Side> best_sides;
  std::vector<Side> sides(regions.size());
  for (size_t h = 0; h < planes.size(); ++h) {
    size_t nl = 0, nr = 0, nb = 0;
    for (size_t i = 0; i < regions.size(); ++i) {
      sides[i] = classify_region(map.regions[static_cast<size_t>(regions[i])], planes[h]);
      if (sides[i] == Side::Left) ++nl;
      else if (sides[i] == Side::Right) ++nr;
      else ++nb;
    }
    if (nl + nb == regions.size() || nr + nb == regions.size()) continue;  // no progress
    const size_t score = std::max(nl + nb, nr + nb);
    if (score < best_score || (score == best_score && nb < best_both)) {
      best_score = score;
      best_both = nb;
      best_plane = static_cast<Index>(h);
      best_sides = sides;
    }
  }
  if (best_plane < 0) return make_leaf();

  std::vector<Index> left, right;
  for (size_t i = 0; i < regions.size(); ++i) {
    if (best_sides[i] != Side::Right) left.push_back(regions[i]);
    if (best_sides[i] != Side::Left) right.push_back(regions[i]);
  }
  tree.nodes[static_cast<size_t>(me)].a = planes[static_cast<size_t>(best_plane)].a;
  tree.nodes[static_cast<size_t>(me)].b = planes[static_cast<size_t>(best_plane)].b;
  const Index l = build_tree_node(tree, map, std::move(left), planes, depth + 1);
  const Index r = build_tree_node(tree, map, std::move(right), planes, depth + 1);
  tree.nodes[static_cast<size_t>(me)].left = l;
  tree.nodes[static_cast<size_t>(me)].right = r;
  return me;
}

}  // namespace detail

/// Point-location tree over the enumerated regions (greedy balanced splits on
/// region facets).  The map keeps working without it, at linear scan cost.
inline SearchTree build_tree(const PwaSolutionMap& map) {
  SearchTree tree;
  if (map.regions.empty()) return tree;

  // Candidate split planes: all distinct region facets.
  std::vector<detail::Hyperplane> planes;
  auto canonical = [](Vec a, double b) {
    for (Index i = 0; i < a.size(); ++i) {
      if (std::abs(a[i]) > 1e-12) {
        if (a[i] < 0) {
          a = -a;
          b = -b;
        }
        break;
      }
    }
    return detail::Hyperplane{a, b};
  };
  for (const auto& r : map.regions) {
    for (Index i = 0; i < r.Hr.rows(); ++i) {
      detail::Hyperplane hp = canonical(r.Hr.row(i).transpose(), r.hr[i]);
      bool dup = false;
      for (const auto& q : planes) {
        if ((q.a - hp.a).cwiseAbs().maxCoeff() <= 1e-9 && std::abs(q.b - hp.b) <= 1e-9) {
          dup = true;
          break;
        }
      }
      if (!dup) planes.push_back(std::move(hp));
    }
  }

  std::vector<Index> all(map.regions.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<Index>(i);
  detail::build_tree_node(tree, map, std::move(all), planes, 0);
  return tree;
}

struct PwaEval {
  bool found = false;
  Vec y;
  std::vector<Index> active_set;
  Vec dual;
  Index region = -1;
  Index hyperplanes_visited = 0;
};

/// Linear-scan point location; ground truth for the tree.
inline PwaEval locate_scan(const PwaSolutionMap& map, const Vec& theta, double tol = 1e-8) {
  PwaEval ev;
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < map.regions.size(); ++i) {
    const double v = map.regions[i].membership_violation(theta);
    if (v < best) {
      best = v;
      ev.region = static_cast<Index>(i);
    }
  }
  if (ev.region < 0 || best > tol) return ev;
  const CriticalRegion& r = map.regions[static_cast<size_t>(ev.region)];
  ev.found = true;
  ev.y = r.F * theta + r.f;
  ev.active_set = r.active_set;
  ev.dual = r.Lambda.rows() > 0 ? Vec(r.Lambda * theta + r.lambda0) : Vec(Vec::Zero(0));
  return ev;
}

/// Evaluate the explicit solution map.  found == false signals theta outside
/// the located regions (caller falls back to solve_active_set).
inline PwaEval eval_pwa(const PwaSolutionMap& map, const Vec& theta, double tol = 1e-8) {
  PwaEval ev;
  if (map.domain.rows() > 0 && !map.domain.contains(theta, tol)) return ev;
  if (map.tree.nodes.empty()) return locate_scan(map, theta, tol);

  Index at = 0;
  while (!map.tree.nodes[static_cast<size_t>(at)].leaf()) {
    const auto& nd = map.tree.nodes[static_cast<size_t>(at)];
    ++ev.hyperplanes_visited;
    at = (nd.a.dot(theta) <= nd.b) ? nd.left : nd.right;
  }

  const auto& leaf = map.tree.nodes[static_cast<size_t>(at)];
  double best = std::numeric_limits<double>::infinity();
  for (Index idx : leaf.candidates) {
    const double v = map.regions[static_cast<size_t>(idx)].membership_violation(theta);
    if (v < best) {
      best = v;
      ev.region = idx;
    }
  }
  if (ev.region < 0 || best > tol) {
    ev.region = -1;
    return ev;
  }
  const CriticalRegion& r = map.regions[static_cast<size_t>(ev.region)];
  ev.found = true;
  ev.y = r.F * theta + r.f;
  ev.active_set = r.active_set;
  ev.dual = r.Lambda.rows() > 0 ? Vec(r.Lambda * theta + r.lambda0) : Vec(Vec::Zero(0));
  return ev;
}

/// Convenience: full offline construction.
inline PwaSolutionMap build_solution_map(const StageMpqp& q, const EnumerationOptions& opt = {}) {
  PwaSolutionMap map = enumerate_regions(q, opt);
  map.tree = build_tree(map);
  return map;
}

struct MapValidationReport {
  Index samples = 0;
  double max_primal_deviation = 0.0;    //< vs solve_active_set
  double max_continuity_jump = 0.0;     //< across sampled facet pairs
  double lipschitz_estimate = 0.0;      //< empirical eta over sample pairs
  Index coverage_holes = 0;             //< samples no region claims
  Index tree_scan_mismatches = 0;       //< tree result != linear scan result
  bool ok(double deviation_tol = 1e-7) const {
    return coverage_holes == 0 && tree_scan_mismatches == 0 &&
           max_primal_deviation <= deviation_tol;
  }
};

/// Sample-based check of the map against the active-set oracle, plus
/// continuity and Lipschitz statistics.
inline MapValidationReport validate_map(const PwaSolutionMap& map, const StageMpqp& q,
                                        Index n_samples, std::uint64_t seed = 20240901,
                                        double halfwidth = 0.0) {
  MapValidationReport rep;
  rep.samples = n_samples;
  const Index n = q.dim();
  if (halfwidth <= 0.0) {
    const double qs = q.Qc.cwiseAbs().maxCoeff();
    const double ps = q.rows() > 0 ? q.p.cwiseAbs().maxCoeff() : 1.0;
    halfwidth = 5.0 * (1.0 + qs * std::max(1.0, ps));
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-halfwidth, halfwidth);

  Vec prev_theta, prev_y;
  for (Index s = 0; s < n_samples; ++s) {
    Vec theta(n);
    for (Index i = 0; i < n; ++i) theta[i] = unif(rng);

    const PwaEval scan = locate_scan(map, theta);
    const PwaEval ev = eval_pwa(map, theta);
    if (!scan.found) {
      ++rep.coverage_holes;
      continue;
    }
    if (!ev.found || ev.region != scan.region) {
      // Facet ties may legitimately differ; treat as mismatch only when the
      // evaluations differ.
      if (!ev.found || (ev.y - scan.y).cwiseAbs().maxCoeff() > 1e-9)
        ++rep.tree_scan_mismatches;
    }

    const QpSolution ref = solve_active_set(q, theta);
    const double dev =
        (scan.y - ref.y).norm() / (1.0 + ref.y.norm());
    rep.max_primal_deviation = std::max(rep.max_primal_deviation, dev);

    if (prev_theta.size() > 0) {
      const double dt = (theta - prev_theta).norm();
      if (dt > 1e-12)
        rep.lipschitz_estimate =
            std::max(rep.lipschitz_estimate, (scan.y - prev_y).norm() / dt);
    }
    prev_theta = theta;
    prev_y = scan.y;
  }

  // Continuity across shared facets: project samples onto each facet and
  // compare the affine laws of every pair of regions claiming the point.
  std::uniform_real_distribution<double> unif01(0.0, 1.0);
  for (size_t ri = 0; ri < map.regions.size(); ++ri) {
    const CriticalRegion& r = map.regions[ri];
    for (Index fi = 0; fi < r.Hr.rows(); ++fi) {
      const Vec a = r.Hr.row(fi).transpose();
      const double b = r.hr[fi];
      for (int rep_i = 0; rep_i < 3; ++rep_i) {
        Vec theta(n);
        for (Index i = 0; i < n; ++i) theta[i] = unif(rng);
        theta -= (a.dot(theta) - b) * a;  // project onto the facet plane
        if (r.membership_violation(theta) > 1e-7) continue;
        const Vec y1 = r.F * theta + r.f;
        for (size_t rj = 0; rj < map.regions.size(); ++rj) {
          if (rj == ri) continue;
          const CriticalRegion& r2 = map.regions[rj];
          if (r2.membership_violation(theta) > 1e-7) continue;
          const Vec y2 = r2.F * theta + r2.f;
          rep.max_continuity_jump =
              std::max(rep.max_continuity_jump, (y1 - y2).cwiseAbs().maxCoeff());
        }
      }
    }
  }
  return rep;
}

}  // namespace bilmpc
