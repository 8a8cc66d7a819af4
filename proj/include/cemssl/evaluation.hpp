#pragma once

// Scoring: mean task-space precision, brute-force multi-solution
// enumeration, sign-pattern branch labels and mode coverage.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "cemssl/errors.hpp"
#include "cemssl/generative.hpp"
#include "cemssl/kinematics.hpp"
#include "cemssl/nn.hpp"
#include "cemssl/random.hpp"

namespace cemssl {

// Maps a batch of targets (one per row) to joint configurations. Random
// draws must be consumed row by row so that the first n rows of a batch of
// 2n only depend on the same stream prefix.
using Generator = std::function<Matrix(const Matrix& targets, Rng& rng)>;

// The returned generator refers to `model` and `arm`; both must outlive it.
inline Generator inverse_model_generator(const InverseModel& model, const ArmModel& arm) {
  model.check_against(arm);
  return [&model, &arm](const Matrix& targets, Rng& rng) {
    const Matrix z = sample_latent_matrix(model.zdim, static_cast<std::size_t>(targets.rows()), rng);
    return im_infer(model, arm, targets, z);
  };
}

inline Matrix repeat_rows(const Matrix& m, std::size_t times) {
  Matrix out(m.rows() * static_cast<Eigen::Index>(times), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (std::size_t k = 0; k < times; ++k)
      out.row(i * static_cast<Eigen::Index>(times) + static_cast<Eigen::Index>(k)) = m.row(i);
  return out;
}

// Row-wise Euclidean distances between targets and the FK of `joints`.
inline Vector task_errors(const ArmModel& arm, const Matrix& targets, const Matrix& joints,
                          std::size_t threads = 1) {
  const Matrix reached = batch_fk(arm, joints, threads);
  return (reached - targets).rowwise().norm();
}

// Mean over all (target, latent) samples of ||p - FK(G(p))||, in arm units.
inline double precision(const Generator& generator, const ArmModel& arm, const Matrix& targets,
                        std::size_t latents_per_target, Rng& rng) {
  if (targets.rows() == 0) throw UsageError("precision needs at least one target");
  if (latents_per_target == 0) throw UsageError("precision needs latents_per_target >= 1");
  const Matrix expanded = repeat_rows(targets, latents_per_target);
  const Matrix joints = generator(expanded, rng);
  return task_errors(arm, expanded, joints).mean();
}

// Reachable targets whose distance from the base lies in
// [lo_frac, hi_frac] of the total reach, away from the workspace boundary
// and the base singularity.
inline Matrix sample_interior_targets(const ArmModel& arm, std::size_t n, std::uint64_t seed,
                                      double lo_frac = 0.2, double hi_frac = 0.8) {
  if (n == 0) throw UsageError("sample_interior_targets needs n >= 1");
  if (!(0.0 <= lo_frac && lo_frac < hi_frac)) throw UsageError("interior band needs 0 <= lo < hi");
  Rng rng(seed);
  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(arm.task_dim()));
  const double lo = lo_frac * arm.total_reach(), hi = hi_frac * arm.total_reach();
  Eigen::Index filled = 0;
  for (std::size_t attempt = 0; filled < out.rows(); ++attempt) {
    if (attempt > 1000 * n) throw UsageError("interior band holds too few reachable targets");
    const Matrix q = sample_joint_configs(arm, 1, rng);
    const Matrix p = batch_fk(arm, q, 1);
    const double r = p.row(0).norm();
    if (r >= lo && r <= hi) out.row(filled++) = p.row(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Branch labels

struct BranchLabel {
  std::vector<int> signs;  // each -1, 0 or +1

  auto operator<=>(const BranchLabel&) const = default;
  bool operator==(const BranchLabel&) const = default;

  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < signs.size(); ++i) {
      if (i) s += ",";
      s += signs[i] > 0 ? "+" : signs[i] < 0 ? "-" : "0";
    }
    return s + ")";
  }
};

inline constexpr double kDefaultDeadband = 1e-3;

// Planar arms: signs of joints 2..dof. DH chains: signs of the declared
// branch joints.
inline BranchLabel classify_branch(const ArmModel& arm, std::span<const double> q,
                                   double deadband = kDefaultDeadband) {
  if (q.size() != arm.dof()) throw ShapeError("joint vector length does not match arm");
  std::vector<std::size_t> joints;
  if (arm.kind() == ArmKind::Planar) {
    for (std::size_t j = 1; j < arm.dof(); ++j) joints.push_back(j);
  } else {
    joints = arm.branch_joints();
  }
  BranchLabel label;
  for (std::size_t j : joints) {
    const double v = q[j];
    label.signs.push_back(std::abs(v) < deadband ? 0 : (v > 0 ? 1 : -1));
  }
  return label;
}

inline BranchLabel classify_branch(const ArmModel& arm, const JointConfig& q,
                                   double deadband = kDefaultDeadband) {
  return classify_branch(arm, std::span<const double>(q.angles), deadband);
}

struct SolutionBranch {
  BranchLabel label;
  JointConfig representative;
  double residual = 0.0;
  std::size_t support = 0;  // refined grid seeds that landed in this branch
};

struct EnumerateOptions {
  std::size_t grid_per_joint = 32;
  double tol = 1e-3;
  double budget = 1e7;
  std::size_t refine_steps = 100;
  double deadband = kDefaultDeadband;
  std::size_t threads = 1;
};

// Damped Gauss-Newton (Levenberg-Marquardt) on ||fk(q) - p||^2 with a
// central-difference Jacobian, clamped to the joint box. Returns the
// final residual norm.
inline double refine_solution(const ArmModel& arm, std::span<const double> target,
                              std::vector<double>& q, std::size_t max_steps) {
  const std::size_t n = arm.dof(), m = arm.task_dim();
  const auto& lim = arm.joint_limits();
  std::vector<double> pos(m), plus(m), minus(m);
  auto residual = [&](const std::vector<double>& qq, std::vector<double>& r) {
    detail::fk_raw(arm, qq.data(), pos.data());
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      r[i] = pos[i] - target[i];
      s += r[i] * r[i];
    }
    return s;
  };
  std::vector<double> r(m), r_try(m), q_try(n), probe(n);
  double cost = residual(q, r);
  double lambda = 1e-3;
  constexpr double h = 1e-7;
  Eigen::MatrixXd jac(m, n);
  for (std::size_t step = 0; step < max_steps && cost > 1e-26; ++step) {
    for (std::size_t j = 0; j < n; ++j) {
      probe = q;
      probe[j] = q[j] + h;
      detail::fk_raw(arm, probe.data(), plus.data());
      probe[j] = q[j] - h;
      detail::fk_raw(arm, probe.data(), minus.data());
      for (std::size_t i = 0; i < m; ++i)
        jac(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            (plus[i] - minus[i]) / (2 * h);
    }
    const Eigen::Map<const Eigen::VectorXd> rv(r.data(), static_cast<Eigen::Index>(m));
    const Eigen::VectorXd grad = jac.transpose() * rv;
    Eigen::MatrixXd normal = jac.transpose() * jac;
    normal.diagonal().array() += lambda;
    const Eigen::VectorXd delta = normal.ldlt().solve(-grad);
    for (std::size_t j = 0; j < n; ++j)
      q_try[j] = std::clamp(q[j] + delta[static_cast<Eigen::Index>(j)], lim[j].lo, lim[j].hi);
    const double c = residual(q_try, r_try);
    if (c < cost) {
      q = q_try;
      r = r_try;
      cost = c;
      lambda = std::max(lambda / 3.0, 1e-15);
    } else {
      lambda = std::min(lambda * 4.0, 1e6);
    }
  }
  return std::sqrt(cost);
}

// Exhaustive grid over the joint box: keep cell centres that could lie in a
// cell containing a solution (Lipschitz bound), refine them, and group the
// refined solutions by branch label.
inline std::vector<SolutionBranch> enumerate_solutions(const ArmModel& arm,
                                                       std::span<const double> target,
                                                       const EnumerateOptions& opt = {}) {
  if (target.size() != arm.task_dim()) throw ShapeError("target length != task_dim");
  if (!(opt.tol > 0.0)) throw UsageError("enumerate_solutions tol must be positive");
  if (opt.grid_per_joint == 0) throw UsageError("grid_per_joint must be >= 1");
  const std::size_t n = arm.dof();
  const double cells = std::pow(static_cast<double>(opt.grid_per_joint), static_cast<double>(n));
  if (cells > opt.budget)
    throw UsageError("grid of " + std::to_string(opt.grid_per_joint) + "^" + std::to_string(n) +
                     " points exceeds the enumeration budget");
  const auto total = static_cast<std::uint64_t>(cells);
  const auto& lim = arm.joint_limits();
  std::vector<double> step(n);
  double half_l1 = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    step[j] = (lim[j].hi - lim[j].lo) / static_cast<double>(opt.grid_per_joint);
    half_l1 += step[j] / 2.0;
  }
  const double gate = opt.tol + arm.total_reach() * half_l1;

  using BranchMap = std::map<BranchLabel, SolutionBranch>;
  // Keeps the lowest-residual representative (ties broken on the angles) and
  // sums support, so merging is independent of traversal order.
  auto merge = [](BranchMap& map, SolutionBranch cand) {
    auto it = map.find(cand.label);
    if (it == map.end()) {
      map.emplace(cand.label, std::move(cand));
      return;
    }
    SolutionBranch& cur = it->second;
    const std::size_t support = cur.support + cand.support;
    if (cand.residual < cur.residual ||
        (cand.residual == cur.residual && cand.representative.angles < cur.representative.angles))
      cur = std::move(cand);
    cur.support = support;
  };
  auto scan = [&](std::uint64_t begin, std::uint64_t end, BranchMap& out) {
    std::vector<double> q(n), pos(arm.task_dim());
    for (std::uint64_t idx = begin; idx < end; ++idx) {
      std::uint64_t rest = idx;
      for (std::size_t j = 0; j < n; ++j) {
        const std::uint64_t k = rest % opt.grid_per_joint;
        rest /= opt.grid_per_joint;
        q[j] = lim[j].lo + (static_cast<double>(k) + 0.5) * step[j];
      }
      detail::fk_raw(arm, q.data(), pos.data());
      double d2 = 0.0;
      for (std::size_t i = 0; i < pos.size(); ++i) d2 += (pos[i] - target[i]) * (pos[i] - target[i]);
      if (d2 > gate * gate) continue;
      std::vector<double> refined = q;
      const double res = refine_solution(arm, target, refined, opt.refine_steps);
      if (res > opt.tol) continue;
      SolutionBranch cand;
      cand.label = classify_branch(arm, std::span<const double>(refined), opt.deadband);
      cand.representative.angles = std::move(refined);
      cand.residual = res;
      cand.support = 1;
      merge(out, std::move(cand));
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min<std::uint64_t>(opt.threads, total));
  std::vector<BranchMap> partial(workers);
  {
    std::vector<std::jthread> pool;
    const std::uint64_t chunk = (total + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w)
      pool.emplace_back(scan, std::min(total, w * chunk), std::min(total, (w + 1) * chunk),
                        std::ref(partial[w]));
    scan(0, std::min(total, chunk), partial[0]);
  }
  BranchMap merged;
  for (auto& part : partial)
    for (auto& [label, branch] : part) merge(merged, branch);

  // A deadband component is only its own branch when no signed solution
  // sits next to it; otherwise it is where a signed branch crosses zero.
  std::vector<SolutionBranch> out;
  for (auto& [label, branch] : merged) {
    bool crossing = false;
    for (std::size_t c = 0; c < label.signs.size() && !crossing; ++c) {
      if (label.signs[c] != 0) continue;
      for (int s : {-1, 1}) {
        BranchLabel neighbour = label;
        neighbour.signs[c] = s;
        if (merged.count(neighbour)) crossing = true;
      }
    }
    if (!crossing) out.push_back(branch);
  }
  return out;
}

inline std::vector<SolutionBranch> enumerate_solutions(const ArmModel& arm, const TaskPoint& p,
                                                       const EnumerateOptions& opt = {}) {
  return enumerate_solutions(arm, std::span<const double>(p.position), opt);
}

// ---------------------------------------------------------------------------
// Mode coverage

struct CoverageReport {
  std::vector<double> target;
  std::size_t oracle_branches = 0;
  std::size_t covered_branches = 0;
  double fraction = 0.0;
  std::map<BranchLabel, std::size_t> branch_counts;  // oracle labels only
  std::size_t accepted = 0;   // samples within the task-space gate
  std::size_t unmatched = 0;  // accepted samples whose label is not an oracle branch
  std::vector<BranchLabel> covered_labels;
};

inline double default_accept_tol(const ArmModel& arm) { return 0.01 * arm.total_reach(); }

inline CoverageReport mode_coverage(const Generator& generator, const ArmModel& arm,
                                    std::span<const double> target, std::size_t n_samples,
                                    const std::vector<SolutionBranch>& oracle, Rng& rng,
                                    double accept_tol = -1.0,
                                    double deadband = kDefaultDeadband) {
  if (target.size() != arm.task_dim()) throw ShapeError("target length != task_dim");
  if (n_samples == 0) throw UsageError("mode_coverage needs n_samples >= 1");
  if (accept_tol <= 0.0) accept_tol = default_accept_tol(arm);
  CoverageReport rep;
  rep.target.assign(target.begin(), target.end());
  rep.oracle_branches = oracle.size();
  for (const auto& b : oracle) rep.branch_counts[b.label] = 0;

  Matrix targets(static_cast<Eigen::Index>(n_samples), static_cast<Eigen::Index>(target.size()));
  for (Eigen::Index i = 0; i < targets.rows(); ++i)
    for (std::size_t k = 0; k < target.size(); ++k)
      targets(i, static_cast<Eigen::Index>(k)) = target[k];
  const Matrix joints = generator(targets, rng);
  const Vector err = task_errors(arm, targets, joints);
  for (Eigen::Index i = 0; i < joints.rows(); ++i) {
    if (err[i] > accept_tol) continue;
    ++rep.accepted;
    const BranchLabel label =
        classify_branch(arm, std::span<const double>(joints.row(i).data(), arm.dof()), deadband);
    auto it = rep.branch_counts.find(label);
    if (it == rep.branch_counts.end()) {
      ++rep.unmatched;
      continue;
    }
    ++it->second;
  }
  for (const auto& [label, count] : rep.branch_counts)
    if (count > 0) {
      ++rep.covered_branches;
      rep.covered_labels.push_back(label);
    }
  rep.fraction = static_cast<double>(rep.covered_branches) /
                 static_cast<double>(std::max<std::size_t>(rep.oracle_branches, 1));
  return rep;
}

}  // namespace cemssl
