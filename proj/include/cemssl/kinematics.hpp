#pragma once

// Forward model: analytic forward kinematics for standard-DH serial chains
// and planar link chains, batched FK over worker threads, reachable target
// sampling, and the affine map between the unit cube and the joint box.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cemssl/errors.hpp"
#include "cemssl/nn.hpp"
#include "cemssl/random.hpp"

namespace cemssl {

struct DHRow {
  double a = 0.0;
  double alpha = 0.0;
  double d = 0.0;
  double theta_offset = 0.0;
};

struct JointLimit {
  double lo = -std::numbers::pi;
  double hi = std::numbers::pi;
};

enum class ArmKind { DHChain, Planar };

struct JointConfig {
  std::vector<double> angles;
};

struct TaskPoint {
  std::vector<double> position;
};

class ArmModel {
 public:
  static ArmModel planar(std::vector<double> link_lengths, std::vector<JointLimit> limits = {},
                         std::string name = {}) {
    ArmModel arm;
    arm.kind_ = ArmKind::Planar;
    arm.links_ = std::move(link_lengths);
    arm.limits_ = limits.empty() ? std::vector<JointLimit>(arm.links_.size()) : std::move(limits);
    arm.name_ = name.empty() ? "planar" + std::to_string(arm.links_.size()) : std::move(name);
    arm.validate();
    return arm;
  }

  // `branch_joints` lists the joints whose signs label solution branches.
  static ArmModel dh_chain(std::vector<DHRow> rows, std::vector<JointLimit> limits,
                           std::vector<std::size_t> branch_joints, std::string name) {
    ArmModel arm;
    arm.kind_ = ArmKind::DHChain;
    arm.dh_ = std::move(rows);
    arm.limits_ = limits.empty() ? std::vector<JointLimit>(arm.dh_.size()) : std::move(limits);
    arm.branch_joints_ = std::move(branch_joints);
    arm.name_ = std::move(name);
    arm.validate();
    return arm;
  }

  ArmKind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  std::size_t dof() const { return kind_ == ArmKind::Planar ? links_.size() : dh_.size(); }
  std::size_t task_dim() const { return kind_ == ArmKind::Planar ? 2 : 3; }
  const std::vector<DHRow>& dh_rows() const { return dh_; }
  const std::vector<double>& link_lengths() const { return links_; }
  const std::vector<JointLimit>& joint_limits() const { return limits_; }
  const std::vector<std::size_t>& branch_joints() const { return branch_joints_; }

  // Upper bound on the distance from the base to the end effector.
  double total_reach() const {
    double r = 0.0;
    if (kind_ == ArmKind::Planar) {
      for (double l : links_) r += std::abs(l);
    } else {
      for (const auto& row : dh_) r += std::hypot(row.a, row.d);
    }
    return r;
  }

  // Multiplier from arm length units to reporting units (1000 for metres -> mm).
  double report_scale() const { return report_scale_; }
  const std::string& report_unit() const { return report_unit_; }
  void set_report_units(double scale, std::string unit) {
    report_scale_ = scale;
    report_unit_ = std::move(unit);
  }

  // Name plus a fingerprint of the geometry; checkpoints record this.
  std::string identity() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto eat = [&](double v) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%a;", v);
      for (const char* c = buf; *c; ++c) {
        h ^= static_cast<unsigned char>(*c);
        h *= 0x100000001b3ULL;
      }
    };
    eat(kind_ == ArmKind::Planar ? 1.0 : 2.0);
    for (double l : links_) eat(l);
    for (const auto& r : dh_) {
      eat(r.a);
      eat(r.alpha);
      eat(r.d);
      eat(r.theta_offset);
    }
    for (const auto& l : limits_) {
      eat(l.lo);
      eat(l.hi);
    }
    char hex[24];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return name_ + ":" + hex;
  }

 private:
  void validate() const {
    if (dof() == 0) throw UsageError("arm has no joints");
    if (limits_.size() != dof())
      throw UsageError("arm has " + std::to_string(dof()) + " joints but " +
                       std::to_string(limits_.size()) + " joint limits");
    for (std::size_t j = 0; j < limits_.size(); ++j)
      if (!(limits_[j].lo < limits_[j].hi))
        throw UsageError("joint " + std::to_string(j) + " limits need lo < hi");
    for (std::size_t j : branch_joints_)
      if (j >= dof()) throw UsageError("branch joint index " + std::to_string(j) + " out of range");
    if (!(total_reach() > 0.0)) throw UsageError("arm has zero reach");
  }

  ArmKind kind_ = ArmKind::Planar;
  std::string name_;
  std::vector<DHRow> dh_;
  std::vector<double> links_;
  std::vector<JointLimit> limits_;
  std::vector<std::size_t> branch_joints_;
  double report_scale_ = 1.0;
  std::string report_unit_ = "units";
};

// Standard DH table for the UR3, metres; vendor limits of +-360 degrees.
inline ArmModel ur3() {
  constexpr double pi = std::numbers::pi;
  std::vector<DHRow> rows = {
      {0.0, pi / 2, 0.1519, 0.0},   {-0.24365, 0.0, 0.0, 0.0},   {-0.21325, 0.0, 0.0, 0.0},
      {0.0, pi / 2, 0.11235, 0.0},  {0.0, -pi / 2, 0.08535, 0.0}, {0.0, 0.0, 0.0819, 0.0},
  };
  std::vector<JointLimit> limits(6, JointLimit{-2 * pi, 2 * pi});
  ArmModel arm = ArmModel::dh_chain(std::move(rows), std::move(limits), {1, 2}, "ur3");
  arm.set_report_units(1000.0, "mm");
  return arm;
}

inline ArmModel builtin_arm(const std::string& name) {
  if (name == "ur3") return ur3();
  if (name == "planar2") return ArmModel::planar({1.0, 1.0});
  if (name == "planar3") return ArmModel::planar({1.0, 1.0, 1.0});
  throw UsageError("unknown built-in arm '" + name + "' (expected ur3, planar2 or planar3)");
}

namespace detail {

inline void fk_raw(const ArmModel& arm, const double* q, double* p) {
  if (arm.kind() == ArmKind::Planar) {
    double angle = 0.0, x = 0.0, y = 0.0;
    const auto& links = arm.link_lengths();
    for (std::size_t j = 0; j < links.size(); ++j) {
      angle += q[j];
      x += links[j] * std::cos(angle);
      y += links[j] * std::sin(angle);
    }
    p[0] = x;
    p[1] = y;
    return;
  }
  // Accumulate R and t of the base-to-flange transform; each row contributes
  // Rz(theta) Tz(d) Tx(a) Rx(alpha).
  double r[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  double t[3] = {0, 0, 0};
  const auto& rows = arm.dh_rows();
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const double th = q[j] + rows[j].theta_offset;
    const double ct = std::cos(th), st = std::sin(th);
    const double ca = std::cos(rows[j].alpha), sa = std::sin(rows[j].alpha);
    const double local_t[3] = {rows[j].a * ct, rows[j].a * st, rows[j].d};
    const double local_r[3][3] = {{ct, -st * ca, st * sa}, {st, ct * ca, -ct * sa}, {0.0, sa, ca}};
    for (int i = 0; i < 3; ++i)
      t[i] += r[i][0] * local_t[0] + r[i][1] * local_t[1] + r[i][2] * local_t[2];
    double nr[3][3];
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k)
        nr[i][k] = r[i][0] * local_r[0][k] + r[i][1] * local_r[1][k] + r[i][2] * local_r[2][k];
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) r[i][k] = nr[i][k];
  }
  p[0] = t[0];
  p[1] = t[1];
  p[2] = t[2];
}

}  // namespace detail

inline TaskPoint fk(const ArmModel& arm, std::span<const double> q) {
  if (q.size() != arm.dof())
    throw ShapeError("joint vector has " + std::to_string(q.size()) + " entries, arm has " +
                     std::to_string(arm.dof()) + " joints");
  TaskPoint p;
  p.position.resize(arm.task_dim());
  detail::fk_raw(arm, q.data(), p.position.data());
  return p;
}

inline TaskPoint fk(const ArmModel& arm, const JointConfig& q) { return fk(arm, q.angles); }

// Rows of `joints` are configurations; output rows are positions in the same
// order. Work is split into `threads` contiguous chunks.
inline Matrix batch_fk(const ArmModel& arm, const Matrix& joints, std::size_t threads) {
  if (threads == 0) throw UsageError("batch_fk needs at least one thread");
  if (static_cast<std::size_t>(joints.cols()) != arm.dof())
    throw ShapeError("joint batch has " + std::to_string(joints.cols()) + " columns, arm has " +
                     std::to_string(arm.dof()) + " joints");
  const auto n = static_cast<std::size_t>(joints.rows());
  Matrix out(joints.rows(), static_cast<Eigen::Index>(arm.task_dim()));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      detail::fk_raw(arm, joints.row(r).data(), out.row(r).data());
    }
  };
  const std::size_t k = std::min(threads, std::max<std::size_t>(n, 1));
  if (k <= 1) {
    work(0, n);
    return out;
  }
  std::vector<std::jthread> pool;
  pool.reserve(k - 1);
  const std::size_t chunk = (n + k - 1) / k;
  for (std::size_t w = 1; w < k; ++w) {
    const std::size_t b = std::min(n, w * chunk), e = std::min(n, (w + 1) * chunk);
    pool.emplace_back(work, b, e);
  }
  work(0, std::min(n, chunk));
  pool.clear();  // join before `out` can be copied out
  return out;
}

inline std::vector<TaskPoint> batch_fk(const ArmModel& arm, const std::vector<JointConfig>& qs,
                                       std::size_t threads) {
  if (threads == 0) throw UsageError("batch_fk needs at least one thread");
  Matrix joints(static_cast<Eigen::Index>(qs.size()), static_cast<Eigen::Index>(arm.dof()));
  for (std::size_t i = 0; i < qs.size(); ++i) {
    if (qs[i].angles.size() != arm.dof())
      throw ShapeError("configuration " + std::to_string(i) + " has " +
                       std::to_string(qs[i].angles.size()) + " joints, arm has " +
                       std::to_string(arm.dof()));
    for (std::size_t j = 0; j < arm.dof(); ++j)
      joints(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = qs[i].angles[j];
  }
  const Matrix p = batch_fk(arm, joints, threads);
  std::vector<TaskPoint> out(qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i].position.assign(p.row(r).data(), p.row(r).data() + p.cols());
  }
  return out;
}

// Uniform joint configurations within the limits, one per row.
inline Matrix sample_joint_configs(const ArmModel& arm, std::size_t n, Rng& rng) {
  Matrix q(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(arm.dof()));
  const auto& lim = arm.joint_limits();
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < arm.dof(); ++j)
      q(i, static_cast<Eigen::Index>(j)) = uniform(rng, lim[j].lo, lim[j].hi);
  return q;
}

// FK images of uniform joint draws, so every target is reachable.
inline Matrix sample_reachable_targets(const ArmModel& arm, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw UsageError("sample_reachable_targets needs n >= 1");
  Rng rng(seed);
  return batch_fk(arm, sample_joint_configs(arm, n, rng), 1);
}

inline JointConfig scale_to_limits(const ArmModel& arm, std::span<const double> unit) {
  if (unit.size() != arm.dof())
    throw ShapeError("unit vector has " + std::to_string(unit.size()) + " entries, arm has " +
                     std::to_string(arm.dof()) + " joints");
  JointConfig q;
  q.angles.resize(arm.dof());
  const auto& lim = arm.joint_limits();
  for (std::size_t j = 0; j < arm.dof(); ++j) {
    if (!(unit[j] > 0.0 && unit[j] < 1.0))
      throw RangeError("unit component " + std::to_string(j) + " = " + std::to_string(unit[j]) +
                       " is outside (0,1)");
    q.angles[j] = lim[j].lo + unit[j] * (lim[j].hi - lim[j].lo);
  }
  return q;
}

inline std::vector<double> unscale_from_limits(const ArmModel& arm, const JointConfig& q) {
  if (q.angles.size() != arm.dof()) throw ShapeError("joint vector length does not match arm");
  std::vector<double> u(arm.dof());
  const auto& lim = arm.joint_limits();
  for (std::size_t j = 0; j < arm.dof(); ++j)
    u[j] = (q.angles[j] - lim[j].lo) / (lim[j].hi - lim[j].lo);
  return u;
}

// Row-wise versions used on training batches. The batch form of the
// forward map trusts its input to be a sigmoid output.
inline Matrix scale_to_limits(const ArmModel& arm, const Matrix& unit) {
  if (static_cast<std::size_t>(unit.cols()) != arm.dof())
    throw ShapeError("unit batch width does not match arm dof");
  Matrix q(unit.rows(), unit.cols());
  const auto& lim = arm.joint_limits();
  for (Eigen::Index j = 0; j < unit.cols(); ++j) {
    const auto& l = lim[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 0; i < unit.rows(); ++i) {
      const double u = unit(i, j);
      if (!(u > 0.0 && u < 1.0))
        throw RangeError("unit component (" + std::to_string(i) + "," + std::to_string(j) +
                         ") is outside (0,1)");
      q(i, j) = l.lo + u * (l.hi - l.lo);
    }
  }
  return q;
}

inline Matrix unscale_from_limits(const ArmModel& arm, const Matrix& joints) {
  if (static_cast<std::size_t>(joints.cols()) != arm.dof())
    throw ShapeError("joint batch width does not match arm dof");
  Matrix u(joints.rows(), joints.cols());
  const auto& lim = arm.joint_limits();
  for (Eigen::Index j = 0; j < joints.cols(); ++j) {
    const auto& l = lim[static_cast<std::size_t>(j)];
    u.col(j) = (joints.col(j).array() - l.lo) / (l.hi - l.lo);
  }
  return u;
}

}  // namespace cemssl
