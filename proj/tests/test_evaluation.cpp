#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "cemssl/cemssl.hpp"
#include "cemssl/evaluation.hpp"
#include "test_util.hpp"

using namespace cemssl;

namespace {

constexpr double kPi = std::numbers::pi;

// Closed-form inverse kinematics of a unit two-link arm; `up` picks the sign
// of the elbow angle.
std::vector<double> two_link_ik(double x, double y, bool up) {
  const double c2 = std::clamp((x * x + y * y - 2.0) / 2.0, -1.0, 1.0);
  const double t2 = (up ? 1.0 : -1.0) * std::acos(c2);
  const double t1 = std::atan2(y, x) - std::atan2(std::sin(t2), 1.0 + std::cos(t2));
  return {t1, t2};
}

Generator two_link_oracle(bool up) {
  return [up](const Matrix& targets, Rng&) {
    Matrix q(targets.rows(), 2);
    for (Eigen::Index i = 0; i < targets.rows(); ++i) {
      const auto s = two_link_ik(targets(i, 0), targets(i, 1), up);
      q(i, 0) = s[0];
      q(i, 1) = s[1];
    }
    return q;
  };
}

Generator constant_generator(const std::vector<double>& q0) {
  return [q0](const Matrix& targets, Rng&) {
    Matrix q(targets.rows(), static_cast<Eigen::Index>(q0.size()));
    for (Eigen::Index i = 0; i < q.rows(); ++i)
      for (std::size_t j = 0; j < q0.size(); ++j) q(i, static_cast<Eigen::Index>(j)) = q0[j];
    return q;
  };
}

Generator cycling_generator(const std::vector<SolutionBranch>& branches) {
  return [branches](const Matrix& targets, Rng&) {
    const auto dof = static_cast<Eigen::Index>(branches.front().representative.angles.size());
    Matrix q(targets.rows(), dof);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      const auto& rep = branches[static_cast<std::size_t>(i) % branches.size()].representative.angles;
      for (Eigen::Index j = 0; j < dof; ++j) q(i, j) = rep[static_cast<std::size_t>(j)];
    }
    return q;
  };
}

// Picks a random branch per row and jitters its representative.
Generator noisy_branch_generator(const std::vector<SolutionBranch>& branches, double jitter) {
  return [branches, jitter](const Matrix& targets, Rng& rng) {
    const auto dof = static_cast<Eigen::Index>(branches.front().representative.angles.size());
    std::uniform_int_distribution<std::size_t> pick(0, branches.size() - 1);
    std::normal_distribution<double> noise(0.0, jitter);
    Matrix q(targets.rows(), dof);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      const auto& rep = branches[pick(rng)].representative.angles;
      for (Eigen::Index j = 0; j < dof; ++j) q(i, j) = rep[static_cast<std::size_t>(j)] + noise(rng);
    }
    return q;
  };
}

std::set<BranchLabel> labels_of(const std::vector<SolutionBranch>& b) {
  std::set<BranchLabel> s;
  for (const auto& x : b) s.insert(x.label);
  return s;
}

double fk_distance(const ArmModel& arm, const std::vector<double>& q, std::span<const double> p) {
  const auto pos = fk(arm, JointConfig{q}).position;
  double d2 = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) d2 += (pos[i] - p[i]) * (pos[i] - p[i]);
  return std::sqrt(d2);
}

}  // namespace

TEST(Precision, ExactIkOracleGivesZero) {
  const ArmModel arm = builtin_arm("planar2");
  const Matrix targets = sample_reachable_targets(arm, 500, 3);
  Rng rng(1);
  for (bool up : {true, false}) EXPECT_LT(precision(two_link_oracle(up), arm, targets, 3, rng), 1e-14);
}

TEST(Precision, FixedJointsMatchDirectDistance) {
  const ArmModel arm = builtin_arm("planar3");
  const std::vector<double> q0{0.4, -1.1, 2.0};
  const Matrix targets = sample_reachable_targets(arm, 300, 7);
  const auto reached = fk(arm, JointConfig{q0}).position;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < targets.rows(); ++i)
    sum += std::hypot(targets(i, 0) - reached[0], targets(i, 1) - reached[1]);
  Rng rng(1);
  EXPECT_NEAR(precision(constant_generator(q0), arm, targets, 2, rng), sum / 300.0, 1e-13);
}

TEST(Precision, PermutationInvariantAndNonNegative) {
  const ArmModel arm = builtin_arm("planar3");
  const Matrix targets = sample_reachable_targets(arm, 200, 9);
  Matrix reversed = targets.colwise().reverse();
  const auto gen = constant_generator({1.0, 0.5, -0.5});
  Rng a(1), b(1);
  EXPECT_NEAR(precision(gen, arm, targets, 1, a), precision(gen, arm, reversed, 1, b), 1e-14);

  const InverseModel im = make_inverse_model(arm, 2, {16}, 4);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    EXPECT_GT(precision(inverse_model_generator(im, arm), arm, targets, 1, rng), 0.0);
  }
}

TEST(Precision, RejectsEmptyInput) {
  const ArmModel arm = builtin_arm("planar2");
  Rng rng(1);
  EXPECT_THROW(precision(two_link_oracle(true), arm, Matrix(0, 2), 1, rng), UsageError);
  EXPECT_THROW(precision(two_link_oracle(true), arm, Matrix::Ones(2, 2), 0, rng), UsageError);
}

TEST(Enumerate, TwoLinkInteriorHasElbowUpAndDown) {
  const ArmModel arm = builtin_arm("planar2");
  const std::vector<double> p{1.0, 0.0};
  const auto branches = enumerate_solutions(arm, p);
  ASSERT_EQ(branches.size(), 2u);
  EXPECT_EQ(labels_of(branches), (std::set<BranchLabel>{BranchLabel{{-1}}, BranchLabel{{1}}}));
  for (const auto& b : branches) {
    const auto expect = two_link_ik(1.0, 0.0, b.label.signs[0] > 0);
    EXPECT_NEAR(b.representative.angles[0], expect[0], 1e-3);
    EXPECT_NEAR(b.representative.angles[1], expect[1], 1e-3);
    EXPECT_NEAR(std::abs(b.representative.angles[1]), 2.0 * kPi / 3.0, 1e-3);
  }
}

TEST(Enumerate, FullExtensionIsOneBranch) {
  const ArmModel arm = builtin_arm("planar2");
  const std::vector<double> p{2.0, 0.0};
  const auto branches = enumerate_solutions(arm, p);
  ASSERT_EQ(branches.size(), 1u);
  EXPECT_EQ(branches[0].label, BranchLabel{{0}});
}

TEST(Enumerate, UnreachableTargetHasNoBranches) {
  const ArmModel arm = builtin_arm("planar2");
  const std::vector<double> p{2.5, 0.3};
  EXPECT_TRUE(enumerate_solutions(arm, p).empty());
}

TEST(Enumerate, RepresentativesSolveTheTarget) {
  const ArmModel arm = builtin_arm("planar3");
  const Matrix targets = sample_interior_targets(arm, 5, 11);
  EnumerateOptions opt;
  opt.grid_per_joint = 24;
  for (Eigen::Index t = 0; t < targets.rows(); ++t) {
    const std::span<const double> p(targets.row(t).data(), 2);
    const auto branches = enumerate_solutions(arm, p, opt);
    EXPECT_FALSE(branches.empty());
    for (const auto& b : branches) {
      EXPECT_LE(fk_distance(arm, b.representative.angles, p), opt.tol);
      EXPECT_LE(b.residual, opt.tol);
      EXPECT_EQ(classify_branch(arm, b.representative), b.label);
    }
  }
}

TEST(Enumerate, IndependentOfTraversalChunking) {
  const ArmModel arm = builtin_arm("planar3");
  const Matrix targets = sample_interior_targets(arm, 4, 5);
  for (Eigen::Index t = 0; t < targets.rows(); ++t) {
    const std::span<const double> p(targets.row(t).data(), 2);
    EnumerateOptions one, many;
    one.grid_per_joint = many.grid_per_joint = 20;
    many.threads = 7;
    const auto a = enumerate_solutions(arm, p, one), b = enumerate_solutions(arm, p, many);
    ASSERT_EQ(labels_of(a), labels_of(b));
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].representative.angles, b[i].representative.angles);
      EXPECT_EQ(a[i].support, b[i].support);
    }
  }
}

TEST(Enumerate, RejectsOversizedGridAndBadTolerance) {
  const ArmModel arm = ur3();
  const std::vector<double> p{0.1, 0.1, 0.1};
  EXPECT_THROW(enumerate_solutions(arm, p), UsageError);  // 32^6 > 1e7
  EnumerateOptions bad;
  bad.tol = 0.0;
  EXPECT_THROW(enumerate_solutions(builtin_arm("planar2"), std::vector<double>{1.0, 0.0}, bad), UsageError);
  EXPECT_THROW(enumerate_solutions(builtin_arm("planar2"), std::vector<double>{1.0}), ShapeError);
}

TEST(ClassifyBranch, SignPatternOfRelativeJoints) {
  const ArmModel arm = builtin_arm("planar3");
  EXPECT_EQ(classify_branch(arm, JointConfig{{0.3, 0.8, 0.4}}), (BranchLabel{{1, 1}}));
  EXPECT_EQ(classify_branch(arm, JointConfig{{0.3, 0.8, 0.4}}).str(), "(+,+)");
  EXPECT_EQ(classify_branch(arm, JointConfig{{-2.0, -0.8, 0.4}}).str(), "(-,+)");
  EXPECT_EQ(classify_branch(arm, JointConfig{{0.3, 5e-4, -9e-4}}), (BranchLabel{{0, 0}}));
  EXPECT_EQ(classify_branch(arm, JointConfig{{0.3, 0.8, 0.4}}, 1.0), (BranchLabel{{0, 0}}));
  EXPECT_THROW(classify_branch(arm, JointConfig{{0.3, 0.8}}), ShapeError);
}

TEST(ClassifyBranch, MirrorSolutionGetsDifferentLabel) {
  const ArmModel arm = builtin_arm("planar2");
  const auto up = two_link_ik(0.7, 1.1, true), down = two_link_ik(0.7, 1.1, false);
  const std::vector<double> p{0.7, 1.1};
  EXPECT_LT(fk_distance(arm, up, p), 1e-12);
  EXPECT_LT(fk_distance(arm, down, p), 1e-12);
  EXPECT_NE(classify_branch(arm, JointConfig{up}), classify_branch(arm, JointConfig{down}));
}

TEST(ClassifyBranch, LocallyConstantAwayFromDeadband) {
  const ArmModel arm = builtin_arm("planar3");
  Rng rng(4);
  std::normal_distribution<double> small(0.0, 1e-4);
  Rng draw(8);
  const Matrix q = sample_joint_configs(arm, 500, draw);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    std::vector<double> a(q.row(i).data(), q.row(i).data() + 3);
    if (std::abs(a[1]) < 2e-3 || std::abs(a[2]) < 2e-3) continue;
    std::vector<double> b = a;
    for (double& v : b) v += small(rng);
    EXPECT_EQ(classify_branch(arm, JointConfig{a}), classify_branch(arm, JointConfig{b}));
  }
}

TEST(ClassifyBranch, DhArmUsesDeclaredJoints) {
  const ArmModel arm = ur3();
  const auto& joints = arm.branch_joints();
  ASSERT_FALSE(joints.empty());
  std::vector<double> q(6, 0.5);
  q[joints[0]] = -0.5;
  const BranchLabel l = classify_branch(arm, JointConfig{q});
  ASSERT_EQ(l.signs.size(), joints.size());
  EXPECT_EQ(l.signs[0], -1);
}

TEST(Coverage, CyclingThroughEveryBranchCoversAll) {
  const ArmModel arm = builtin_arm("planar2");
  const std::vector<double> p{1.0, 0.0};
  const auto oracle = enumerate_solutions(arm, p);
  Rng rng(1);
  const CoverageReport r = mode_coverage(cycling_generator(oracle), arm, p, 10, oracle, rng);
  EXPECT_EQ(r.fraction, 1.0);
  EXPECT_EQ(r.covered_branches, 2u);
  EXPECT_EQ(r.accepted, 10u);
  for (const auto& [label, count] : r.branch_counts) EXPECT_EQ(count, 5u);
}

TEST(Coverage, CollapsedGeneratorScoresOneOverCount) {
  const ArmModel arm = builtin_arm("planar3");
  const Matrix targets = sample_interior_targets(arm, 3, 21);
  for (Eigen::Index t = 0; t < targets.rows(); ++t) {
    const std::span<const double> p(targets.row(t).data(), 2);
    const auto oracle = enumerate_solutions(arm, p);
    ASSERT_GT(oracle.size(), 1u);
    Rng rng(1);
    const CoverageReport r =
        mode_coverage(constant_generator(oracle[0].representative.angles), arm, p, 50, oracle, rng);
    EXPECT_DOUBLE_EQ(r.fraction, 1.0 / static_cast<double>(oracle.size()));
    EXPECT_EQ(r.covered_labels, std::vector<BranchLabel>{oracle[0].label});
  }
}

TEST(Coverage, SamplesOutsideGateAreIgnored) {
  const ArmModel arm = builtin_arm("planar2");
  const std::vector<double> p{1.0, 0.0};
  const auto oracle = enumerate_solutions(arm, p);
  Rng rng(1);
  const CoverageReport r = mode_coverage(constant_generator({2.0, 2.0}), arm, p, 20, oracle, rng);
  EXPECT_EQ(r.accepted, 0u);
  EXPECT_EQ(r.fraction, 0.0);
  const CoverageReport none = mode_coverage(cycling_generator(oracle), arm, p, 4, {}, rng);
  EXPECT_EQ(none.oracle_branches, 0u);
  EXPECT_EQ(none.fraction, 0.0);
  EXPECT_EQ(none.unmatched, 4u);
}

TEST(Coverage, BranchesAtNAreSubsetOfBranchesAt2N) {
  const ArmModel arm = builtin_arm("planar3");
  const Matrix targets = sample_interior_targets(arm, 6, 17);
  const InverseModel im = make_inverse_model(arm, 2, {32, 32}, 2);
  for (Eigen::Index t = 0; t < targets.rows(); ++t) {
    const std::span<const double> p(targets.row(t).data(), 2);
    const auto oracle = enumerate_solutions(arm, p);
    for (const Generator& g : {noisy_branch_generator(oracle, 5e-3), inverse_model_generator(im, arm)}) {
      for (std::size_t n : {1u, 3u, 10u, 40u}) {
        Rng a(99), b(99);
        const CoverageReport small = mode_coverage(g, arm, p, n, oracle, a, 0.5);
        const CoverageReport big = mode_coverage(g, arm, p, 2 * n, oracle, b, 0.5);
        for (const auto& l : small.covered_labels)
          EXPECT_NE(std::find(big.covered_labels.begin(), big.covered_labels.end(), l), big.covered_labels.end());
        EXPECT_LE(small.covered_branches, big.covered_branches);
        EXPECT_LE(big.covered_branches, big.oracle_branches);
      }
    }
  }
}

TEST(Coverage, EnsembleComparisonIsPaired) {
  const ArmModel arm = builtin_arm("planar3");
  Ensemble e;
  for (std::uint64_t s = 0; s < 3; ++s) e.members.push_back(make_inverse_model(arm, 2, {16}, 40 + s));
  const Matrix targets = sample_interior_targets(arm, 3, 2);
  EnumerateOptions opt;
  opt.grid_per_joint = 20;
  const CoverageComparison a = compare_coverage(e, arm, targets, 30, 5, opt);
  const CoverageComparison b = compare_coverage(e, arm, targets, 30, 5, opt);
  EXPECT_EQ(a.ensemble_mean, b.ensemble_mean);
  EXPECT_EQ(a.member_means, b.member_means);
  ASSERT_EQ(a.members.size(), 3u);
  EXPECT_EQ(a.best_member_mean, *std::max_element(a.member_means.begin(), a.member_means.end()));
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t m = 0; m < 3; ++m) EXPECT_EQ(a.members[m][t].oracle_branches, a.ensemble[t].oracle_branches);
  EXPECT_THROW(compare_coverage(Ensemble{}, arm, targets, 30, 5), UsageError);
}

TEST(InteriorTargets, StayInsideTheBand) {
  const ArmModel arm = builtin_arm("planar3");
  const Matrix t = sample_interior_targets(arm, 400, 3);
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    EXPECT_GE(t.row(i).norm(), 0.2 * arm.total_reach());
    EXPECT_LE(t.row(i).norm(), 0.8 * arm.total_reach());
  }
  EXPECT_TRUE(t == sample_interior_targets(arm, 400, 3));
  EXPECT_THROW(sample_interior_targets(arm, 0, 3), UsageError);
  EXPECT_THROW(sample_interior_targets(arm, 4, 3, 0.9, 0.5), UsageError);
}
