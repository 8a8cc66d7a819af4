#include <gtest/gtest.h>

#include <limits>
#include <set>

#include "cemssl/cemssl.hpp"
#include "test_util.hpp"

using namespace cemssl;

namespace {

Hyperparams tiny() {
  Hyperparams h;
  h.iterations = 3;
  h.epochs = 2;
  h.inference_batch = 64;
  h.training_batch = 32;
  h.threads = 2;
  h.zdim = 2;
  h.ensemble_size = 3;
  h.n_targets = 256;
  h.hidden_layers = {16, 16};
  h.eval_targets = 64;
  h.seed = 5;
  return h;
}

InverseModel tiny_model(const ArmModel& arm, const Hyperparams& h, std::uint64_t seed = 9) {
  return make_inverse_model(arm, h.zdim, h.hidden_layers, seed);
}

}  // namespace

TEST(Hyperparams, DefaultsMatchPublishedTable) {
  const Hyperparams h;
  EXPECT_EQ(h.iterations, 200u);
  EXPECT_EQ(h.epochs, 10u);
  EXPECT_EQ(h.inference_batch, 512u);
  EXPECT_EQ(h.training_batch, 128u);
  EXPECT_EQ(h.threads, 6u);
  EXPECT_EQ(h.learning_rate, 0.0015);
  EXPECT_EQ(h.zdim, 6u);
  EXPECT_EQ(h.ensemble_size, 6u);
  EXPECT_EQ(h.hidden_layers, (std::vector<std::size_t>{1024, 512, 256, 128}));
  EXPECT_EQ(h.n_targets, 5000u);
  EXPECT_EQ(h.eval_targets, 500u);
  EXPECT_EQ(h.early_stop_precision, 0.0);
  EXPECT_NO_THROW(h.validate());
}

TEST(Hyperparams, ValidationAndBatchCount) {
  Hyperparams h;
  EXPECT_EQ(h.batches_per_iteration(), 10u);  // ceil(5000 / 512)
  h.inference_batches = 3;
  EXPECT_EQ(h.batches_per_iteration(), 3u);
  for (auto field : {&Hyperparams::epochs, &Hyperparams::inference_batch, &Hyperparams::training_batch,
                     &Hyperparams::threads, &Hyperparams::zdim, &Hyperparams::ensemble_size, &Hyperparams::n_targets}) {
    Hyperparams bad;
    bad.*field = 0;
    EXPECT_THROW(bad.validate(), UsageError);
  }
  Hyperparams bad;
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), UsageError);
}

TEST(PoolIndices, ConsecutivePassesArePermutations) {
  Rng rng(1);
  const auto idx = draw_pool_indices(10, 25, rng);
  ASSERT_EQ(idx.size(), 25u);
  for (std::size_t pass = 0; pass < 2; ++pass) {
    std::set<Eigen::Index> seen(idx.begin() + static_cast<std::ptrdiff_t>(10 * pass),
                                idx.begin() + static_cast<std::ptrdiff_t>(10 * pass + 10));
    EXPECT_EQ(seen.size(), 10u);
  }
}

TEST(SamplingPhase, TriplesAreSelfConsistent) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  const InverseModel im = tiny_model(arm, h);
  const Matrix pool = sample_reachable_targets(arm, h.n_targets, 3);
  Rng rng(4);
  const Dataset d = sampling_phase(im, arm, pool, h, rng);
  EXPECT_EQ(d.size(), h.batches_per_iteration() * h.inference_batch);
  EXPECT_EQ(d.z.rows(), d.q.rows());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const TrainingTriple t = d.triple(i);
    EXPECT_EQ(fk(arm, t.q).position, t.p_sim.position);
    for (std::size_t j = 0; j < arm.dof(); ++j) {
      EXPECT_GE(t.q.angles[j], arm.joint_limits()[j].lo);
      EXPECT_LE(t.q.angles[j], arm.joint_limits()[j].hi);
    }
  }
}

TEST(SamplingPhase, LatentsAreFedToTheModel) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  const InverseModel im = tiny_model(arm, h);
  const Matrix pool = sample_reachable_targets(arm, 1, 3);  // single target
  Rng rng(4);
  const Dataset d = sampling_phase(im, arm, pool, h, rng);
  const Matrix expect = im_infer(im, arm, pool.replicate(static_cast<Eigen::Index>(d.size()), 1), d.z);
  EXPECT_TRUE(expect == d.q);
}

TEST(SamplingPhase, FrozenModelAndRngGiveIdenticalDatasets) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  const InverseModel im = tiny_model(arm, h);
  const Matrix pool = sample_reachable_targets(arm, h.n_targets, 3);
  Rng a(4), b(4);
  const Dataset da = sampling_phase(im, arm, pool, h, a), db = sampling_phase(im, arm, pool, h, b);
  EXPECT_TRUE(da.z == db.z);
  EXPECT_TRUE(da.q == db.q);
  EXPECT_TRUE(da.p_sim == db.p_sim);
  Hyperparams h1 = h;
  h1.threads = 1;
  Rng c(4);
  EXPECT_TRUE(sampling_phase(im, arm, pool, h1, c).p_sim == da.p_sim);
}

TEST(SamplingPhase, EmptyPoolIsRejected) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  Rng rng(1);
  EXPECT_THROW(sampling_phase(tiny_model(arm, h), arm, Matrix(0, 2), h, rng), UsageError);
}

TEST(TrainingPhase, PerfectModelIsAFixedPoint) {
  // Zeroing the weights that read p makes IM(p, z) = g(z), so relabelling
  // with p_sim = fk(g(z)) reproduces the model's own outputs.
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  InverseModel im = tiny_model(arm, h);
  im.params.weights[0].leftCols(2).setZero();
  const Matrix pool = sample_reachable_targets(arm, h.n_targets, 3);
  Rng rng(4);
  const Dataset d = sampling_phase(im, arm, pool, h, rng);
  const Matrix labels = unscale_from_limits(arm, d.q);
  EXPECT_LT(mse_loss(im_infer_unit(im, d.p_sim, d.z), labels), 1e-30);
  // Adam divides roundoff-sized gradients by its epsilon, so the exact fixed
  // point drifts slightly; it must stay near zero loss, not bit-identical.
  const InverseModel before = im;
  AdamState opt = AdamState::for_params(im.params, h.learning_rate);
  const double loss = training_phase(im, arm, d, h, opt, rng);
  EXPECT_LT(loss, 1e-4);
  double max_change = 0.0;
  for (std::size_t i = 0; i < im.params.layer_count(); ++i)
    max_change = std::max(max_change, (im.params.weights[i] - before.params.weights[i]).cwiseAbs().maxCoeff());
  EXPECT_LT(max_change, 1e-2);
}

TEST(TrainingPhase, ReducesLossOnFixedData) {
  const ArmModel arm = builtin_arm("planar2");
  Hyperparams h = tiny();
  h.epochs = 1;
  InverseModel im = tiny_model(arm, h);
  const Matrix pool = sample_reachable_targets(arm, h.n_targets, 3);
  Rng rng(4);
  const Dataset d = sampling_phase(im, arm, pool, h, rng);
  AdamState opt = AdamState::for_params(im.params, h.learning_rate);
  const double first = training_phase(im, arm, d, h, opt, rng);
  double last = first;
  for (int i = 0; i < 20; ++i) last = training_phase(im, arm, d, h, opt, rng);
  EXPECT_LT(last, first);
}

TEST(TrainingPhase, EmptyDatasetIsRejected) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  InverseModel im = tiny_model(arm, h);
  AdamState opt = AdamState::for_params(im.params, h.learning_rate);
  Rng rng(1);
  EXPECT_THROW(training_phase(im, arm, Dataset{}, h, opt, rng), UsageError);
}

TEST(CemsslRun, TraceHasOneRecordPerIteration) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  std::vector<std::size_t> seen;
  const RunResult r = cemssl_run(tiny_model(arm, h), arm, h, [&](const IterationRecord& rec) { seen.push_back(rec.iteration); });
  ASSERT_EQ(r.trace.records.size(), 3u);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
  for (const auto& rec : r.trace.records) {
    EXPECT_TRUE(std::isfinite(rec.mean_loss));
    EXPECT_GE(rec.precision, 0.0);
  }
}

TEST(CemsslRun, EarlyStopTruncatesTrace) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h = tiny();
  h.early_stop_precision = 1e9;
  EXPECT_EQ(cemssl_run(tiny_model(arm, h), arm, h).trace.records.size(), 1u);
  h.iterations = 0;
  EXPECT_EQ(cemssl_run(tiny_model(arm, h), arm, h).trace.records.size(), 0u);
}

TEST(CemsslRun, DeterministicForFixedSeed) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  const RunResult a = cemssl_run(tiny_model(arm, h), arm, h);
  const RunResult b = cemssl_run(tiny_model(arm, h), arm, h);
  EXPECT_TRUE(a.model.params == b.model.params);
  ASSERT_EQ(a.trace.records.size(), b.trace.records.size());
  for (std::size_t i = 0; i < a.trace.records.size(); ++i) {
    EXPECT_EQ(a.trace.records[i].mean_loss, b.trace.records[i].mean_loss);
    EXPECT_EQ(a.trace.records[i].precision, b.trace.records[i].precision);
  }
  Hyperparams other = h;
  other.seed = 6;
  EXPECT_FALSE(cemssl_run(tiny_model(arm, h), arm, other).model.params == a.model.params);
}

TEST(CemsslRun, ThreadCountDoesNotChangeResults) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h1 = tiny(), h6 = tiny();
  h1.threads = 1;
  h6.threads = 6;
  EXPECT_TRUE(cemssl_run(tiny_model(arm, h1), arm, h1).model.params ==
              cemssl_run(tiny_model(arm, h6), arm, h6).model.params);
}

TEST(CemsslRun, DivergenceReportsIteration) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h = tiny();
  h.learning_rate = std::numeric_limits<double>::infinity();
  try {
    cemssl_run(tiny_model(arm, h), arm, h);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos) << e.what();
  }
}

TEST(CemsslRun, RejectsMismatchedModel) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h = tiny();
  const InverseModel m = tiny_model(arm, h);
  h.zdim = 3;
  EXPECT_THROW(cemssl_run(m, arm, h), UsageError);
  EXPECT_THROW(cemssl_run(m, builtin_arm("planar2"), tiny()), UsageError);
}

TEST(CemsslRun, PrecisionTrendsDownOnPlanarArm) {
  const ArmModel arm = builtin_arm("planar2");
  Hyperparams h = tiny();
  h.iterations = 16;
  h.epochs = 4;
  h.hidden_layers = {32, 32};
  h.n_targets = 512;
  h.inference_batch = 128;
  const RunResult r = cemssl_run(tiny_model(arm, h), arm, h);
  std::vector<double> early, late;
  for (const auto& rec : r.trace.records) (rec.iteration <= 8 ? early : late).push_back(rec.precision);
  EXPECT_LT(median(late), median(early));
  EXPECT_LT(r.trace.records.back().precision, r.trace.initial_precision);
}

TEST(Finetune, ZeroIterationsIsIdentity) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h = tiny();
  h.iterations = 0;
  const InverseModel m = tiny_model(arm, h);
  const FinetuneResult f = finetune(m, arm, h);
  EXPECT_TRUE(f.model.params == m.params);
  EXPECT_EQ(f.improvement_ratio, 1.0);
  EXPECT_EQ(f.joint_drift, 0.0);
  EXPECT_TRUE(f.trace.records.empty());
}

TEST(Finetune, ReportsRatioAndDrift) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  const FinetuneResult f = finetune(tiny_model(arm, h), arm, h);
  EXPECT_DOUBLE_EQ(f.improvement_ratio, f.precision_before / f.precision_after);
  ASSERT_TRUE(f.trace.joint_drift.has_value());
  EXPECT_EQ(*f.trace.joint_drift, f.joint_drift);
  EXPECT_GT(f.joint_drift, 0.0);
  EXPECT_EQ(f.precision_after, f.trace.records.back().precision);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_EQ(median({}), 0.0);
}

TEST(Ensemble, SeedsDistinctAndMembersDiffer) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h = tiny();
  h.iterations = 1;
  const Ensemble e = ensemble_train(arm, h);
  ASSERT_EQ(e.members.size(), 3u);
  EXPECT_EQ(std::set<std::uint64_t>(e.member_seeds.begin(), e.member_seeds.end()).size(), 3u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) EXPECT_FALSE(e.members[i].params == e.members[j].params);
  for (const auto& m : e.members) EXPECT_EQ(m.zdim, h.zdim);
}

TEST(Ensemble, SizeOneIsASingleRun) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h = tiny();
  h.ensemble_size = 1;
  const Ensemble e = ensemble_train(arm, h);
  Hyperparams single = h;
  single.seed = member_seed(h.seed, 0);
  const RunResult r = cemssl_run(initial_member(arm, single, single.seed), arm, single);
  EXPECT_TRUE(e.members[0].params == r.model.params);
}

TEST(Ensemble, ParallelismDoesNotChangeMembers) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h1 = tiny(), h6 = tiny();
  h1.iterations = h6.iterations = 2;
  h1.threads = 1;
  h6.threads = 6;
  const Ensemble a = ensemble_train(arm, h1, false);
  const Ensemble b = ensemble_train(arm, h6, true);
  for (std::size_t i = 0; i < a.members.size(); ++i) EXPECT_TRUE(a.members[i].params == b.members[i].params) << i;
}

TEST(Ensemble, MemberFailureNamesIndex) {
  const ArmModel arm = builtin_arm("planar3");
  Hyperparams h = tiny();
  h.learning_rate = std::numeric_limits<double>::infinity();
  try {
    ensemble_train(arm, h, false);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("ensemble member 0"), std::string::npos) << e.what();
  }
}

TEST(EnsembleSample, LimitsCountAndUniformMemberUse) {
  const ArmModel arm = builtin_arm("planar3");
  const Hyperparams h = tiny();
  Ensemble e;
  for (std::uint64_t s = 0; s < 6; ++s) {
    e.members.push_back(tiny_model(arm, h, 100 + s));
    e.member_seeds.push_back(s);
  }
  Rng rng(3);
  const std::size_t n = 6000;
  const EnsembleSample out = ensemble_sample(e, arm, TaskPoint{{1.0, 0.5}}, n, rng);
  ASSERT_EQ(out.joints.size(), n);
  std::vector<std::size_t> counts(6, 0);
  for (std::size_t m : out.members) ++counts[m];
  // Multinomial with p = 1/6: each count has sd sqrt(n p (1-p)).
  const double mean = n / 6.0, sd = std::sqrt(n * (1.0 / 6) * (5.0 / 6));
  for (std::size_t c : counts) EXPECT_LT(std::abs(static_cast<double>(c) - mean), 3 * sd);
  for (const auto& q : out.joints)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_GE(q.angles[j], arm.joint_limits()[j].lo);
      EXPECT_LE(q.angles[j], arm.joint_limits()[j].hi);
    }
}

TEST(EnsembleSample, EmptyEnsembleIsUsageError) {
  Rng rng(1);
  EXPECT_THROW(ensemble_sample(Ensemble{}, builtin_arm("planar3"), TaskPoint{{1.0, 0.0}}, 5, rng), UsageError);
}
