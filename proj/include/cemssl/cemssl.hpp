#pragma once

// The coordinated sampling/training loop, pretrain-then-fine-tune, and
// model ensembles.
//
// Each iteration empties the dataset, infers joints for mini-batches of
// targets with fresh latents, evaluates FK on the inferred joints, and then
// supervises IM(p_sim, z) -> q on exactly those triples.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cemssl/errors.hpp"
#include "cemssl/evaluation.hpp"
#include "cemssl/generative.hpp"
#include "cemssl/kinematics.hpp"
#include "cemssl/nn.hpp"
#include "cemssl/random.hpp"

namespace cemssl {

struct Hyperparams {
  std::size_t iterations = 200;       // T
  std::size_t epochs = 10;            // E
  std::size_t inference_batch = 512;  // M_R
  std::size_t training_batch = 128;   // M_T
  std::size_t threads = 6;            // K
  double learning_rate = 0.0015;      // eta
  std::size_t zdim = 6;
  std::size_t ensemble_size = 6;
  std::size_t n_targets = 5000;        // size of the unlabeled target pool
  std::size_t inference_batches = 0;   // N_BU; 0 means one pass over the pool
  std::vector<std::size_t> hidden_layers{1024, 512, 256, 128};
  std::size_t eval_targets = 500;
  std::size_t eval_latents = 1;
  double early_stop_precision = 0.0;  // 0 disables early stopping
  std::uint64_t seed = 1;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw UsageError(std::string(name) + " must be >= 1");
    };
    positive(epochs, "epochs");
    positive(inference_batch, "inference_batch");
    positive(training_batch, "training_batch");
    positive(threads, "threads");
    positive(zdim, "zdim");
    positive(ensemble_size, "ensemble_size");
    positive(n_targets, "n_targets");
    positive(eval_targets, "eval_targets");
    positive(eval_latents, "eval_latents");
    if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be > 0");
    if (early_stop_precision < 0.0) throw UsageError("early_stop_precision must be >= 0");
  }

  std::size_t batches_per_iteration() const {
    if (inference_batches > 0) return inference_batches;
    return (n_targets + inference_batch - 1) / inference_batch;
  }
};

struct TrainingTriple {
  LatentSample z;
  JointConfig q;
  TaskPoint p_sim;
};

// Row i of each matrix is one triple (z, q, p_sim) with p_sim == fk(q).
struct Dataset {
  Matrix z;
  Matrix q;
  Matrix p_sim;

  std::size_t size() const { return static_cast<std::size_t>(q.rows()); }

  TrainingTriple triple(std::size_t i) const {
    const auto r = static_cast<Eigen::Index>(i);
    auto row = [r](const Matrix& m) {
      return std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols());
    };
    return {LatentSample{row(z)}, JointConfig{row(q)}, TaskPoint{row(p_sim)}};
  }
};

struct IterationRecord {
  std::size_t iteration = 0;  // 1-based
  double mean_loss = 0.0;
  double precision = 0.0;
  double wall_ms = 0.0;
};

struct RunTrace {
  std::vector<IterationRecord> records;
  double initial_precision = 0.0;
  std::optional<double> joint_drift;
};

// Draws `count` pool indices from consecutive shuffled passes over the pool.
inline std::vector<Eigen::Index> draw_pool_indices(std::size_t pool, std::size_t count, Rng& rng) {
  std::vector<Eigen::Index> perm(pool), out;
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  out.reserve(count);
  while (out.size() < count) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t take = std::min(pool, count - out.size());
    out.insert(out.end(), perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

inline Dataset sampling_phase(const InverseModel& im, const ArmModel& arm, const Matrix& targets,
                              const Hyperparams& hyper, Rng& rng) {
  if (targets.rows() == 0) throw UsageError("sampling_phase needs a nonempty target pool");
  im.check_against(arm);
  const std::size_t batches = hyper.batches_per_iteration();
  const std::size_t mr = hyper.inference_batch;
  const auto total = static_cast<Eigen::Index>(batches * mr);
  Dataset data;
  data.z.resize(total, static_cast<Eigen::Index>(im.zdim));
  data.q.resize(total, static_cast<Eigen::Index>(arm.dof()));
  Matrix batch(static_cast<Eigen::Index>(mr), targets.cols());
  for (std::size_t n = 0; n < batches; ++n) {
    const auto idx = draw_pool_indices(static_cast<std::size_t>(targets.rows()), mr, rng);
    for (std::size_t m = 0; m < mr; ++m) batch.row(static_cast<Eigen::Index>(m)) = targets.row(idx[m]);
    const Matrix z = sample_latent_matrix(im.zdim, mr, rng);
    const auto at = static_cast<Eigen::Index>(n * mr);
    data.z.middleRows(at, static_cast<Eigen::Index>(mr)) = z;
    data.q.middleRows(at, static_cast<Eigen::Index>(mr)) = im_infer(im, arm, batch, z);
  }
  data.p_sim = batch_fk(arm, data.q, hyper.threads);
  return data;
}

// E epochs of shuffled mini-batches on (p_sim, z) -> unit(q). Returns the
// final-epoch mean loss.
inline double training_phase(InverseModel& im, const ArmModel& arm, const Dataset& data,
                             const Hyperparams& hyper, AdamState& opt, Rng& rng) {
  if (data.size() == 0) throw UsageError("training_phase needs a nonempty dataset");
  const Matrix inputs = concat_columns(data.p_sim, data.z);
  const Matrix labels = unscale_from_limits(arm, data.q);
  const auto n = static_cast<Eigen::Index>(data.size());
  std::vector<Eigen::Index> order(data.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Matrix x(n, inputs.cols()), y(n, labels.cols());
  double last_epoch = 0.0;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index i = 0; i < n; ++i) {
      x.row(i) = inputs.row(order[static_cast<std::size_t>(i)]);
      y.row(i) = labels.row(order[static_cast<std::size_t>(i)]);
    }
    double sum = 0.0;
    const auto mt = static_cast<Eigen::Index>(hyper.training_batch);
    for (Eigen::Index b = 0; b < n; b += mt) {
      const Eigen::Index rows = std::min(mt, n - b);
      const Matrix xb = x.middleRows(b, rows);
      const Matrix yb = y.middleRows(b, rows);
      const ForwardCache cache = forward(im.params, xb);
      const double loss = mse_loss(cache.output(), yb);
      if (!std::isfinite(loss))
        throw TrainingError("non-finite training loss in epoch " + std::to_string(epoch + 1));
      try {
        adam_step(im.params, backward_mse(im.params, cache, yb), opt);
      } catch (const NumericError& err) {
        throw TrainingError(std::string(err.what()) + " in epoch " + std::to_string(epoch + 1));
      }
      sum += loss * static_cast<double>(rows);
    }
    last_epoch = sum / static_cast<double>(n);
  }
  return last_epoch;
}

// Fixed held-out targets and latents, derived from the run seed so that
// they never coincide with the training pool.
struct EvalSet {
  Matrix targets;
  std::uint64_t latent_seed = 0;
  std::size_t latents_per_target = 1;

  double precision_of(const InverseModel& im, const ArmModel& arm) const {
    Rng rng(latent_seed);
    return precision(inverse_model_generator(im, arm), arm, targets, latents_per_target, rng);
  }

  Matrix joints_of(const InverseModel& im, const ArmModel& arm) const {
    Rng rng(latent_seed);
    const Matrix expanded = repeat_rows(targets, latents_per_target);
    return inverse_model_generator(im, arm)(expanded, rng);
  }
};

inline EvalSet make_eval_set(const ArmModel& arm, const Hyperparams& hyper) {
  return EvalSet{sample_reachable_targets(arm, hyper.eval_targets, derive_seed(hyper.seed, "eval-targets")),
                 derive_seed(hyper.seed, "eval-latents"), hyper.eval_latents};
}

struct RunResult {
  InverseModel model;
  RunTrace trace;
};

// Called after every completed iteration; lets callers persist traces
// incrementally.
using IterationCallback = std::function<void(const IterationRecord&)>;

inline RunResult cemssl_run(InverseModel im, const ArmModel& arm, const Hyperparams& hyper,
                            const IterationCallback& on_iteration = {}) {
  hyper.validate();
  im.check_against(arm);
  if (im.zdim != hyper.zdim)
    throw UsageError("inverse model zdim " + std::to_string(im.zdim) + " != configured zdim " +
                     std::to_string(hyper.zdim));
  const Matrix pool = sample_reachable_targets(arm, hyper.n_targets, derive_seed(hyper.seed, "targets"));
  const EvalSet eval = make_eval_set(arm, hyper);
  Rng rng(derive_seed(hyper.seed, "cemssl-loop"));
  AdamState opt = AdamState::for_params(im.params, hyper.learning_rate);

  RunResult result;
  result.trace.initial_precision = eval.precision_of(im, arm);
  for (std::size_t t = 1; t <= hyper.iterations; ++t) {
    const auto start = std::chrono::steady_clock::now();
    const Dataset data = sampling_phase(im, arm, pool, hyper, rng);
    IterationRecord rec;
    rec.iteration = t;
    try {
      rec.mean_loss = training_phase(im, arm, data, hyper, opt, rng);
    } catch (const TrainingError& err) {
      throw TrainingError(std::string(err.what()) + " of iteration " + std::to_string(t));
    }
    rec.precision = eval.precision_of(im, arm);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.trace.records.push_back(rec);
    if (on_iteration) on_iteration(rec);
    if (hyper.early_stop_precision > 0.0 && rec.precision < hyper.early_stop_precision) break;
  }
  result.model = std::move(im);
  return result;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2) return upper;
  return 0.5 * (upper + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

struct FinetuneResult {
  InverseModel model;
  RunTrace trace;
  double precision_before = 0.0;
  double precision_after = 0.0;
  double improvement_ratio = 1.0;
  double joint_drift = 0.0;  // median ||q_before - q_after|| on shared (p, z) probes
};

inline FinetuneResult finetune(const InverseModel& pretrained, const ArmModel& arm,
                               const Hyperparams& hyper, const IterationCallback& on_iteration = {}) {
  const EvalSet eval = make_eval_set(arm, hyper);
  FinetuneResult out;
  out.precision_before = eval.precision_of(pretrained, arm);
  const Matrix q_before = eval.joints_of(pretrained, arm);
  RunResult run = cemssl_run(pretrained, arm, hyper, on_iteration);
  out.model = std::move(run.model);
  out.trace = std::move(run.trace);
  out.precision_after = eval.precision_of(out.model, arm);
  const Matrix q_after = eval.joints_of(out.model, arm);
  std::vector<double> drift(static_cast<std::size_t>(q_before.rows()));
  for (Eigen::Index i = 0; i < q_before.rows(); ++i)
    drift[static_cast<std::size_t>(i)] = (q_before.row(i) - q_after.row(i)).norm();
  out.joint_drift = median(std::move(drift));
  out.trace.joint_drift = out.joint_drift;
  if (out.precision_before == out.precision_after)
    out.improvement_ratio = 1.0;
  else
    out.improvement_ratio = out.precision_before / out.precision_after;
  return out;
}

// ---------------------------------------------------------------------------
// Ensembles

struct Ensemble {
  std::vector<InverseModel> members;
  std::vector<std::uint64_t> member_seeds;
  std::vector<RunTrace> traces;
};

inline std::uint64_t member_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(seed, static_cast<std::uint64_t>(index) + 1);
}

inline InverseModel initial_member(const ArmModel& arm, const Hyperparams& hyper, std::uint64_t seed) {
  return make_inverse_model(arm, hyper.zdim, hyper.hidden_layers, derive_seed(seed, "init"));
}

// Receives each member's iteration records. Calls for one member come from
// one thread, in order; different members may report concurrently.
using MemberCallback = std::function<void(std::size_t member, const IterationRecord&)>;

// Members are independent runs with distinct seeds; with `concurrent` they
// train on separate threads. Results do not depend on scheduling.
inline Ensemble ensemble_train(const ArmModel& arm, const Hyperparams& hyper, bool concurrent = true,
                               const MemberCallback& on_iteration = {}) {
  hyper.validate();
  const std::size_t count = hyper.ensemble_size;
  Ensemble ens;
  ens.member_seeds.resize(count);
  for (std::size_t i = 0; i < count; ++i) ens.member_seeds[i] = member_seed(hyper.seed, i);

  auto train_member = [&](std::size_t i) {
    Hyperparams h = hyper;
    h.seed = ens.member_seeds[i];
    try {
      IterationCallback cb;
      if (on_iteration) cb = [&on_iteration, i](const IterationRecord& r) { on_iteration(i, r); };
      return cemssl_run(initial_member(arm, h, h.seed), arm, h, cb);
    } catch (const Error& err) {
      throw TrainingError("ensemble member " + std::to_string(i) + ": " + err.what());
    }
  };
  std::vector<RunResult> runs;
  if (concurrent && count > 1) {
    std::vector<std::future<RunResult>> jobs;
    for (std::size_t i = 0; i < count; ++i) jobs.push_back(std::async(std::launch::async, train_member, i));
    for (auto& j : jobs) runs.push_back(j.get());
  } else {
    for (std::size_t i = 0; i < count; ++i) runs.push_back(train_member(i));
  }
  for (auto& r : runs) {
    ens.members.push_back(std::move(r.model));
    ens.traces.push_back(std::move(r.trace));
  }
  return ens;
}

struct EnsembleDraw {
  std::vector<std::size_t> member;  // per row
  Matrix z;
};

// Per row: a uniformly chosen member, then a fresh latent for it.
inline EnsembleDraw draw_ensemble_inputs(std::size_t members, std::size_t zdim, std::size_t rows,
                                         Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, members - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  EnsembleDraw d;
  d.member.resize(rows);
  d.z.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(zdim));
  for (std::size_t i = 0; i < rows; ++i) {
    d.member[i] = pick(rng);
    for (std::size_t k = 0; k < zdim; ++k)
      d.z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = normal(rng);
  }
  return d;
}

inline Matrix ensemble_infer(const Ensemble& ens, const ArmModel& arm, const Matrix& targets,
                             const EnsembleDraw& draw) {
  Matrix out(targets.rows(), static_cast<Eigen::Index>(arm.dof()));
  for (std::size_t m = 0; m < ens.members.size(); ++m) {
    std::vector<Eigen::Index> rows_of;
    for (std::size_t i = 0; i < draw.member.size(); ++i)
      if (draw.member[i] == m) rows_of.push_back(static_cast<Eigen::Index>(i));
    if (rows_of.empty()) continue;
    const auto k_rows = static_cast<Eigen::Index>(rows_of.size());
    Matrix p(k_rows, targets.cols()), z(k_rows, draw.z.cols());
    for (Eigen::Index k = 0; k < k_rows; ++k) {
      p.row(k) = targets.row(rows_of[static_cast<std::size_t>(k)]);
      z.row(k) = draw.z.row(rows_of[static_cast<std::size_t>(k)]);
    }
    const Matrix q = im_infer(ens.members[m], arm, p, z);
    for (Eigen::Index k = 0; k < k_rows; ++k) out.row(rows_of[static_cast<std::size_t>(k)]) = q.row(k);
  }
  return out;
}

inline void check_ensemble(const Ensemble& ens, const ArmModel& arm) {
  if (ens.members.empty()) throw UsageError("ensemble has no members");
  for (const auto& m : ens.members) {
    m.check_against(arm);
    if (m.zdim != ens.members.front().zdim) throw UsageError("ensemble members disagree on zdim");
  }
}

// The returned generator refers to `ens` and `arm`; both must outlive it.
inline Generator ensemble_generator(const Ensemble& ens, const ArmModel& arm) {
  check_ensemble(ens, arm);
  return [&ens, &arm](const Matrix& targets, Rng& rng) {
    const EnsembleDraw draw = draw_ensemble_inputs(ens.members.size(), ens.members.front().zdim,
                                                   static_cast<std::size_t>(targets.rows()), rng);
    return ensemble_infer(ens, arm, targets, draw);
  };
}

struct EnsembleSample {
  std::vector<JointConfig> joints;
  std::vector<std::size_t> members;  // which member produced each sample
};

inline EnsembleSample ensemble_sample(const Ensemble& ens, const ArmModel& arm, const TaskPoint& p,
                                      std::size_t n, Rng& rng) {
  check_ensemble(ens, arm);
  if (n == 0) throw UsageError("ensemble_sample needs n >= 1");
  if (p.position.size() != arm.task_dim()) throw ShapeError("target length != task_dim");
  Matrix targets(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(arm.task_dim()));
  for (Eigen::Index i = 0; i < targets.rows(); ++i)
    for (std::size_t k = 0; k < arm.task_dim(); ++k)
      targets(i, static_cast<Eigen::Index>(k)) = p.position[k];
  const EnsembleDraw draw = draw_ensemble_inputs(ens.members.size(), ens.members.front().zdim, n, rng);
  const Matrix q = ensemble_infer(ens, arm, targets, draw);
  EnsembleSample out;
  out.members = draw.member;
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    out.joints.push_back(JointConfig{std::vector<double>(q.row(i).data(), q.row(i).data() + q.cols())});
  return out;
}

// Coverage of oracle branches by the whole ensemble and by each member on
// its own, with the same sample count per target for every generator.
struct CoverageComparison {
  std::vector<CoverageReport> ensemble;
  std::vector<std::vector<CoverageReport>> members;  // [member][target]
  double ensemble_mean = 0.0;
  std::vector<double> member_means;
  std::size_t best_member = 0;
  double best_member_mean = 0.0;
};

inline CoverageComparison compare_coverage(const Ensemble& ens, const ArmModel& arm, const Matrix& targets,
                                           std::size_t samples, std::uint64_t seed,
                                           const EnumerateOptions& opt = {}) {
  check_ensemble(ens, arm);
  if (targets.rows() == 0) throw UsageError("compare_coverage needs at least one target");
  CoverageComparison out;
  out.members.resize(ens.members.size());
  const Generator joint = ensemble_generator(ens, arm);
  std::vector<Generator> singles;
  for (const auto& m : ens.members) singles.push_back(inverse_model_generator(m, arm));
  for (Eigen::Index t = 0; t < targets.rows(); ++t) {
    const std::span<const double> p(targets.row(t).data(), arm.task_dim());
    const auto oracle = enumerate_solutions(arm, p, opt);
    const std::uint64_t ts = derive_seed(seed, static_cast<std::uint64_t>(t));
    Rng rng(derive_seed(ts, "ensemble"));
    out.ensemble.push_back(mode_coverage(joint, arm, p, samples, oracle, rng));
    for (std::size_t m = 0; m < singles.size(); ++m) {
      Rng mrng(derive_seed(ts, static_cast<std::uint64_t>(m) + 1));
      out.members[m].push_back(mode_coverage(singles[m], arm, p, samples, oracle, mrng));
    }
  }
  auto mean_fraction = [](const std::vector<CoverageReport>& v) {
    double s = 0.0;
    for (const auto& r : v) s += r.fraction;
    return s / static_cast<double>(v.size());
  };
  out.ensemble_mean = mean_fraction(out.ensemble);
  for (std::size_t m = 0; m < out.members.size(); ++m) {
    out.member_means.push_back(mean_fraction(out.members[m]));
    if (m == 0 || out.member_means[m] > out.best_member_mean) {
      out.best_member = m;
      out.best_member_mean = out.member_means[m];
    }
  }
  return out;
}

}  // namespace cemssl
