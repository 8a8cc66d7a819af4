#pragma once

// Experiment pipelines. Each run writes only inside its output directory:
//
//   config.resolved.ini   every key with its effective value
//   trace.csv             per-iteration loss / precision (CEMSSL pipelines)
//   cvae_trace.csv        per-epoch CVAE losses (CVAE pipelines)
//   summary.txt           final metrics
//   evaluation.txt        precision of a loaded checkpoint (evaluate; its
//                         config goes to evaluate.resolved.ini)
//   model.ckpt            final inverse model (member_<i>.ckpt for ensembles)
//   comparison.json       before/after record (cvae_then_cemssl)
//   table2.txt/.csv       method versus precision
//   coverage.csv          per-target branch coverage (ensemble, optional)

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "cemssl/cemssl.hpp"
#include "cemssl/checkpoint.hpp"
#include "cemssl/config.hpp"
#include "cemssl/errors.hpp"
#include "cemssl/report.hpp"

namespace cemssl {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitTraining = 2, kExitIo = 3 };

namespace detail {

struct RunContext {
  const ExperimentConfig& cfg;
  const ArmModel& arm;
  std::ostream& log;

  std::filesystem::path out(const std::string& name) const { return cfg.output_dir / name; }

  double report(double v) const { return v * arm.report_scale(); }

  void emit_table(const std::vector<MethodResult>& rows) const {
    const Table2 t = emit_table2(rows, arm.report_unit());
    write_text_file(out("table2.txt"), t.text);
    write_text_file(out("table2.csv"), t.csv);
    log << t.text;
  }

  Summary summary_head() const {
    Summary s;
    s.add("pipeline", cfg.pipeline).add("arm", arm.identity()).add("seed", std::to_string(cfg.seed));
    s.add("report_unit", arm.report_unit()).add("report_scale", arm.report_scale());
    return s;
  }
};

inline void add_trace_summary(Summary& s, const RunTrace& t) {
  s.add("iterations_completed", t.records.size());
  s.add("initial_precision", t.initial_precision);
  if (!t.records.empty()) {
    s.add("final_loss", t.records.back().mean_loss);
    s.add("final_precision", t.records.back().precision);
  }
}

inline void write_cvae_trace(const RunContext& ctx, const CVAEModel& m) {
  std::string csv = "epoch,mse,kl\n";
  for (std::size_t e = 0; e < m.mse_history.size(); ++e)
    csv += std::to_string(e + 1) + "," + format_real(m.mse_history[e]) + "," + format_real(m.kl_history[e]) + "\n";
  write_text_file(ctx.out("cvae_trace.csv"), csv);
}

inline void add_cvae_summary(Summary& s, const CVAEModel& m) {
  s.add("cvae_beta", m.beta);
  s.add("cvae_final_mse", m.final_mse);
  s.add("cvae_final_kl", m.final_kl);
  s.add("cvae_final_total", m.final_total);
}

inline int pipeline_cemssl(const RunContext& ctx) {
  const Hyperparams& h = ctx.cfg.hyper;
  TraceWriter trace(ctx.out("trace.csv"), ctx.cfg.record_wall_time);
  RunResult r = cemssl_run(initial_member(ctx.arm, h, h.seed), ctx.arm, h,
                           [&](const IterationRecord& rec) { trace.write(rec); });
  save_checkpoint(r.model, ctx.out("model.ckpt"), r.trace.records.size(), h.seed);
  Summary s = ctx.summary_head();
  add_trace_summary(s, r.trace);
  const double final_p = r.trace.records.empty() ? r.trace.initial_precision : r.trace.records.back().precision;
  s.add("precision_reported", ctx.report(final_p));
  write_text_file(ctx.out("summary.txt"), s.text());
  ctx.emit_table({{"CEMSSL", ctx.report(final_p)}});
  return kExitOk;
}

inline int pipeline_cvae(const RunContext& ctx) {
  const CVAEModel m = pretrain_cvae(ctx.arm, ctx.cfg.cvae, ctx.cfg.seed);
  write_cvae_trace(ctx, m);
  const double p = make_eval_set(ctx.arm, ctx.cfg.hyper).precision_of(m.decoder, ctx.arm);
  save_checkpoint(m.decoder, ctx.out("model.ckpt"), m.mse_history.size(), ctx.cfg.seed);
  save_checkpoint(Checkpoint{"network", m.decoder.arm_id, 0, m.encoder, m.mse_history.size(), ctx.cfg.seed},
                  ctx.out("encoder.ckpt"));
  Summary s = ctx.summary_head();
  add_cvae_summary(s, m);
  s.add("final_precision", p).add("precision_reported", ctx.report(p));
  write_text_file(ctx.out("summary.txt"), s.text());
  ctx.emit_table({{"CVAE", ctx.report(p)}});
  return kExitOk;
}

inline int pipeline_cvae_then_cemssl(const RunContext& ctx) {
  const Hyperparams& h = ctx.cfg.hyper;
  const CVAEModel m = pretrain_cvae(ctx.arm, ctx.cfg.cvae, ctx.cfg.seed);
  write_cvae_trace(ctx, m);
  save_checkpoint(m.decoder, ctx.out("pretrained.ckpt"), m.mse_history.size(), ctx.cfg.seed);
  TraceWriter trace(ctx.out("trace.csv"), ctx.cfg.record_wall_time);
  const FinetuneResult f = finetune(m.decoder, ctx.arm, h, [&](const IterationRecord& rec) { trace.write(rec); });
  save_checkpoint(f.model, ctx.out("model.ckpt"), f.trace.records.size(), h.seed);
  write_text_file(ctx.out("comparison.json"),
                  comparison_json({f.precision_before, f.precision_after, f.improvement_ratio, f.joint_drift,
                                   "arm units"}));
  Summary s = ctx.summary_head();
  add_cvae_summary(s, m);
  add_trace_summary(s, f.trace);
  s.add("precision_before", f.precision_before).add("precision_after", f.precision_after);
  s.add("improvement_ratio", f.improvement_ratio).add("joint_drift", f.joint_drift);
  write_text_file(ctx.out("summary.txt"), s.text());
  ctx.emit_table({{"CVAE", ctx.report(f.precision_before)}, {"CVAE+CEMSSL", ctx.report(f.precision_after)}});
  return kExitOk;
}

inline int pipeline_ensemble(const RunContext& ctx) {
  const Hyperparams& h = ctx.cfg.hyper;
  std::vector<std::unique_ptr<TraceWriter>> traces;
  for (std::size_t i = 0; i < h.ensemble_size; ++i)
    traces.push_back(std::make_unique<TraceWriter>(ctx.out("trace_member_" + std::to_string(i) + ".csv"),
                                                   ctx.cfg.record_wall_time));
  const Ensemble ens = ensemble_train(ctx.arm, h, true,
                                      [&](std::size_t i, const IterationRecord& rec) { traces[i]->write(rec); });
  const EvalSet eval = make_eval_set(ctx.arm, h);
  Summary s = ctx.summary_head();
  s.add("ensemble_size", ens.members.size());
  std::vector<MethodResult> rows;
  for (std::size_t i = 0; i < ens.members.size(); ++i) {
    save_checkpoint(ens.members[i], ctx.out("member_" + std::to_string(i) + ".ckpt"),
                    ens.traces[i].records.size(), ens.member_seeds[i]);
    const double p = eval.precision_of(ens.members[i], ctx.arm);
    s.add("member_" + std::to_string(i) + "_seed", std::to_string(ens.member_seeds[i]));
    s.add("member_" + std::to_string(i) + "_precision", p);
  }
  Rng rng(eval.latent_seed);
  const double ens_p = precision(ensemble_generator(ens, ctx.arm), ctx.arm, eval.targets, eval.latents_per_target, rng);
  s.add("ensemble_precision", ens_p).add("precision_reported", ctx.report(ens_p));

  if (ctx.cfg.coverage_targets > 0) {
    const Matrix targets = sample_interior_targets(ctx.arm, ctx.cfg.coverage_targets, derive_seed(h.seed, "coverage-targets"));
    const CoverageComparison cov =
        compare_coverage(ens, ctx.arm, targets, ctx.cfg.coverage_samples, derive_seed(h.seed, "coverage"));
    std::string csv = "target,x,y,z,oracle_branches,ensemble_fraction";
    for (std::size_t m = 0; m < ens.members.size(); ++m) csv += ",member_" + std::to_string(m) + "_fraction";
    csv += "\n";
    for (std::size_t t = 0; t < cov.ensemble.size(); ++t) {
      const auto& rep = cov.ensemble[t];
      csv += std::to_string(t);
      for (std::size_t k = 0; k < 3; ++k) csv += "," + (k < rep.target.size() ? format_real(rep.target[k]) : "");
      csv += "," + std::to_string(rep.oracle_branches) + "," + format_real(rep.fraction);
      for (const auto& member : cov.members) csv += "," + format_real(member[t].fraction);
      csv += "\n";
    }
    write_text_file(ctx.out("coverage.csv"), csv);
    s.add("coverage_targets", cov.ensemble.size());
    s.add("coverage_ensemble_mean", cov.ensemble_mean);
    s.add("coverage_best_member", cov.best_member);
    s.add("coverage_best_member_mean", cov.best_member_mean);
  }
  write_text_file(ctx.out("summary.txt"), s.text());
  ctx.emit_table({{"CEMSSL", ctx.report(ens_p)}});
  return kExitOk;
}

inline int pipeline_evaluate(const RunContext& ctx, const std::filesystem::path& checkpoint) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const InverseModel m = load_inverse_model(checkpoint, ctx.arm);
  Hyperparams h = ctx.cfg.hyper;
  const double p = make_eval_set(ctx.arm, h).precision_of(m, ctx.arm);
  Summary s = ctx.summary_head();
  s.add("checkpoint", checkpoint.string());
  s.add("checkpoint_iterations", ck.iterations);
  s.add("precision", p).add("precision_reported", ctx.report(p));
  write_text_file(ctx.out("evaluation.txt"), s.text());
  ctx.log << "precision = " << format_real(ctx.report(p)) << " " << ctx.arm.report_unit() << "\n";
  return kExitOk;
}

}  // namespace detail

// Runs one validated experiment; errors propagate as exceptions.
inline int run_experiment(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  cfg.validate();
  const ArmModel arm = resolve_arm(cfg);
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.output_dir.string() + "': " + ec.message());
  // Evaluation usually shares the training run's directory; keep its files intact.
  const bool eval = cfg.pipeline == "evaluate";
  write_text_file(cfg.output_dir / (eval ? "evaluate.resolved.ini" : "config.resolved.ini"), resolved_config_text(cfg));
  const detail::RunContext ctx{cfg, arm, log};
  if (cfg.pipeline == "cemssl") return detail::pipeline_cemssl(ctx);
  if (cfg.pipeline == "cvae") return detail::pipeline_cvae(ctx);
  if (cfg.pipeline == "cvae_then_cemssl") return detail::pipeline_cvae_then_cemssl(ctx);
  if (cfg.pipeline == "ensemble") return detail::pipeline_ensemble(ctx);
  return detail::pipeline_evaluate(ctx, cfg.checkpoint);
}

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  return kExitTraining;
}

// Loads, validates and runs a config file, mapping failures to exit codes.
// `checkpoint_override` turns any config into an evaluate run.
inline int run_config_file(const std::filesystem::path& config_path, std::ostream& log, std::ostream& err,
                           const std::filesystem::path& checkpoint_override = {}) {
  ExperimentConfig cfg;
  try {
    cfg = load_experiment(config_path);
    if (!checkpoint_override.empty()) {
      cfg.pipeline = "evaluate";
      cfg.checkpoint = std::filesystem::absolute(checkpoint_override);
    }
    cfg.validate();
    (void)resolve_arm(cfg);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const Error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    return run_experiment(cfg, log);
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    err << (code == kExitTraining ? "training failed: " : code == kExitIo ? "io error: " : "config error: ")
        << e.what() << "\n";
    return code;
  }
}

inline std::string describe_checkpoint(const Checkpoint& ck) {
  std::string s = "format_version = " + std::to_string(kCheckpointVersion) + "\n";
  s += "kind = " + ck.kind + "\n";
  s += "arm = " + (ck.arm_id.empty() ? std::string("-") : ck.arm_id) + "\n";
  s += "zdim = " + std::to_string(ck.zdim) + "\n";
  s += "layer_sizes =";
  for (std::size_t v : ck.params.layer_sizes) s += " " + std::to_string(v);
  s += "\nhidden_activation = " + std::string(to_string(ck.params.hidden_activation)) + "\n";
  s += "output_activation = " + std::string(to_string(ck.params.output_activation)) + "\n";
  s += "parameters = " + std::to_string(ck.params.parameter_count()) + "\n";
  s += "iterations = " + std::to_string(ck.iterations) + "\n";
  s += "seed = " + std::to_string(ck.seed) + "\n";
  return s;
}

}  // namespace cemssl
