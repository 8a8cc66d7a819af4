#pragma once

// Experiment configuration and arm-description files.
//
// Experiment file sections and keys (every key optional unless noted):
//
//   [experiment]  pipeline (required: cemssl | cvae | cvae_then_cemssl |
//                 ensemble | evaluate), arm, arm_file, output_dir, seed,
//                 record_wall_time, checkpoint
//   [cemssl]      iterations, epochs, inference_batch, training_batch,
//                 threads, learning_rate, zdim, ensemble_size, n_targets,
//                 inference_batches, hidden_layers, early_stop_precision
//   [generative]  beta, n_labeled, epochs, batch_size, encoder_hidden
//   [evaluation]  eval_targets, latents_per_target, coverage_targets,
//                 coverage_samples
//
// Arm files hold unsectioned keys: kind (planar | dh), name, link_lengths
// or dh_rows ("a alpha d offset; ..."), joint_limits ("lo hi; ..."),
// branch_joints, report_scale, report_unit. Reals accept pi factors.

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cemssl/cemssl.hpp"
#include "cemssl/errors.hpp"
#include "cemssl/generative.hpp"
#include "cemssl/ini.hpp"
#include "cemssl/kinematics.hpp"

namespace cemssl {

inline constexpr const char* kOutputRootEnv = "CEMSSL_OUTPUT_ROOT";

inline const std::vector<std::string>& pipeline_names() {
  static const std::vector<std::string> names{"cemssl", "cvae", "cvae_then_cemssl", "ensemble", "evaluate"};
  return names;
}

struct ExperimentConfig {
  std::string pipeline;
  std::string arm = "planar3";
  std::filesystem::path arm_file;  // overrides `arm` when set
  std::filesystem::path output_dir = "out";
  std::filesystem::path checkpoint;  // evaluate pipeline
  std::uint64_t seed = 1;
  bool record_wall_time = false;
  Hyperparams hyper;
  CVAEConfig cvae;
  std::size_t coverage_targets = 0;  // ensemble pipeline, planar arms only
  std::size_t coverage_samples = 200;

  void validate() const {
    bool known = false;
    for (const auto& n : pipeline_names()) known = known || n == pipeline;
    if (!known) throw ConfigError("[experiment] pipeline '" + pipeline + "' is not one of cemssl, cvae, "
                                  "cvae_then_cemssl, ensemble, evaluate");
    if (pipeline == "evaluate" && checkpoint.empty())
      throw ConfigError("[experiment] checkpoint is required for pipeline 'evaluate'");
    try {
      hyper.validate();
    } catch (const UsageError& err) {
      throw ConfigError(std::string("[cemssl] ") + err.what());
    }
    if (cvae.n_labeled == 0 || cvae.epochs == 0 || cvae.batch_size == 0)
      throw ConfigError("[generative] n_labeled, epochs and batch_size must be >= 1");
    if (!(cvae.beta > 0.0)) throw ConfigError("[generative] beta must be > 0");
    if (coverage_samples == 0) throw ConfigError("[evaluation] coverage_samples must be >= 1");
  }
};

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_counts(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s;
}

// Binds each recognised key to a setter; anything else is an error.
class KeyTable {
 public:
  using Setter = std::function<void(const std::string&)>;

  void add(const std::string& section, const std::string& key, Setter setter) {
    setters_[section][key] = std::move(setter);
  }

  void apply(const ini::Document& doc) const {
    for (const auto& [section, keys] : doc.sections) {
      auto s = setters_.find(section);
      if (s == setters_.end()) {
        if (keys.empty() && section.empty()) continue;
        const int line = section.empty() ? keys.begin()->second.line : doc.section_lines.at(section);
        throw ConfigError(doc.where(line) + ": " +
                          (section.empty() ? "key '" + keys.begin()->first + "' outside any section"
                                           : "unknown section [" + section + "]"));
      }
      for (const auto& [key, entry] : keys) {
        auto k = s->second.find(key);
        if (k == s->second.end())
          throw ConfigError(doc.where(entry.line) + ": unknown key '" + key + "' in [" + section + "]");
        try {
          k->second(entry.value);
        } catch (const Error& err) {
          throw ConfigError(doc.where(entry.line) + ": [" + section + "] " + key + ": " + err.what());
        }
      }
    }
  }

 private:
  std::map<std::string, std::map<std::string, Setter>> setters_;
};

inline std::size_t to_count(const std::string& v) {
  const auto c = ini::parse_counts(v);
  if (c.size() != 1) throw ConfigError("expected one non-negative integer, got '" + v + "'");
  return c.front();
}

inline std::uint64_t to_u64(const std::string& v) {
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || v[0] == '-') throw ConfigError("expected an unsigned integer, got '" + v + "'");
  return n;
}

inline double to_real(const std::string& v) { return ini::parse_real(v); }

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

}  // namespace detail

// Relative paths in the file are taken relative to the file's directory;
// a relative output_dir goes under $CEMSSL_OUTPUT_ROOT instead when that is set.
inline ExperimentConfig parse_experiment(const ini::Document& doc, const std::filesystem::path& base_dir) {
  using namespace detail;
  ExperimentConfig c;
  KeyTable t;
  bool has_pipeline = false;
  t.add("experiment", "pipeline", [&](const std::string& v) { c.pipeline = v; has_pipeline = true; });
  t.add("experiment", "arm", [&](const std::string& v) { c.arm = v; });
  t.add("experiment", "arm_file", [&](const std::string& v) { c.arm_file = v; });
  t.add("experiment", "output_dir", [&](const std::string& v) { c.output_dir = v; });
  t.add("experiment", "checkpoint", [&](const std::string& v) { c.checkpoint = v; });
  t.add("experiment", "seed", [&](const std::string& v) { c.seed = to_u64(v); });
  t.add("experiment", "record_wall_time", [&](const std::string& v) { c.record_wall_time = to_bool(v); });
  auto& h = c.hyper;
  t.add("cemssl", "iterations", [&](const std::string& v) { h.iterations = to_count(v); });
  t.add("cemssl", "epochs", [&](const std::string& v) { h.epochs = to_count(v); });
  t.add("cemssl", "inference_batch", [&](const std::string& v) { h.inference_batch = to_count(v); });
  t.add("cemssl", "training_batch", [&](const std::string& v) { h.training_batch = to_count(v); });
  t.add("cemssl", "threads", [&](const std::string& v) { h.threads = to_count(v); });
  t.add("cemssl", "learning_rate", [&](const std::string& v) { h.learning_rate = to_real(v); });
  t.add("cemssl", "zdim", [&](const std::string& v) { h.zdim = to_count(v); });
  t.add("cemssl", "ensemble_size", [&](const std::string& v) { h.ensemble_size = to_count(v); });
  t.add("cemssl", "n_targets", [&](const std::string& v) { h.n_targets = to_count(v); });
  t.add("cemssl", "inference_batches", [&](const std::string& v) { h.inference_batches = to_count(v); });
  t.add("cemssl", "hidden_layers", [&](const std::string& v) { h.hidden_layers = ini::parse_counts(v); });
  t.add("cemssl", "early_stop_precision", [&](const std::string& v) { h.early_stop_precision = to_real(v); });
  auto& g = c.cvae;
  t.add("generative", "beta", [&](const std::string& v) { g.beta = to_real(v); });
  t.add("generative", "n_labeled", [&](const std::string& v) { g.n_labeled = to_count(v); });
  t.add("generative", "epochs", [&](const std::string& v) { g.epochs = to_count(v); });
  t.add("generative", "batch_size", [&](const std::string& v) { g.batch_size = to_count(v); });
  t.add("generative", "encoder_hidden", [&](const std::string& v) { g.encoder_hidden = ini::parse_counts(v); });
  t.add("evaluation", "eval_targets", [&](const std::string& v) { h.eval_targets = to_count(v); });
  t.add("evaluation", "latents_per_target", [&](const std::string& v) { h.eval_latents = to_count(v); });
  t.add("evaluation", "coverage_targets", [&](const std::string& v) { c.coverage_targets = to_count(v); });
  t.add("evaluation", "coverage_samples", [&](const std::string& v) { c.coverage_samples = to_count(v); });
  t.apply(doc);
  if (!has_pipeline) throw ConfigError(doc.source + ": [experiment] pipeline is required");

  c.hyper.seed = c.seed;
  // The CVAE decoder is the inverse model that CEMSSL later fine-tunes.
  c.cvae.zdim = c.hyper.zdim;
  c.cvae.decoder_hidden = c.hyper.hidden_layers;
  c.cvae.learning_rate = c.hyper.learning_rate;

  auto resolve = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = std::filesystem::absolute(base_dir / p).lexically_normal();
  };
  resolve(c.arm_file);
  resolve(c.checkpoint);
  if (c.output_dir.is_relative()) {
    const char* root = std::getenv(kOutputRootEnv);
    const std::filesystem::path base = (root && *root) ? std::filesystem::path(root) : base_dir;
    c.output_dir = std::filesystem::absolute(base / c.output_dir).lexically_normal();
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  const ini::Document doc = ini::parse_file(path.string());
  return parse_experiment(doc, std::filesystem::absolute(path).parent_path());
}

inline ExperimentConfig parse_experiment_string(const std::string& text,
                                                const std::filesystem::path& base_dir = std::filesystem::current_path()) {
  return parse_experiment(ini::parse_string(text), base_dir);
}

// Every key with its effective value; loading this text reproduces `c`.
inline std::string resolved_config_text(const ExperimentConfig& c) {
  using detail::fmt_counts;
  using detail::fmt_real;
  const auto& h = c.hyper;
  std::string s = "# fully resolved configuration\n[experiment]\n";
  s += "pipeline = " + c.pipeline + "\n";
  if (c.arm_file.empty()) s += "arm = " + c.arm + "\n";
  else s += "arm_file = " + c.arm_file.string() + "\n";
  s += "output_dir = " + c.output_dir.string() + "\n";
  if (!c.checkpoint.empty()) s += "checkpoint = " + c.checkpoint.string() + "\n";
  s += "seed = " + std::to_string(c.seed) + "\n";
  s += std::string("record_wall_time = ") + (c.record_wall_time ? "true" : "false") + "\n";
  s += "\n[cemssl]\n";
  s += "iterations = " + std::to_string(h.iterations) + "\n";
  s += "epochs = " + std::to_string(h.epochs) + "\n";
  s += "inference_batch = " + std::to_string(h.inference_batch) + "\n";
  s += "training_batch = " + std::to_string(h.training_batch) + "\n";
  s += "threads = " + std::to_string(h.threads) + "\n";
  s += "learning_rate = " + fmt_real(h.learning_rate) + "\n";
  s += "zdim = " + std::to_string(h.zdim) + "\n";
  s += "ensemble_size = " + std::to_string(h.ensemble_size) + "\n";
  s += "n_targets = " + std::to_string(h.n_targets) + "\n";
  s += "inference_batches = " + std::to_string(h.inference_batches) + "\n";
  s += "hidden_layers = " + fmt_counts(h.hidden_layers) + "\n";
  s += "early_stop_precision = " + fmt_real(h.early_stop_precision) + "\n";
  s += "\n[generative]\n";
  s += "beta = " + fmt_real(c.cvae.beta) + "\n";
  s += "n_labeled = " + std::to_string(c.cvae.n_labeled) + "\n";
  s += "epochs = " + std::to_string(c.cvae.epochs) + "\n";
  s += "batch_size = " + std::to_string(c.cvae.batch_size) + "\n";
  s += "encoder_hidden = " + fmt_counts(c.cvae.encoder_hidden) + "\n";
  s += "\n[evaluation]\n";
  s += "eval_targets = " + std::to_string(h.eval_targets) + "\n";
  s += "latents_per_target = " + std::to_string(h.eval_latents) + "\n";
  s += "coverage_targets = " + std::to_string(c.coverage_targets) + "\n";
  s += "coverage_samples = " + std::to_string(c.coverage_samples) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Arm-description files

inline ArmModel parse_arm(const ini::Document& doc) {
  using namespace detail;
  std::string kind, name, unit = "units";
  std::optional<std::vector<double>> links;
  std::optional<std::vector<DHRow>> rows;
  std::vector<JointLimit> limits;
  std::vector<std::size_t> branch;
  double scale = 1.0;
  KeyTable t;
  t.add("", "kind", [&](const std::string& v) {
    if (v != "planar" && v != "dh") throw ConfigError("kind must be 'planar' or 'dh'");
    kind = v;
  });
  t.add("", "name", [&](const std::string& v) { name = v; });
  t.add("", "link_lengths", [&](const std::string& v) { links = ini::parse_reals(v); });
  t.add("", "dh_rows", [&](const std::string& v) {
    rows.emplace();
    for (const auto& row : ini::split(v, ';')) {
      const auto r = ini::parse_reals(row);
      if (r.size() != 4) throw ConfigError("each dh row needs 4 numbers (a alpha d offset), got '" + row + "'");
      rows->push_back(DHRow{r[0], r[1], r[2], r[3]});
    }
  });
  t.add("", "joint_limits", [&](const std::string& v) {
    for (const auto& pair : ini::split(v, ';')) {
      const auto r = ini::parse_reals(pair);
      if (r.size() != 2) throw ConfigError("each joint limit needs 2 numbers (lo hi), got '" + pair + "'");
      limits.push_back(JointLimit{r[0], r[1]});
    }
  });
  t.add("", "branch_joints", [&](const std::string& v) { branch = ini::parse_counts(v); });
  t.add("", "report_scale", [&](const std::string& v) { scale = to_real(v); });
  t.add("", "report_unit", [&](const std::string& v) { unit = v; });
  t.apply(doc);

  try {
    if (kind.empty()) throw ConfigError("kind is required");
    ArmModel arm = [&] {
      if (kind == "planar") {
        if (!links || rows) throw ConfigError("planar arms need link_lengths and no dh_rows");
        if (!branch.empty()) throw ConfigError("planar arms label branches by joints 2..n; drop branch_joints");
        return ArmModel::planar(*links, limits, name);
      }
      if (!rows || links) throw ConfigError("dh arms need dh_rows and no link_lengths");
      return ArmModel::dh_chain(*rows, limits, branch, name.empty() ? "dh" + std::to_string(rows->size()) : name);
    }();
    if (!(scale > 0.0)) throw ConfigError("report_scale must be > 0");
    arm.set_report_units(scale, unit);
    return arm;
  } catch (const UsageError& err) {
    throw ConfigError(doc.source + ": " + err.what());
  } catch (const ConfigError& err) {
    throw ConfigError(doc.source + ": " + err.what());
  }
}

inline ArmModel load_arm_file(const std::filesystem::path& path) {
  return parse_arm(ini::parse_file(path.string()));
}

inline ArmModel resolve_arm(const ExperimentConfig& c) {
  if (!c.arm_file.empty()) return load_arm_file(c.arm_file);
  try {
    return builtin_arm(c.arm);
  } catch (const UsageError& err) {
    throw ConfigError(std::string("[experiment] arm: ") + err.what());
  }
}

}  // namespace cemssl
