#pragma once

// Text checkpoint format, version 1:
//
//   cemssl-checkpoint 1
//   kind inverse_model | network
//   arm <arm identity>
//   zdim <n>
//   layer_sizes <n0> <n1> ...
//   hidden_activation relu
//   output_activation sigmoid
//   iterations <completed iterations>
//   seed <u64>
//   parameters <count>
//   <one hexfloat per line, canonical flat order>
//   end
//
// Hexfloats make the payload exact; the header is checked field by field
// before any parameter is read.

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cemssl/errors.hpp"
#include "cemssl/generative.hpp"
#include "cemssl/kinematics.hpp"
#include "cemssl/nn.hpp"

namespace cemssl {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind = "inverse_model";
  std::string arm_id;
  std::size_t zdim = 0;
  NetworkParams params;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;

  InverseModel inverse_model() const {
    if (kind != "inverse_model") throw CheckpointError("checkpoint holds a '" + kind + "', not an inverse model");
    return InverseModel{params, zdim, arm_id};
  }
};

inline Checkpoint make_checkpoint(const InverseModel& m, std::size_t iterations, std::uint64_t seed) {
  return Checkpoint{"inverse_model", m.arm_id, m.zdim, m.params, iterations, seed};
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  ck.params.validate();
  std::string out = "cemssl-checkpoint " + std::to_string(kCheckpointVersion) + "\n";
  out += "kind " + ck.kind + "\n";
  out += "arm " + (ck.arm_id.empty() ? std::string("-") : ck.arm_id) + "\n";
  out += "zdim " + std::to_string(ck.zdim) + "\n";
  out += "layer_sizes";
  for (std::size_t s : ck.params.layer_sizes) out += " " + std::to_string(s);
  out += "\nhidden_activation " + std::string(to_string(ck.params.hidden_activation)) + "\n";
  out += "output_activation " + std::string(to_string(ck.params.output_activation)) + "\n";
  out += "iterations " + std::to_string(ck.iterations) + "\n";
  out += "seed " + std::to_string(ck.seed) + "\n";
  out += "parameters " + std::to_string(ck.params.parameter_count()) + "\n";
  char buf[64];
  ck.params.for_each_parameter([&](double v) {
    std::snprintf(buf, sizeof buf, "%a\n", v);
    out += buf;
  });
  out += "end\n";
  return out;
}

namespace detail {

struct CheckpointReader {
  std::istream& in;
  int line = 0;

  std::string next(const char* what) {
    std::string s;
    if (!std::getline(in, s)) throw CheckpointError(std::string("checkpoint truncated: missing ") + what);
    ++line;
    return s;
  }

  std::string field(const std::string& key) {
    const std::string s = next(key.c_str());
    if (s.rfind(key + " ", 0) != 0)
      throw CheckpointError("checkpoint line " + std::to_string(line) + ": expected field '" + key + "'");
    return s.substr(key.size() + 1);
  }

  std::uint64_t count(const std::string& key) {
    const std::string v = field(key);
    char* end = nullptr;
    errno = 0;
    const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || errno == ERANGE || v[0] == '-')
      throw CheckpointError("checkpoint field '" + key + "' is not a count: '" + v + "'");
    return n;
  }
};

}  // namespace detail

inline Checkpoint parse_checkpoint(std::istream& in) {
  detail::CheckpointReader r{in};
  const std::string magic = r.next("version line");
  const std::string prefix = "cemssl-checkpoint ";
  if (magic.rfind(prefix, 0) != 0) throw CheckpointError("not a checkpoint file (bad magic line)");
  if (magic.substr(prefix.size()) != std::to_string(kCheckpointVersion))
    throw CheckpointError("checkpoint version '" + magic.substr(prefix.size()) + "' is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");

  Checkpoint ck;
  ck.kind = r.field("kind");
  if (ck.kind != "inverse_model" && ck.kind != "network")
    throw CheckpointError("checkpoint field 'kind' has unknown value '" + ck.kind + "'");
  ck.arm_id = r.field("arm");
  if (ck.arm_id == "-") ck.arm_id.clear();
  ck.zdim = r.count("zdim");

  std::istringstream sizes(r.field("layer_sizes"));
  std::string tok;
  while (sizes >> tok) {
    char* end = nullptr;
    const unsigned long long n = std::strtoull(tok.c_str(), &end, 10);
    if (*end != '\0' || n == 0 || tok[0] == '-')
      throw CheckpointError("checkpoint field 'layer_sizes' has bad entry '" + tok + "'");
    ck.params.layer_sizes.push_back(n);
  }
  if (ck.params.layer_sizes.size() < 2) throw CheckpointError("checkpoint field 'layer_sizes' needs >= 2 entries");
  try {
    ck.params.hidden_activation = activation_from_string(r.field("hidden_activation"));
    ck.params.output_activation = activation_from_string(r.field("output_activation"));
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& err) {
    throw CheckpointError(std::string("checkpoint activation field: ") + err.what());
  }
  ck.iterations = r.count("iterations");
  ck.seed = r.count("seed");
  const std::uint64_t declared = r.count("parameters");

  if (ck.kind == "inverse_model" && ck.zdim >= ck.params.layer_sizes.front())
    throw CheckpointError("checkpoint field 'zdim' is not smaller than the input width");
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i + 1 < ck.params.layer_sizes.size(); ++i)
    expected += static_cast<std::uint64_t>(ck.params.layer_sizes[i] + 1) * ck.params.layer_sizes[i + 1];
  if (declared != expected)
    throw CheckpointError("checkpoint field 'parameters' is " + std::to_string(declared) +
                          " but layer_sizes implies " + std::to_string(expected));

  for (std::size_t i = 0; i + 1 < ck.params.layer_sizes.size(); ++i) {
    const auto in_dim = static_cast<Eigen::Index>(ck.params.layer_sizes[i]);
    const auto out_dim = static_cast<Eigen::Index>(ck.params.layer_sizes[i + 1]);
    ck.params.weights.emplace_back(out_dim, in_dim);
    ck.params.biases.emplace_back(out_dim);
  }
  std::size_t index = 0;
  ck.params.for_each_parameter([&](double& v) {
    const std::string s = r.next("parameter payload");
    char* end = nullptr;
    v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0')
      throw CheckpointError("checkpoint parameter " + std::to_string(index) + " (" +
                            ck.params.describe_parameter(index) + ") is corrupt: '" + s + "'");
    ++index;
  });
  if (r.next("end marker") != "end") throw CheckpointError("checkpoint has trailing data where 'end' was expected");
  ck.params.validate();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string text = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

inline void save_checkpoint(const InverseModel& m, const std::filesystem::path& path,
                            std::size_t iterations = 0, std::uint64_t seed = 0) {
  save_checkpoint(make_checkpoint(m, iterations, seed), path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  try {
    return parse_checkpoint(in);
  } catch (const CheckpointError& err) {
    throw CheckpointError(path.string() + ": " + err.what());
  }
}

// Loads an inverse model and insists it belongs to `arm`.
inline InverseModel load_inverse_model(const std::filesystem::path& path, const ArmModel& arm) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.arm_id != arm.identity())
    throw CheckpointError(path.string() + ": arm identity mismatch: checkpoint is for '" + ck.arm_id +
                          "', configuration uses '" + arm.identity() + "'");
  InverseModel m = ck.inverse_model();
  m.check_against(arm);
  return m;
}

}  // namespace cemssl
