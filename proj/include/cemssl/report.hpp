#pragma once

// Result emission: trace CSVs, structured-text summaries, the comparison
// record, and the method-versus-precision table.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cemssl/cemssl.hpp"
#include "cemssl/errors.hpp"
#include "cemssl/ini.hpp"

namespace cemssl {

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline constexpr const char* kTraceHeader = "iteration,loss,precision,wall_ms";

// Appends one flushed row per iteration so an aborted run keeps its trace.
// Wall time is only recorded on request; otherwise the column holds 0 and
// the file is reproducible byte for byte.
class TraceWriter {
 public:
  TraceWriter(const std::filesystem::path& path, bool record_wall_time)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc), wall_(record_wall_time) {
    if (!out_) throw IoError("cannot write trace '" + path.string() + "'");
    out_ << kTraceHeader << '\n';
    out_.flush();
  }

  void write(const IterationRecord& r) {
    out_ << r.iteration << ',' << format_real(r.mean_loss) << ',' << format_real(r.precision) << ','
         << (wall_ ? format_real(r.wall_ms) : std::string("0")) << '\n';
    out_.flush();
    if (!out_) throw IoError("failed writing trace '" + path_.string() + "'");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  bool wall_;
};

inline std::vector<IterationRecord> parse_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kTraceHeader) throw IoError("trace CSV has an unexpected header");
  std::vector<IterationRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = ini::split(line, ',');
    if (f.size() != 4) throw IoError("trace CSV row '" + line + "' does not have 4 fields");
    IterationRecord r;
    r.iteration = static_cast<std::size_t>(std::stoull(f[0]));
    r.mean_loss = std::stod(f[1]);
    r.precision = std::stod(f[2]);
    r.wall_ms = std::stod(f[3]);
    out.push_back(r);
  }
  return out;
}

// Ordered "key = value" lines under one [summary] header.
class Summary {
 public:
  Summary& add(const std::string& key, const std::string& value) {
    rows_.emplace_back(key, value);
    return *this;
  }
  Summary& add(const std::string& key, double value) { return add(key, format_real(value)); }
  Summary& add(const std::string& key, std::size_t value) { return add(key, std::to_string(value)); }

  std::string text() const {
    std::string s = "[summary]\n";
    for (const auto& [k, v] : rows_) s += k + " = " + v + "\n";
    return s;
  }

 private:
  std::vector<std::pair<std::string, std::string>> rows_;
};

struct Comparison {
  double precision_before = 0.0;
  double precision_after = 0.0;
  double improvement_ratio = 1.0;
  double joint_drift = 0.0;
  std::string unit;
};

inline std::string comparison_json(const Comparison& c) {
  nlohmann::ordered_json j;
  j["precision_before"] = c.precision_before;
  j["precision_after"] = c.precision_after;
  j["improvement_ratio"] = c.improvement_ratio;
  j["joint_drift"] = c.joint_drift;
  j["unit"] = c.unit;
  return j.dump(2) + "\n";
}

inline Comparison parse_comparison_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    return Comparison{j.at("precision_before").get<double>(), j.at("precision_after").get<double>(),
                      j.at("improvement_ratio").get<double>(), j.at("joint_drift").get<double>(),
                      j.at("unit").get<std::string>()};
  } catch (const nlohmann::json::exception& err) {
    throw IoError(std::string("bad comparison record: ") + err.what());
  }
}

// ---------------------------------------------------------------------------
// Method table

struct MethodResult {
  std::string method;
  double precision = 0.0;
};

// Published full-scale UR3 numbers in millimetres. Display only.
inline std::optional<double> paper_reference_mm(const std::string& method) {
  static const std::map<std::string, double> ref{
      {"CVAE", 11.45}, {"CGAN", 4.78}, {"CINN", 1.73}, {"CEMSSL", 0.02}};
  auto it = ref.find(method);
  if (it == ref.end()) return std::nullopt;
  return it->second;
}

struct Table2 {
  std::string text;
  std::string csv;
};

struct Table2Row {
  std::string method;
  double measured = 0.0;
  std::string unit;
  std::optional<double> paper_mm;
};

inline constexpr const char* kTable2Header = "method,measured,unit,paper_full_scale_mm";

inline Table2 emit_table2(const std::vector<MethodResult>& results, const std::string& unit) {
  if (results.empty()) throw UsageError("emit_table2 needs at least one method result");
  auto paper_cell = [](const std::string& m) {
    const auto v = paper_reference_mm(m);
    if (!v) return std::string("-");
    std::ostringstream s;
    s << *v;
    return s.str();
  };
  const std::string h_method = "method", h_measured = "measured (" + unit + ")",
                    h_paper = "paper (full scale, mm)";
  std::size_t w_method = h_method.size(), w_measured = h_measured.size();
  std::vector<std::string> measured;
  for (const auto& r : results) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", r.precision);
    measured.emplace_back(buf);
    w_method = std::max(w_method, r.method.size());
    w_measured = std::max(w_measured, measured.back().size());
  }
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(w, s.size()), ' ');
    return s;
  };
  Table2 t;
  t.text = pad(h_method, w_method) + "  " + pad(h_measured, w_measured) + "  " + h_paper + "\n";
  t.csv = std::string(kTable2Header) + "\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    t.text += pad(r.method, w_method) + "  " + pad(measured[i], w_measured) + "  " + paper_cell(r.method) + "\n";
    const auto ref = paper_reference_mm(r.method);
    t.csv += r.method + "," + format_real(r.precision) + "," + unit + "," + (ref ? format_real(*ref) : "") + "\n";
  }
  return t;
}

inline std::vector<Table2Row> parse_table2_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kTable2Header) throw IoError("table CSV has an unexpected header");
  std::vector<Table2Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() == 3) f.emplace_back();
    if (f.size() != 4) throw IoError("table CSV row '" + line + "' does not have 4 fields");
    Table2Row r{f[0], std::stod(f[1]), f[2], std::nullopt};
    if (!f[3].empty()) r.paper_mm = std::stod(f[3]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace cemssl
