#pragma once

// Minimal sectioned key = value reader that remembers line numbers, so
// configuration errors can point at the offending line.

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "cemssl/errors.hpp"

namespace cemssl::ini {

struct Entry {
  std::string value;
  int line = 0;
};

struct Document {
  std::string source;  // file name used in diagnostics
  // section -> key -> entry; keys outside any section live under "".
  std::map<std::string, std::map<std::string, Entry>> sections;
  std::map<std::string, int> section_lines;

  const Entry* find(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    if (s == sections.end()) return nullptr;
    auto k = s->second.find(key);
    return k == s->second.end() ? nullptr : &k->second;
  }

  std::string where(int line) const { return source + ":" + std::to_string(line); }
};

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline Document parse(std::istream& in, const std::string& source) {
  Document doc;
  doc.source = source;
  std::string raw, section;
  int line = 0;
  doc.sections[""];
  while (std::getline(in, raw)) {
    ++line;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string text = trim(raw);
    if (text.empty()) continue;
    if (text.front() == '[') {
      if (text.back() != ']') throw ConfigError(doc.where(line) + ": malformed section header");
      section = trim(text.substr(1, text.size() - 2));
      if (doc.section_lines.count(section))
        throw ConfigError(doc.where(line) + ": duplicate section [" + section + "]");
      doc.section_lines[section] = line;
      doc.sections[section];
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(doc.where(line) + ": expected 'key = value'");
    const std::string key = trim(text.substr(0, eq));
    if (key.empty()) throw ConfigError(doc.where(line) + ": empty key");
    auto& keys = doc.sections[section];
    if (keys.count(key)) throw ConfigError(doc.where(line) + ": duplicate key '" + key + "'");
    keys[key] = Entry{trim(text.substr(eq + 1)), line};
  }
  return doc;
}

inline Document parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return parse(in, path);
}

inline Document parse_string(const std::string& text, const std::string& source = "<string>") {
  std::istringstream in(text);
  return parse(in, source);
}

// Reals may be written with a pi factor: "pi", "-pi/2", "2*pi", "0.5pi".
inline double parse_real(const std::string& token) {
  const std::string t = trim(token);
  if (t.empty()) throw ConfigError("empty number");
  const auto pi_at = t.find("pi");
  if (pi_at == std::string::npos) {
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (end == t.c_str() || *end != '\0') throw ConfigError("'" + t + "' is not a number");
    return v;
  }
  std::string coef = trim(t.substr(0, pi_at));
  std::string rest = trim(t.substr(pi_at + 2));
  if (!coef.empty() && coef.back() == '*') coef = trim(coef.substr(0, coef.size() - 1));
  double c = 1.0;
  if (coef == "-") c = -1.0;
  else if (coef == "+" || coef.empty()) c = 1.0;
  else c = parse_real(coef);
  double d = 1.0;
  if (!rest.empty()) {
    if (rest.front() != '/') throw ConfigError("'" + t + "' is not a number");
    d = parse_real(rest.substr(1));
  }
  return c * std::numbers::pi / d;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

// Whitespace- or comma-separated reals.
inline std::vector<double> parse_reals(const std::string& s) {
  std::string norm = s;
  for (char& c : norm)
    if (c == ',') c = ' ';
  std::vector<double> out;
  std::istringstream in(norm);
  std::string tok;
  while (in >> tok) out.push_back(parse_real(tok));
  return out;
}

inline std::vector<std::size_t> parse_counts(const std::string& s) {
  std::vector<std::size_t> out;
  for (double v : parse_reals(s)) {
    if (v < 0 || v != std::floor(v)) throw ConfigError("'" + s + "' is not a list of counts");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace cemssl::ini
