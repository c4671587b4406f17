#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "streamlab/core.hpp"
#include "streamlab/hamiltonian.hpp"

namespace streamlab::lab {

/// Flat key = value store; bracket headers prefix keys with "section.".
class Config {
 public:
  static Config parse(std::istream& is, const std::string& origin = "config") {
    Config c;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw invalid(origin + ":" + std::to_string(lineno) + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw invalid(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw invalid(origin + ":" + std::to_string(lineno) + ": empty key");
      c.values_[section.empty() ? key : section + "." + key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw invalid("cannot open config file '" + path + "'");
    return parse(is, path);
  }

  /// `key` is either a full "section.key" or a bare name matching exactly one stored key.
  void override_value(const std::string& key, const std::string& value) {
    if (key.find('.') != std::string::npos || values_.count(key)) {
      values_[key] = value;
      return;
    }
    std::string hit;
    for (auto& [k, v] : values_) {
      const auto dot = k.rfind('.');
      if ((dot == std::string::npos ? k : k.substr(dot + 1)) == key) {
        if (!hit.empty()) throw invalid("flag --" + key + " is ambiguous between '" + hit + "' and '" + k + "'");
        hit = k;
      }
    }
    if (hit.empty()) throw invalid("unknown configuration key '" + key + "'");
    values_[hit] = value;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void erase(const std::string& key) { values_.erase(key); }

  std::string str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw invalid("missing configuration key '" + key + "'");
    return it->second;
  }
  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double num(const std::string& key) const { return to_double(key, str(key)); }
  double num(const std::string& key, double fallback) const { return has(key) ? num(key) : fallback; }
  long integer(const std::string& key, long fallback) const {
    if (!has(key)) return fallback;
    const double v = num(key);
    if (v != std::floor(v)) throw invalid("configuration key '" + key + "' must be an integer");
    return static_cast<long>(v);
  }
  bool flag(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw invalid("configuration key '" + key + "' must be a boolean");
  }

  /// Comma or whitespace separated numbers.
  std::vector<double> list(const std::string& key) const {
    std::string s = str(key);
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream is(s);
    std::vector<double> out;
    std::string tok;
    while (is >> tok) out.push_back(to_double(key, tok));
    if (out.empty()) throw invalid("configuration key '" + key + "' holds an empty list");
    return out;
  }

  /// Keys below "section." with the prefix removed.
  std::map<std::string, std::string> section(const std::string& name) const {
    std::map<std::string, std::string> out;
    const std::string p = name + ".";
    for (auto& [k, v] : values_)
      if (k.rfind(p, 0) == 0) out[k.substr(p.size())] = v;
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Canonical dump grouped by section, keys sorted.
  std::string render() const {
    std::ostringstream os;
    std::string current = "\x01";
    for (auto& [k, v] : values_) {
      const auto dot = k.find('.');
      const std::string sec = dot == std::string::npos ? "" : k.substr(0, dot);
      const std::string key = dot == std::string::npos ? k : k.substr(dot + 1);
      if (sec != current) {
        if (!sec.empty()) os << "[" << sec << "]\n";
        current = sec;
      }
      os << key << " = " << v << "\n";
    }
    return os.str();
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }
  static double to_double(const std::string& key, const std::string& s) {
    try {
      size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw invalid("configuration key '" + key + "' is not a number: '" + s + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> k = {"decay_scaling",   "class_membership", "abscissa_scaling",
                                             "example_cellular", "example_elliptic", "homogenization",
                                             "gcorr_smallness"};
  return k;
}

struct ExperimentSpec {
  std::string kind;
  std::string preset;
  std::map<std::string, double> params;
  std::vector<double> nus;
  std::vector<Resolution> resolutions;
  std::vector<std::uint64_t> seeds;
  std::string output;
  int jobs = 0;
  /// Everything else, for the kind-specific options.
  Config config;
};

/// Sections: [experiment] kind, output, seed(s), jobs; [flow] preset plus preset parameters;
/// [grid] n1, n2 (lists allowed); [run] nu and the per-kind options.
inline ExperimentSpec make_spec(const Config& c) {
  ExperimentSpec s;
  s.config = c;
  s.kind = c.str("experiment.kind");
  if (std::find(experiment_kinds().begin(), experiment_kinds().end(), s.kind) == experiment_kinds().end())
    throw invalid("experiment.kind: unknown experiment '" + s.kind + "'");
  s.output = c.str("experiment.output");
  s.jobs = static_cast<int>(c.integer("experiment.jobs", 0));
  if (c.has("experiment.seeds")) {
    for (double v : c.list("experiment.seeds")) s.seeds.push_back(static_cast<std::uint64_t>(v));
  } else {
    s.seeds.push_back(static_cast<std::uint64_t>(c.integer("experiment.seed", 7)));
  }
  s.preset = c.str("flow.preset", "");
  for (auto& [k, v] : c.section("flow")) {
    if (k == "preset") continue;
    s.params[k] = c.num("flow." + k);
  }
  if (c.has("run.nu")) {
    s.nus = c.list("run.nu");
    std::vector<double> sorted = s.nus;
    std::sort(sorted.begin(), sorted.end());
    for (double v : sorted)
      if (!(v > 0)) throw invalid("run.nu: values must be positive");
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw invalid("run.nu: values must be distinct");
  }
  if (c.has("grid.n1")) {
    const auto n1 = c.list("grid.n1");
    const auto n2 = c.has("grid.n2") ? c.list("grid.n2") : n1;
    if (n1.size() != n2.size()) throw invalid("grid.n2: list length differs from grid.n1");
    for (size_t i = 0; i < n1.size(); ++i) s.resolutions.push_back({static_cast<int>(n1[i]), static_cast<int>(n2[i])});
  }
  const bool needs_preset = s.kind == "decay_scaling" || s.kind == "abscissa_scaling" ||
                            s.kind == "homogenization" || s.kind == "gcorr_smallness";
  if (needs_preset && s.preset.empty()) throw invalid("flow.preset: required for " + s.kind);
  if (!s.preset.empty()) {
    try {
      preset(s.preset, s.params);
    } catch (const Error& e) {
      throw invalid(std::string("flow.preset: ") + e.what());
    }
  }
  const bool needs_nu = s.kind != "class_membership" && s.kind != "example_cellular";
  if (needs_nu && s.nus.empty()) throw invalid("run.nu: required for " + s.kind);
  const bool needs_grid = s.kind != "class_membership";
  if (needs_grid && s.resolutions.empty()) throw invalid("grid.n1: required for " + s.kind);
  std::error_code ec;
  std::filesystem::create_directories(s.output, ec);
  const auto probe = std::filesystem::path(s.output) / ".write_probe";
  {
    std::ofstream os(probe);
    if (!os) throw invalid("experiment.output: directory '" + s.output + "' is not writable");
  }
  std::filesystem::remove(probe, ec);
  return s;
}

}  // namespace streamlab::lab
