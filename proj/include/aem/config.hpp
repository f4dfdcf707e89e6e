#pragma once

// Run configuration: a small strict TOML-subset parser (tables of scalar
// key/value pairs), the run-level settings shared by all CLI commands, and a
// canonical JSON form whose FNV-1a hash names the run directory.
//
// Supported TOML subset: [section] headers, `key = value` lines with string,
// integer, float, or boolean values, and # comments. Unknown sections or keys
// are rejected so that typos fail loudly.

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "aem/errors.hpp"
#include "aem/pipeline.hpp"
#include "aem/rng.hpp"

namespace aem {

// ---------------------------------------------------------------------------
// TOML subset
// ---------------------------------------------------------------------------

struct TomlValue {
  enum class Kind { integer, real, text, boolean };
  Kind kind = Kind::integer;
  std::int64_t i = 0;
  double d = 0.0;
  std::string s;
  bool b = false;

  double as_number(const std::string& where) const {
    if (kind == Kind::integer) return static_cast<double>(i);
    if (kind == Kind::real) return d;
    throw config_error(where + ": expected a number");
  }

  std::int64_t as_integer(const std::string& where) const {
    if (kind == Kind::integer) return i;
    throw config_error(where + ": expected an integer");
  }

  std::string as_text(const std::string& where) const {
    if (kind == Kind::text) return s;
    throw config_error(where + ": expected a string");
  }
};

using TomlSection = std::map<std::string, TomlValue>;
using TomlTable = std::map<std::string, TomlSection>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline bool is_bare_key(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

// Removes a trailing # comment that is not inside a quoted string.
inline std::string strip_comment(const std::string& line) {
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_quotes = !in_quotes;
    if (line[i] == '#' && !in_quotes) return line.substr(0, i);
  }
  return line;
}

inline TomlValue parse_toml_value(const std::string& raw, int line_no) {
  const std::string where = "line " + std::to_string(line_no);
  TomlValue v;
  if (raw.empty()) throw config_error(where + ": missing value");
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"')
      throw config_error(where + ": unterminated string");
    v.kind = TomlValue::Kind::text;
    std::string out;
    for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 2 < raw.size() && (raw[i + 1] == '"' || raw[i + 1] == '\\')) {
        out.push_back(raw[i + 1]);
        ++i;
      } else if (raw[i] == '"') {
        throw config_error(where + ": stray quote inside string");
      } else {
        out.push_back(raw[i]);
      }
    }
    v.s = std::move(out);
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = TomlValue::Kind::boolean;
    v.b = raw == "true";
    return v;
  }
  {
    std::int64_t iv = 0;
    const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), iv);
    if (ec == std::errc() && p == raw.data() + raw.size()) {
      v.kind = TomlValue::Kind::integer;
      v.i = iv;
      return v;
    }
  }
  {
    double dv = 0.0;
    const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), dv);
    if (ec == std::errc() && p == raw.data() + raw.size()) {
      v.kind = TomlValue::Kind::real;
      v.d = dv;
      return v;
    }
  }
  throw config_error(where + ": cannot parse value '" + raw + "'");
}

}  // namespace detail

inline TomlTable parse_toml(const std::string& text) {
  TomlTable table;
  std::string current;  // keys before any [section] land in the "" section
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(detail::strip_comment(line));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw config_error(where + ": unterminated section header");
      const std::string name = detail::trim(line.substr(1, line.size() - 2));
      if (!detail::is_bare_key(name)) throw config_error(where + ": invalid section name");
      current = name;
      table[current];  // sections may be empty
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw config_error(where + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    if (!detail::is_bare_key(key)) throw config_error(where + ": invalid key '" + key + "'");
    TomlSection& section = table[current];
    if (section.count(key) != 0) throw config_error(where + ": duplicate key '" + key + "'");
    section[key] = detail::parse_toml_value(detail::trim(line.substr(eq + 1)), line_no);
  }
  return table;
}

inline TomlTable parse_toml_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_toml(buf.str());
  } catch (const config_error& e) {
    throw config_error(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string kind = "regional";           // regional | conjoint
  std::string scenario = "regional-small";
  std::uint64_t seed = 42;
  std::string out_dir = "runs";
  std::string corrector = "mixture";       // mixture | integrated | logistic
  int bootstrap_reps = 20;
  std::string bootstrap_mode = "reuse";    // reuse | regenerate
  std::string provider = "distorted";      // oracle | distorted | external:<endpoint>
  std::map<std::string, double> overrides; // scenario-specific numeric knobs
};

inline void validate_run_config(const RunConfig& cfg) {
  if (cfg.kind != "regional" && cfg.kind != "conjoint")
    throw config_error("run.kind must be 'regional' or 'conjoint', got '" + cfg.kind + "'");
  if (cfg.corrector != "mixture" && cfg.corrector != "integrated" && cfg.corrector != "logistic")
    throw config_error("run.corrector must be mixture, integrated, or logistic");
  if (cfg.kind == "conjoint" && cfg.corrector != "logistic")
    throw config_error("conjoint runs use the logistic corrector");
  if (cfg.kind == "regional" && cfg.corrector == "logistic")
    throw config_error("regional runs use the mixture or integrated corrector");
  if (cfg.bootstrap_mode != "reuse" && cfg.bootstrap_mode != "regenerate")
    throw config_error("run.bootstrap_mode must be 'reuse' or 'regenerate'");
  if (cfg.bootstrap_reps < 0) throw config_error("run.bootstrap_reps must be >= 0");
  if (cfg.provider != "oracle" && cfg.provider != "distorted" &&
      cfg.provider.rfind("external:", 0) != 0)
    throw config_error("run.provider must be oracle, distorted, or external:<endpoint>");
}

inline RunConfig run_config_from_toml(const TomlTable& table) {
  RunConfig cfg;
  for (const auto& [section, entries] : table) {
    if (section == "" && entries.empty()) continue;
    if (section == "run") {
      for (const auto& [key, value] : entries) {
        const std::string where = "run." + key;
        if (key == "kind") cfg.kind = value.as_text(where);
        else if (key == "scenario") cfg.scenario = value.as_text(where);
        else if (key == "seed") {
          const std::int64_t s = value.as_integer(where);
          if (s < 0) throw config_error(where + ": seed must be non-negative");
          cfg.seed = static_cast<std::uint64_t>(s);
        } else if (key == "out") cfg.out_dir = value.as_text(where);
        else if (key == "corrector") cfg.corrector = value.as_text(where);
        else if (key == "bootstrap_reps")
          cfg.bootstrap_reps = static_cast<int>(value.as_integer(where));
        else if (key == "bootstrap_mode") cfg.bootstrap_mode = value.as_text(where);
        else if (key == "provider") cfg.provider = value.as_text(where);
        else throw config_error("unknown key run." + key);
      }
    } else if (section == "overrides") {
      for (const auto& [key, value] : entries)
        cfg.overrides[key] = value.as_number("overrides." + key);
    } else if (!section.empty() || !entries.empty()) {
      throw config_error("unknown config section [" + section + "]");
    }
  }
  validate_run_config(cfg);
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_toml(parse_toml_file(path));
}

// ---------------------------------------------------------------------------
// Canonical form and hash
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw numeric_error("format_double: conversion failed");
  return std::string(buf, p);
}

inline std::string json_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 2);
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

}  // namespace detail

// Key-sorted single-line JSON rendering of the configuration; the basis of
// the run identity hash, so formatting must stay deterministic. The output
// root is deliberately excluded: it names where results land, not what the
// run computes, and two runs that differ only in destination should collide.
inline std::string canonical_config_json(const RunConfig& cfg) {
  std::ostringstream out;
  out << "{\"bootstrap_mode\":\"" << detail::json_escape(cfg.bootstrap_mode) << "\""
      << ",\"bootstrap_reps\":" << cfg.bootstrap_reps
      << ",\"corrector\":\"" << detail::json_escape(cfg.corrector) << "\""
      << ",\"kind\":\"" << detail::json_escape(cfg.kind) << "\""
      << ",\"overrides\":{";
  bool first = true;
  for (const auto& [key, value] : cfg.overrides) {  // std::map: already sorted
    if (!first) out << ",";
    first = false;
    out << "\"" << detail::json_escape(key) << "\":" << detail::format_double(value);
  }
  out << "},\"provider\":\"" << detail::json_escape(cfg.provider) << "\""
      << ",\"scenario\":\"" << detail::json_escape(cfg.scenario) << "\""
      << ",\"seed\":" << cfg.seed << "}";
  return out.str();
}

inline std::string config_hash_hex(const RunConfig& cfg) {
  const std::uint64_t h = fnv1a64(canonical_config_json(cfg));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Scenario overrides
// ---------------------------------------------------------------------------

inline void apply_regional_overrides(RegionalScenarioConfig& cfg,
                                     const std::map<std::string, double>& overrides) {
  for (const auto& [key, v] : overrides) {
    if (key == "menus_per_region") cfg.menus_per_region = static_cast<int>(v);
    else if (key == "gamma") cfg.gamma = v;
    else if (key == "id_fraction") cfg.id_fraction = v;
    else if (key == "human_draws_per_cell") cfg.human_draws_per_cell = static_cast<int>(v);
    else if (key == "day_one_post") cfg.day_one_post = v != 0.0;
    else if (key == "day_one_draws") cfg.day_one_draws = static_cast<int>(v);
    else if (key == "outcome_category") cfg.outcome_category = static_cast<int>(v);
    else if (key == "lr") cfg.corrector.lr = v;
    else if (key == "epochs") cfg.corrector.epochs = static_cast<int>(v);
    else if (key == "patience") cfg.corrector.patience = static_cast<int>(v);
    else if (key == "personas_per_region") cfg.population.personas_per_region = static_cast<int>(v);
    else if (key == "personas_per_region_nossd")
      cfg.population.personas_per_region_nossd = static_cast<int>(v);
    else if (key == "treat_coef") cfg.population.base_weights[kAttrTreatFlag] = v;
    else if (key == "income_tilt") cfg.population.income_tilt = v;
    else if (key == "heterogeneity") cfg.population.heterogeneity = v;
    else if (key == "idio_sd") cfg.population.idio_sd = v;
    else if (key == "region_weight_sd") cfg.population.region_weight_sd = v;
    else if (key == "train_integrated") cfg.train_integrated = v != 0.0;
    else if (key == "train_mixture") cfg.train_mixture = v != 0.0;
    else if (key == "clone_within_stratum") cfg.clone_within_stratum = v != 0.0;
    else if (key == "sameday_prob") cfg.menu.sameday_prob = v;
    else throw config_error("unknown regional override '" + key + "'");
  }
}

inline void apply_conjoint_overrides(ConjointScenarioConfig& cfg,
                                     const std::map<std::string, double>& overrides) {
  for (const auto& [key, v] : overrides) {
    if (key == "primary_customers") cfg.data.primary_customers = static_cast<int>(v);
    else if (key == "aux_customers") cfg.data.aux_customers = static_cast<int>(v);
    else if (key == "tasks_per_customer") cfg.data.tasks_per_customer = static_cast<int>(v);
    else if (key == "heterogeneity_sd") cfg.data.heterogeneity_sd = v;
    else if (key == "attr_sd") cfg.data.attr_sd = v;
    else if (key == "lambda") cfg.correction.lambda = v;
    else if (key == "max_iter") cfg.correction.max_iter = static_cast<int>(v);
    else if (key == "distortion_scale") cfg.data.distortion.scale = v;
    else if (key == "distortion_shrink") cfg.data.distortion.heterogeneity_shrink = v;
    else throw config_error("unknown conjoint override '" + key + "'");
  }
}

}  // namespace aem
