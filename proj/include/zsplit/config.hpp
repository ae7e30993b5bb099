#pragma once

// Flat key-value configuration:
//
//   # comment
//   [model]
//   preset = example1
//   drift = 0.5*x
//   intensity = clamp(3*sqr(x), 0.5, 50)
//   [spectral]
//   basis = 48
//
// Keys are addressed as "section.key". Keys before any section header live
// in the "" section and are addressed by their bare name.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "zsplit/expr.hpp"
#include "zsplit/model.hpp"

namespace zsplit {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  static Config parse(std::istream& is, const std::string& origin = "<config>") {
    Config cfg;
    std::string line, section;
    int lineno = 0;
    auto trim = [](std::string_view s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string_view::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return std::string(s.substr(b, e - b + 1));
    };
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      std::string text = trim(hash == std::string::npos ? line : std::string_view(line).substr(0, hash));
      if (text.empty()) continue;
      if (text.front() == '[') {
        if (text.back() != ']')
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
        section = trim(std::string_view(text).substr(1, text.size() - 2));
        continue;
      }
      const auto eq = text.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(std::string_view(text).substr(0, eq));
      std::string value = trim(std::string_view(text).substr(eq + 1));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      cfg.set(section.empty() ? key : section + "." + key, value);
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot open config file " + file.string());
    return parse(is, file.string());
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::optional<std::string> get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::optional<double> get_double(const std::string& key) const {
    auto v = get(key);
    if (!v) return std::nullopt;
    double out = 0.0;
    auto res = std::from_chars(v->data(), v->data() + v->size(), out);
    if (res.ec != std::errc() || res.ptr != v->data() + v->size())
      throw ConfigError("config key '" + key + "': '" + *v + "' is not a number");
    return out;
  }

  std::optional<long long> get_int(const std::string& key) const {
    auto v = get(key);
    if (!v) return std::nullopt;
    long long out = 0;
    auto res = std::from_chars(v->data(), v->data() + v->size(), out);
    if (res.ec != std::errc() || res.ptr != v->data() + v->size())
      throw ConfigError("config key '" + key + "': '" + *v + "' is not an integer");
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Model from the [model] section: an optional preset base, then per-key
/// overrides. Coefficients are expressions in x; sigma' and sigma'' are
/// derived symbolically. Missing intensity bounds are estimated on `grid`.
inline ModelSpec model_from_config(const Config& cfg, const ValidationGrid& grid = {}) {
  ModelSpec m;
  if (auto preset = cfg.get("model.preset")) {
    auto p = presets::by_name(*preset);
    if (!p) {
      std::string names;
      for (const auto& n : presets::names()) names += (names.empty() ? "" : ", ") + n;
      throw ConfigError("unknown model preset '" + *preset + "' (valid presets: " + names + ")");
    }
    m = *p;
  } else {
    for (const char* k : {"model.drift", "model.diffusion", "model.sensor", "model.intensity"})
      if (!cfg.has(k)) throw ConfigError(std::string("model without preset must define ") + k);
    m.name = "custom";
  }
  if (auto name = cfg.get("model.name")) m.name = *name;

  auto expr = [&](const std::string& key) -> std::optional<Expr> {
    auto v = cfg.get(key);
    if (!v) return std::nullopt;
    try {
      return Expr::parse(*v);
    } catch (const ExprError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  };
  if (auto e = expr("model.drift")) m.drift = Coefficient(*e);
  if (auto e = expr("model.sensor")) m.sensor = Coefficient(*e);
  if (auto e = expr("model.diffusion")) {
    const Expr d1 = e->derivative();
    m.diffusion = Coefficient(*e);
    m.diffusion_dx = Coefficient(d1);
    m.diffusion_dxx = Coefficient(d1.derivative());
  }
  bool intensity_changed = false;
  if (auto e = expr("model.intensity")) {
    m.intensity = Coefficient(*e);
    intensity_changed = true;
  }
  if (auto v = cfg.get_double("model.b")) m.obs_b = *v;
  if (auto v = cfg.get_double("model.btilde")) m.obs_btilde = *v;
  if (auto v = cfg.get_double("model.x0_mean")) m.x0_mean = *v;
  if (auto v = cfg.get_double("model.x0_var")) m.x0_var = *v;
  if (auto v = cfg.get_double("model.horizon")) m.horizon = *v;

  const auto lo = cfg.get_double("model.intensity_min");
  const auto hi = cfg.get_double("model.intensity_max");
  if (intensity_changed && (!lo || !hi)) {
    const auto report = validate_assumptions(m, grid);
    m.intensity_lo = report.lambda_min;
    m.intensity_hi = report.lambda_max;
  }
  if (lo) m.intensity_lo = *lo;
  if (hi) m.intensity_hi = *hi;

  if (!(m.horizon > 0)) throw ConfigError("model.horizon must be positive");
  if (m.x0_var < 0) throw ConfigError("model.x0_var must be non-negative");
  return m;
}

}  // namespace zsplit
