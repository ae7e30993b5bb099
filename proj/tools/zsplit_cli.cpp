// zsplit: simulate paths, run the splitting-up Zakai filter, and run the
// convergence / std-reduction / oracle studies from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error,
// 3 failed assertion.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "zsplit/config.hpp"
#include "zsplit/harness.hpp"
#include "zsplit/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace zsplit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitAssert = 3;

struct AssertionFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// Defaults per subcommand; every key ends up in the manifest.
Config defaults_for(const std::string& cmd) {
  Config c;
  c.set("study.seed", "1");
  c.set("study.workers", std::to_string(default_workers()));
  c.set("spectral.basis", "48");
  c.set("spectral.quad_order", "0");
  c.set("spectral.mu", "coercive");
  c.set("filter.mass_floor", "1e-12");
  c.set("output.dir", "out");
  if (cmd == "simulate") {
    c.set("study.steps", "1024");
    c.set("study.paths", "1");
  } else if (cmd == "filter") {
    c.set("study.steps", "4096");
    c.set("study.path", "0");
    c.set("filter.particles", "0");
  } else if (cmd == "converge") {
    c.set("study.ref_level", "14");
    c.set("study.levels", "8..11");
    c.set("study.paths", "50");
    c.set("output.trajectories", "false");
  } else if (cmd == "reduce") {
    c.set("study.steps", "1024");
    c.set("study.paths", "20");
    c.set("reduce.lambda", "1");
  } else if (cmd == "compare") {
    c.set("study.steps", "1024");
    c.set("study.paths", "10");
    c.set("filter.particles", "20000");
    c.set("compare.prior_samples", "0");
  }
  return c;
}

struct Invocation {
  std::string command;
  std::optional<std::string> config_file;
  std::optional<std::string> model_source;
  std::map<std::string, std::string> overrides;
  std::vector<std::string> sets;
  std::vector<std::string> argv;
};

Config resolve_config(const Invocation& inv) {
  Config cfg = defaults_for(inv.command);
  auto merge = [&](const Config& other) {
    for (const auto& [k, v] : other.values()) cfg.set(k, v);
  };
  if (inv.config_file) merge(Config::load(*inv.config_file));
  if (inv.model_source) {
    if (presets::by_name(*inv.model_source)) {
      Config keep;
      for (const auto& [k, v] : cfg.values())
        if (k.rfind("model.", 0) != 0) keep.set(k, v);
      cfg = keep;
      cfg.set("model.preset", *inv.model_source);
    } else if (fs::is_regular_file(*inv.model_source)) {
      merge(Config::load(*inv.model_source));
    } else {
      cfg.set("model.preset", *inv.model_source);  // rejected with the list of presets below
    }
  }
  for (const auto& [k, v] : inv.overrides) cfg.set(k, v);
  for (const auto& s : inv.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  bool has_model = false;
  for (const auto& [k, v] : cfg.values()) has_model = has_model || k.rfind("model.", 0) == 0;
  if (!has_model) {
    std::string names;
    for (const auto& n : presets::names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("no model given; use --model <preset|file> (presets: " + names + ")");
  }
  return cfg;
}

int require_int(const Config& cfg, const std::string& key, long long lo, long long hi) {
  const auto v = cfg.get_int(key);
  if (!v) throw ConfigError("missing " + key);
  if (*v < lo || *v > hi)
    throw ConfigError(key + " = " + std::to_string(*v) + " outside [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
  return static_cast<int>(*v);
}

std::uint64_t require_seed(const Config& cfg) {
  const auto s = cfg.get("study.seed");
  std::uint64_t out = 0;
  auto res = std::from_chars(s->data(), s->data() + s->size(), out);
  if (res.ec != std::errc() || res.ptr != s->data() + s->size())
    throw ConfigError("study.seed: '" + *s + "' is not a non-negative integer");
  return out;
}

bool require_bool(const Config& cfg, const std::string& key) {
  const auto v = cfg.get(key).value_or("false");
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

void apply_mu(const Config& cfg, StudyConfig& sc) {
  const auto v = cfg.get("spectral.mu").value_or("coercive");
  if (auto p = parse_mu_policy(v)) {
    sc.mu_policy = *p;
    sc.mu.reset();
    return;
  }
  const auto d = cfg.get_double("spectral.mu");
  if (!(*d >= 0)) throw ConfigError("spectral.mu must be >= 0, 'coercive' or 'theoretical'");
  sc.mu = *d;
}

StudyConfig study_from(const Config& cfg) {
  StudyConfig sc;
  sc.model = model_from_config(cfg);
  sc.basis = require_int(cfg, "spectral.basis", 1, kMaxBasis);
  sc.quad_order = require_int(cfg, "spectral.quad_order", 0, kMaxQuadratureOrder);
  sc.seed = require_seed(cfg);
  sc.workers = require_int(cfg, "study.workers", 1, 4096);
  sc.filter.mass_floor = cfg.get_double("filter.mass_floor").value_or(1e-12);
  apply_mu(cfg, sc);
  if (cfg.has("study.paths")) sc.paths = require_int(cfg, "study.paths", 1, 1000000);
  if (cfg.has("study.steps")) sc.ref_steps = require_int(cfg, "study.steps", 1, 1 << 26);
  return sc;
}

std::pair<int, int> parse_levels(const std::string& s) {
  const auto dots = s.find("..");
  try {
    if (dots == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    return {std::stoi(s.substr(0, dots)), std::stoi(s.substr(dots + 2))};
  } catch (const std::exception&) {
    throw ConfigError("study.levels: expected a..b, got '" + s + "'");
  }
}

std::pair<double, double> parse_range(const std::string& s) {
  const auto comma = s.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument("no comma");
    return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw ConfigError("--assert-slope: expected lo,hi, got '" + s + "'");
  }
}

std::string padded(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", i);
  return buf;
}

json model_json(const ModelSpec& m) {
  return {{"name", m.name},           {"drift", m.drift.text},         {"diffusion", m.diffusion.text},
          {"sensor", m.sensor.text},  {"b", m.obs_b},                  {"btilde", m.obs_btilde},
          {"intensity", m.intensity.text}, {"intensity_min", m.intensity_lo}, {"intensity_max", m.intensity_hi},
          {"x0_mean", m.x0_mean},     {"x0_var", m.x0_var},            {"horizon", m.horizon}};
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << text;
}

template <class F>
void with_file(const fs::path& file, F&& f) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  f(os);
}

// ---- subcommands ---------------------------------------------------------

void cmd_simulate(const Config& cfg, const fs::path& out, json& result) {
  const StudyConfig sc = study_from(cfg);
  for (int j = 0; j < sc.paths; ++j) {
    const auto p = simulate_path(sc.model, sc.ref_steps, PathSeed{sc.seed, static_cast<std::uint64_t>(j)});
    write_path_csv(p, out / ("path_" + padded(j) + ".csv"));
  }
  result["model"] = model_json(sc.model);
  result["files"] = sc.paths;
}

void cmd_filter(const Config& cfg, const fs::path& out, json& result) {
  const StudyConfig sc = study_from(cfg);
  const int path_index = require_int(cfg, "study.path", 0, 1 << 30);
  const int particles = require_int(cfg, "filter.particles", 0, 100000000);
  const PathSeed seed{sc.seed, static_cast<std::uint64_t>(path_index)};
  const auto path = simulate_path(sc.model, sc.ref_steps, seed);
  const auto setup = prepare_spectral(sc.model, sc.basis, sc.quad_order, sc.mu, sc.mu_policy);
  const SplittingScheme scheme(setup.space, path.kappa, setup.mu.value);
  const auto tr = run_filter(setup, scheme, path, sc.filter);
  std::optional<ParticleTrajectory> pf;
  if (particles > 0) pf = particle_filter(sc.model, path, ParticleOptions{particles}, seed);

  with_file(out / "trajectory.csv", [&](std::ostream& os) {
    os << "t,x,mean,std,mass";
    if (pf) os << ",particle_mean,particle_std,particle_se";
    os << '\n';
    for (std::size_t r = 0; r < tr.size(); ++r) {
      os << detail::format_number(static_cast<double>(r) * tr.kappa) << ',' << detail::format_number(path.x[r])
         << ',' << detail::format_number(tr.means[r]) << ',' << detail::format_number(tr.stds[r]) << ','
         << detail::format_number(tr.masses[r]);
      if (pf)
        os << ',' << detail::format_number(pf->means[r]) << ',' << detail::format_number(pf->stds[r]) << ','
           << detail::format_number(pf->std_errors[r]);
      os << '\n';
    }
  });
  result["model"] = model_json(sc.model);
  result["mu"] = {{"value", setup.mu.value}, {"rule", setup.mu.rule}, {"warning", setup.mu.warning.value_or("")}};
  result["projection_error"] = setup.p0.relative_error();
  result["degenerate"] = tr.degenerate();
  result["degenerate_from"] = tr.degenerate_from ? json(*tr.degenerate_from) : json(nullptr);
  result["min_mass"] = tr.min_mass;
  result["negative_mass_events"] = tr.negative_mass_events;
  result["jumps"] = path.total_jumps();
  if (pf) result["resample_events"] = pf->resample_events.size();
  if (tr.degenerate())
    std::cerr << "warning: filter degenerate from grid index " << *tr.degenerate_from << "; data still written\n";
}

void write_study_trajectories(const StudyConfig& sc, const std::vector<int>& levels, const fs::path& dir) {
  fs::create_directories(dir);
  const auto setup = prepare_spectral(sc.model, sc.basis, sc.quad_order, sc.mu, sc.mu_policy);
  std::vector<int> all = levels;
  all.push_back(sc.ref_steps);
  for (int j = 0; j < sc.paths; ++j) {
    const auto fine = simulate_path(sc.model, sc.ref_steps, PathSeed{sc.seed, static_cast<std::uint64_t>(j)});
    for (int n : all) {
      const auto p = coarsen_path(fine, sc.ref_steps / n);
      const SplittingScheme scheme(setup.space, p.kappa, setup.mu.value);
      const auto tr = run_filter(setup, scheme, p, sc.filter);
      with_file(dir / ("path_" + padded(j) + "_N" + std::to_string(n) + ".csv"),
                [&](std::ostream& os) { write_trajectory_csv(tr, os); });
    }
  }
}

void cmd_converge(const Config& cfg, const fs::path& out, json& result) {
  StudyConfig sc = study_from(cfg);
  const int k = require_int(cfg, "study.ref_level", 1, 26);
  const auto [a, b] = parse_levels(*cfg.get("study.levels"));
  if (a < 0 || b < a) throw ConfigError("study.levels: need 0 <= a <= b");
  if (b > k)
    throw ConfigError("study.levels: level 2^" + std::to_string(b) + " does not divide reference 2^" +
                      std::to_string(k));
  sc.ref_steps = 1 << k;
  sc.level_steps.clear();
  for (int e = a; e <= b; ++e) sc.level_steps.push_back(1 << e);
  std::optional<std::pair<double, double>> bounds;
  if (auto s = cfg.get("converge.assert_slope")) bounds = parse_range(*s);

  const auto report = convergence_study(sc);
  emit_report(report, out);
  if (require_bool(cfg, "output.trajectories")) write_study_trajectories(sc, sc.level_steps, out / "trajectories");

  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  if (report.slope)
    std::cout << "slope " << detail::format_number(*report.slope) << '\n';
  else
    std::cout << "slope unavailable (fewer than two usable levels)\n";
  result["slope"] = report.slope ? json(*report.slope) : json(nullptr);
  result["valid"] = report.valid;
  result["model"] = model_json(sc.model);
  if (bounds) {
    const bool ok = report.slope && *report.slope >= bounds->first && *report.slope <= bounds->second;
    result["assertion"] = {{"slope_range", {bounds->first, bounds->second}}, {"passed", ok}};
    if (!ok)
      throw AssertionFailure("slope " + (report.slope ? detail::format_number(*report.slope) : std::string("n/a")) +
                             " outside [" + detail::format_number(bounds->first) + ", " +
                             detail::format_number(bounds->second) + "]");
  }
}

void cmd_reduce(const Config& cfg, const fs::path& out, json& result) {
  const StudyConfig sc = study_from(cfg);
  std::vector<IntensityVariant> variants;
  variants.push_back({"model", sc.model.intensity, sc.model.intensity_lo, sc.model.intensity_hi});
  std::stringstream ss(*cfg.get("reduce.lambda"));
  for (std::string item; std::getline(ss, item, ',');) {
    double v = 0;
    try {
      v = std::stod(item);
    } catch (const std::exception&) {
      throw ConfigError("reduce.lambda: '" + item + "' is not a number");
    }
    if (!(v > 0)) throw ConfigError("reduce.lambda: constant intensities must be positive");
    variants.push_back(IntensityVariant::constant(v));
  }
  const auto table = std_reduction_study(sc, variants);
  with_file(out / "std_table.csv", [&](std::ostream& os) { write_std_table_csv(table, os); });
  json rows = json::array();
  for (const auto& r : table.rows) {
    std::cout << r.label << " mean time-averaged std " << detail::format_number(r.mean_time_avg_std) << '\n';
    rows.push_back({{"label", r.label}, {"mean_time_avg_std", r.mean_time_avg_std}, {"degenerate", r.degenerate_paths}});
  }
  result["rows"] = rows;
  result["model"] = model_json(sc.model);
}

void cmd_compare(const Config& cfg, const fs::path& out, json& result) {
  const StudyConfig sc = study_from(cfg);
  OracleOptions opt;
  opt.particle.n_particles = require_int(cfg, "filter.particles", 0, 100000000);
  if (opt.particle.n_particles > 0 && opt.particle.n_particles < 100)
    throw ConfigError("filter.particles: need 0 or at least 100");
  opt.prior_samples = require_int(cfg, "compare.prior_samples", 0, 100000000);
  const auto table = oracle_comparison(sc, opt);
  with_file(out / "oracle_table.csv", [&](std::ostream& os) { write_oracle_table_csv(table, os); });
  int within = 0, counted = 0;
  for (const auto& r : table.rows)
    if (r.within_particle) {
      ++counted;
      within += *r.within_particle ? 1 : 0;
    }
  if (counted) std::cout << "spectral within 3 particle SE on " << within << " of " << counted << " paths\n";
  result["within_particle"] = within;
  result["model"] = model_json(sc.model);
}

}  // namespace

int main(int argc, char** argv) {
  Invocation inv;
  inv.argv.assign(argv, argv + argc);

  CLI::App app{"Splitting-up spectral Zakai filter with Cox-process observations"};
  app.require_subcommand(1);
  app.set_version_flag("--version", zsplit::version);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option_function<std::string>("--config", [&](const std::string& v) { inv.config_file = v; },
                                          "Key-value config file");
    sub->add_option_function<std::string>("--model", [&](const std::string& v) { inv.model_source = v; },
                                          "Preset name (example1, example2, linear) or model config file");
    auto flag = [&inv, sub](const std::string& name, const std::string& key, const std::string& desc) {
      sub->add_option_function<std::string>(name, [&inv, key](const std::string& v) { inv.overrides[key] = v; },
                                            desc);
    };
    flag("--seed", "study.seed", "Base seed");
    flag("--out", "output.dir", "Output directory");
    flag("--workers", "study.workers", "Worker threads (default: available cores)");
    flag("--basis", "spectral.basis", "Hermite basis dimension n");
    flag("--quad-order", "spectral.quad_order", "Assembly quadrature order (0: 2n + 16)");
    flag("--mu", "spectral.mu", "Shift: coercive, theoretical or a number");
    flag("--horizon", "model.horizon", "Time horizon T");
    sub->add_option("--set", inv.sets, "Override any config key: section.key=value");
    return flag;
  };

  auto* sim = app.add_subcommand("simulate", "Simulate signal, observation and jump paths");
  {
    auto flag = add_common(sim);
    flag("--steps", "study.steps", "Grid steps N");
    flag("--paths", "study.paths", "Number of paths");
  }
  auto* fil = app.add_subcommand("filter", "Run the spectral filter (and optionally particles) on one path");
  {
    auto flag = add_common(fil);
    flag("--steps", "study.steps", "Grid steps N");
    flag("--path", "study.path", "Path index");
    flag("--particles", "filter.particles", "Particle count (0: spectral only)");
  }
  auto* conv = app.add_subcommand("converge", "Strong convergence study over nested step sizes");
  {
    auto flag = add_common(conv);
    flag("--ref-level", "study.ref_level", "Reference grid 2^k steps");
    flag("--levels", "study.levels", "Coarse grids 2^a..2^b");
    flag("--paths", "study.paths", "Number of paths m");
    flag("--assert-slope", "converge.assert_slope", "Fail with exit 3 unless lo <= slope <= hi");
    conv->add_flag_callback("--trajectories", [&] { inv.overrides["output.trajectories"] = "true"; },
                            "Also write per-path trajectories");
  }
  auto* red = app.add_subcommand("reduce", "Conditional std: model intensity vs constant intensities");
  {
    auto flag = add_common(red);
    flag("--steps", "study.steps", "Grid steps N");
    flag("--paths", "study.paths", "Number of paths");
    flag("--lambda", "reduce.lambda", "Comma-separated constant intensities to compare");
  }
  auto* cmp = app.add_subcommand("compare", "Spectral filter against particle / Kalman-Bucy / prior oracles");
  {
    auto flag = add_common(cmp);
    flag("--steps", "study.steps", "Grid steps N");
    flag("--paths", "study.paths", "Number of paths");
    flag("--particles", "filter.particles", "Particle count");
    flag("--prior-samples", "compare.prior_samples", "Prior Monte-Carlo samples (0: off)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  for (auto* s : app.get_subcommands()) inv.command = s->get_name();

  Config cfg;
  fs::path out;
  json manifest;
  const std::string started = utc_now();
  try {
    cfg = resolve_config(inv);
    out = *cfg.get("output.dir");
    fs::create_directories(out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }

  json result;
  int code = kExitOk;
  std::string message;
  try {
    if (inv.command == "simulate") cmd_simulate(cfg, out, result);
    if (inv.command == "filter") cmd_filter(cfg, out, result);
    if (inv.command == "converge") cmd_converge(cfg, out, result);
    if (inv.command == "reduce") cmd_reduce(cfg, out, result);
    if (inv.command == "compare") cmd_compare(cfg, out, result);
  } catch (const AssertionFailure& e) {
    message = e.what();
    std::cerr << "assertion failed: " << message << '\n';
    code = kExitAssert;
  } catch (const ConfigError& e) {
    message = e.what();
    std::cerr << "config error: " << message << '\n';
    code = kExitConfig;
  } catch (const ModelError& e) {
    message = e.what();
    std::cerr << "config error: " << message << '\n';
    code = kExitConfig;
  } catch (const std::invalid_argument& e) {
    message = e.what();
    std::cerr << "config error: " << message << '\n';
    code = kExitConfig;
  } catch (const std::exception& e) {
    message = e.what();
    std::cerr << "error: " << message << '\n';
    code = kExitRuntime;
  }

  manifest["subcommand"] = inv.command;
  manifest["argv"] = inv.argv;
  manifest["config"] = cfg.values();
  manifest["seed"] = cfg.get("study.seed").value_or("");
  manifest["versions"] = {{"zsplit", zsplit::version},
                          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                        "." + std::to_string(EIGEN_MINOR_VERSION)},
                          {"compiler", __VERSION__}};
  manifest["timestamps"] = {{"start", started}, {"end", utc_now()}};
  manifest["exit_code"] = code;
  if (!message.empty()) manifest["message"] = message;
  manifest["result"] = result;
  try {
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (code == kExitOk) code = kExitRuntime;
  }
  return code;
}
