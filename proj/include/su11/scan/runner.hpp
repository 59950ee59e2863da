#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "su11/multimode.hpp"
#include "su11/scan/config.hpp"
#include "su11/scan/fiber.hpp"
#include "su11/two_mode.hpp"

namespace su11::scan {

enum class Model { two_mode, multimode };
enum class Spacing { linear, log };
enum class OutputFormat { csv, json };

inline const std::vector<std::string>& parameter_names(Model m) {
  static const std::vector<std::string> two{"m1", "m2", "eta_12", "eta_det", "n0"};
  static const std::vector<std::string> multi{"mu1", "gamma", "n_th", "n0", "tau_gap", "m1",
                                              "m2", "eta_tech", "kappa", "g"};
  return m == Model::two_mode ? two : multi;
}

inline std::map<std::string, double> parameter_defaults(Model m) {
  if (m == Model::two_mode) return {{"eta_12", 1.0}, {"eta_det", 1.0}, {"n0", 0.0}};
  return {{"gamma", 0.0}, {"n_th", 0.0}, {"n0", 0.0}, {"tau_gap", 0.0},
          {"eta_tech", 1.0}, {"kappa", 0.0}, {"g", 0.0}};
}

struct Axis {
  std::string name;
  double min = 0.0;
  double max = 1.0;
  std::size_t steps = 2;
  Spacing spacing = Spacing::linear;

  std::vector<double> values() const {
    if (spacing == Spacing::linear) return linspace(min, max, steps);
    auto u = linspace(std::log(min), std::log(max), steps);
    for (auto& v : u) v = std::exp(v);
    u.front() = min;
    u.back() = max;
    return u;
  }
};

struct ScanSpec {
  Model model = Model::two_mode;
  std::vector<Axis> axes;
  std::map<std::string, double> fixed;
  bool optimize_m2 = false;  ///< phi0 is always optimized
  double m2_min = 0.05;
  double m2_max = 5.0;
  std::size_t m2_steps = 25;
  std::optional<FiberModel> fiber;
  std::size_t grid = 256;
  GridLayout layout = GridLayout::graded;
  bool verify_grid = false;
  double budget = 5e9;  ///< node-pair evaluations before a cost warning

  bool is_parameter(const std::string& name) const {
    const auto& names = parameter_names(model);
    return std::find(names.begin(), names.end(), name) != names.end();
  }

  void validate() const {
    if (axes.size() > 2) throw ConfigError("at most two axes may be swept");
    std::set<std::string> seen;
    for (const auto& a : axes) {
      if (!is_parameter(a.name)) throw ConfigError("unknown axis parameter '" + a.name + "'");
      if (!seen.insert(a.name).second) throw ConfigError("axis '" + a.name + "' swept twice");
      if (a.steps < 2) throw ConfigError("axis '" + a.name + "' needs steps >= 2");
      if (!(std::isfinite(a.min) && std::isfinite(a.max) && a.max > a.min))
        throw ConfigError("axis '" + a.name + "' needs finite min < max");
      if (a.spacing == Spacing::log && a.min <= 0.0)
        throw ConfigError("log axis '" + a.name + "' needs min > 0");
      if (optimize_m2 && a.name == "m2") throw ConfigError("m2 cannot be both swept and optimized");
    }
    for (const auto& [k, v] : fixed) {
      if (k == "phi" || k == "phi0") throw ConfigError("phi0 is always optimized and cannot be fixed");
      if (!is_parameter(k)) throw ConfigError("unknown parameter '" + k + "'");
      if (!std::isfinite(v)) throw ConfigError("parameter '" + k + "' is not finite");
    }
    const auto defaults = parameter_defaults(model);
    for (const auto& name : parameter_names(model)) {
      if (optimize_m2 && name == "m2") continue;
      const bool given = fixed.count(name) || defaults.count(name) || seen.count(name);
      if (!given) throw ConfigError("parameter '" + name + "' is neither fixed nor swept");
    }
    if (optimize_m2 && !(m2_min > 0.0 && m2_max > m2_min && m2_steps >= 3))
      throw ConfigError("m2 search needs 0 < m2_min < m2_max and m2_steps >= 3");
    if (model == Model::multimode && grid < 8) throw ConfigError("grid must be >= 8");
    if (fiber) {
      try {
        fiber->validate();
      } catch (const DomainError& e) {
        throw ConfigError(e.what());
      }
    }
  }

  std::size_t cell_count() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.steps;
    return n;
  }

  /// Full parameter assignment of one cell; the first axis varies slowest.
  std::map<std::string, double> cell_parameters(std::size_t index) const {
    auto p = parameter_defaults(model);
    for (const auto& [k, v] : fixed) p[k] = v;
    std::size_t rest = index;
    for (std::size_t k = axes.size(); k-- > 0;) {
      const auto vals = axes[k].values();
      p[axes[k].name] = vals[rest % axes[k].steps];
      rest /= axes[k].steps;
    }
    return p;
  }

  /// Rough multimode cost in kernel-element evaluations.
  double estimated_cost() const {
    if (model != Model::multimode) return 0.0;
    const double per_eval = static_cast<double>(grid) * static_cast<double>(grid);
    const double phase_evals = 60.0;
    const double m2_evals = optimize_m2 ? static_cast<double>(m2_steps) + 20.0 : 1.0;
    return static_cast<double>(cell_count()) * per_eval * phase_evals * m2_evals * (verify_grid ? 5.0 : 1.0);
  }
};

/// Warning text when a multimode scan is expected to exceed its budget.
inline std::optional<std::string> cost_warning(const ScanSpec& spec) {
  const double cost = spec.estimated_cost();
  if (cost <= spec.budget) return std::nullopt;
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "estimated cost %.3g kernel evaluations exceeds budget %.3g (%zu cells, grid %zu)", cost,
                spec.budget, spec.cell_count(), spec.grid);
  return std::string(buf);
}

struct SensitivityPoint {
  std::size_t index = 0;
  std::vector<double> params;  ///< in parameter_names(model) order
  double eta_fiber = 1.0;
  double n_pr = NAN;
  double mean = NAN;
  double variance = NAN;
  double dphi = NAN;
  double dphi_over_snl = NAN;
  double phi0_opt = NAN;
  double m2_opt = NAN;
  bool converged = false;
  std::string message;
};

inline PhysicalParams physical_from(const std::map<std::string, double>& v) {
  auto p = PhysicalParams::matched(v.at("mu1"), v.at("m1"), v.at("m2"));
  p.gamma = v.at("gamma");
  p.n_th = v.at("n_th");
  p.n0 = v.at("n0");
  p.tau_gap = v.at("tau_gap");
  p.eta_tech = v.at("eta_tech");
  p.kappa = v.at("kappa");
  p.g = v.at("g");
  return p;
}

inline TwoModeConfig two_mode_from(const std::map<std::string, double>& v) {
  return {v.at("m1"), v.at("m2"), v.at("eta_12"), v.at("eta_det"), v.at("n0"), 0.0};
}

namespace detail {

struct CellOptimum {
  double m2 = NAN;
  PhaseOptimum phase;
};

inline CellOptimum optimize_two_mode(const ScanSpec& spec, TwoModeConfig cfg) {
  CellOptimum out;
  if (spec.optimize_m2) {
    auto f = [&](double m2) {
      TwoModeConfig c = cfg;
      c.m2 = m2;
      return optimize_phase(c).sensitivity;
    };
    const auto best = scan_then_refine(f, linspace(spec.m2_min, spec.m2_max, spec.m2_steps),
                                       [](double u) { return u; }, 1e-9);
    if (!std::isfinite(best.value)) throw ConvergenceError("no finite sensitivity over the m2 bracket");
    cfg.m2 = best.x;
  }
  out.m2 = cfg.m2;
  out.phase = optimize_phase(cfg);
  return out;
}

inline PhysicalParams multimode_params(const ScanSpec& spec, const std::map<std::string, double>& v,
                                       double m2, double* eta_fiber) {
  auto p = physical_from(v);
  p.m2 = m2;
  if (spec.fiber) {
    const double before = p.eta_tech;
    p = with_fiber(p, *spec.fiber);
    if (eta_fiber) *eta_fiber = before > 0.0 ? p.eta_tech / before : 1.0;
  }
  return p;
}

inline CellOptimum optimize_multimode(const ScanSpec& spec, const std::map<std::string, double>& v) {
  auto phase_at = [&](double m2) {
    const auto p = multimode_params(spec, v, m2, nullptr);
    return optimize_phase_multimode(p, DetectionNodes::make(p, spec.grid, spec.layout));
  };
  CellOptimum out;
  out.m2 = v.at("m2");
  if (spec.optimize_m2) {
    const double hi = std::min(spec.m2_max, PhysicalParams::max_strength);
    auto f = [&](double m2) { return phase_at(m2).sensitivity; };
    const auto best = scan_then_refine(f, linspace(spec.m2_min, hi, spec.m2_steps),
                                       [](double u) { return u; }, 1e-5);
    if (!std::isfinite(best.value)) throw ConvergenceError("no finite sensitivity over the m2 bracket");
    out.m2 = best.x;
  }
  out.phase = phase_at(out.m2);
  return out;
}

}  // namespace detail

/// Evaluates one cell. Domain and convergence failures are recorded in the
/// point rather than thrown.
inline SensitivityPoint evaluate_cell(const ScanSpec& spec, std::size_t index) {
  SensitivityPoint pt;
  pt.index = index;
  auto v = spec.cell_parameters(index);
  if (spec.optimize_m2) v.emplace("m2", NAN);
  for (const auto& name : parameter_names(spec.model)) pt.params.push_back(v.at(name));
  try {
    pt.n_pr = probe_number(v.at("m1"), v.at("n0"));
    if (spec.model == Model::two_mode) {
      auto cfg = two_mode_from(v);
      const auto opt = detail::optimize_two_mode(spec, cfg);
      cfg.m2 = opt.m2;
      cfg.phi = opt.phase.phi0;
      const auto mom = output_moments(cfg);
      pt.mean = mom.mean;
      pt.variance = mom.variance;
      pt.dphi = opt.phase.sensitivity;
      pt.phi0_opt = opt.phase.phi0;
      pt.m2_opt = opt.m2;
    } else {
      const auto opt = detail::optimize_multimode(spec, v);
      auto p = detail::multimode_params(spec, v, opt.m2, &pt.eta_fiber);
      p.phi = opt.phase.phi0;
      const auto nodes = DetectionNodes::make(p, spec.grid, spec.layout);
      const auto mom = evaluate_multimode(p, nodes);
      pt.mean = mom.mean;
      pt.variance = mom.variance;
      pt.dphi = opt.phase.sensitivity;
      pt.phi0_opt = opt.phase.phi0;
      pt.m2_opt = opt.m2;
      if (spec.verify_grid) {
        const auto fine = DetectionNodes::make(p, 2 * spec.grid - 1, spec.layout);
        const double d2 = sensitivity_multimode(p, fine, p.phi);
        if (std::abs(d2 - pt.dphi) > 1e-3 * pt.dphi) {
          pt.message = "grid doubling moved the sensitivity beyond 1e-3";
          pt.dphi_over_snl = pt.dphi / snl(pt.n_pr);
          return pt;
        }
      }
    }
    pt.dphi_over_snl = pt.dphi / snl(pt.n_pr);
    pt.converged = std::isfinite(pt.dphi_over_snl);
  } catch (const DomainError& e) {
    pt.message = e.what();
  } catch (const ConvergenceError& e) {
    pt.message = e.what();
  }
  return pt;
}

struct RunOptions {
  std::size_t threads = 1;
  std::set<std::size_t> skip;                                 ///< cells already on disk
  std::function<void(const SensitivityPoint&)> on_point;      ///< called in index order
};

/// Runs every cell not in `skip`. Workers pull cells from a shared counter;
/// results are handed to `on_point` strictly in index order by the calling
/// thread, so the output is independent of the thread count.
inline std::vector<SensitivityPoint> run_scan(const ScanSpec& spec, const RunOptions& opts = {}) {
  spec.validate();
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < spec.cell_count(); ++i)
    if (!opts.skip.count(i)) todo.push_back(i);

  std::vector<std::optional<SensitivityPoint>> slots(todo.size());
  std::vector<SensitivityPoint> out;
  out.reserve(todo.size());
  std::size_t flushed = 0;
  auto flush = [&] {
    while (flushed < slots.size() && slots[flushed]) {
      if (opts.on_point) opts.on_point(*slots[flushed]);
      out.push_back(std::move(*slots[flushed]));
      ++flushed;
    }
  };

  const std::size_t nthreads = std::max<std::size_t>(1, std::min(opts.threads, todo.size()));
  if (nthreads <= 1) {
    for (std::size_t k = 0; k < todo.size(); ++k) {
      slots[k] = evaluate_cell(spec, todo[k]);
      flush();
    }
    return out;
  }

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::condition_variable cv;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < todo.size(); k = next++) {
        auto pt = evaluate_cell(spec, todo[k]);
        std::lock_guard<std::mutex> lock(mu);
        slots[k] = std::move(pt);
        cv.notify_one();
      }
    });
  }
  {
    std::unique_lock<std::mutex> lock(mu);
    while (flushed < slots.size()) {
      cv.wait(lock, [&] { return flushed < slots.size() && slots[flushed].has_value(); });
      flush();
    }
  }
  for (auto& th : pool) th.join();
  return out;
}

// ---------------------------------------------------------------- output

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> column_names(const ScanSpec& spec) {
  std::vector<std::string> cols{"index"};
  for (const auto& n : parameter_names(spec.model)) cols.push_back(n);
  if (spec.model == Model::multimode) cols.push_back("eta_fiber");
  for (const char* c : {"n_pr", "mean", "variance", "dphi", "dphi_over_snl", "phi0_opt", "m2_opt", "converged"})
    cols.emplace_back(c);
  return cols;
}

inline std::string csv_header(const ScanSpec& spec) {
  std::string s;
  for (const auto& c : column_names(spec)) s += (s.empty() ? "" : ",") + c;
  return s;
}

inline std::string csv_row(const ScanSpec& spec, const SensitivityPoint& pt) {
  std::string s = std::to_string(pt.index);
  for (double v : pt.params) s += "," + format_number(v);
  if (spec.model == Model::multimode) s += "," + format_number(pt.eta_fiber);
  for (double v : {pt.n_pr, pt.mean, pt.variance, pt.dphi, pt.dphi_over_snl, pt.phi0_opt, pt.m2_opt})
    s += "," + format_number(v);
  s += pt.converged ? ",1" : ",0";
  return s;
}

inline nlohmann::ordered_json json_record(const ScanSpec& spec, const SensitivityPoint& pt) {
  nlohmann::ordered_json j;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(); };
  j["index"] = pt.index;
  const auto& names = parameter_names(spec.model);
  for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = num(pt.params[i]);
  if (spec.model == Model::multimode) j["eta_fiber"] = num(pt.eta_fiber);
  j["n_pr"] = num(pt.n_pr);
  j["mean"] = num(pt.mean);
  j["variance"] = num(pt.variance);
  j["dphi"] = num(pt.dphi);
  j["dphi_over_snl"] = num(pt.dphi_over_snl);
  j["phi0_opt"] = num(pt.phi0_opt);
  j["m2_opt"] = num(pt.m2_opt);
  j["converged"] = pt.converged;
  if (!pt.message.empty()) j["message"] = pt.message;
  return j;
}

inline void write_json(const ScanSpec& spec, const std::vector<SensitivityPoint>& points, std::ostream& os) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : points) arr.push_back(json_record(spec, p));
  os << arr.dump(2) << '\n';
}

/// Cell indices already present in a CSV written for the same spec. The header
/// must match exactly; a truncated last line (interrupted write) is ignored.
inline std::set<std::size_t> completed_cells(const ScanSpec& spec, const std::string& path) {
  std::set<std::size_t> done;
  std::ifstream in(path);
  if (!in) return done;
  std::string line;
  if (!std::getline(in, line)) return done;
  if (line != csv_header(spec)) throw ConfigError("cannot resume " + path + ": header does not match the spec");
  const std::size_t ncols = column_names(spec).size();
  while (std::getline(in, line)) {
    if (in.eof()) break;  // no trailing newline: partial row
    if (static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1 != ncols) continue;
    done.insert(std::stoul(line.substr(0, line.find(','))));
  }
  return done;
}

/// Drops a partial trailing line so that appended rows start cleanly.
inline void truncate_partial_line(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return;
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  if (all.empty() || all.back() == '\n') return;
  const auto cut = all.rfind('\n');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << (cut == std::string::npos ? std::string() : all.substr(0, cut + 1));
}

// ---------------------------------------------------------------- config

inline Spacing spacing_from(const std::string& s) {
  if (s == "linear" || s == "lin") return Spacing::linear;
  if (s == "log") return Spacing::log;
  throw ConfigError("spacing must be linear or log, got '" + s + "'");
}

inline OutputFormat format_from(const std::string& s) {
  if (s == "csv") return OutputFormat::csv;
  if (s == "json") return OutputFormat::json;
  throw ConfigError("format must be csv or json, got '" + s + "'");
}

inline std::optional<FiberModel> fiber_from_config(const Config& c) {
  if (!section(c, "fiber") || !get_bool_or(c, "fiber", "enabled", true)) return std::nullopt;
  FiberModel f;
  f.alpha_db = get_number_or(c, "fiber", "alpha_db", f.alpha_db);
  f.c_f = get_number_or(c, "fiber", "c_f", f.c_f);
  f.l_override_km = get_number(c, "fiber", "l_override");
  return f;
}

inline std::size_t count_from(double v, const std::string& what) {
  if (!(v >= 0.0) || v != std::floor(v) || v > 1e9) throw ConfigError(what + " must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

inline ScanSpec spec_from_config(const Config& c) {
  ScanSpec s;
  const auto model = get_string(c, "scan", "model").value_or("two_mode");
  if (model == "two_mode" || model == "two-mode") s.model = Model::two_mode;
  else if (model == "multimode") s.model = Model::multimode;
  else throw ConfigError("unknown model '" + model + "'");

  if (auto opt = get_string(c, "scan", "optimize_over")) {
    std::stringstream ss(*opt);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
      if (item == "m2") s.optimize_m2 = true;
      else if (item != "phi0" && !item.empty()) throw ConfigError("optimize_over accepts phi0 and m2, got '" + item + "'");
    }
  }
  s.m2_min = get_number_or(c, "scan", "m2_min", s.m2_min);
  s.m2_max = get_number_or(c, "scan", "m2_max", s.m2_max);
  s.m2_steps = count_from(get_number_or(c, "scan", "m2_steps", static_cast<double>(s.m2_steps)), "m2_steps");
  s.grid = count_from(get_number_or(c, "scan", "grid", static_cast<double>(s.grid)), "grid");
  const auto layout = get_string(c, "scan", "layout").value_or("graded");
  if (layout == "graded") s.layout = GridLayout::graded;
  else if (layout == "uniform") s.layout = GridLayout::uniform;
  else throw ConfigError("layout must be graded or uniform");
  s.verify_grid = get_bool_or(c, "scan", "verify_grid", false);
  s.budget = get_number_or(c, "scan", "budget", s.budget);

  if (const Config* p = section(c, "params")) {
    for (const auto& [key, node] : *p) {
      (void)node;
      s.fixed[key] = *get_number(c, "params", key);
    }
  }
  for (int k = 1; k <= 2; ++k) {
    const std::string sec = "axis." + std::to_string(k);
    if (!section(c, sec)) continue;
    Axis a;
    a.name = get_string(c, sec, "name").value_or("");
    const auto lo = get_number(c, sec, "min");
    const auto hi = get_number(c, sec, "max");
    if (a.name.empty() || !lo || !hi) throw ConfigError("[" + sec + "] needs name, min and max");
    a.min = *lo;
    a.max = *hi;
    a.steps = count_from(get_number_or(c, sec, "steps", 2.0), sec + ".steps");
    a.spacing = spacing_from(get_string(c, sec, "spacing").value_or("linear"));
    s.fixed.erase(a.name);
    s.axes.push_back(a);
  }
  if (s.model == Model::multimode) s.fiber = fiber_from_config(c);
  s.validate();
  return s;
}

}  // namespace su11::scan
