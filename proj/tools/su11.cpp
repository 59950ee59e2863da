#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "su11/fock_oracle.hpp"
#include "su11/multimode.hpp"
#include "su11/pulse_shaping.hpp"
#include "su11/scan/config.hpp"
#include "su11/scan/fiber.hpp"
#include "su11/scan/runner.hpp"
#include "su11/scan/studies.hpp"
#include "su11/two_mode.hpp"

using namespace su11;
using namespace su11::scan;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kConvergence = 3, kOracle = 4 };

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_path;
  std::string format;
  std::size_t grid = 0;
  std::size_t threads = 0;
  std::uint64_t seed = 1;
  bool resume = false;
};

Config load(const Options& o) {
  Config c = o.config_path.empty() ? Config{} : load_config(o.config_path);
  for (const auto& s : o.overrides) apply_override(c, s);
  return c;
}

OutputFormat output_format(const Options& o, const Config& c) {
  if (!o.format.empty()) return format_from(o.format);
  return format_from(get_string(c, "scan", "format").value_or("csv"));
}

std::size_t grid_of(const Options& o, const Config& c, const std::string& sec, std::size_t fallback) {
  if (o.grid) return o.grid;
  return count_from(get_number_or(c, sec, "grid", get_number_or(c, "scan", "grid", static_cast<double>(fallback))),
                    "grid");
}

std::size_t threads_of(const Options& o, const Config& c) {
  if (o.threads) return o.threads;
  const double t = get_number_or(c, "scan", "threads", 0.0);
  if (t > 0.0) return count_from(t, "threads");
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Destination stream: the --out file or stdout.
class Sink {
 public:
  Sink(const std::string& path, bool append) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path, append ? std::ios::app : std::ios::trunc);
    if (!*file_) throw ConfigError("cannot open output file " + path);
  }
  std::ostream& os() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

/// Small column-oriented table for the study subcommands.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void write(std::ostream& os, OutputFormat fmt) const {
    if (fmt == OutputFormat::csv) {
      for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
      os << '\n';
      for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << format_number(r[i]);
        os << '\n';
      }
      return;
    }
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      nlohmann::ordered_json j;
      for (std::size_t i = 0; i < r.size(); ++i)
        j[columns[i]] = std::isfinite(r[i]) ? nlohmann::ordered_json(r[i]) : nlohmann::ordered_json();
      arr.push_back(j);
    }
    os << arr.dump(2) << '\n';
  }
};

/// Multimode base parameters from [params]; strengths default to 1.
PhysicalParams physical_base(const Config& c) {
  auto v = parameter_defaults(Model::multimode);
  v["m1"] = 1.0;
  v["m2"] = 1.0;
  if (const Config* p = section(c, "params"))
    for (const auto& [key, node] : *p) {
      (void)node;
      if (!v.count(key) && key != "mu1") throw ConfigError("unknown parameter '" + key + "'");
      v[key] = *get_number(c, "params", key);
    }
  if (!v.count("mu1")) throw ConfigError("[params] mu1 is required");
  return physical_from(v);
}

// ------------------------------------------------------------ subcommands

int cmd_shape(const Options& o) {
  const Config c = load(o);
  const double mu1 = get_number(c, "params", "mu1").value_or(1.0);
  const double m1 = get_number(c, "params", "m1").value_or(1.0);
  const double m2 = get_number(c, "params", "m2").value_or(m1);
  const std::size_t n = grid_of(o, c, "shape", 1024);
  const TimeGrid g(0.0, m1 / mu1, n);
  const auto d1 = boxcar_drive(g, mu1);
  const auto d2 = matched_second_drive(d1, m2);
  const auto h_out = output_mode(d1);
  const auto h_in = input_mode(d2);
  Table t{{"t", "mu1", "mu2", "h_out1", "h_in2"}, {}};
  for (std::size_t i = 0; i < n; ++i)
    t.rows.push_back({g.at(i), d1.mu[i], d2.mu[i], h_out.h[i].real(), h_in.h[i].real()});
  Sink sink(o.out_path, false);
  t.write(sink.os(), output_format(o, c));
  std::fprintf(stderr, "mode overlap %.12f  boxcar-pair overlap %.12f\n", mode_overlap(h_out, h_in),
               boxcar_overlap(m1, m2));
  return kOk;
}

int cmd_scan(const Options& o, Model model) {
  Config c = load(o);
  apply_override(c, std::string("scan.model=") + (model == Model::two_mode ? "two_mode" : "multimode"));
  if (o.grid) apply_override(c, "scan.grid=" + std::to_string(o.grid));
  const ScanSpec spec = spec_from_config(c);
  if (auto w = cost_warning(spec)) std::fprintf(stderr, "warning: %s\n", w->c_str());
  const auto fmt = output_format(o, c);

  RunOptions run;
  run.threads = threads_of(o, c);
  int failures = 0;
  if (fmt == OutputFormat::json) {
    if (o.resume) throw ConfigError("--resume needs CSV output");
    const auto pts = run_scan(spec, run);
    for (const auto& p : pts) failures += !p.converged;
    Sink sink(o.out_path, false);
    write_json(spec, pts, sink.os());
  } else {
    const bool to_file = !o.out_path.empty() && o.out_path != "-";
    bool append = false;
    if (o.resume && to_file) {
      truncate_partial_line(o.out_path);
      run.skip = completed_cells(spec, o.out_path);
      std::ifstream probe(o.out_path);
      append = probe.good() && probe.peek() != std::ifstream::traits_type::eof();
    }
    Sink sink(o.out_path, append);
    auto& os = sink.os();
    if (!append) os << csv_header(spec) << '\n';
    run.on_point = [&](const SensitivityPoint& p) {
      os << csv_row(spec, p) << '\n';
      os.flush();
      if (!p.converged) {
        ++failures;
        std::fprintf(stderr, "cell %zu: %s\n", p.index, p.message.c_str());
      }
    };
    run_scan(spec, run);
  }
  if (failures) std::fprintf(stderr, "%d cell(s) did not converge\n", failures);
  return kOk;
}

int cmd_oracle(const Options& o) {
  const Config c = load(o);
  const std::size_t cases = count_from(get_number_or(c, "oracle", "cases", 30.0), "oracle.cases");
  const double tol = get_number_or(c, "oracle", "tolerance", 1e-4);
  const double m_max = get_number_or(c, "oracle", "m_max", 0.5);
  const std::size_t grid = grid_of(o, c, "oracle", 512);
  const std::size_t max_dim = count_from(get_number_or(c, "oracle", "max_dim", 400.0), "oracle.max_dim");
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  Table t{{"case", "m1", "m2", "eta_12", "eta_det", "n0", "phi", "mean_closed", "mean_fock", "var_fock",
           "fock_dim", "mean_multimode", "var_multimode", "max_abs_err"},
          {}};
  double worst = 0.0;
  for (std::size_t k = 0; k < cases; ++k) {
    TwoModeConfig cfg{m_max * (0.05 + 0.95 * u(rng)), m_max * (0.05 + 0.95 * u(rng)), 0.7 + 0.3 * u(rng),
                      0.7 + 0.3 * u(rng), static_cast<double>(k % 2), 2.0 * std::acos(-1.0) * u(rng)};
    const auto ref = output_moments(cfg);
    const auto fk = fock::simulate_adaptive(cfg, 25, 1e-9, max_dim);
    // the multimode model has no detector loss, so compare it at eta_det = 1
    auto p = PhysicalParams::matched(1.0, cfg.m1, cfg.m2);
    p.eta_tech = cfg.eta_12;
    p.n0 = cfg.n0;
    p.phi = cfg.phi;
    const auto mm = moments_multimode(p, DetectionNodes::graded(p, grid));
    TwoModeConfig unit = cfg;
    unit.eta_det = 1.0;
    const auto ref1 = output_moments(unit);
    const double err = std::max({std::abs(fk.moments.mean - ref.mean), std::abs(fk.moments.variance - ref.variance),
                                 std::abs(mm.mean - ref1.mean), std::abs(mm.variance - ref1.variance)});
    worst = std::max(worst, err);
    t.rows.push_back({static_cast<double>(k), cfg.m1, cfg.m2, cfg.eta_12, cfg.eta_det, cfg.n0, cfg.phi, ref.mean,
                      fk.moments.mean, fk.moments.variance, static_cast<double>(fk.dim), mm.mean, mm.variance, err});
  }
  Sink sink(o.out_path, false);
  t.write(sink.os(), output_format(o, c));
  std::fprintf(stderr, "worst absolute deviation %.3e (tolerance %.1e)\n", worst, tol);
  if (worst > tol) throw OracleMismatch("oracle deviation beyond tolerance");
  return kOk;
}

int cmd_decoherence(const Options& o) {
  const Config c = load(o);
  DecoherenceSettings s;
  if (auto v = get_number_list(c, "decoherence", "c_q"); !v.empty()) s.c_q = v;
  s.n_th = get_number_or(c, "decoherence", "n_th", s.n_th);
  s.gamma = get_number_or(c, "decoherence", "gamma", s.gamma);
  s.n0 = get_number_or(c, "decoherence", "n0", s.n0);
  s.m1_min = get_number_or(c, "decoherence", "m1_min", s.m1_min);
  s.m1_max_factor = get_number_or(c, "decoherence", "m1_max_factor", s.m1_max_factor);
  s.m1_points = count_from(get_number_or(c, "decoherence", "m1_points", static_cast<double>(s.m1_points)), "m1_points");
  s.m2_steps = count_from(get_number_or(c, "decoherence", "m2_steps", static_cast<double>(s.m2_steps)), "m2_steps");
  s.refine = get_bool_or(c, "decoherence", "refine", s.refine);
  s.grid = grid_of(o, c, "decoherence", s.grid);
  s.threads = threads_of(o, c);
  for (double v : s.c_q)
    if (!(v > 0.0)) throw ConfigError("[decoherence] c_q values must be > 0");

  const auto r = decoherence_scan(s);
  Table t{{"c_q", "m1", "m1_over_cq", "m2_opt", "phi0_opt", "dphi", "dphi_over_snl", "ideal_over_snl"}, {}};
  for (const auto& row : r.rows)
    t.rows.push_back({row.c_q, row.m1, row.m1 / row.c_q, row.m2_opt, row.phi0_opt, row.dphi, row.dphi_over_snl,
                      row.ideal_over_snl});
  Sink sink(o.out_path, false);
  t.write(sink.os(), output_format(o, c));
  for (const auto& sm : r.summaries) {
    std::fprintf(stderr, "C_q=%g: minimum %.6g x SNL at M1=%.4g (M1/C_q=%.3f, M2=%.4g)%s%s\n", sm.c_q,
                 sm.best.dphi_over_snl, sm.best.m1, sm.m1_over_cq, sm.best.m2_opt,
                 sm.within_20pct ? "" : "  [outside M1/C_q = 1 +- 20%]", sm.sub_snl ? "" : "  [not sub-SNL]");
  }
  return kOk;
}

int cmd_n0scan(const Options& o) {
  const Config c = load(o);
  N0ScanSettings s;
  s.base = physical_base(c);
  s.fiber = fiber_from_config(c);
  if (auto v = get_number_list(c, "n0scan", "n0_values"); !v.empty()) s.n0_values = v;
  s.m1 = get_number_or(c, "n0scan", "m1", s.m1);
  s.m2_min = get_number_or(c, "n0scan", "m2_min", s.m2_min);
  s.m2_max = get_number_or(c, "n0scan", "m2_max", s.m2_max);
  s.m2_steps = count_from(get_number_or(c, "n0scan", "m2_steps", static_cast<double>(s.m2_steps)), "m2_steps");
  s.grid = grid_of(o, c, "n0scan", s.grid);
  s.threads = threads_of(o, c);

  const auto r = n0_scan(s);
  Table t{{"n0", "m2", "phi0_opt", "dphi_over_snl"}, {}};
  for (const auto& row : r.rows) t.rows.push_back({row.n0, row.m2, row.phi0_opt, row.dphi_over_snl});
  Sink sink(o.out_path, false);
  t.write(sink.os(), output_format(o, c));
  for (const auto& sm : r.summaries)
    std::fprintf(stderr, "n0=%g: minimum %.5f x SNL at M2=%.4f, sub-SNL window [%.4f%s, %.4f%s] width %.4f\n", sm.n0,
                 sm.min_over_snl, sm.m2_at_min, sm.window_lo, sm.open_lo ? " (edge)" : "", sm.window_hi,
                 sm.open_hi ? " (edge)" : "", sm.width());
  if (!r.widths_nonincreasing) std::fprintf(stderr, "warning: sub-SNL window does not narrow monotonically in n0\n");
  return kOk;
}

int cmd_errors(const Options& o) {
  const Config c = load(o);
  const PhysicalParams base = physical_base(c);
  const auto fiber = fiber_from_config(c);
  ErrorBudget b = ErrorBudget::uniform(get_number_or(c, "errors", "rel", 0.0));
  b.m1 = get_number_or(c, "errors", "m1", b.m1);
  b.m2 = get_number_or(c, "errors", "m2", b.m2);
  b.eta_tech = get_number_or(c, "errors", "eta_tech", b.eta_tech);
  b.phi0 = get_number_or(c, "errors", "phi0", b.phi0);
  try {
    b.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  auto ms = get_number_list(c, "errors", "m_values");
  if (ms.empty()) ms = {1.0, 2.0, 3.0};
  const double ratio = get_number_or(c, "errors", "m1_over_m2", 1.0);
  const std::size_t grid = grid_of(o, c, "errors", 256);

  Table t{{"m1", "m2", "eta_tech", "phi0", "variance", "variance_exp", "dphi", "dphi_exp", "degradation", "share_m1",
           "share_m2", "share_eta_tech", "share_phi0"},
          {}};
  for (double m : ms) {
    const auto op = operating_point(with_strengths(base, m * ratio, m), grid, fiber);
    const auto e = error_propagation(op.params, b, op.params.phi, grid);
    t.rows.push_back({op.params.m1, op.params.m2, op.params.eta_tech, op.params.phi, e.variance, e.variance_exp, e.dphi,
                      e.dphi_exp, e.degradation(), e.share.m1, e.share.m2, e.share.eta_tech, e.share.phi0});
  }
  Sink sink(o.out_path, false);
  t.write(sink.os(), output_format(o, c));
  return kOk;
}

int cmd_fiber(const Options& o) {
  const Config c = load(o);
  const PhysicalParams base = physical_base(c);
  FiberModel f = fiber_from_config(c).value_or(FiberModel{});
  auto ms = get_number_list(c, "fiber", "m1_values");
  if (ms.empty()) ms = {base.m1};
  Table t{{"m1", "tau", "tau_gap", "length_km", "eta_fiber"}, {}};
  for (double m : ms) {
    const auto p = with_strengths(base, m, m);
    const double l = delay_length(p, f);
    t.rows.push_back({m, p.tau, p.tau_gap, l, fiber_efficiency(f, l)});
  }
  Sink sink(o.out_path, false);
  t.write(sink.os(), output_format(o, c));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SU(1,1) optomechanical interferometer: sensitivity scans and studies"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "INI experiment manifest");
    sub->add_option("--set", o.overrides, "override, section.key=value (repeatable)");
    sub->add_option("--out", o.out_path, "output file (default stdout)");
    sub->add_option("--format", o.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    sub->add_option("--grid", o.grid, "quadrature nodes");
    sub->add_option("--threads", o.threads, "worker threads");
    sub->add_option("--seed", o.seed, "seed for randomized checks");
  };
  struct Entry {
    const char* name;
    const char* help;
    std::function<int()> run;
  };
  const std::vector<Entry> entries{
      {"shape", "matched second drive and mode envelopes", [&] { return cmd_shape(o); }},
      {"two-mode", "closed-form two-mode maps", [&] { return cmd_scan(o, Model::two_mode); }},
      {"multimode", "full multimode maps", [&] { return cmd_scan(o, Model::multimode); }},
      {"oracle", "cross-validation against the Fock-space simulation", [&] { return cmd_oracle(o); }},
      {"decoherence", "optimum versus quantum cooperativity", [&] { return cmd_decoherence(o); }},
      {"n0scan", "initial phonon number scan", [&] { return cmd_n0scan(o); }},
      {"errors", "classical parameter error budget", [&] { return cmd_errors(o); }},
      {"fiber", "delay length and fiber transmission", [&] { return cmd_fiber(o); }},
  };
  std::vector<CLI::App*> subs;
  for (const auto& e : entries) {
    auto* s = app.add_subcommand(e.name, e.help);
    common(s);
    if (std::string(e.name) == "two-mode" || std::string(e.name) == "multimode")
      s->add_flag("--resume", o.resume, "append missing cells to an existing CSV");
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (subs[i]->parsed()) return entries[i].run();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "invalid parameters: %s\n", e.what());
    return kConfig;
  } catch (const ConvergenceError& e) {
    std::fprintf(stderr, "convergence failure: %s\n", e.what());
    return kConvergence;
  } catch (const OracleMismatch& e) {
    std::fprintf(stderr, "oracle mismatch: %s\n", e.what());
    return kOracle;
  }
  return kOk;
}
