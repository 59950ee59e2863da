#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "su11/scan/config.hpp"
#include "su11/scan/fiber.hpp"
#include "su11/scan/runner.hpp"
#include "su11/scan/studies.hpp"

using namespace su11;
using namespace su11::scan;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string csv_of(const ScanSpec& spec, const std::vector<SensitivityPoint>& pts) {
  std::string s = csv_header(spec) + "\n";
  for (const auto& p : pts) s += csv_row(spec, p) + "\n";
  return s;
}

ScanSpec ideal_map(std::size_t steps) {
  return spec_from_config(parse_config_string(
      "[scan]\nmodel=two_mode\n[params]\neta_12=1\neta_det=1\nn0=0\n"
      "[axis.1]\nname=m1\nmin=0.05\nmax=3.5\nsteps=" +
      std::to_string(steps) + "\n[axis.2]\nname=m2\nmin=0.05\nmax=3.5\nsteps=" + std::to_string(steps) + "\n"));
}

PhysicalParams delay_line_point(double m1, double m2) {
  auto p = PhysicalParams::matched(2.0 * kPi * 3e6, m1, m2);
  p.gamma = 2.0 * kPi * 8.0;
  p.n_th = 600.0;
  p.n0 = 1.0;
  p.tau_gap = 1.0 / (2.0 * kPi * 1.19e9);
  return p;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("su11_test_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

// ------------------------------------------------------------ configuration

TEST(Expression, ArithmeticAndConstants) {
  EXPECT_DOUBLE_EQ(evaluate_expression("2*pi*3e6"), 2.0 * kPi * 3e6);
  EXPECT_DOUBLE_EQ(evaluate_expression("1/(2*pi*1.19e9)"), 1.0 / (2.0 * kPi * 1.19e9));
  EXPECT_DOUBLE_EQ(evaluate_expression(" 1 + 2*3 - 4/2 "), 5.0);
  EXPECT_DOUBLE_EQ(evaluate_expression("-2^2"), -4.0);
  EXPECT_DOUBLE_EQ(evaluate_expression("2^3^2"), 512.0);
  EXPECT_DOUBLE_EQ(evaluate_expression("sqrt(16) + exp(0) + log(1)"), 5.0);
  EXPECT_DOUBLE_EQ(evaluate_expression("1e-3"), 1e-3);
  for (const char* bad : {"", "2*", "(1", "foo", "1 2", "bar(1)", "3)"})
    EXPECT_THROW(evaluate_expression(bad), ConfigError) << bad;
}

TEST(Config, ParsesSectionsAndOverrides) {
  auto c = parse_config_string("; comment\n[params]\nmu1 = 2*pi*3e6\n[axis.1]\nname = m1\nmax = 2\n");
  EXPECT_DOUBLE_EQ(*get_number(c, "params", "mu1"), 2.0 * kPi * 3e6);
  EXPECT_EQ(*get_string(c, "axis.1", "name"), "m1");
  apply_override(c, "axis.1.max=3.5");
  apply_override(c, "params.n0=1");
  apply_override(c, "new.key=7");
  EXPECT_DOUBLE_EQ(*get_number(c, "axis.1", "max"), 3.5);
  EXPECT_DOUBLE_EQ(*get_number(c, "params", "n0"), 1.0);
  EXPECT_DOUBLE_EQ(*get_number(c, "new", "key"), 7.0);
  EXPECT_FALSE(get_number(c, "params", "missing").has_value());
  EXPECT_THROW(apply_override(c, "noequals"), ConfigError);
  EXPECT_THROW(apply_override(c, "nosection=1"), ConfigError);
  EXPECT_THROW(parse_config_string("[broken\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/su11.ini"), ConfigError);
  EXPECT_THROW(get_bool_or(parse_config_string("[a]\nb=maybe\n"), "a", "b", true), ConfigError);
  EXPECT_EQ(get_number_list(parse_config_string("[a]\nb=1, 2*2 ,3\n"), "a", "b"), (std::vector<double>{1, 4, 3}));
}

TEST(ScanSpec, Validation) {
  auto base = "[params]\nm1=1\nm2=1\n";
  EXPECT_NO_THROW(spec_from_config(parse_config_string(base)));
  EXPECT_THROW(spec_from_config(parse_config_string("[params]\nm1=1\n")), ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string(std::string(base) + "bogus=1\n")), ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string(std::string(base) + "phi=0.1\n")), ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string(std::string(base) + "[axis.1]\nname=x\nmin=0\nmax=1\nsteps=3\n")),
               ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string(std::string(base) + "[axis.1]\nname=m1\nmin=0\nmax=1\nsteps=1\n")),
               ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string(
                   std::string(base) + "[axis.1]\nname=m1\nmin=0\nmax=1\nsteps=3\nspacing=log\n")),
               ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string(
                   "[scan]\noptimize_over=phi0,m2\n[params]\nm1=1\n[axis.1]\nname=m2\nmin=0.1\nmax=1\nsteps=3\n")),
               ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string("[scan]\noptimize_over=eta\n[params]\nm1=1\nm2=1\n")),
               ConfigError);
  EXPECT_THROW(spec_from_config(parse_config_string("[scan]\nmodel=three_mode\n")), ConfigError);
  // a multimode scan needs mu1
  EXPECT_THROW(spec_from_config(parse_config_string("[scan]\nmodel=multimode\n[params]\nm1=1\nm2=1\n")),
               ConfigError);
}

TEST(ScanSpec, AxesAndCellOrdering) {
  Axis lin{"m1", 0.1, 0.7, 4, Spacing::linear};
  Axis lg{"m2", 0.01, 10.0, 4, Spacing::log};
  EXPECT_EQ(lin.values().front(), 0.1);
  EXPECT_EQ(lin.values().back(), 0.7);
  EXPECT_EQ(lg.values().front(), 0.01);
  EXPECT_EQ(lg.values().back(), 10.0);
  EXPECT_NEAR(lg.values()[1], 0.1, 1e-14);
  ScanSpec s;
  s.axes = {lin, lg};
  EXPECT_EQ(s.cell_count(), 16u);
  // the first axis varies slowest
  EXPECT_DOUBLE_EQ(s.cell_parameters(1).at("m1"), 0.1);
  EXPECT_NEAR(s.cell_parameters(1).at("m2"), 0.1, 1e-14);
  EXPECT_DOUBLE_EQ(s.cell_parameters(4).at("m1"), lin.values()[1]);
  EXPECT_DOUBLE_EQ(s.cell_parameters(4).at("m2"), 0.01);
  EXPECT_DOUBLE_EQ(s.cell_parameters(0).at("eta_12"), 1.0);
}

// ------------------------------------------------------------ fiber

TEST(Fiber, EfficiencyExamples) {
  FiberModel f;
  EXPECT_EQ(fiber_efficiency(f, 0.0), 1.0);
  EXPECT_NEAR(fiber_efficiency(f, 10.0), std::pow(10.0, -0.17), 1e-15);
  EXPECT_NEAR(fiber_efficiency(f, 10.0), 0.6761, 1e-4);
  EXPECT_THROW(fiber_efficiency(f, -1.0), DomainError);
  EXPECT_THROW(fiber_efficiency(FiberModel{-0.1, 2e8, {}}, 1.0), DomainError);
  EXPECT_THROW(fiber_efficiency(FiberModel{0.17, 0.0, {}}, 1.0), DomainError);
  for (double l : {0.1, 1.0, 50.0}) {
    const double e = fiber_efficiency(f, l);
    EXPECT_GT(e, 0.0);
    EXPECT_LE(e, 1.0);
  }
}

TEST(Fiber, DelayLength) {
  FiberModel f;
  auto p = PhysicalParams::matched(2.0 * kPi * 3e6, 1.0, 1.0);
  // c_f / mu1 = 2e8 m/s / (2 pi 3 MHz) = 10.61 m
  EXPECT_NEAR(delay_length(p, f), 2e8 / (2.0 * kPi * 3e6) * 1e-3, 1e-15);
  EXPECT_NEAR(delay_length(p, f) * 1e3, 10.61, 5e-3);
  EXPECT_NEAR(fiber_efficiency(f, delay_length(p, f)), 0.99958, 1e-5);
  auto q = PhysicalParams::matched(p.mu1, 2.0, 2.0);
  EXPECT_NEAR(delay_length(q, f), 2.0 * delay_length(p, f), 1e-15);
  auto tiny = PhysicalParams::matched(p.mu1, 1e-12, 1.0);
  EXPECT_LT(delay_length(tiny, f), 1e-13);
  p.tau_gap = 1e-9;
  EXPECT_NEAR(delay_length(p, f), 2e8 * (p.tau + 1e-9) * 1e-3, 1e-15);
  f.l_override_km = 3.0;
  EXPECT_EQ(delay_length(p, f), 3.0);
  EXPECT_NEAR(with_fiber(p, f).eta_tech, std::pow(10.0, -0.051), 1e-15);
}

// ------------------------------------------------------------ runner

TEST(RunScan, DeterministicAcrossRunsAndThreads) {
  const auto spec = ideal_map(7);
  const auto a = csv_of(spec, run_scan(spec));
  const auto b = csv_of(spec, run_scan(spec));
  RunOptions threaded;
  threaded.threads = 3;
  const auto c = csv_of(spec, run_scan(spec, threaded));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(RunScan, SnlNormalizationOnEveryRow) {
  const auto spec = ideal_map(9);
  for (const auto& p : run_scan(spec)) {
    ASSERT_TRUE(p.converged) << p.index << " " << p.message;
    EXPECT_NEAR(p.dphi_over_snl, p.dphi * 2.0 * std::sqrt(p.n_pr), 1e-12 * p.dphi_over_snl);
    EXPECT_DOUBLE_EQ(p.n_pr, probe_number(p.params[0], p.params[4]));
  }
}

TEST(RunScan, IdealMapChecksum) {
  const std::size_t n = 12;
  const auto spec = ideal_map(n);
  const auto pts = run_scan(spec);
  for (const auto& p : pts) {
    const double m1 = p.params[0], m2 = p.params[1];
    if (m1 == m2) {
      const double npr = std::expm1(m1);
      EXPECT_NEAR(p.dphi, 0.5 / std::sqrt(npr * (npr + 1.0)), 1e-10 * p.dphi) << m1;
    }
    if (m2 >= m1) {
      EXPECT_LT(p.dphi_over_snl, 1.0) << m1 << " " << m2;
    }
  }
}

TEST(RunScan, OptimalSecondStrengthFollowsClosedForm) {
  const auto spec = spec_from_config(parse_config_string(
      "[scan]\noptimize_over=phi0,m2\nm2_min=0.02\nm2_max=4\nm2_steps=41\n"
      "[params]\neta_12=0.9\neta_det=1\nn0=1\n[axis.1]\nname=m1\nmin=0.5\nmax=3\nsteps=6\n"));
  for (const auto& p : run_scan(spec)) {
    ASSERT_TRUE(p.converged);
    const double m1 = p.params[0];
    EXPECT_LT(p.m2_opt, m1);
    EXPECT_NEAR(p.m2_opt, optimal_m2(m1, 0.9), 1e-3) << m1;
    EXPECT_NEAR(p.dphi, optimal_sensitivity(m1, 0.9, 1.0, 1.0), 1e-6 * p.dphi);
  }
}

TEST(RunScan, CellFailuresAreRecordedNotThrown) {
  const auto spec = spec_from_config(parse_config_string(
      "[params]\nm1=1\nm2=1\n[axis.1]\nname=eta_12\nmin=0.6\nmax=1.4\nsteps=5\n"));
  const auto pts = run_scan(spec);
  ASSERT_EQ(pts.size(), 5u);
  for (const auto& p : pts) {
    const bool valid = p.params[2] <= 1.0;
    EXPECT_EQ(p.converged, valid) << p.params[2];
    if (!valid) {
      EXPECT_FALSE(p.message.empty());
      EXPECT_TRUE(std::isnan(p.dphi));
      EXPECT_NE(csv_row(spec, p).find(",nan,"), std::string::npos);
    }
  }
}

TEST(RunScan, MultimodeCellsCarryFiberEfficiency) {
  const auto spec = spec_from_config(parse_config_string(
      "[scan]\nmodel=multimode\ngrid=96\n[params]\nmu1=2*pi*3e6\ngamma=2*pi*8\nn_th=600\nn0=1\nm2=2\n"
      "[fiber]\nalpha_db=0.17\nc_f=2e8\n[axis.1]\nname=m1\nmin=1\nmax=3\nsteps=3\n"));
  const auto pts = run_scan(spec);
  FiberModel f;
  for (const auto& p : pts) {
    ASSERT_TRUE(p.converged) << p.message;
    auto q = PhysicalParams::matched(2.0 * kPi * 3e6, p.params[5], 2.0);
    EXPECT_NEAR(p.eta_fiber, fiber_efficiency(f, delay_length(q, f)), 1e-14);
    EXPECT_NEAR(p.dphi_over_snl, p.dphi * 2.0 * std::sqrt(p.n_pr), 1e-12 * p.dphi_over_snl);
  }
}

TEST(RunScan, CostWarning) {
  auto spec = spec_from_config(parse_config_string(
      "[scan]\nmodel=multimode\ngrid=1024\nbudget=1e6\n[params]\nmu1=1\nm1=1\nm2=1\n"));
  EXPECT_TRUE(cost_warning(spec).has_value());
  spec.budget = 1e15;
  EXPECT_FALSE(cost_warning(spec).has_value());
  EXPECT_FALSE(cost_warning(ideal_map(5)).has_value());
}

TEST(RunScan, ResumeReproducesFullOutput) {
  const auto spec = ideal_map(5);
  const auto full = csv_of(spec, run_scan(spec));
  const auto path = temp_path("resume.csv");
  {
    // header, 7 rows and half of the 8th
    std::istringstream in(full);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    std::string line;
    for (int k = 0; k < 8 && std::getline(in, line); ++k) out << line << '\n';
    std::getline(in, line);
    out << line.substr(0, line.size() / 2);
  }
  truncate_partial_line(path);
  RunOptions opts;
  opts.skip = completed_cells(spec, path);
  EXPECT_EQ(opts.skip.size(), 7u);
  std::ofstream app(path, std::ios::app | std::ios::binary);
  opts.on_point = [&](const SensitivityPoint& p) { app << csv_row(spec, p) << '\n'; };
  run_scan(spec, opts);
  app.close();
  EXPECT_EQ(slurp(path), full);

  // a file written for another spec is rejected
  const auto other = spec_from_config(parse_config_string("[scan]\nmodel=multimode\n[params]\nmu1=1\nm1=1\nm2=1\n"));
  EXPECT_THROW(completed_cells(other, path), ConfigError);
  std::remove(path.c_str());
}

TEST(RunScan, JsonMirrorsCsv) {
  const auto spec = ideal_map(4);
  const auto pts = run_scan(spec);
  std::ostringstream os;
  write_json(spec, pts, os);
  const auto j = nlohmann::json::parse(os.str());
  ASSERT_EQ(j.size(), pts.size());
  const auto cols = column_names(spec);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (const auto& c : cols) EXPECT_TRUE(j[i].contains(c)) << c;
    EXPECT_EQ(j[i]["index"].get<std::size_t>(), pts[i].index);
    EXPECT_EQ(j[i]["dphi"].get<double>(), pts[i].dphi);
    EXPECT_EQ(j[i]["m1"].get<double>(), pts[i].params[0]);
  }
}

// ------------------------------------------------------------ studies

TEST(ErrorPropagation, ZeroBudgetIsExact) {
  const auto op = operating_point(delay_line_point(2.0, 2.0), 128, FiberModel{});
  const auto e = error_propagation(op.params, ErrorBudget{}, op.params.phi, 128);
  EXPECT_EQ(e.variance_exp, e.variance);
  EXPECT_EQ(e.dphi_exp, e.dphi);
  EXPECT_EQ(e.degradation(), 0.0);
  // the finite-difference phase slope matches the analytic one
  const auto m = evaluate_multimode(op.params, DetectionNodes::graded(op.params, 128));
  EXPECT_NEAR(e.derivative.phi0, m.dmean_dphi, 1e-6 * std::abs(m.dmean_dphi));
  EXPECT_NEAR(e.dphi, op.dphi, 1e-6 * op.dphi);
}

TEST(ErrorPropagation, QuadraticSharesAndAccounting) {
  const auto op = operating_point(delay_line_point(2.0, 1.8), 128, FiberModel{});
  const ErrorBudget b{0.05, 0.04, 0.03, 0.2};
  const auto e = error_propagation(op.params, b, op.params.phi, 128);
  EXPECT_NEAR(e.share.sum(), e.variance_exp - e.variance, 1e-12 * (e.variance_exp - e.variance));
  for (double s : {e.share.m1, e.share.m2, e.share.eta_tech, e.share.phi0}) EXPECT_GT(s, 0.0);
  ErrorBudget d = b;
  d.m2 *= 2.0;
  const auto e2 = error_propagation(op.params, d, op.params.phi, 128);
  EXPECT_NEAR(e2.share.m2, 4.0 * e.share.m2, 1e-12 * e2.share.m2);
  EXPECT_EQ(e2.share.m1, e.share.m1);
  EXPECT_GT(e2.degradation(), e.degradation());
  EXPECT_THROW(error_propagation(op.params, ErrorBudget{-1.0, 0, 0, 0}, op.params.phi, 128), DomainError);
}

TEST(ErrorPropagation, DerivativesAgainstIndependentDifferences) {
  // wide symmetric differences on a coarse independent step
  auto base = delay_line_point(1.5, 1.5);
  base.eta_tech = 0.9;
  const auto op = operating_point(base, 128);
  const auto e = error_propagation(op.params, ErrorBudget::uniform(1e-3), op.params.phi, 128);
  auto mean_at = [&](PhysicalParams q) { return mean_multimode(q, DetectionNodes::graded(q, 128)); };
  const double h = 1e-3;
  auto central = [&](auto set) {
    PhysicalParams a = op.params, b = op.params;
    set(a, h);
    set(b, -h);
    return (mean_at(a) - mean_at(b)) / (2.0 * h);
  };
  const double dm2 = central([](PhysicalParams& q, double s) { q.m2 += s; });
  const double dm1 = central([](PhysicalParams& q, double s) {
    q.m1 += s;
    q.tau = q.m1 / q.mu1;
  });
  const double deta = central([](PhysicalParams& q, double s) { q.eta_tech += s; });
  EXPECT_NEAR(e.derivative.m2, dm2, 1e-4 * std::abs(dm2));
  EXPECT_NEAR(e.derivative.m1, dm1, 1e-4 * std::abs(dm1));
  EXPECT_NEAR(e.derivative.eta_tech, deta, 1e-4 * std::abs(deta));
}

TEST(ErrorPropagation, OneSidedAtUnitEfficiency) {
  auto p = delay_line_point(1.0, 1.2);
  const auto op = operating_point(p, 128);
  ASSERT_EQ(op.params.eta_tech, 1.0);
  const auto e = error_propagation(op.params, ErrorBudget::uniform(1e-3), op.params.phi, 128);
  auto mean_at = [&](double eta) {
    PhysicalParams q = op.params;
    q.eta_tech = eta;
    return mean_multimode(q, DetectionNodes::graded(q, 128));
  };
  const double h = 1e-3;
  const double backward = (3.0 * mean_at(1.0) - 4.0 * mean_at(1.0 - h) + mean_at(1.0 - 2.0 * h)) / (2.0 * h);
  ASSERT_TRUE(std::isfinite(e.derivative.eta_tech));
  EXPECT_NEAR(e.derivative.eta_tech, backward, 1e-4 * std::abs(backward));
}

TEST(ErrorPropagation, ZeroDerivativeRejected) {
  auto p = delay_line_point(1.0, 0.8);
  p.eta_tech = 0.9;
  EXPECT_THROW(error_propagation(p, ErrorBudget::uniform(1e-3), 0.0, 64), DomainError);
}

TEST(Decoherence, InputValidation) {
  DecoherenceSettings s;
  EXPECT_THROW(decoherence_point(s, 0.0, 1.0), DomainError);
  EXPECT_THROW(decoherence_point(s, -5.0, 1.0), DomainError);
  s.c_q = {10.0, 0.0};
  EXPECT_THROW(decoherence_scan(s), DomainError);
}

TEST(Decoherence, LargeCooperativityApproachesClosedForm) {
  DecoherenceSettings s;
  s.grid = 128;
  for (double m1 : {1.0, 3.0}) {
    const auto r = decoherence_point(s, 1e9, m1);
    EXPECT_NEAR(r.ideal_over_snl, optimal_sensitivity(m1, 1.0, 1.0, 1.0) / snl(probe_number(m1, 1.0)), 1e-15);
    EXPECT_NEAR(r.dphi_over_snl, r.ideal_over_snl, 1e-3 * r.ideal_over_snl) << m1;
  }
}

TEST(Decoherence, SmallCooperativityNeverBeatsSnl) {
  DecoherenceSettings s;
  s.grid = 128;
  s.m2_steps = 7;
  for (double m1 : {0.2, 0.5, 1.0, 2.0}) EXPECT_GE(decoherence_point(s, 1.0, m1).dphi_over_snl, 1.0) << m1;
}

TEST(N0Scan, InputValidation) {
  N0ScanSettings s;
  s.base = delay_line_point(1.0, 1.0);
  s.m2_min = 2.0;
  s.m2_max = 1.0;
  EXPECT_THROW(n0_scan(s), DomainError);
}

// ------------------------------------------------------------ CLI

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run_cli(const std::string& args) {
  const char* cli = std::getenv("SU11_CLI");
  if (!cli) return {};
  const auto out = temp_path("cli_stdout.txt");
  const std::string cmd = std::string(cli) + " " + args + " > " + out + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  std::remove(out.c_str());
  return r;
}

std::string config_dir() {
  const char* d = std::getenv("SU11_CONFIGS");
  return d ? d : "";
}

}  // namespace

TEST(Cli, ExitCodes) {
  if (!std::getenv("SU11_CLI")) GTEST_SKIP() << "SU11_CLI not set";
  EXPECT_EQ(run_cli("fiber --set params.mu1=2*pi*3e6").code, 0);
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("nonsense").code, 2);
  EXPECT_EQ(run_cli("two-mode --config /nonexistent.ini").code, 2);
  EXPECT_EQ(run_cli("two-mode --set params.m1=1").code, 2);
  EXPECT_EQ(run_cli("two-mode --set params.m1=1 --set params.m2=1 --set params.bogus=3").code, 2);
  EXPECT_EQ(run_cli("fiber --set params.mu1=1 --set fiber.alpha_db=-1").code, 2);
  EXPECT_EQ(run_cli("oracle --set oracle.cases=2 --set oracle.m_max=3 --set oracle.max_dim=40").code, 3);
  EXPECT_EQ(run_cli("oracle --set oracle.cases=2 --set oracle.tolerance=1e-300").code, 4);
  EXPECT_EQ(run_cli("oracle --set oracle.cases=4 --grid 256").code, 0);
}

TEST(Cli, ShippedConfigsAreByteDeterministic) {
  if (!std::getenv("SU11_CLI")) GTEST_SKIP() << "SU11_CLI not set";
  const std::string cfg = "--config " + config_dir() + "/ideal_map.ini --set axis.1.steps=9 --set axis.2.steps=9";
  const auto a = run_cli("two-mode " + cfg);
  const auto b = run_cli("two-mode " + cfg + " --threads 2");
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(std::count(a.out.begin(), a.out.end(), '\n'), 82);

  const auto j = run_cli("two-mode " + cfg + " --format json");
  ASSERT_EQ(j.code, 0);
  EXPECT_EQ(nlohmann::json::parse(j.out).size(), 81u);

  const auto m = run_cli("multimode --config " + config_dir() +
                         "/delay_line.ini --set axis.1.steps=2 --set axis.2.steps=2 --grid 64");
  EXPECT_EQ(m.code, 0);
  EXPECT_EQ(std::count(m.out.begin(), m.out.end(), '\n'), 5);
}

TEST(Cli, ResumeAppendsMissingCells) {
  if (!std::getenv("SU11_CLI")) GTEST_SKIP() << "SU11_CLI not set";
  const auto path = temp_path("cli_resume.csv");
  const std::string cfg = "two-mode --config " + config_dir() + "/ideal_map.ini --set axis.1.steps=4 --set axis.2.steps=4 --out " + path;
  ASSERT_EQ(run_cli(cfg).code, 0);
  const auto full = slurp(path);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << full.substr(0, full.size() / 2);
  }
  ASSERT_EQ(run_cli(cfg + " --resume").code, 0);
  EXPECT_EQ(slurp(path), full);
  std::remove(path.c_str());
}
