// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "su11/fock_oracle.hpp"
#include "su11/multimode.hpp"
#include "su11/optimize.hpp"
#include "su11/pulse_shaping.hpp"
#include "su11/scan/fiber.hpp"
#include "su11/scan/runner.hpp"
#include "su11/scan/studies.hpp"
#include "su11/two_mode.hpp"
#include "support/naive_kernel.hpp"

using namespace su11;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

double heisenberg(double m) {
  const double npr = std::expm1(m);
  return 0.5 / std::sqrt(npr * (npr + 1.0));
}

// Shipped operating parameters for the delay-line experiment.
PhysicalParams experiment(double m1, double m2) {
  auto p = PhysicalParams::matched(2.0 * kPi * 3e6, m1, m2);
  p.gamma = 2.0 * kPi * 8.0;
  p.n_th = 600.0;
  p.n0 = 1.0;
  p.tau_gap = 1.0 / (2.0 * kPi * 1.19e9);
  p.kappa = 2.0 * kPi * 1.19e9;
  p.g = 2.0 * kPi * 30e6;
  return p;
}

Outcome heisenberg_limit() {
  double worst = 0.0;
  for (double m : {0.5, 1.0, 2.0}) {
    const auto opt = optimize_phase({m, m, 1.0, 1.0, 0.0, 0.0});
    worst = std::max(worst, rel(opt.sensitivity, heisenberg(m)));
    worst = std::max(worst, rel(sensitivity({m, m, 1.0, 1.0, 0.0, 0.0}), heisenberg(m)));
  }
  return {worst <= 1e-10, fmt("worst relative deviation %.2e", worst)};
}

Outcome optimal_m2_curve() {
  double worst_m2 = 0.0, worst_val = 0.0;
  for (double m1 : {0.5, 1.0, 2.0, 3.0}) {
    for (double eta : {0.8, 0.9}) {
      auto at = [&](double m2) { return optimize_phase({m1, m2, eta, 1.0, 0.0, 0.0}).sensitivity; };
      const double step = 1e-3;
      std::vector<double> grid;
      for (int i = 1; i <= 4000; ++i) grid.push_back(i * step);
      std::size_t k = 0;
      std::vector<double> vals(grid.size());
      for (std::size_t i = 0; i < grid.size(); ++i) {
        vals[i] = at(grid[i]);
        if (vals[i] < vals[k]) k = i;
      }
      const auto refined = golden_section(at, grid[k] - step, grid[k] + step, 1e-10);
      worst_m2 = std::max(worst_m2, std::abs(grid[k] - optimal_m2(m1, eta)));
      worst_val = std::max(worst_val, rel(refined.value, optimal_sensitivity(m1, eta, 1.0, 0.0)));
    }
  }
  return {worst_m2 <= 1e-3 && worst_val <= 1e-6,
          fmt("max |M2 - M2opt| %.2e on a 1e-3 grid, max value deviation %.2e", worst_m2, worst_val)};
}

Outcome loss_floor() {
  const double m1 = 10.0, eta = 0.9;
  const double ref = snl(probe_number(m1, 0.0));
  auto at = [&](double m2) { return optimize_phase({m1, m2, eta, 1.0, 0.0, 0.0}).sensitivity; };
  const auto best = scan_then_refine(at, linspace(1.0, 4.0, 61), [](double u) { return u; }, 1e-10);
  const double ratio = best.value / ref;
  return {std::abs(ratio - 1.0 / 3.0) <= 0.01 / 3.0, fmt("optimized ratio %.6f (M2 = %.4f)", ratio, best.x)};
}

Outcome boxcar_overlap_check() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> um(0.1, 5.0);
  const TimeGrid g(0.0, 1.0, 512);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double m1 = um(rng), m2 = um(rng);
    const double num = mode_overlap(output_mode(boxcar_drive(g, m1)), input_mode(boxcar_drive(g, m2)));
    worst = std::max(worst, std::abs(num - boxcar_overlap(m1, m2)));
  }
  const double at44 = boxcar_overlap(4.4, 4.4);
  return {worst <= 1e-10 && at44 < 0.5, fmt("worst deviation %.2e, overlap(4.4, 4.4) = %.5f", worst, at44)};
}

Outcome mode_matching() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = 2048;
  const TimeGrid g(0.0, 1.0, n);
  double worst = 1.0;
  for (int k = 0; k < 50; ++k) {
    // random positive envelope: offset plus a few Fourier components
    const double c0 = 0.1 + u(rng);
    double a[3], ph[3];
    for (int j = 0; j < 3; ++j) a[j] = u(rng) * c0 / 3.0, ph[j] = 2.0 * kPi * u(rng);
    std::vector<double> mu(n);
    for (std::size_t i = 0; i < n; ++i) {
      double v = c0;
      for (int j = 0; j < 3; ++j) v += a[j] * std::cos(2.0 * kPi * (j + 1) * g.at(i) + ph[j]);
      mu[i] = v;
    }
    const double m1 = 0.1 + 4.9 * u(rng), m2 = 0.1 + 4.9 * u(rng);
    const double s = m1 / cumulative_strength(g, mu).net_strength();
    for (auto& v : mu) v *= s;
    const auto d1 = cumulative_strength(g, mu);
    const auto d2 = matched_second_drive(d1, m2);
    worst = std::min(worst, mode_overlap(output_mode(d1), input_mode(d2)));
  }
  return {worst >= 1.0 - 1e-8, fmt("minimum overlap 1 - %.2e", 1.0 - worst)};
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_closed = 0.0, worst_thermal = 0.0, worst_adaptive = 0.0;
  std::size_t max_dim = 0;
  for (int k = 0; k < 30; ++k) {
    const TwoModeConfig cfg{0.5 * u(rng), 0.5 * u(rng), 0.7 + 0.3 * u(rng), 0.7 + 0.3 * u(rng),
                            static_cast<double>(k % 2), 2.0 * kPi * u(rng)};
    const auto ref = output_moments(cfg);
    // the fixed truncation, without the library's leakage guard
    fock::BlockState s(cfg.n0, 25);
    s.squeeze(cfg.m1);
    s.phase_mechanics(cfg.phi);
    s.loss_optical(cfg.eta_12);
    s.squeeze(cfg.m2);
    s.loss_optical(cfg.eta_det);
    const auto fixed = s.optical_moments();
    worst_closed = std::max({worst_closed, std::abs(fixed.mean - ref.mean), std::abs(fixed.variance - ref.variance)});
    worst_thermal = std::max(worst_thermal, std::abs(fixed.variance - fixed.mean * (fixed.mean + 1.0)));

    const auto grown = fock::simulate_adaptive(cfg);
    max_dim = std::max(max_dim, grown.dim);
    worst_adaptive = std::max({worst_adaptive, std::abs(grown.moments.mean - ref.mean),
                               std::abs(grown.moments.variance - ref.variance),
                               std::abs(grown.moments.variance - grown.moments.mean * (grown.moments.mean + 1.0))});
  }
  return {worst_closed <= 1e-4 && worst_thermal <= 1e-4,
          fmt("dim 25: worst closed-form deviation %.2e, worst thermal-relation deviation %.2e; "
              "adaptive truncation (dim <= %zu): worst deviation %.2e",
              worst_closed, worst_thermal, max_dim, worst_adaptive)};
}

Outcome multimode_reduction() {
  double worst = 0.0, min_ratio = INFINITY, max_ratio = 0.0;
  for (double eta : {1.0, 0.9}) {
    for (double m : {0.5, 1.5}) {
      for (double phi : {0.7, 2.0}) {
        auto p = PhysicalParams::matched(1.0, m, 1.2 * m);
        p.eta_tech = eta;
        p.phi = phi;
        const auto ref = output_moments({p.m1, p.m2, eta, 1.0, 0.0, phi});
        auto err = [&](std::size_t n) {
          const auto mm = moments_multimode(p, TimeGrid(p.t3(), p.t4(), n));
          return std::max(rel(mm.mean, ref.mean), rel(mm.variance, ref.variance));
        };
        const double e512 = err(512), e1023 = err(1023);
        worst = std::max(worst, e512);
        min_ratio = std::min(min_ratio, e512 / e1023);
        max_ratio = std::max(max_ratio, e512 / e1023);
      }
    }
  }
  const bool second_order = min_ratio > 3.5 && max_ratio < 4.5;
  return {worst <= 1e-3 && second_order,
          fmt("worst relative error at 512 points %.2e, error ratio on halving in [%.3f, %.3f]", worst, min_ratio,
              max_ratio)};
}

Outcome decoherence_optimum() {
  scan::DecoherenceSettings s;
  const auto r = scan::decoherence_scan(s);
  bool pass = true;
  std::ostringstream os;
  for (const auto& sum : r.summaries) {
    pass = pass && sum.within_20pct;
    os << fmt("C_q=%g: argmin M1=%.3g (%.2f C_q), min %.4f; ", sum.c_q, sum.best.m1, sum.m1_over_cq,
              sum.best.dphi_over_snl);
  }
  const auto& hundred = r.summaries.back();
  const double closeness = rel(hundred.best.dphi_over_snl, hundred.best.ideal_over_snl);
  pass = pass && closeness <= 0.1;
  os << fmt("C_q=100 min vs decoherence-free optimum %.4f at the same M1: off by %.0f%%",
            hundred.best.ideal_over_snl, 100.0 * closeness);
  return {pass, os.str()};
}

Outcome delay_line_diagonal() {
  const scan::FiberModel fiber;
  std::vector<double> ms{0.5, 1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 15};
  std::vector<double> vals;
  for (double m : ms) vals.push_back(scan::operating_point(experiment(m, m), 256, fiber).dphi_over_snl);
  std::size_t k = 0;
  for (std::size_t i = 1; i < vals.size(); ++i)
    if (vals[i] < vals[k]) k = i;
  const bool interior = k > 0 && k + 1 < vals.size();
  const bool pass = interior && vals[k] < 1.0 && vals.front() > vals[k] && vals.back() > 1.0;
  return {pass, fmt("min %.4f at M=%g; %.3f at M=%g, %.3f at M=%g", vals[k], ms[k], vals.front(), ms.front(),
                    vals.back(), ms.back())};
}

Outcome error_propagation_check() {
  const scan::FiberModel fiber;
  const double target[] = {0.05, 0.34, 1.27};
  bool pass = true;
  std::ostringstream os;
  for (int i = 0; i < 3; ++i) {
    const double m = i + 1.0;
    const auto op = scan::operating_point(experiment(m, m), 256, fiber);
    const auto e = scan::error_propagation(op.params, scan::ErrorBudget::uniform(1e-3), op.params.phi);
    const auto zero = scan::error_propagation(op.params, scan::ErrorBudget{}, op.params.phi);
    pass = pass && std::abs(e.degradation() / target[i] - 1.0) <= 0.3 && zero.degradation() == 0.0;
    os << fmt("M=%g: %.3g (target %.0f%%, zero budget %g); ", m, e.degradation(), 100.0 * target[i],
              zero.degradation());
  }
  return {pass, os.str()};
}

Outcome n0_scan_shape() {
  scan::N0ScanSettings s;
  s.base = experiment(1.0, 1.0);
  s.fiber = scan::FiberModel{};
  s.n0_values = {0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0};
  const auto r = scan::n0_scan(s);
  bool monotone = true;
  std::ostringstream os;
  for (std::size_t i = 0; i < r.summaries.size(); ++i) {
    const auto& sm = r.summaries[i];
    if (i > 0 && sm.min_over_snl < r.summaries[i - 1].min_over_snl - 2e-3) monotone = false;
    os << fmt("n0=%g: min %.3f, window [%.2f, %.2f%s]; ", sm.n0, sm.min_over_snl, sm.window_lo, sm.window_hi,
              sm.open_hi ? "+" : "");
  }
  const double lo = r.summaries.front().min_over_snl, hi = r.summaries.back().min_over_snl;
  const bool pass =
      monotone && r.widths_nonincreasing && std::abs(lo - 0.6) <= 0.05 && std::abs(hi - 0.8) <= 0.05;
  os << (r.widths_nonincreasing ? "widths nonincreasing" : "widths NOT nonincreasing");
  return {pass, os.str()};
}

Outcome kernel_invariants() {
  double herm = 0.0, rank1 = 0.0, naive = 0.0;
  for (const auto& p : {experiment(1.5, 2.0), [] {
         auto q = PhysicalParams::matched(2.0, 1.2, 0.8);
         q.gamma = 2e-3;
         q.n_th = 150.0;
         q.tau_gap = 0.3;
         return q;
       }()}) {
    const auto nodes = DetectionNodes::uniform(p, 64);
    for (auto tag : {ReservoirTag::initial_phonon, ReservoirTag::thermal_bath}) {
      const auto k = correlation_kernel(p, nodes, tag);
      double scale = 0.0;
      for (auto v : k.values) scale = std::max(scale, std::abs(v));
      for (std::size_t i = 0; i < k.size(); ++i)
        for (std::size_t j = 0; j < k.size(); ++j)
          herm = std::max(herm, std::abs(k(i, j) - std::conj(k(j, i))) / scale);
    }
    const auto k0 = correlation_kernel(p, DetectionNodes::graded(p, 257), ReservoirTag::initial_phonon);
    const double d = k0.diagonal_integral();
    rank1 = std::max(rank1, rel(k0.squared_integral(), d * d));

    const auto fast = correlation_kernel(p, nodes, ReservoirTag::thermal_bath, InnerRule::trapezoid);
    const auto slow = oracle::naive_thermal_kernel(p, nodes);
    double scale = 0.0;
    for (auto v : slow) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < slow.size(); ++i) naive = std::max(naive, std::abs(fast.values[i] - slow[i]) / scale);
  }
  return {herm <= 1e-10 && rank1 <= 1e-8 && naive <= 1e-10,
          fmt("hermiticity %.1e, rank-one %.1e, prefix-sum vs naive at N=64 %.1e", herm, rank1, naive)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"Heisenberg limit", heisenberg_limit},
      {"optimal-M2 curve", optimal_m2_curve},
      {"loss floor", loss_floor},
      {"boxcar overlap", boxcar_overlap_check},
      {"mode matching", mode_matching},
      {"oracle equivalence", oracle_equivalence},
      {"multimode reduction", multimode_reduction},
      {"decoherence optimum", decoherence_optimum},
      {"delay-line diagonal", delay_line_diagonal},
      {"error propagation", error_propagation_check},
      {"n0 scan shape", n0_scan_shape},
      {"kernel invariants", kernel_invariants},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("criterion %2zu %s: %s [%.1f s] %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
