#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <thread>
#include <vector>

#include "su11/multimode.hpp"
#include "su11/optimize.hpp"
#include "su11/scan/fiber.hpp"
#include "su11/two_mode.hpp"

namespace su11::scan {

namespace detail {

/// Evaluates f(i) for i in [0, n) on up to `threads` workers; results land in
/// their own slot so the outcome does not depend on scheduling.
template <class T>
std::vector<T> parallel_map(std::size_t n, std::size_t threads, const std::function<T(std::size_t)>& f) {
  std::vector<T> out(n);
  const std::size_t nt = std::max<std::size_t>(1, std::min(threads, n));
  if (nt == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < nt; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) out[i] = f(i);
    });
  for (auto& th : pool) th.join();
  return out;
}

inline std::vector<double> logspace(double a, double b, std::size_t n) {
  auto u = linspace(std::log(a), std::log(b), n);
  for (auto& v : u) v = std::exp(v);
  u.front() = a;
  u.back() = b;
  return u;
}

}  // namespace detail

/// Phase-optimized multimode sensitivity at one (M1, M2) point.
struct OperatingPoint {
  PhysicalParams params;  ///< phi set to the optimum
  double dphi = NAN;
  double dphi_over_snl = NAN;
};

inline OperatingPoint operating_point(PhysicalParams params, std::size_t grid,
                                      const std::optional<FiberModel>& fiber = std::nullopt) {
  if (fiber) params = with_fiber(params, *fiber);
  const auto opt = optimize_phase_multimode(params, DetectionNodes::graded(params, grid));
  params.phi = opt.phi0;
  return {params, opt.sensitivity, opt.sensitivity / snl(probe_number(params.m1, params.n0))};
}

/// Copy of `base` with strengths (m1, m2); tau follows m1 at the base mu1.
inline PhysicalParams with_strengths(const PhysicalParams& base, double m1, double m2) {
  PhysicalParams p = base;
  p.m1 = m1;
  p.m2 = m2;
  p.tau = m1 / p.mu1;
  return p;
}

// ------------------------------------------------------------ decoherence

struct DecoherenceSettings {
  std::vector<double> c_q{5.0, 10.0, 100.0};
  double n_th = 600.0;
  double gamma = 2.0 * 3.14159265358979323846 * 8.0;
  double n0 = 1.0;
  std::size_t grid = 256;
  double m1_min = 0.1;
  double m1_max_factor = 2.0;  ///< sweep up to this multiple of C_q (capped at the strength limit)
  std::size_t m1_points = 25;
  double m2_lo_factor = 0.5;
  double m2_hi_factor = 2.0;
  std::size_t m2_steps = 9;
  bool refine = true;
  std::size_t threads = 1;
};

struct DecoherenceRow {
  double c_q = NAN;
  double m1 = NAN;
  double m2_opt = NAN;
  double phi0_opt = NAN;
  double dphi = NAN;
  double dphi_over_snl = NAN;
  double ideal_over_snl = NAN;  ///< decoherence-free closed form at the same M1
};

struct DecoherenceSummary {
  double c_q = NAN;
  DecoherenceRow best;
  double m1_over_cq = NAN;
  bool within_20pct = false;
  bool sub_snl = false;
};

struct DecoherenceResult {
  std::vector<DecoherenceRow> rows;
  std::vector<DecoherenceSummary> summaries;
};

/// One point of the decoherence study: lossless, gapless, matched protocol with
/// mu1 = C_q n_th Gamma and tau = M1/mu1; M2 and phi0 are optimized.
inline DecoherenceRow decoherence_point(const DecoherenceSettings& s, double c_q, double m1) {
  su11::detail::require(c_q > 0.0 && std::isfinite(c_q), "decoherence_scan: C_q must be > 0");
  const double mu1 = c_q * s.n_th * s.gamma;
  PhysicalParams base = PhysicalParams::matched(mu1, m1, m1);
  base.gamma = s.gamma;
  base.n_th = s.n_th;
  base.n0 = s.n0;

  auto at_m2 = [&](double m2) {
    auto p = with_strengths(base, m1, m2);
    return optimize_phase_multimode(p, DetectionNodes::graded(p, s.grid));
  };
  const double hi = std::min(s.m2_hi_factor * m1, PhysicalParams::max_strength);
  const auto best = scan_then_refine([&](double m2) { return at_m2(m2).sensitivity; },
                                     linspace(s.m2_lo_factor * m1, hi, s.m2_steps),
                                     [](double u) { return u; }, 1e-4);
  if (!std::isfinite(best.value)) throw ConvergenceError("decoherence_scan: no finite sensitivity");
  const auto ph = at_m2(best.x);
  const double ref = snl(probe_number(m1, s.n0));
  DecoherenceRow r;
  r.c_q = c_q;
  r.m1 = m1;
  r.m2_opt = best.x;
  r.phi0_opt = ph.phi0;
  r.dphi = ph.sensitivity;
  r.dphi_over_snl = ph.sensitivity / ref;
  r.ideal_over_snl = optimal_sensitivity(m1, 1.0, 1.0, s.n0) / ref;
  return r;
}

inline DecoherenceResult decoherence_scan(const DecoherenceSettings& s) {
  for (double c : s.c_q) su11::detail::require(c > 0.0 && std::isfinite(c), "decoherence_scan: C_q must be > 0");
  su11::detail::require(s.m1_points >= 3, "decoherence_scan: need at least three M1 points");
  DecoherenceResult out;
  for (double c_q : s.c_q) {
    const double top = std::min(s.m1_max_factor * c_q, PhysicalParams::max_strength);
    su11::detail::require(top > s.m1_min, "decoherence_scan: empty M1 range");
    const auto m1s = detail::logspace(s.m1_min, top, s.m1_points);
    auto rows = detail::parallel_map<DecoherenceRow>(
        m1s.size(), s.threads, [&](std::size_t i) { return decoherence_point(s, c_q, m1s[i]); });

    std::size_t k = 0;
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i].dphi_over_snl < rows[k].dphi_over_snl) k = i;
    DecoherenceRow best = rows[k];
    if (s.refine) {
      const double lo = std::log(m1s[k == 0 ? 0 : k - 1]);
      const double hi = std::log(m1s[std::min(k + 1, m1s.size() - 1)]);
      auto f = [&](double u) { return decoherence_point(s, c_q, std::exp(u)).dphi_over_snl; };
      const auto g = golden_section(f, lo, hi, 2e-3, 1.0);
      if (g.value < best.dphi_over_snl) best = decoherence_point(s, c_q, std::exp(g.x));
    }
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());

    DecoherenceSummary sum;
    sum.c_q = c_q;
    sum.best = best;
    sum.m1_over_cq = best.m1 / c_q;
    sum.within_20pct = std::abs(sum.m1_over_cq - 1.0) <= 0.2;
    sum.sub_snl = best.dphi_over_snl < 1.0;
    out.summaries.push_back(sum);
  }
  return out;
}

// ------------------------------------------------------------ n0 scan

struct N0ScanSettings {
  PhysicalParams base;  ///< rates, n_th, tau_gap, eta_tech; strengths are overwritten
  std::optional<FiberModel> fiber;
  std::vector<double> n0_values{0.1, 1.0, 10.0, 100.0};
  double m1 = 1.0;
  double m2_min = 0.2;
  double m2_max = 6.0;
  std::size_t m2_steps = 30;
  std::size_t grid = 256;
  std::size_t threads = 1;
};

struct N0Row {
  double n0 = NAN;
  double m2 = NAN;
  double phi0_opt = NAN;
  double dphi_over_snl = NAN;
};

struct N0Summary {
  double n0 = NAN;
  double m2_at_min = NAN;
  double min_over_snl = NAN;
  double window_lo = NAN;  ///< sub-SNL M2 window around the minimum
  double window_hi = NAN;
  bool open_lo = false;  ///< window reaches the scanned range edge
  bool open_hi = false;
  double width() const { return window_hi - window_lo; }
};

struct N0ScanResult {
  std::vector<N0Row> rows;
  std::vector<N0Summary> summaries;
  bool widths_nonincreasing = true;
};

inline double n0_point(const N0ScanSettings& s, double n0, double m2, double* phi0 = nullptr) {
  PhysicalParams p = with_strengths(s.base, s.m1, m2);
  p.n0 = n0;
  const auto op = operating_point(p, s.grid, s.fiber);
  if (phi0) *phi0 = op.params.phi;
  return op.dphi_over_snl;
}

inline N0ScanResult n0_scan(const N0ScanSettings& s) {
  su11::detail::require(s.m2_steps >= 3 && s.m2_max > s.m2_min && s.m2_min > 0.0, "n0_scan: bad M2 range");
  const auto m2s = linspace(s.m2_min, s.m2_max, s.m2_steps);
  N0ScanResult out;
  for (double n0 : s.n0_values) {
    su11::detail::require(n0 >= 0.0, "n0_scan: n0 must be >= 0");
    auto rows = detail::parallel_map<N0Row>(m2s.size(), s.threads, [&](std::size_t i) {
      N0Row r{n0, m2s[i], NAN, NAN};
      r.dphi_over_snl = n0_point(s, n0, m2s[i], &r.phi0_opt);
      return r;
    });
    std::size_t k = 0;
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i].dphi_over_snl < rows[k].dphi_over_snl) k = i;

    N0Summary sum;
    sum.n0 = n0;
    const auto g = golden_section([&](double m2) { return n0_point(s, n0, m2); }, m2s[k == 0 ? 0 : k - 1],
                                  m2s[std::min(k + 1, m2s.size() - 1)], 1e-4);
    if (g.value < rows[k].dphi_over_snl) {
      sum.m2_at_min = g.x;
      sum.min_over_snl = g.value;
    } else {
      sum.m2_at_min = rows[k].m2;
      sum.min_over_snl = rows[k].dphi_over_snl;
    }

    if (sum.min_over_snl < 1.0) {
      auto excess = [&](double m2) { return n0_point(s, n0, m2) - 1.0; };
      auto crossing = [&](double a, double b) {
        double fa = excess(a);
        for (int it = 0; it < 40 && b - a > 1e-6 * std::max(1.0, b); ++it) {
          const double mid = 0.5 * (a + b);
          const double fm = excess(mid);
          if ((fm < 0.0) == (fa < 0.0)) {
            a = mid;
            fa = fm;
          } else {
            b = mid;
          }
        }
        return 0.5 * (a + b);
      };
      std::size_t lo = k, hi = k;
      while (lo > 0 && rows[lo - 1].dphi_over_snl < 1.0) --lo;
      while (hi + 1 < rows.size() && rows[hi + 1].dphi_over_snl < 1.0) ++hi;
      // the refined minimum may sit between grid points that are both above the SNL
      if (rows[k].dphi_over_snl >= 1.0) {
        sum.window_lo = crossing(m2s[lo == 0 ? 0 : lo - 1], sum.m2_at_min);
        sum.window_hi = crossing(sum.m2_at_min, m2s[std::min(hi + 1, m2s.size() - 1)]);
      } else {
        sum.open_lo = lo == 0;
        sum.open_hi = hi + 1 == rows.size();
        sum.window_lo = sum.open_lo ? m2s.front() : crossing(m2s[lo - 1], m2s[lo]);
        sum.window_hi = sum.open_hi ? m2s.back() : crossing(m2s[hi], m2s[hi + 1]);
      }
    } else {
      sum.window_lo = sum.window_hi = sum.m2_at_min;
    }
    if (!out.summaries.empty() && sum.width() > out.summaries.back().width() + 1e-9)
      out.widths_nonincreasing = false;
    out.summaries.push_back(sum);
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());
  }
  return out;
}

// ------------------------------------------------------------ error propagation

/// Relative standard deviations sqrt(Var[P])/P.
struct ErrorBudget {
  double m1 = 0.0;
  double m2 = 0.0;
  double eta_tech = 0.0;
  double phi0 = 0.0;

  static ErrorBudget uniform(double rel) { return {rel, rel, rel, rel}; }

  void validate() const {
    for (double v : {m1, m2, eta_tech, phi0})
      su11::detail::require(std::isfinite(v) && v >= 0.0, "ErrorBudget: entries must be >= 0");
  }
};

struct ParameterSet {
  double m1 = 0.0;
  double m2 = 0.0;
  double eta_tech = 0.0;
  double phi0 = 0.0;
  double sum() const { return m1 + m2 + eta_tech + phi0; }
};

struct ErrorPropagation {
  double mean = NAN;
  double variance = NAN;
  double variance_exp = NAN;
  double dphi = NAN;      ///< without parameter fluctuations
  double dphi_exp = NAN;  ///< with them
  ParameterSet derivative;  ///< d<N>/dP
  ParameterSet share;       ///< (d<N>/dP)^2 Var[P]

  double degradation() const { return dphi_exp / dphi - 1.0; }
};

namespace detail {

/// Derivative of g at x by central differences with relative step 1e-4 and a
/// Richardson cross-check at half the step. Where x + 2h would leave the
/// domain (upper_limit), a second-order backward formula is used instead.
inline double richardson_derivative(const std::function<double(double)>& g, double x,
                                    double upper_limit = INFINITY) {
  const double h = 1e-4 * std::max(std::abs(x), 1e-300);
  auto central = [&](double s) { return (g(x + s) - g(x - s)) / (2.0 * s); };
  auto backward = [&](double s) { return (3.0 * g(x) - 4.0 * g(x - s) + g(x - 2.0 * s)) / (2.0 * s); };
  const bool one_sided = x + h > upper_limit;
  const double d1 = one_sided ? backward(h) : central(h);
  const double d2 = one_sided ? backward(0.5 * h) : central(0.5 * h);
  const double tol = 1e-3 * std::abs(d2) + 1e-7 * (std::abs(g(x)) + 1.0) / std::max(std::abs(x), 1e-300);
  if (std::abs(d1 - d2) > tol) throw ConvergenceError("error_propagation: Richardson check failed");
  return (4.0 * d2 - d1) / 3.0;
}

}  // namespace detail

/**
 * Classical parameter fluctuations added to the photon-number variance:
 * Var_exp = Var[N] + sum_P (d<N>/dP)^2 Var[P] for P in {M1, M2, eta_tech, phi0},
 * with Var[P] = (rel_P * P)^2. M1 is varied at fixed mu1 (so tau follows) and
 * eta_tech is treated as independent of the pulse length.
 */
inline ErrorPropagation error_propagation(const PhysicalParams& params, const ErrorBudget& budget, double phi0,
                                          std::size_t grid = 256) {
  budget.validate();
  PhysicalParams p0 = params;
  p0.phi = phi0;
  p0.validate();
  auto mean_of = [&](const PhysicalParams& q) { return mean_multimode(q, DetectionNodes::graded(q, grid)); };

  ErrorPropagation out;
  const auto mom = evaluate_multimode(p0, DetectionNodes::graded(p0, grid));
  out.mean = mom.mean;
  out.variance = mom.variance;

  out.derivative.m1 = detail::richardson_derivative(
      [&](double v) { return mean_of(with_strengths(p0, v, p0.m2)); }, p0.m1, PhysicalParams::max_strength);
  out.derivative.m2 = detail::richardson_derivative(
      [&](double v) { return mean_of(with_strengths(p0, p0.m1, v)); }, p0.m2, PhysicalParams::max_strength);
  out.derivative.eta_tech = detail::richardson_derivative(
      [&](double v) {
        PhysicalParams q = p0;
        q.eta_tech = v;
        return mean_of(q);
      },
      p0.eta_tech, 1.0);
  out.derivative.phi0 = detail::richardson_derivative(
      [&](double v) {
        PhysicalParams q = p0;
        q.phi = v;
        return mean_of(q);
      },
      phi0);
  if (out.derivative.phi0 == 0.0 || !std::isfinite(out.derivative.phi0))
    throw DomainError("error_propagation: zero phase derivative");

  auto term = [](double d, double rel, double value) {
    const double sd = rel * value;
    return d * d * sd * sd;
  };
  out.share.m1 = term(out.derivative.m1, budget.m1, p0.m1);
  out.share.m2 = term(out.derivative.m2, budget.m2, p0.m2);
  out.share.eta_tech = term(out.derivative.eta_tech, budget.eta_tech, p0.eta_tech);
  out.share.phi0 = term(out.derivative.phi0, budget.phi0, phi0);
  out.variance_exp = out.variance + out.share.sum();
  const double slope = std::abs(out.derivative.phi0);
  out.dphi = std::sqrt(out.variance) / slope;
  out.dphi_exp = std::sqrt(out.variance_exp) / slope;
  return out;
}

}  // namespace su11::scan
