#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "su11/errors.hpp"

namespace su11 {

struct ScalarMinimum {
  double x = 0.0;
  double value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
};

namespace detail {

// Exceptions from the objective are treated as +inf so that singular points
// (zero derivative, unphysical drives) simply lose the comparison.
inline double safe_eval(const std::function<double(double)>& f, double x) {
  try {
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  } catch (const DomainError&) {
    return std::numeric_limits<double>::infinity();
  } catch (const ConvergenceError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

/// Golden-section search on [a, b]; stops when the bracket is below
/// rel_tol * max(|x|, abs_floor).
inline ScalarMinimum golden_section(const std::function<double(double)>& f, double a, double b,
                                    double rel_tol = 1e-8, double abs_floor = 0.0,
                                    int max_iter = 200) {
  detail::require(b > a, "golden_section: empty bracket");
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double c = b - g * (b - a);
  double d = a + g * (b - a);
  double fc = detail::safe_eval(f, c);
  double fd = detail::safe_eval(f, d);
  ScalarMinimum out;
  out.evaluations = 2;
  for (int it = 0; it < max_iter; ++it) {
    const double scale = std::max(std::abs(0.5 * (a + b)), abs_floor);
    if (b - a <= rel_tol * scale) break;
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = detail::safe_eval(f, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = detail::safe_eval(f, d);
    }
    ++out.evaluations;
  }
  if (fc <= fd) {
    out.x = c;
    out.value = fc;
  } else {
    out.x = d;
    out.value = fd;
  }
  return out;
}

/// Coarse scan over the supplied nodes followed by golden-section refinement
/// between the neighbours of the best node. `to_x` maps search coordinates to
/// objective arguments (identity for linear search, exp for log search).
inline ScalarMinimum scan_then_refine(const std::function<double(double)>& f,
                                      const std::vector<double>& nodes,
                                      const std::function<double(double)>& to_x,
                                      double rel_tol = 1e-8) {
  detail::require(nodes.size() >= 3, "scan_then_refine: need at least three nodes");
  std::vector<double> vals(nodes.size());
  auto g = [&](double u) { return f(to_x(u)); };
  std::size_t best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    vals[i] = detail::safe_eval(g, nodes[i]);
    if (vals[i] < vals[best]) best = i;
  }
  ScalarMinimum out;
  out.evaluations = static_cast<int>(nodes.size());
  if (!std::isfinite(vals[best])) return out;
  const std::size_t lo = best == 0 ? 0 : best - 1;
  const std::size_t hi = std::min(best + 1, nodes.size() - 1);
  auto ref = golden_section(g, nodes[lo], nodes[hi], rel_tol,
                            std::abs(nodes[hi] - nodes[lo]) * 1e-3);
  out.evaluations += ref.evaluations;
  if (ref.value < vals[best]) {
    out.x = to_x(ref.x);
    out.value = ref.value;
  } else {
    out.x = to_x(nodes[best]);
    out.value = vals[best];
  }
  return out;
}

inline std::vector<double> linspace(double a, double b, std::size_t n) {
  detail::require(n >= 2, "linspace: need n >= 2");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = (i + 1 == n) ? b : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1);
  return v;
}

/// Minimizes a phase landscape on (0, pi). Combines the 65-point linear grid
/// with a log-spaced grid toward zero for near-dark-fringe optima, which sit far
/// below the first linear node.
inline ScalarMinimum minimize_phase_landscape(const std::function<double(double)>& f,
                                              double log_floor = 1e-12,
                                              std::size_t linear_points = 65,
                                              double rel_tol = 1e-8) {
  const double pi = std::acos(-1.0);
  auto lin = linspace(0.0, pi, linear_points);
  std::vector<double> interior(lin.begin() + 1, lin.end() - 1);
  auto identity = [](double u) { return u; };
  auto best = scan_then_refine(f, interior, identity, rel_tol);

  const double lhi = std::log(interior.front());
  const double llo = std::log(log_floor);
  if (llo < lhi) {
    const auto n = static_cast<std::size_t>(std::ceil((lhi - llo) / std::log(10.0))) + 2;
    auto lg = linspace(llo, lhi, std::max<std::size_t>(n, 3));
    auto to_phi = [](double u) { return std::exp(u); };
    auto cand = scan_then_refine(f, lg, to_phi, rel_tol * 1e-2);
    best.evaluations += cand.evaluations;
    if (cand.value < best.value) {
      cand.evaluations = best.evaluations;
      best = cand;
    }
  }
  return best;
}

}  // namespace su11
