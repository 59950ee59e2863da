#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <limits>

#include "su11/errors.hpp"
#include "su11/optimize.hpp"

namespace su11 {

using cplx = std::complex<double>;

struct TwoModeConfig {
  double m1 = 0.0;
  double m2 = 0.0;
  double eta_12 = 1.0;
  double eta_det = 1.0;
  double n0 = 0.0;
  double phi = 0.0;

  void validate() const {
    detail::require(std::isfinite(m1) && m1 >= 0.0, "TwoModeConfig: m1 must be >= 0");
    detail::require(std::isfinite(m2) && m2 >= 0.0, "TwoModeConfig: m2 must be >= 0");
    detail::require(eta_12 >= 0.0 && eta_12 <= 1.0, "TwoModeConfig: eta_12 outside [0,1]");
    detail::require(eta_det >= 0.0 && eta_det <= 1.0, "TwoModeConfig: eta_det outside [0,1]");
    detail::require(std::isfinite(n0) && n0 >= 0.0, "TwoModeConfig: n0 must be >= 0");
    detail::require(std::isfinite(phi), "TwoModeConfig: phi must be finite");
  }
};

struct ComplexMatrix2 {
  std::array<cplx, 4> a{};

  cplx& operator()(int r, int c) { return a[static_cast<std::size_t>(2 * r + c)]; }
  const cplx& operator()(int r, int c) const { return a[static_cast<std::size_t>(2 * r + c)]; }

  ComplexMatrix2 operator*(const ComplexMatrix2& o) const {
    ComplexMatrix2 r;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) r(i, j) = (*this)(i, 0) * o(0, j) + (*this)(i, 1) * o(1, j);
    return r;
  }
};

struct MomentPair {
  double mean = 0.0;
  double variance = 0.0;
};

/**
 * Affine phase bracket p e^{-i phi} - r, stored as p and the offset d = p - r
 * so that the value p(e^{-i phi} - 1) + d stays accurate near the dark fringe
 * where p and r are both large and nearly equal.
 */
struct DarkBracket {
  double p = 0.0;
  double r = 0.0;
  double d = 0.0;

  cplx value(double phi) const {
    const double s = std::sin(0.5 * phi);
    return cplx(-2.0 * s * s * p + d, -std::sin(phi) * p);
  }
  double norm(double phi) const { return std::norm(value(phi)); }
  /// d|value|^2/dphi
  double dnorm(double phi) const { return 2.0 * p * r * std::sin(phi); }
};

namespace detail {

// r = sqrt(eta) * r1 with p^2 - r1^2 supplied separately (already free of
// cancellation) so that d = (p - r1) + (1 - sqrt(eta)) r1 never subtracts two
// large numbers.
inline DarkBracket make_bracket(double p, double r1, double p2_minus_r1sq, double eta) {
  const double se = std::sqrt(eta);
  DarkBracket b;
  b.p = p;
  b.r = se * r1;
  const double p_minus_r1 = (p + r1) > 0.0 ? p2_minus_r1sq / (p + r1) : 0.0;
  b.d = p_minus_r1 + (1.0 - eta) / (1.0 + se) * r1;
  return b;
}

}  // namespace detail

/// Bracket of the mechanics-to-light transfer,
/// sqrt(e^{M2}-1) e^{M1/2} e^{-i phi} - sqrt(eta) e^{M2/2} sqrt(e^{M1}-1).
inline DarkBracket transfer_bracket(double m1, double m2, double eta) {
  const double e1 = std::expm1(m1);
  const double e2 = std::expm1(m2);
  const double p = std::sqrt(e2) * std::exp(0.5 * m1);
  const double r1 = std::exp(0.5 * m2) * std::sqrt(e1);
  // p^2 - r1^2 = e2 - e1 = e^{M1} expm1(M2 - M1)
  return detail::make_bracket(p, r1, std::exp(m1) * std::expm1(m2 - m1), eta);
}

inline ComplexMatrix2 tms_matrix(double m) {
  detail::require(std::isfinite(m) && m >= 0.0, "tms_matrix: m must be >= 0");
  const double c = std::exp(0.5 * m);
  const double s = std::sqrt(std::expm1(m));
  ComplexMatrix2 p;
  p(0, 0) = -c;
  p(0, 1) = cplx(0.0, s);
  p(1, 0) = cplx(0.0, s);
  p(1, 1) = c;
  return p;
}

/// Coefficient of the initial mechanical operator in the detected light.
inline cplx mechanics_to_light_transfer(const TwoModeConfig& cfg) {
  cfg.validate();
  const auto b = transfer_bracket(cfg.m1, cfg.m2, cfg.eta_12);
  // -i sqrt(eta_det) (r - e^{i phi} p) = i sqrt(eta_det) conj(bracket)
  return cplx(0.0, 1.0) * std::sqrt(cfg.eta_det) * std::conj(b.value(cfg.phi));
}

inline double probe_number(double m1, double n0) {
  detail::require(m1 >= 0.0 && n0 >= 0.0, "probe_number: arguments must be >= 0");
  return (n0 + 1.0) * std::exp(m1) - 1.0;
}

inline double snl(double n_pr) {
  detail::require(n_pr > 0.0, "snl: probe number must be > 0");
  return 0.5 / std::sqrt(n_pr);
}

inline MomentPair output_moments(const TwoModeConfig& cfg) {
  cfg.validate();
  const double mean =
      (cfg.n0 + 1.0) * cfg.eta_det * transfer_bracket(cfg.m1, cfg.m2, cfg.eta_12).norm(cfg.phi);
  return {mean, mean * (mean + 1.0)};
}

inline double derivative_mean_phi(const TwoModeConfig& cfg) {
  cfg.validate();
  return (cfg.n0 + 1.0) * cfg.eta_det * transfer_bracket(cfg.m1, cfg.m2, cfg.eta_12).dnorm(cfg.phi);
}

/// Phase uncertainty from error propagation. At a phase where the derivative
/// vanishes on an exact dark fringe the phi -> 0 limit 1/(2 p sqrt((n0+1) eta_det))
/// is returned; any other zero-derivative point is rejected.
inline double sensitivity(const TwoModeConfig& cfg) {
  cfg.validate();
  const auto b = transfer_bracket(cfg.m1, cfg.m2, cfg.eta_12);
  const double k = (cfg.n0 + 1.0) * cfg.eta_det;
  const double dn = k * b.dnorm(cfg.phi);
  if (dn == 0.0) {
    const bool on_fringe = std::abs(std::remainder(cfg.phi, 2.0 * std::acos(-1.0))) == 0.0;
    if (on_fringe && b.p > 0.0 && k > 0.0 && std::abs(b.d) <= 1e-12 * b.p)
      return 0.5 / (b.p * std::sqrt(k));
    throw DomainError("sensitivity: zero phase derivative");
  }
  const double mean = k * b.norm(cfg.phi);
  return std::sqrt(mean * (mean + 1.0)) / std::abs(dn);
}

inline double optimal_m2(double m1, double eta_12) {
  detail::require(m1 > 0.0, "optimal_m2: m1 must be > 0");
  detail::require(eta_12 > 0.0 && eta_12 <= 1.0, "optimal_m2: eta_12 must be in (0,1]");
  if (eta_12 == 1.0) return m1;
  return -std::log1p(-eta_12 * (-std::expm1(-m1)));
}

inline double optimal_sensitivity(double m1, double eta_12, double eta_det, double n0) {
  detail::require(m1 > 0.0, "optimal_sensitivity: m1 must be > 0");
  detail::require(eta_12 > 0.0 && eta_12 <= 1.0, "optimal_sensitivity: eta_12 must be in (0,1]");
  detail::require(eta_det > 0.0 && eta_det <= 1.0, "optimal_sensitivity: eta_det must be in (0,1]");
  detail::require(n0 >= 0.0, "optimal_sensitivity: n0 must be >= 0");
  return std::sqrt(1.0 / eta_12 - 1.0 + std::exp(-m1)) /
         (2.0 * std::sqrt(eta_det * (n0 + 1.0) * std::expm1(m1)));
}

struct PhaseOptimum {
  double phi0 = 0.0;
  double sensitivity = std::numeric_limits<double>::infinity();
  bool at_limit = false;  ///< phi0 -> 0 dark-fringe limit won
};

/// Minimizes sensitivity over phi0 in (lo, hi); cfg.phi is ignored.
inline PhaseOptimum optimize_phase(TwoModeConfig cfg, double lo = 0.0,
                                   double hi = std::acos(-1.0)) {
  cfg.validate();
  detail::require(hi > lo && lo >= 0.0, "optimize_phase: empty bracket");
  auto f = [&](double phi) {
    TwoModeConfig c = cfg;
    c.phi = phi;
    return sensitivity(c);
  };

  PhaseOptimum out;
  const auto b = transfer_bracket(cfg.m1, cfg.m2, cfg.eta_12);
  ScalarMinimum best;
  if (lo == 0.0 && hi == std::acos(-1.0)) {
    const double floor = 1e-6 / std::max(1.0, b.p);
    best = minimize_phase_landscape(f, std::min(floor, 1e-8));
  } else {
    best = scan_then_refine(f, linspace(lo, hi, 65), [](double u) { return u; });
  }
  out.phi0 = best.x;
  out.sensitivity = best.value;

  if (lo == 0.0) {
    TwoModeConfig c0 = cfg;
    c0.phi = 0.0;
    const double lim = detail::safe_eval([&](double) { return sensitivity(c0); }, 0.0);
    if (lim <= out.sensitivity) {
      out = {0.0, lim, true};
    }
  }
  if (!std::isfinite(out.sensitivity))
    throw DomainError("optimize_phase: sensitivity is not finite anywhere in the bracket");
  return out;
}

}  // namespace su11
