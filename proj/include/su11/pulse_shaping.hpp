#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

#include "su11/errors.hpp"
#include "su11/quadrature.hpp"

namespace su11 {

/// Sampled interaction rate mu(t) together with its running strength M(t).
struct DriveEnvelope {
  TimeGrid grid;
  std::vector<double> mu;
  std::vector<double> cumulative_m;

  double net_strength() const { return cumulative_m.empty() ? 0.0 : cumulative_m.back(); }
};

/// Square-normalized complex envelope.
struct TemporalMode {
  TimeGrid grid;
  std::vector<std::complex<double>> h;

  double norm_squared() const {
    std::vector<double> a(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) a[i] = std::norm(h[i]);
    return gregory(a, grid.dt());
  }
};

namespace detail {

inline void check_samples(const TimeGrid& g, const std::vector<double>& mu) {
  g.validate();
  require(mu.size() == g.n_points, "drive: sample count does not match grid");
  for (double v : mu) require(std::isfinite(v) && v >= 0.0, "drive: rates must be finite and >= 0");
}

inline TemporalMode normalized(const TimeGrid& g, std::vector<std::complex<double>> h) {
  TemporalMode m{g, std::move(h)};
  const double n2 = m.norm_squared();
  require(n2 > 0.0 && std::isfinite(n2), "mode: zero or non-finite norm");
  const double s = 1.0 / std::sqrt(n2);
  for (auto& v : m.h) v *= s;
  return m;
}

}  // namespace detail

/// Fills M(t) by the trapezoid rule.
inline DriveEnvelope cumulative_strength(const TimeGrid& grid, std::vector<double> mu) {
  detail::check_samples(grid, mu);
  DriveEnvelope d{grid, std::move(mu), {}};
  d.cumulative_m = cumulative_trapezoid(d.mu, grid.dt());
  return d;
}

inline DriveEnvelope boxcar_drive(const TimeGrid& grid, double mu) {
  return cumulative_strength(grid, std::vector<double>(grid.n_points, mu));
}

/// True when every sample equals the first within rel_tol.
inline bool is_constant(const DriveEnvelope& d, double rel_tol = 1e-12) {
  if (d.mu.empty()) return false;
  const double ref = d.mu.front();
  return std::all_of(d.mu.begin(), d.mu.end(), [&](double v) {
    return std::abs(v - ref) <= rel_tol * std::abs(ref);
  });
}

inline TemporalMode output_mode(const DriveEnvelope& drive) {
  const double m = drive.net_strength();
  detail::require(m >= 1e-9, "output_mode: net strength must be >= 1e-9");
  std::vector<std::complex<double>> h(drive.mu.size());
  const double norm = 1.0 / std::sqrt(std::expm1(m));
  for (std::size_t i = 0; i < h.size(); ++i)
    h[i] = std::sqrt(drive.mu[i]) * std::exp(0.5 * drive.cumulative_m[i]) * norm;
  return detail::normalized(drive.grid, std::move(h));
}

inline TemporalMode input_mode(const DriveEnvelope& drive) {
  const double m = drive.net_strength();
  detail::require(m >= 1e-9, "input_mode: net strength must be >= 1e-9");
  std::vector<std::complex<double>> h(drive.mu.size());
  const double norm = 1.0 / std::sqrt(-std::expm1(-m));
  for (std::size_t i = 0; i < h.size(); ++i)
    h[i] = std::sqrt(drive.mu[i]) * std::exp(-0.5 * drive.cumulative_m[i]) * norm;
  return detail::normalized(drive.grid, std::move(h));
}

/**
 * @brief Second drive whose input mode equals the output mode of @p mu1.
 *
 * With x = M1(t) the running strength of the first drive,
 *   mu2(t) = mu1(t) (e^{M2}-1) / N(x),   N(x) = e^{M2} expm1(M1-x) - expm1(-x),
 *   M2(t)  = ln(e^{M1}-1) + M2 - x - ln N(x).
 * Both terms of N are nonnegative, so the spike at the end of the interval is
 * evaluated without cancellation. The running strength is filled from the
 * closed form rather than re-integrated.
 */
inline DriveEnvelope matched_second_drive(const DriveEnvelope& mu1, double m2_target) {
  detail::require(m2_target > 0.0 && std::isfinite(m2_target), "matched_second_drive: M2 must be > 0");
  const double m1 = mu1.net_strength();
  detail::require(m1 > 0.0, "matched_second_drive: first drive has zero strength");

  const std::size_t n = mu1.mu.size();
  std::vector<double> x = mu1.cumulative_m;
  if (is_constant(mu1)) {
    // exact running strength for the constant-rate family
    const double rate = mu1.mu.front();
    for (std::size_t i = 0; i < n; ++i) x[i] = rate * (mu1.grid.at(i) - mu1.grid.t_start);
    x.back() = m1;
  }

  const double e2 = std::expm1(m2_target);
  const double big_e2 = std::exp(m2_target);
  const double log_e1 = std::log(std::expm1(m1));
  DriveEnvelope out{mu1.grid, std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double z = std::max(m1 - x[i], 0.0);
    const double nn = big_e2 * std::expm1(z) - std::expm1(-x[i]);
    out.mu[i] = mu1.mu[i] * e2 / nn;
    out.cumulative_m[i] = (i == 0) ? 0.0 : log_e1 + m2_target - x[i] - std::log(nn);
  }
  out.cumulative_m.back() = m2_target;
  return out;
}

/// Drive whose input mode reproduces @p h with net strength @p m_target.
inline DriveEnvelope drive_from_input_mode(const TemporalMode& h, double m_target) {
  detail::require(m_target > 0.0 && std::isfinite(m_target), "drive_from_input_mode: M must be > 0");
  const std::size_t n = h.h.size();
  detail::require(n == h.grid.n_points, "drive_from_input_mode: sample count does not match grid");
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::norm(h.h[i]);
  auto cum = cumulative_trapezoid(w, h.grid.dt());
  const double total = cum.back();
  detail::require(std::abs(total - 1.0) < 1e-3, "drive_from_input_mode: mode is not square-normalized");

  const double a = -std::expm1(-m_target);  // 1 - e^{-M}
  DriveEnvelope out{h.grid, std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = cum[i] / total;
    const double denom = 1.0 / a - frac;
    if (!(denom > 0.0))
      throw DomainError("drive_from_input_mode: cumulative weight reaches 1/(1-e^{-M})");
    out.mu[i] = w[i] / total / denom;
    out.cumulative_m[i] = -std::log1p(-a * frac);
  }
  out.cumulative_m.front() = 0.0;
  out.cumulative_m.back() = m_target;
  return out;
}

inline double mode_overlap(const TemporalMode& a, const TemporalMode& b) {
  detail::require(a.grid == b.grid, "mode_overlap: grids differ");
  detail::require(a.h.size() == b.h.size(), "mode_overlap: sample counts differ");
  std::vector<std::complex<double>> p(a.h.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::conj(a.h[i]) * b.h[i];
  return gregory(p, a.grid.dt()).real();
}

/// Overlap of the rising output mode of a boxcar of strength m1 with the
/// decaying input mode of a boxcar of strength m2 on the same interval.
inline double boxcar_overlap(double m1, double m2) {
  detail::require(m1 > 0.0 && m2 > 0.0, "boxcar_overlap: strengths must be > 0");
  const double d = 0.25 * (m1 - m2);
  double sinc_h;
  if (std::abs(m1 - m2) < 1e-6) {
    const double d2 = d * d;
    sinc_h = 1.0 + d2 / 6.0 + d2 * d2 / 120.0;
  } else {
    sinc_h = std::sinh(d) / d;
  }
  return std::sqrt((0.25 * m1 * m2) / (std::sinh(0.5 * m1) * std::sinh(0.5 * m2))) * sinc_h;
}

}  // namespace su11
