#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <string>
#include <vector>

#include "su11/errors.hpp"

namespace su11 {

/// Uniform sampling of [t_start, t_end] with both endpoints included.
struct TimeGrid {
  double t_start = 0.0;
  double t_end = 1.0;
  std::size_t n_points = 2;

  TimeGrid() = default;
  TimeGrid(double start, double end, std::size_t n) : t_start(start), t_end(end), n_points(n) {
    validate();
  }

  void validate() const {
    detail::require(std::isfinite(t_start) && std::isfinite(t_end), "TimeGrid: non-finite bounds");
    detail::require(t_end > t_start, "TimeGrid: t_end must exceed t_start");
    detail::require(n_points >= 2, "TimeGrid: need at least two points");
    detail::require(dt() > 0.0, "TimeGrid: zero spacing");
  }

  double duration() const { return t_end - t_start; }
  double dt() const { return (t_end - t_start) / static_cast<double>(n_points - 1); }

  double at(std::size_t i) const {
    if (i + 1 == n_points) return t_end;
    return t_start + static_cast<double>(i) * dt();
  }

  std::vector<double> samples() const {
    std::vector<double> t(n_points);
    for (std::size_t i = 0; i < n_points; ++i) t[i] = at(i);
    return t;
  }

  bool operator==(const TimeGrid& o) const {
    return t_start == o.t_start && t_end == o.t_end && n_points == o.n_points;
  }
  bool operator!=(const TimeGrid& o) const { return !(*this == o); }
};

template <class T>
T trapezoid(const std::vector<T>& f, double dt) {
  detail::require(f.size() >= 2, "trapezoid: need at least two samples");
  T s = 0.5 * (f.front() + f.back());
  for (std::size_t i = 1; i + 1 < f.size(); ++i) s += f[i];
  return s * dt;
}

template <class T>
std::vector<T> cumulative_trapezoid(const std::vector<T>& f, double dt) {
  std::vector<T> out(f.size(), T{});
  for (std::size_t i = 1; i < f.size(); ++i) out[i] = out[i - 1] + 0.5 * dt * (f[i - 1] + f[i]);
  return out;
}

/// Trapezoid plus Gregory end corrections (differences up to sixth order).
/// Falls back to lower orders on short grids; exact for polynomials of the
/// corresponding degree.
template <class T>
T gregory(const std::vector<T>& f, double dt) {
  static constexpr std::array<double, 6> c{-1.0 / 12.0,       -1.0 / 24.0,  -19.0 / 720.0,
                                           -3.0 / 160.0,      -863.0 / 60480.0,
                                           -275.0 / 24192.0};
  const std::size_t n = f.size();
  T s = trapezoid(f, dt);
  std::size_t order = 6;
  while (order > 0 && n < 2 * (order + 1)) --order;

  std::vector<T> fwd(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(order + 1));
  std::vector<T> bwd(f.rbegin(), f.rbegin() + static_cast<std::ptrdiff_t>(order + 1));
  for (std::size_t k = 1; k <= order; ++k) {
    // fwd[0] becomes Delta^k f_0, bwd[0] becomes (-1)^k nabla^k f_n
    for (std::size_t j = 0; j + k <= order; ++j) {
      fwd[j] = fwd[j + 1] - fwd[j];
      bwd[j] = bwd[j + 1] - bwd[j];
    }
    const double sign = (k % 2 == 0) ? 1.0 : -1.0;
    // nabla^k f_n = (-1)^k * bwd[0]
    s += dt * c[k - 1] * (sign * bwd[0] + sign * fwd[0]);
  }
  return s;
}

/// Weights w with sum_i w_i f_i == gregory(f, dt).
inline std::vector<double> gregory_weights(std::size_t n, double dt) {
  detail::require(n >= 2, "gregory_weights: need at least two samples");
  std::vector<double> w(n, dt);
  const std::size_t edge = std::min<std::size_t>(n, 7);
  std::vector<double> e(n, 0.0);
  auto probe = [&](std::size_t i) {
    e[i] = 1.0;
    w[i] = gregory(e, dt);
    e[i] = 0.0;
  };
  for (std::size_t i = 0; i < edge; ++i) {
    probe(i);
    probe(n - 1 - i);
  }
  return w;
}

/// Trapezoid weights for arbitrary increasing nodes.
inline std::vector<double> trapezoid_weights(const std::vector<double>& x) {
  detail::require(x.size() >= 2, "trapezoid_weights: need at least two nodes");
  std::vector<double> w(x.size(), 0.0);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double h = x[i + 1] - x[i];
    detail::require(h > 0.0, "trapezoid_weights: nodes must increase");
    w[i] += 0.5 * h;
    w[i + 1] += 0.5 * h;
  }
  return w;
}

}  // namespace su11
