#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <vector>

#include "su11/errors.hpp"
#include "su11/optimize.hpp"
#include "su11/pulse_shaping.hpp"
#include "su11/quadrature.hpp"
#include "su11/two_mode.hpp"

namespace su11 {

/// Physical rates and timing of the double-pass protocol. The first drive is
/// constant at mu1; the second is the matched drive for strength m2.
struct PhysicalParams {
  double mu1 = 0.0;  ///< first-drive rate, 1/s
  double gamma = 0.0;
  double n_th = 0.0;
  double n0 = 0.0;
  double tau = 0.0;
  double tau_gap = 0.0;
  double m1 = 0.0;
  double m2 = 0.0;
  double eta_tech = 1.0;
  double phi = 0.0;
  double kappa = 0.0;  ///< validity checks only, 0 = unspecified
  double g = 0.0;      ///< validity checks only, 0 = unspecified

  static constexpr double max_strength = 150.0;

  /// Sets tau = m1/mu1.
  static PhysicalParams matched(double mu1, double m1, double m2) {
    PhysicalParams p;
    p.mu1 = mu1;
    p.m1 = m1;
    p.m2 = m2;
    p.tau = m1 / mu1;
    return p;
  }

  double t1() const { return 0.0; }
  double t2() const { return tau; }
  double t3() const { return tau + tau_gap; }
  double t4() const { return 2.0 * tau + tau_gap; }

  double c_q() const {
    const double rate = n_th * gamma;
    return rate > 0.0 ? mu1 / rate : std::numeric_limits<double>::infinity();
  }

  void validate() const {
    using detail::require;
    require(std::isfinite(mu1) && mu1 > 0.0, "PhysicalParams: mu1 must be > 0");
    require(std::isfinite(tau) && tau > 0.0, "PhysicalParams: tau must be > 0");
    require(std::abs(m1 - mu1 * tau) <= 1e-9 * std::abs(m1), "PhysicalParams: m1 != mu1*tau");
    require(m1 > 0.0 && m1 <= max_strength, "PhysicalParams: m1 outside (0, 150]");
    require(m2 > 0.0 && m2 <= max_strength, "PhysicalParams: m2 outside (0, 150]");
    require(std::isfinite(gamma) && gamma >= 0.0, "PhysicalParams: gamma must be >= 0");
    require(std::isfinite(n_th) && n_th >= 0.0, "PhysicalParams: n_th must be >= 0");
    require(std::isfinite(n0) && n0 >= 0.0, "PhysicalParams: n0 must be >= 0");
    require(std::isfinite(tau_gap) && tau_gap >= 0.0, "PhysicalParams: tau_gap must be >= 0");
    require(eta_tech >= 0.0 && eta_tech <= 1.0, "PhysicalParams: eta_tech outside [0,1]");
    require(std::isfinite(phi), "PhysicalParams: phi must be finite");
    require(kappa >= 0.0 && g >= 0.0, "PhysicalParams: kappa and g must be >= 0");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (kappa > 0.0 && g > 0.0) {
      if (std::abs(4.0 * g * g / kappa - mu1) > 1e-6 * mu1)
        w.emplace_back("mu1 differs from 4 g^2 / kappa");
      if (g / kappa > 0.1) w.emplace_back("g/kappa > 0.1: adiabatic elimination questionable");
    }
    if (gamma * tau > 1e-3 * m1) w.emplace_back("Gamma*tau > 1e-3*M1: damping neglected in M(t,t')");
    return w;
  }
};

enum class ReservoirTag { initial_phonon, thermal_bath };

/// How integrals over the reservoir time t' are done inside the kernel.
enum class InnerRule {
  trapezoid,  ///< running trapezoid sums on the detection nodes
  exact       ///< closed-form primitives of the exponential branches
};

enum class GridLayout { uniform, graded };

/**
 * Quadrature nodes on the detection interval [t3, t4]. Positions are stored as
 * z = mu1 (t4 - t), the strength still to be accumulated by the first drive at
 * the mirrored time; small z near the end of the interval keep full relative
 * precision. Nodes are ordered in time (z decreasing).
 */
struct DetectionNodes {
  double mu1 = 1.0;
  std::vector<double> z;
  std::vector<double> w;  ///< trapezoid weights in seconds

  std::size_t size() const { return z.size(); }

  std::vector<double> times(const PhysicalParams& p) const {
    std::vector<double> t(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) t[i] = p.t4() - z[i] / mu1;
    return t;
  }

  static DetectionNodes from_z(double mu1, std::vector<double> z) {
    detail::require(z.size() >= 2, "DetectionNodes: need at least two nodes");
    DetectionNodes d;
    d.mu1 = mu1;
    d.z = std::move(z);
    d.w.assign(d.z.size(), 0.0);
    for (std::size_t i = 0; i + 1 < d.z.size(); ++i) {
      const double h = (d.z[i] - d.z[i + 1]) / mu1;
      detail::require(h > 0.0, "DetectionNodes: nodes must be increasing in time");
      d.w[i] += 0.5 * h;
      d.w[i + 1] += 0.5 * h;
    }
    return d;
  }

  static DetectionNodes uniform(const PhysicalParams& p, std::size_t n) {
    detail::require(n >= 2, "DetectionNodes: need at least two nodes");
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i)
      z[i] = p.m1 * static_cast<double>(n - 1 - i) / static_cast<double>(n - 1);
    return from_z(p.mu1, std::move(z));
  }

  /// Nodes uniform in v = ln N(z), the log of the matched-drive denominator.
  /// Spacing is uniform in time away from the end and geometric inside the
  /// terminal spike of the matched second drive (width ~ e^{-M2}/mu1). Weights
  /// are Gregory weights in v times dt/dv; the diagonal integrands are smooth
  /// exponentials in v, so they converge far faster than a trapezoid in t.
  static DetectionNodes graded(const PhysicalParams& p, std::size_t n) {
    detail::require(n >= 2, "DetectionNodes: need at least two nodes");
    const double nn_min = -std::expm1(-p.m1);
    const double scale = std::exp(p.m2) - std::exp(-p.m1);
    const double h = (p.m1 + p.m2) / static_cast<double>(n - 1);
    const auto gw = gregory_weights(n, h);
    DetectionNodes d;
    d.mu1 = p.mu1;
    d.z.resize(n);
    d.w.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double v = h * static_cast<double>(k);
      const double z = (k + 1 == n) ? p.m1 : std::log1p(nn_min * std::expm1(v) / scale);
      d.z[n - 1 - k] = z;
      // dN/dz = e^z * scale, N = nn_min e^v
      d.w[n - 1 - k] = gw[k] * nn_min * std::exp(v - z) / (scale * p.mu1);
    }
    d.z.back() = 0.0;
    return d;
  }

  static DetectionNodes from_grid(const PhysicalParams& p, const TimeGrid& grid) {
    grid.validate();
    const double tol = 1e-12 * p.t4();
    detail::require(std::abs(grid.t_start - p.t3()) <= tol && std::abs(grid.t_end - p.t4()) <= tol,
                    "DetectionNodes: grid must span [t3, t4]");
    std::vector<double> z(grid.n_points);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = p.mu1 * (p.t4() - grid.at(i));
    z.front() = p.m1;
    z.back() = 0.0;
    return from_z(p.mu1, std::move(z));
  }

  static DetectionNodes make(const PhysicalParams& p, std::size_t n, GridLayout layout) {
    return layout == GridLayout::graded ? graded(p, n) : uniform(p, n);
  }
};

/**
 * @brief Closed-form transfer functions of the mode-matched protocol.
 *
 * Everything is written in terms of z (see DetectionNodes) and
 *   N(z) = e^{M2} expm1(z) + 1 - e^{z-M1},
 * the denominator of the matched second drive, whose two terms never cancel.
 * With G(z) = sqrt(mu1) e^{-(M1-z)/2} / N(z):
 *   h_out2 = G sqrt(e^{M1}-1) e^{M2/2},
 * and the first-interval thermal branch at reservoir strength y = mu1 (t'-t1) is
 *   before the loop-back arrives:  G [c(phi) e^{-y/2} + sqrt(eta) (e^{M2}-1) e^{y/2}]
 *   after:                          G P e^{-i phi} e^{-y/2},
 * with c(phi) = P e^{-i phi} - sqrt(eta) (e^{M1+M2}-1) kept as a DarkBracket.
 */
class MatchedProtocol {
 public:
  explicit MatchedProtocol(const PhysicalParams& p) : p_(p) {
    p_.validate();
    e1_ = std::expm1(p_.m1);
    e2_ = std::expm1(p_.m2);
    big_e1_ = std::exp(p_.m1);
    big_e2_ = std::exp(p_.m2);
    q_ = e1_ + e2_ + e1_ * e2_;
    transfer_ = transfer_bracket(p_.m1, p_.m2, p_.eta_tech);
    const double pc = std::sqrt(e1_) * std::sqrt(e2_) * std::exp(0.5 * (p_.m1 + p_.m2));
    // pc^2 - q^2 expanded into same-sign terms
    const double diff = -(e1_ * e1_ + e2_ * e2_ + e1_ * e2_ + e1_ * e1_ * e2_ + e1_ * e2_ * e2_);
    thermal_ = detail::make_bracket(pc, q_, diff, p_.eta_tech);
    sqrt_eta_ = std::sqrt(p_.eta_tech);
  }

  const PhysicalParams& params() const { return p_; }
  const DarkBracket& transfer() const { return transfer_; }
  const DarkBracket& thermal() const { return thermal_; }
  double e1() const { return e1_; }
  double e2() const { return e2_; }

  double denominator(double z) const { return big_e2_ * std::expm1(z) - std::expm1(z - p_.m1); }

  double g_factor(double z) const {
    return std::sqrt(p_.mu1) * std::exp(-0.5 * (p_.m1 - z)) / denominator(z);
  }

  double h_out2(double z) const { return g_factor(z) * std::sqrt(e1_) * std::exp(0.5 * p_.m2); }

  /// Second-drive rate at distance z from the end.
  double mu2(double z) const { return p_.mu1 * e2_ / denominator(z); }

  /// e^{-M(t',t3)} at a second-interval time with distance z' from the end.
  double second_decay(double z) const {
    return denominator(z) * std::exp(p_.m1 - z) / (big_e2_ * e1_);
  }

  /// Integral of second_decay from t3 up to the time with distance z from the end.
  double second_decay_integral(double z) const {
    const double y = p_.m1 - z;
    return (q_ * y - e2_ * std::expm1(y)) / (p_.mu1 * big_e2_ * e1_);
  }

  cplx initial_phonon(double z) const {
    return cplx(0.0, 1.0) * h_out2(z) * transfer_.value(p_.phi);
  }

  /// First-interval thermal kernel without the i sqrt(Gamma) prefactor.
  /// `looped` selects the branch in which the stored light from t' has
  /// already reached the second interaction.
  cplx thermal_first(double z, double y, bool looped) const {
    const double g = g_factor(z);
    if (looped) {
      return g * (thermal_.value(p_.phi) * std::exp(-0.5 * y) +
                  sqrt_eta_ * e2_ * std::exp(0.5 * y));
    }
    return g * thermal_.p * std::polar(1.0, -p_.phi) * std::exp(-0.5 * y);
  }

  double thermal_gap(double z) const { return h_out2(z) * std::sqrt(e2_); }

  double thermal_second(double z, double z_prime) const {
    return h_out2(z) * std::sqrt(e2_) * std::sqrt(second_decay(z_prime));
  }

 private:
  PhysicalParams p_;
  double e1_ = 0, e2_ = 0, big_e1_ = 0, big_e2_ = 0, q_ = 0, sqrt_eta_ = 0;
  DarkBracket transfer_, thermal_;
};

/// Samples T(t) of the initial phonon on a grid covering [t3, t4].
inline std::vector<cplx> transfer_initial_phonon(const PhysicalParams& params, const TimeGrid& grid) {
  MatchedProtocol proto(params);
  grid.validate();
  const double tol = 1e-12 * params.t4();
  detail::require(grid.t_start >= params.t3() - tol && grid.t_end <= params.t4() + tol,
                  "transfer_initial_phonon: grid outside [t3, t4]");
  std::vector<cplx> out(grid.n_points);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = proto.initial_phonon(std::max(0.0, params.mu1 * (params.t4() - grid.at(i))));
  return out;
}

/// Same, for explicitly supplied drives; rejects pairs that are not the
/// constant-rate matched family.
inline std::vector<cplx> transfer_initial_phonon(const PhysicalParams& params,
                                                 const DriveEnvelope& mu1,
                                                 const DriveEnvelope& mu2, const TimeGrid& grid) {
  if (!is_constant(mu1)) throw DomainError("transfer_initial_phonon: first drive is not constant");
  const double ov = mode_overlap(output_mode(mu1), input_mode(mu2));
  if (ov < 1.0 - 1e-8) throw DomainError("transfer_initial_phonon: drives are not mode matched");
  if (std::abs(mu1.mu.front() - params.mu1) > 1e-9 * params.mu1 ||
      std::abs(mu2.net_strength() - params.m2) > 1e-6 * params.m2)
    throw DomainError("transfer_initial_phonon: drives disagree with params");
  return transfer_initial_phonon(params, grid);
}

/// Thermal transfer Phi(t, t') for t in [t3, t4], t' in [t1, t4].
inline cplx transfer_thermal(const PhysicalParams& params, double t, double t_prime) {
  MatchedProtocol proto(params);
  const double tol = 1e-12 * params.t4();
  if (t < params.t3() - tol || t > params.t4() + tol)
    throw DomainError("transfer_thermal: t outside [t3, t4]");
  if (t_prime < params.t1() - tol || t_prime > params.t4() + tol)
    throw DomainError("transfer_thermal: t' outside [t1, t4]");
  if (t_prime > t) return {0.0, 0.0};

  const cplx pre(0.0, std::sqrt(params.gamma));
  const double z = std::max(0.0, params.mu1 * (params.t4() - t));
  if (t_prime <= params.t2()) {
    const double u = t_prime - params.t1();
    const double s = t - params.t3();
    return pre * proto.thermal_first(z, params.mu1 * u, u <= s);
  }
  if (t_prime < params.t3()) return pre * proto.thermal_gap(z);
  const double zp = std::max(0.0, params.mu1 * (params.t4() - t_prime));
  return pre * proto.thermal_second(z, zp);
}

/// Two-time correlation kernel sampled on detection nodes.
struct CorrelationKernel {
  std::vector<double> times;
  std::vector<double> weights;
  std::vector<cplx> values;  ///< row-major n x n
  ReservoirTag reservoir_tag = ReservoirTag::thermal_bath;

  std::size_t size() const { return times.size(); }
  cplx operator()(std::size_t i, std::size_t j) const { return values[i * times.size() + j]; }
  cplx& operator()(std::size_t i, std::size_t j) { return values[i * times.size() + j]; }

  double diagonal_integral() const {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i) s += weights[i] * (*this)(i, i).real();
    return s;
  }
  double squared_integral() const {
    double s = 0.0;
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = 0; j < size(); ++j) s += weights[i] * weights[j] * std::norm((*this)(i, j));
    return s;
  }
};

namespace detail {

// Reservoir-time primitives on the detection nodes: integrals over the first
// interval of e^{-y}, 1 and e^{y} from its start up to the mirror of node i,
// the tail of e^{-y} from there to the end, and the second-interval decay
// integral up to node i.
struct ReservoirSums {
  std::vector<double> pm, p0, pp, tail, w3;
  InnerRule rule = InnerRule::exact;
  double mu1 = 1.0, m1 = 0.0;
  const std::vector<double>* z = nullptr;

  double tail_between(std::size_t i, std::size_t j) const {
    if (rule == InnerRule::exact) {
      const auto& zz = *z;
      return std::exp(zz[j] - m1) * std::expm1(zz[i] - zz[j]) / mu1;
    }
    return tail[i] - tail[j];
  }
};

inline ReservoirSums reservoir_sums(const MatchedProtocol& proto, const DetectionNodes& nodes,
                                    InnerRule rule) {
  const auto& p = proto.params();
  const std::size_t n = nodes.size();
  ReservoirSums r;
  r.rule = rule;
  r.mu1 = p.mu1;
  r.m1 = p.m1;
  r.z = &nodes.z;
  r.pm.assign(n, 0.0);
  r.p0.assign(n, 0.0);
  r.pp.assign(n, 0.0);
  r.tail.assign(n, 0.0);
  r.w3.assign(n, 0.0);
  if (rule == InnerRule::exact) {
    for (std::size_t i = 0; i < n; ++i) {
      const double y = p.m1 - nodes.z[i];
      r.pm[i] = -std::expm1(-y) / p.mu1;
      r.p0[i] = y / p.mu1;
      r.pp[i] = std::expm1(y) / p.mu1;
      r.tail[i] = std::exp(-p.m1) * std::expm1(nodes.z[i]) / p.mu1;
      r.w3[i] = proto.second_decay_integral(nodes.z[i]);
    }
    return r;
  }
  for (std::size_t i = 1; i < n; ++i) {
    const double h = (nodes.z[i - 1] - nodes.z[i]) / p.mu1;
    const double ya = p.m1 - nodes.z[i - 1], yb = p.m1 - nodes.z[i];
    r.pm[i] = r.pm[i - 1] + 0.5 * h * (std::exp(-ya) + std::exp(-yb));
    r.p0[i] = r.p0[i - 1] + h;
    r.pp[i] = r.pp[i - 1] + 0.5 * h * (std::exp(ya) + std::exp(yb));
    r.w3[i] = r.w3[i - 1] +
              0.5 * h * (proto.second_decay(nodes.z[i - 1]) + proto.second_decay(nodes.z[i]));
  }
  for (std::size_t i = n - 1; i-- > 0;) {
    const double h = (nodes.z[i] - nodes.z[i + 1]) / p.mu1;
    r.tail[i] = r.tail[i + 1] +
                0.5 * h * (std::exp(nodes.z[i] - p.m1) + std::exp(nodes.z[i + 1] - p.m1));
  }
  return r;
}

// Row/column factors of the thermal kernel. For i <= j,
//   C_ij = Gamma G_i G_j [alpha_i + beta (R_i - R_j) + gam (z_i - z_j)/mu1 + P^2 R_j].
struct ThermalFactors {
  std::vector<double> g;
  std::vector<double> alpha;
  std::vector<double> dalpha;  ///< d alpha / d phi divided by sin(phi)
  cplx beta, gam;
  double p2 = 0.0;
  double gamma = 0.0;
};

inline ThermalFactors thermal_factors(const MatchedProtocol& proto, const DetectionNodes& nodes,
                                      const ReservoirSums& r) {
  const auto& p = proto.params();
  const std::size_t n = nodes.size();
  const auto& b = proto.thermal();
  const double phi = p.phi;
  const double se = std::sqrt(p.eta_tech);
  const double e1 = proto.e1(), e2 = proto.e2();
  const cplx bc = b.value(phi);
  const double bc2 = std::norm(bc);
  const double big_e2 = std::exp(p.m2);

  ThermalFactors f;
  f.gamma = p.gamma;
  f.g.resize(n);
  f.alpha.resize(n);
  f.dalpha.resize(n);
  f.beta = b.p * std::polar(1.0, phi) * bc;
  f.gam = b.p * se * e2 * std::polar(1.0, phi);
  f.p2 = b.p * b.p;
  for (std::size_t i = 0; i < n; ++i) {
    f.g[i] = proto.g_factor(nodes.z[i]);
    f.alpha[i] = bc2 * r.pm[i] + 2.0 * se * e2 * bc.real() * r.p0[i] + p.eta_tech * e2 * e2 * r.pp[i] +
                 e1 * e2 * big_e2 * (p.tau_gap + r.w3[i]);
    f.dalpha[i] = 2.0 * b.p * b.r * r.pm[i] - 2.0 * se * e2 * b.p * r.p0[i];
  }
  return f;
}

inline cplx thermal_element(const ThermalFactors& f, const ReservoirSums& r,
                            const DetectionNodes& nodes, std::size_t i, std::size_t j) {
  // caller guarantees i <= j
  if (i == j) return f.gamma * f.g[i] * f.g[i] * (f.alpha[i] + f.p2 * r.tail[i]);
  const cplx k = f.alpha[i] + f.beta * r.tail_between(i, j) +
                 f.gam * ((nodes.z[i] - nodes.z[j]) / nodes.mu1) + f.p2 * r.tail[j];
  return f.gamma * f.g[i] * f.g[j] * k;
}

}  // namespace detail

/// Kernel on explicit detection nodes.
inline CorrelationKernel correlation_kernel(const PhysicalParams& params, const DetectionNodes& nodes,
                                            ReservoirTag tag, InnerRule rule = InnerRule::exact) {
  MatchedProtocol proto(params);
  const std::size_t n = nodes.size();
  CorrelationKernel k;
  k.times = nodes.times(params);
  k.weights = nodes.w;
  k.reservoir_tag = tag;
  k.values.assign(n * n, cplx{});
  if (tag == ReservoirTag::initial_phonon) {
    std::vector<cplx> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = proto.initial_phonon(nodes.z[i]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) k(i, j) = std::conj(t[i]) * t[j];
    return k;
  }
  if (tag != ReservoirTag::thermal_bath) throw DomainError("correlation_kernel: unknown reservoir tag");
  const auto r = detail::reservoir_sums(proto, nodes, rule);
  const auto f = detail::thermal_factors(proto, nodes, r);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const cplx c = detail::thermal_element(f, r, nodes, i, j);
      k(i, j) = c;
      k(j, i) = std::conj(c);
    }
    k(i, i) = k(i, i).real();
  }
  return k;
}

/// Kernel on a uniform grid spanning [t3, t4].
inline CorrelationKernel correlation_kernel(const PhysicalParams& params, const TimeGrid& grid,
                                            ReservoirTag tag, InnerRule rule = InnerRule::exact) {
  return correlation_kernel(params, DetectionNodes::from_grid(params, grid), tag, rule);
}

/// Photon-counting moments plus the pieces they are assembled from.
struct MultimodeMoments {
  double mean = 0.0;
  double variance = 0.0;
  double dmean_dphi = 0.0;      ///< analytic, same quadrature as the mean
  double initial_weight = 0.0;  ///< integral of |T|^2
  double thermal_diagonal = 0.0;
  double thermal_squared = 0.0;
  double cross = 0.0;

  MomentPair pair() const { return {mean, variance}; }
};

/// Mean photon number only (O(n)).
inline double mean_multimode(const PhysicalParams& params, const DetectionNodes& nodes,
                             InnerRule rule = InnerRule::exact) {
  MatchedProtocol proto(params);
  const auto r = detail::reservoir_sums(proto, nodes, rule);
  const auto f = detail::thermal_factors(proto, nodes, r);
  double ip = 0.0, th = 0.0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const double h = proto.h_out2(nodes.z[i]);
    ip += nodes.w[i] * h * h;
    th += nodes.w[i] * detail::thermal_element(f, r, nodes, i, i).real();
  }
  ip *= proto.transfer().norm(params.phi);
  return (params.n0 + 1.0) * ip + (params.n_th + 1.0) * th;
}

inline MultimodeMoments evaluate_multimode(const PhysicalParams& params, const DetectionNodes& nodes,
                                           InnerRule rule = InnerRule::exact) {
  MatchedProtocol proto(params);
  const std::size_t n = nodes.size();
  const auto r = detail::reservoir_sums(proto, nodes, rule);
  const auto f = detail::thermal_factors(proto, nodes, r);
  const auto& w = nodes.w;

  std::vector<double> h(n);
  double h2 = 0.0, dth = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    h[i] = proto.h_out2(nodes.z[i]);
    h2 += w[i] * h[i] * h[i];
    dth += w[i] * f.gamma * f.g[i] * f.g[i] * f.dalpha[i];
  }

  double diag = 0.0, sq = 0.0, cross = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const cplx cii = detail::thermal_element(f, r, nodes, i, i);
    diag += w[i] * cii.real();
    sq += w[i] * w[i] * std::norm(cii);
    cross += w[i] * w[i] * h[i] * h[i] * cii.real();
    double sq_row = 0.0, cross_row = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const cplx c = detail::thermal_element(f, r, nodes, i, j);
      sq_row += w[j] * std::norm(c);
      cross_row += w[j] * h[j] * c.real();
    }
    sq += 2.0 * w[i] * sq_row;
    cross += 2.0 * w[i] * h[i] * cross_row;
  }

  const double bt = proto.transfer().norm(params.phi);
  const double n0p = params.n0 + 1.0;
  const double nth = params.n_th;

  MultimodeMoments m;
  m.initial_weight = bt * h2;
  m.thermal_diagonal = diag;
  m.thermal_squared = sq;
  m.cross = bt * cross;
  const double x = n0p * m.initial_weight;
  m.mean = x + (nth + 1.0) * diag;
  m.variance = (nth + 1.0) * (nth * sq + diag) + x * (x + 1.0) + n0p * (2.0 * nth + 1.0) * m.cross;
  m.dmean_dphi = std::sin(params.phi) * (n0p * 2.0 * proto.transfer().p * proto.transfer().r * h2 +
                                         (nth + 1.0) * dth);
  return m;
}

inline MomentPair moments_multimode(const PhysicalParams& params, const DetectionNodes& nodes,
                                    InnerRule rule = InnerRule::exact) {
  return evaluate_multimode(params, nodes, rule).pair();
}

inline MomentPair moments_multimode(const PhysicalParams& params, const TimeGrid& grid,
                                    InnerRule rule = InnerRule::exact) {
  return moments_multimode(params, DetectionNodes::from_grid(params, grid), rule);
}

/// Moments at n nodes, verified against 2n-1 nodes; throws when the mean or
/// variance moves by more than rel_tol.
inline MomentPair moments_multimode_converged(const PhysicalParams& params, std::size_t n,
                                              GridLayout layout = GridLayout::graded,
                                              double rel_tol = 1e-3) {
  const auto a = moments_multimode(params, DetectionNodes::make(params, n, layout));
  const auto b = moments_multimode(params, DetectionNodes::make(params, 2 * n - 1, layout));
  auto rel = [](double x, double y) { return std::abs(x - y) / std::max(std::abs(y), 1e-300); };
  if (rel(a.mean, b.mean) > rel_tol || rel(a.variance, b.variance) > rel_tol)
    throw ConvergenceError("moments_multimode: grid doubling changed the moments beyond tolerance");
  return b;
}

/// Central-difference phase derivative of the mean with a Richardson check.
/// Step is 1e-5 rad, shrunk to 1e-2 |phi0| near the dark fringe.
inline double mean_phase_derivative_fd(const PhysicalParams& params, const DetectionNodes& nodes,
                                       InnerRule rule = InnerRule::exact) {
  const double phi0 = params.phi;
  const double h = std::min(1e-5, 1e-2 * std::abs(phi0));
  detail::require(h > 0.0, "mean_phase_derivative_fd: phi0 = 0");
  auto mean_at = [&](double phi) {
    PhysicalParams q = params;
    q.phi = phi;
    return mean_multimode(q, nodes, rule);
  };
  const double d1 = (mean_at(phi0 + h) - mean_at(phi0 - h)) / (2.0 * h);
  const double d2 = (mean_at(phi0 + 0.5 * h) - mean_at(phi0 - 0.5 * h)) / h;
  if (std::abs(d1 - d2) > 1e-4 * std::abs(d2))
    throw ConvergenceError("mean_phase_derivative_fd: Richardson check failed");
  return (4.0 * d2 - d1) / 3.0;
}

inline double sensitivity_multimode(const PhysicalParams& params, const DetectionNodes& nodes,
                                    double phi0, InnerRule rule = InnerRule::exact) {
  PhysicalParams p = params;
  p.phi = phi0;
  if (phi0 == 0.0) {
    // zero derivative by symmetry; only the exact dark fringe has a finite limit
    if (mean_multimode(p, nodes, rule) != 0.0)
      throw DomainError("sensitivity_multimode: zero phase derivative");
    const double a = sensitivity_multimode(params, nodes, 1e-4, rule);
    const double b = sensitivity_multimode(params, nodes, -1e-4, rule);
    if (std::abs(a - b) > 1e-6 * a) throw ConvergenceError("sensitivity_multimode: one-sided limits differ");
    return 0.5 * (a + b);
  }
  const auto m = evaluate_multimode(p, nodes, rule);
  const double d = mean_phase_derivative_fd(p, nodes, rule);
  if (d == 0.0) throw DomainError("sensitivity_multimode: zero phase derivative");
  return std::sqrt(m.variance) / std::abs(d);
}

inline double sensitivity_multimode(const PhysicalParams& params, const TimeGrid& grid, double phi0) {
  return sensitivity_multimode(params, DetectionNodes::from_grid(params, grid), phi0);
}

/// Phase optimization of the multimode sensitivity; `params.phi` is ignored.
inline PhaseOptimum optimize_phase_multimode(const PhysicalParams& params, const DetectionNodes& nodes) {
  auto f = [&](double phi) { return sensitivity_multimode(params, nodes, phi); };
  const double p = MatchedProtocol(params).transfer().p;
  // a 33-point linear grid keeps the O(n^2) evaluations affordable
  auto best = minimize_phase_landscape(f, std::min(1e-8, 1e-6 / std::max(1.0, p)), 33);
  PhaseOptimum out{best.x, best.value, false};
  PhysicalParams p0 = params;
  p0.phi = 0.0;
  const double lim = detail::safe_eval([&](double) { return sensitivity_multimode(p0, nodes, 0.0); }, 0.0);
  if (lim <= out.sensitivity) out = {0.0, lim, true};
  if (!std::isfinite(out.sensitivity))
    throw DomainError("optimize_phase_multimode: sensitivity is not finite anywhere");
  return out;
}

}  // namespace su11
