#pragma once

#include <cmath>
#include <optional>

#include "su11/errors.hpp"
#include "su11/multimode.hpp"

namespace su11::scan {

/// Delay-line fiber between the two interactions.
struct FiberModel {
  double alpha_db = 0.17;  ///< attenuation, dB/km
  double c_f = 2.0e8;      ///< signal speed in the fiber, m/s
  std::optional<double> l_override_km;

  void validate() const {
    su11::detail::require(std::isfinite(alpha_db) && alpha_db >= 0.0, "FiberModel: alpha_db must be >= 0");
    su11::detail::require(std::isfinite(c_f) && c_f > 0.0, "FiberModel: c_f must be > 0");
    if (l_override_km)
      su11::detail::require(std::isfinite(*l_override_km) && *l_override_km >= 0.0,
                            "FiberModel: l_override must be >= 0");
  }
};

inline double fiber_efficiency(const FiberModel& model, double l_km) {
  model.validate();
  su11::detail::require(std::isfinite(l_km) && l_km >= 0.0, "fiber_efficiency: negative length");
  return std::pow(10.0, -model.alpha_db * l_km / 10.0);
}

/// Length needed to hold the first output pulse until the second interaction,
/// c_f (tau + tau_gap), in km. An explicit override wins.
inline double delay_length(const PhysicalParams& params, const FiberModel& model) {
  model.validate();
  if (model.l_override_km) return *model.l_override_km;
  return model.c_f * (params.tau + params.tau_gap) * 1e-3;
}

/// Folds the fiber transmission into eta_tech, which otherwise carries the
/// coupling efficiencies into and out of the fiber.
inline PhysicalParams with_fiber(PhysicalParams params, const FiberModel& model) {
  params.eta_tech *= fiber_efficiency(model, delay_length(params, model));
  return params;
}

}  // namespace su11::scan
