#pragma once

#include <stdexcept>
#include <string>

namespace su11 {

/// Invalid argument or a configuration outside the model's domain.
struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Quadrature or optimizer failed its own convergence check.
struct ConvergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent experiment manifest.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Cross-model comparison outside tolerance.
struct OracleMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw DomainError(what);
}
}  // namespace detail

}  // namespace su11
