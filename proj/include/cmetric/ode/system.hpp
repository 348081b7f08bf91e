#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"

#include <functional>
#include <map>
#include <random>
#include <string>

namespace cmetric {

/// Autonomous vector field x' = f(x) together with its Jacobian.
struct OdeSystem {
  std::string name;
  int n = 0;
  std::function<Vec(const Vec&)> f;
  std::function<Mat(const Vec&)> jac;
  std::map<std::string, double> params;
  /// Smoothness class of f, metadata only (-1 means C-infinity).
  int smoothness = -1;
};

struct JacobianCheck {
  double worst_relative_error = 0.0;
  Vec worst_point;
};

/// Compare jac against central differences of f at `samples` random points of
/// the box [-radius, radius]^n.
[[nodiscard]] inline JacobianCheck check_jacobian(const OdeSystem& sys, int samples,
                                                  std::uint64_t seed, double radius = 2.0,
                                                  double step = 1e-6) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-radius, radius);
  JacobianCheck out;
  for (int s = 0; s < samples; ++s) {
    Vec x(sys.n);
    for (int i = 0; i < sys.n; ++i) x(i) = u(rng);
    const Mat analytic = sys.jac(x);
    Mat fd(sys.n, sys.n);
    for (int j = 0; j < sys.n; ++j) {
      Vec xp = x, xm = x;
      xp(j) += step;
      xm(j) -= step;
      fd.col(j) = (sys.f(xp) - sys.f(xm)) / (2.0 * step);
    }
    const double rel = (fd - analytic).norm() / std::max(1.0, analytic.norm());
    if (rel > out.worst_relative_error || out.worst_point.size() == 0) {
      out.worst_relative_error = std::max(out.worst_relative_error, rel);
      out.worst_point = x;
    }
  }
  return out;
}

/// Registration-time consistency gate; throws InvariantViolation on mismatch.
inline void require_consistent_jacobian(const OdeSystem& sys, std::uint64_t seed = 7) {
  const auto chk = check_jacobian(sys, 16, seed);
  if (chk.worst_relative_error > 1e-5) {
    throw Error(ErrorKind::InvariantViolation,
                "Jacobian of '" + sys.name + "' disagrees with finite differences",
                chk.worst_relative_error);
  }
}

}  // namespace cmetric
