/**
 * @file systems.hpp
 * @brief Built-in vector fields and the linear T-periodic test family.
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"
#include "cmetric/ode/system.hpp"

#include <functional>
#include <map>
#include <string>

namespace cmetric::systems {

/// x' = -y + x(1 - r^2), y' = x + y(1 - r^2): unit circle, period 2 pi,
/// transverse Floquet exponent -2.
[[nodiscard]] inline OdeSystem radial() {
  OdeSystem s;
  s.name = "radial";
  s.n = 2;
  s.f = [](const Vec& x) {
    const double a = 1.0 - x(0) * x(0) - x(1) * x(1);
    return Vec2(-x(1) + x(0) * a, x(0) + x(1) * a);
  };
  s.jac = [](const Vec& x) {
    const double a = 1.0 - x(0) * x(0) - x(1) * x(1);
    Mat J(2, 2);
    J << a - 2 * x(0) * x(0), -1.0 - 2 * x(0) * x(1), 1.0 - 2 * x(0) * x(1), a - 2 * x(1) * x(1);
    return J;
  };
  return s;
}

[[nodiscard]] inline OdeSystem vdp(double mu = 1.0) {
  OdeSystem s;
  s.name = "vdp";
  s.n = 2;
  s.params["mu"] = mu;
  s.f = [mu](const Vec& x) { return Vec2(x(1), mu * (1.0 - x(0) * x(0)) * x(1) - x(0)); };
  s.jac = [mu](const Vec& x) {
    Mat J(2, 2);
    J << 0.0, 1.0, -2.0 * mu * x(0) * x(1) - 1.0, mu * (1.0 - x(0) * x(0));
    return J;
  };
  return s;
}

/// Radial system times z' = -z: multipliers {1, e^{-4 pi}, e^{-2 pi}}.
[[nodiscard]] inline OdeSystem cylinder3d() {
  OdeSystem s;
  s.name = "cylinder3d";
  s.n = 3;
  const OdeSystem planar = radial();
  s.f = [pf = planar.f](const Vec& x) {
    Vec out(3);
    out.head(2) = pf(x.head(2));
    out(2) = -x(2);
    return out;
  };
  s.jac = [pj = planar.jac](const Vec& x) {
    Mat J = Mat::Zero(3, 3);
    J.topLeftCorner(2, 2) = pj(x.head(2));
    J(2, 2) = -1.0;
    return J;
  };
  return s;
}

/// x' = -x in n dimensions.
[[nodiscard]] inline OdeSystem linear_decay(int n) {
  OdeSystem s;
  s.name = "linear-decay";
  s.n = n;
  s.f = [](const Vec& x) { return Vec(-x); };
  s.jac = [n](const Vec&) { return Mat(-Mat::Identity(n, n)); };
  return s;
}

/// Linear T-periodic coefficient matrix F(t) = F0 + F1 cos(2 pi t/T) + F2 sin(2 pi t/T).
struct LinearPeriodic {
  std::string name = "linear-periodic";
  int n = 0;
  double T = 1.0;
  Mat F0, F1, F2;

  [[nodiscard]] Mat F(double t) const {
    const double w = 2.0 * kPi * t / T;
    return F0 + std::cos(w) * F1 + std::sin(w) * F2;
  }
};

/// Coefficients whose fundamental matrix is R(pi t/T) diag(e^{at}, e^{bt}), so
/// the monodromy is -diag(e^{aT}, e^{bT}): two negative real multipliers.
[[nodiscard]] inline LinearPeriodic rotating_half_turn(double a = -0.3, double b = -1.0, double T = 1.0) {
  LinearPeriodic lp;
  lp.n = 2;
  lp.T = T;
  Mat Jrot(2, 2);
  Jrot << 0.0, -1.0, 1.0, 0.0;
  lp.F0 = (kPi / T) * Jrot + 0.5 * (a + b) * Mat::Identity(2, 2);
  lp.F1 = Mat(2, 2);
  lp.F1 << 0.5 * (a - b), 0.0, 0.0, -0.5 * (a - b);
  lp.F2 = Mat(2, 2);
  lp.F2 << 0.0, 0.5 * (a - b), 0.5 * (a - b), 0.0;
  return lp;
}

/// Closed-form fundamental matrix of rotating_half_turn.
[[nodiscard]] inline Mat rotating_half_turn_phi(double t, double a = -0.3, double b = -1.0, double T = 1.0) {
  Mat d = Mat::Zero(2, 2);
  d(0, 0) = std::exp(a * t);
  d(1, 1) = std::exp(b * t);
  return rotation2(kPi * t / T) * d;
}

[[nodiscard]] inline std::vector<std::string> registered_names() {
  return {"radial", "vdp", "cylinder3d", "linear-periodic"};
}

/// Registry lookup for autonomous systems; runs the Jacobian consistency gate.
[[nodiscard]] inline OdeSystem make_system(const std::string& name, const std::map<std::string, double>& params) {
  auto param = [&](const std::string& key, double fallback) {
    auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
  };
  OdeSystem s;
  if (name == "radial") {
    s = radial();
  } else if (name == "vdp") {
    s = vdp(param("mu", 1.0));
  } else if (name == "cylinder3d") {
    s = cylinder3d();
  } else {
    throw Error(ErrorKind::ConfigError, "unknown autonomous system '" + name + "'");
  }
  require_consistent_jacobian(s);
  return s;
}

}  // namespace cmetric::systems
