/**
 * @file periodic_orbit.hpp
 * @brief Anchored Newton shooting for a periodic orbit, its monodromy matrix
 *        and the clustered Floquet spectrum with contraction rate nu.
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"
#include "cmetric/ode_core.hpp"

#include <algorithm>
#include <complex>
#include <sstream>
#include <vector>

namespace cmetric {

struct PeriodicOrbit {
  OdeSystem system;
  Vec q;
  double T = 0.0;
  VariationalTrajectory orbit;
  Mat monodromy;
  double residual = 0.0;
  int newton_steps = 0;
  Tolerances tol;

  [[nodiscard]] Vec point(double theta) const { return orbit.state(reduce_phase(theta, T)); }
};

struct ShootingOptions {
  Tolerances tol{};
  int max_iterations = 30;
  /// Converged once |S_T x - x| <= residual_factor * (1 + |x|).
  double residual_factor = 1e-9;
};

namespace detail {

struct ShootingEval {
  Vec xT;
  Mat phi;
  double residual = 0.0;
  double phase = 0.0;
};

inline ShootingEval shoot(const OdeSystem& sys, const Vec& x, double T, const Vec& x_guess, const Vec& f_guess,
                          const Tolerances& tol) {
  ShootingEval e;
  const auto vt = integrate_variational(sys, x, {0.0, T}, tol);
  vt.evaluate(T, e.xT, e.phi);
  e.residual = (e.xT - x).norm();
  e.phase = f_guess.dot(x - x_guess);
  return e;
}

}  // namespace detail

/// Newton shooting on (x, T) -> (S_T x - x, f(x_g).(x - x_g)).
[[nodiscard]] inline PeriodicOrbit find_orbit(const OdeSystem& sys, const Vec& x_guess, double T_guess,
                                              const ShootingOptions& opt = {}) {
  const int n = sys.n;
  const Vec f_guess = sys.f(x_guess);
  if (f_guess.norm() <= 1e-12 * (1.0 + x_guess.norm())) {
    throw Error(ErrorKind::EquilibriumFound, "initial guess is an equilibrium");
  }
  if (!(T_guess > 0.0)) throw Error(ErrorKind::NoConvergence, "period guess must be positive");

  Vec x = x_guess;
  double T = T_guess;
  auto ev = detail::shoot(sys, x, T, x_guess, f_guess, opt.tol);
  auto merit = [](const detail::ShootingEval& e) { return std::hypot(e.residual, e.phase); };
  int steps = 0;
  const double phase_tol = 1e-12 * f_guess.norm() * (1.0 + x_guess.norm());
  // A guess already on the orbit needs no correction.
  bool done = ev.residual <= opt.residual_factor * (1.0 + x.norm()) && std::abs(ev.phase) <= phase_tol;
  while (!done) {
    const double target = opt.residual_factor * (1.0 + x.norm());
    if (steps >= opt.max_iterations) {
      std::ostringstream os;
      os << "shooting residual " << ev.residual << " after " << steps << " Newton steps";
      throw Error(ErrorKind::NoConvergence, os.str(), ev.residual);
    }
    Mat Jn = Mat::Zero(n + 1, n + 1);
    Jn.topLeftCorner(n, n) = ev.phi - Mat::Identity(n, n);
    Jn.topRightCorner(n, 1) = sys.f(ev.xT);
    Jn.bottomLeftCorner(1, n) = f_guess.transpose();
    Vec rhs(n + 1);
    rhs.head(n) = -(ev.xT - x);
    rhs(n) = -ev.phase;
    Eigen::FullPivLU<Mat> lu(Jn);
    if (lu.rank() < n + 1 || lu.rcond() < 1e-14) {
      throw Error(ErrorKind::SingularShootingJacobian, "shooting Jacobian is singular");
    }
    const Vec delta = lu.solve(rhs);

    double lambda = 1.0;
    const double m0 = merit(ev);
    bool accepted = false;
    for (int ls = 0; ls < 12; ++ls) {
      const Vec xn = x + lambda * delta.head(n);
      const double Tn = T + lambda * delta(n);
      if (Tn > 0.0) {
        try {
          auto trial = detail::shoot(sys, xn, Tn, x_guess, f_guess, opt.tol);
          if (merit(trial) < m0 || ls == 11) {
            x = xn;
            T = Tn;
            ev = std::move(trial);
            accepted = true;
            break;
          }
        } catch (const Error&) {
          // Treat integration failure as a rejected trial and shrink.
        }
      }
      lambda *= 0.5;
    }
    ++steps;
    if (!accepted) throw Error(ErrorKind::NoConvergence, "line search failed in shooting");
    // Keep polishing while Newton still gains; stop at the integration noise floor.
    const bool stalled = merit(ev) > 0.25 * m0 || delta.norm() <= 1e-13 * (1.0 + x.norm());
    done = ev.residual <= target && stalled;
    if (ev.residual <= 1e-3 * target) done = true;
  }

  const Vec fq = sys.f(x);
  if (fq.norm() <= 1e-8 * (1.0 + x.norm())) {
    throw Error(ErrorKind::EquilibriumFound, "shooting converged to an equilibrium");
  }
  for (int k = 2; k <= 3; ++k) {
    const Vec xk = flow(sys, x, T / k, opt.tol);
    if ((xk - x).norm() <= 1e-6 * (1.0 + x.norm())) {
      throw Error(ErrorKind::NoConvergence, "converged period is a multiple of the minimal period (k=" +
                                                std::to_string(k) + ")");
    }
  }

  PeriodicOrbit po;
  po.system = sys;
  po.q = x;
  po.T = T;
  po.tol = opt.tol;
  po.orbit = integrate_variational(sys, x, {0.0, T}, opt.tol);
  Vec xT;
  po.orbit.evaluate(T, xT, po.monodromy);
  po.residual = (xT - x).norm();
  po.newton_steps = steps;
  return po;
}

/// Build a PeriodicOrbit from a known anchor and period without Newton steps
/// (used when re-deriving artifacts from stored q, T).
[[nodiscard]] inline PeriodicOrbit orbit_from_anchor(const OdeSystem& sys, const Vec& q, double T,
                                                     const Tolerances& tol = {}) {
  PeriodicOrbit po;
  po.system = sys;
  po.q = q;
  po.T = T;
  po.tol = tol;
  po.orbit = integrate_variational(sys, q, {0.0, T}, tol);
  Vec xT;
  po.orbit.evaluate(T, xT, po.monodromy);
  po.residual = (xT - q).norm();
  return po;
}

struct MultiplierGroup {
  cplx value;          // representative (Im >= 0 for complex pairs)
  int multiplicity = 1;  // algebraic multiplicity of this value
  bool complex_pair = false;  // conjugate counted separately with the same multiplicity
  bool trivial = false;
};

struct FloquetSpectrum {
  std::vector<MultiplierGroup> groups;
  std::vector<cplx> multipliers;  // all n eigenvalues, trivial one snapped to 1
  double nu = 0.0;
  double T = 0.0;
  double trivial_offset = 0.0;  // |lambda_trivial - 1| before snapping
  double tol_cluster = 1e-6;

  [[nodiscard]] int total_multiplicity() const {
    int s = 0;
    for (const auto& g : groups) s += g.complex_pair ? 2 * g.multiplicity : g.multiplicity;
    return s;
  }
};

namespace detail {

/// Group eigenvalues whose mutual distance is within tol * max(1, |lambda|).
inline std::vector<std::vector<cplx>> cluster_eigenvalues(const std::vector<cplx>& ev, double tol) {
  std::vector<std::vector<cplx>> clusters;
  std::vector<bool> used(ev.size(), false);
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (used[i]) continue;
    std::vector<cplx> c{ev[i]};
    used[i] = true;
    bool grew = true;
    while (grew) {
      grew = false;
      for (std::size_t j = 0; j < ev.size(); ++j) {
        if (used[j]) continue;
        for (const auto& m : c) {
          if (std::abs(ev[j] - m) <= tol * std::max(1.0, std::abs(m))) {
            c.push_back(ev[j]);
            used[j] = true;
            grew = true;
            break;
          }
        }
      }
    }
    clusters.push_back(std::move(c));
  }
  return clusters;
}

inline cplx cluster_mean(const std::vector<cplx>& c) {
  cplx s = 0.0;
  for (const auto& v : c) s += v;
  return s / static_cast<double>(c.size());
}

}  // namespace detail

[[nodiscard]] inline FloquetSpectrum floquet_spectrum_of(const Mat& monodromy, double T, double tol_cluster = 1e-6) {
  const auto n = monodromy.rows();
  Eigen::EigenSolver<Mat> es(monodromy, false);
  std::vector<cplx> ev(es.eigenvalues().data(), es.eigenvalues().data() + n);

  std::size_t trivial = 0;
  for (std::size_t i = 1; i < ev.size(); ++i) {
    if (std::abs(ev[i] - 1.0) < std::abs(ev[trivial] - 1.0)) trivial = i;
  }
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (i != trivial && std::abs(ev[i] - 1.0) <= tol_cluster) {
      throw Error(ErrorKind::AmbiguousTrivialMultiplier, "two multipliers lie within tol_cluster of 1");
    }
  }
  FloquetSpectrum sp;
  sp.T = T;
  sp.tol_cluster = tol_cluster;
  sp.trivial_offset = std::abs(ev[trivial] - 1.0);
  if (sp.trivial_offset > std::max(tol_cluster, 1e-6)) {
    throw Error(ErrorKind::AmbiguousTrivialMultiplier, "no multiplier within tolerance of 1", sp.trivial_offset);
  }
  std::vector<cplx> rest;
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (i != trivial) rest.push_back(ev[i]);
  }
  sp.groups.push_back({cplx(1.0, 0.0), 1, false, true});
  sp.multipliers.push_back(cplx(1.0, 0.0));

  double worst = -kInf;
  for (const auto& c : detail::cluster_eigenvalues(rest, tol_cluster)) {
    const cplx m = detail::cluster_mean(c);
    if (std::abs(m) >= 1.0 - tol_cluster) {
      std::ostringstream os;
      os << "nontrivial multiplier of modulus " << std::abs(m);
      throw Error(ErrorKind::NotExponentiallyStable, os.str(), std::abs(m));
    }
    worst = std::max(worst, std::log(std::abs(m)) / T);
    const bool is_real = std::abs(m.imag()) <= tol_cluster * std::max(1.0, std::abs(m));
    if (is_real) {
      sp.groups.push_back({cplx(m.real(), 0.0), static_cast<int>(c.size()), false, false});
    } else if (m.imag() > 0.0) {
      sp.groups.push_back({m, static_cast<int>(c.size()), true, false});
    }
    for (const auto& v : c) sp.multipliers.push_back(v);
  }
  sp.nu = rest.empty() ? kInf : -worst;
  if (sp.total_multiplicity() != n) {
    throw Error(ErrorKind::NotExponentiallyStable, "complex multipliers are not closed under conjugation");
  }
  std::sort(sp.groups.begin() + 1, sp.groups.end(),
            [](const MultiplierGroup& a, const MultiplierGroup& b) { return std::abs(a.value) > std::abs(b.value); });
  return sp;
}

[[nodiscard]] inline FloquetSpectrum floquet_spectrum(const PeriodicOrbit& orbit, double tol_cluster = 1e-6) {
  return floquet_spectrum_of(orbit.monodromy, orbit.T, tol_cluster);
}

}  // namespace cmetric
