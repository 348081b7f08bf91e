/**
 * @file ode_core.hpp
 * @brief Flow evaluation for autonomous systems: dense trajectories, the joint
 *        state + first-variation integration, event location on dense output
 *        and orbital derivatives of fields along the flow.
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"
#include "cmetric/ode/dop853.hpp"
#include "cmetric/ode/system.hpp"

#include <boost/math/tools/toms748_solve.hpp>

#include <memory>
#include <optional>
#include <type_traits>
#include <utility>

namespace cmetric {

using ode::Tolerances;
using ode::Trajectory;

struct TimeSpan {
  double t0 = 0.0;
  double t1 = 0.0;
};

[[nodiscard]] inline ode::Rhs autonomous_rhs(const OdeSystem& sys) {
  auto f = sys.f;
  return [f](double, const Vec& y, Vec& dy) { dy = f(y); };
}

[[nodiscard]] inline Trajectory integrate(const OdeSystem& sys, const Vec& x0, TimeSpan span,
                                          const Tolerances& tol = {}) {
  return ode::integrate_rhs(autonomous_rhs(sys), span.t0, x0, span.t1, tol);
}

/// S_t x for a single time.
[[nodiscard]] inline Vec flow(const OdeSystem& sys, const Vec& x, double t, const Tolerances& tol = {}) {
  if (t == 0.0) return x;
  ode::Dop853 stepper(autonomous_rhs(sys), 0.0, x, tol, t > 0 ? 1 : -1);
  stepper.advance_to(t);
  return stepper.state();
}

/// Trajectory of the augmented system (x, Phi) with Phi' = Df(x) Phi, Phi(t0) = I.
class VariationalTrajectory {
 public:
  VariationalTrajectory() = default;
  VariationalTrajectory(Trajectory augmented, int n)
      : aug_(std::make_shared<const Trajectory>(std::move(augmented))), n_(n) {}

  [[nodiscard]] int n() const { return n_; }
  [[nodiscard]] double t0() const { return aug_->t0(); }
  [[nodiscard]] double t1() const { return aug_->t1(); }
  [[nodiscard]] const Trajectory& augmented() const { return *aug_; }

  [[nodiscard]] Vec state(double t) const { return aug_->state(t).head(n_); }

  [[nodiscard]] Mat phi(double t) const {
    const Vec y = aug_->state(t);
    return Eigen::Map<const Mat>(y.data() + n_, n_, n_);
  }

  void evaluate(double t, Vec& x, Mat& phi) const {
    const Vec y = aug_->state(t);
    x = y.head(n_);
    phi = Eigen::Map<const Mat>(y.data() + n_, n_, n_);
  }

 private:
  std::shared_ptr<const Trajectory> aug_;
  int n_ = 0;
};

[[nodiscard]] inline ode::Rhs variational_rhs(const OdeSystem& sys) {
  auto f = sys.f;
  auto jac = sys.jac;
  const int n = sys.n;
  return [f, jac, n](double, const Vec& y, Vec& dy) {
    const Vec x = y.head(n);
    dy.resize(n + n * n);
    dy.head(n) = f(x);
    Eigen::Map<Mat>(dy.data() + n, n, n) = jac(x) * Eigen::Map<const Mat>(y.data() + n, n, n);
  };
}

[[nodiscard]] inline Vec variational_initial_state(const Vec& x0) {
  const auto n = x0.size();
  Vec y0 = Vec::Zero(n + n * n);
  y0.head(n) = x0;
  for (Eigen::Index i = 0; i < n; ++i) y0(n + i * n + i) = 1.0;
  return y0;
}

[[nodiscard]] inline VariationalTrajectory integrate_variational(const OdeSystem& sys, const Vec& x0,
                                                                 TimeSpan span, const Tolerances& tol = {}) {
  return VariationalTrajectory(
      ode::integrate_rhs(variational_rhs(sys), span.t0, variational_initial_state(x0), span.t1, tol), sys.n);
}

/// Fundamental matrix of the linear system Y' = F(t) Y with Y(t0) = I, stored
/// column-major in an n*n state vector.
[[nodiscard]] inline Trajectory integrate_fundamental(const std::function<Mat(double)>& F, int n,
                                                      TimeSpan span, const Tolerances& tol = {}) {
  Vec y0 = Vec::Zero(n * n);
  for (int i = 0; i < n; ++i) y0(i * n + i) = 1.0;
  auto rhs = [F, n](double t, const Vec& y, Vec& dy) {
    dy.resize(n * n);
    Eigen::Map<Mat>(dy.data(), n, n) = F(t) * Eigen::Map<const Mat>(y.data(), n, n);
  };
  return ode::integrate_rhs(rhs, span.t0, y0, span.t1, tol);
}

struct EventOptions {
  /// Restrict the search to this time window (inside the trajectory span).
  std::optional<std::pair<double, double>> bracket;
};

/// First time (in the direction of integration) at which g(x(t)) crosses zero.
template <class G>
[[nodiscard]] double event_root(const Trajectory& traj, G&& g, const EventOptions& opt = {}) {
  double ta = traj.t0(), tb = traj.t1();
  if (opt.bracket) {
    ta = opt.bracket->first;
    tb = opt.bracket->second;
  }
  auto gt = [&](double t) { return static_cast<double>(g(traj.state(t))); };
  const double ga = gt(ta);
  if (ga == 0.0) return ta;
  const double gb = gt(tb);

  // Walk the accepted-step mesh (plus midpoints) from ta to find the first sign change.
  std::vector<double> probe;
  probe.push_back(ta);
  const auto& mesh = traj.mesh();
  const double lo = std::min(ta, tb), hi = std::max(ta, tb);
  const int dir = tb >= ta ? 1 : -1;
  std::vector<double> inner;
  for (double t : mesh) {
    if (t > lo && t < hi) inner.push_back(t);
  }
  if (dir * traj.direction() < 0) std::reverse(inner.begin(), inner.end());
  double prev = ta;
  for (double t : inner) {
    probe.push_back(0.5 * (prev + t));
    probe.push_back(t);
    prev = t;
  }
  probe.push_back(0.5 * (prev + tb));
  probe.push_back(tb);

  double a = probe[0], fa = ga;
  for (std::size_t k = 1; k < probe.size(); ++k) {
    const double b = probe[k];
    const double fb = (k + 1 == probe.size()) ? gb : gt(b);
    if (fb == 0.0) return b;
    if ((fa < 0.0) != (fb < 0.0)) {
      double l = a, r = b, fl = fa, fr = fb;
      if (l > r) {
        std::swap(l, r);
        std::swap(fl, fr);
      }
      std::uintmax_t iters = 200;
      // Converge to a few ulps in t; the residual then sits at roundoff of g.
      auto tol = [](double x0, double x1) {
        return std::abs(x1 - x0) <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(x0), 1.0);
      };
      auto res = boost::math::tools::toms748_solve(gt, l, r, fl, fr, tol, iters);
      const double g1 = gt(res.first), g2 = gt(res.second);
      return std::abs(g1) <= std::abs(g2) ? res.first : res.second;
    }
    a = b;
    fa = fb;
  }
  throw Error(ErrorKind::NoSignChange, "event function keeps its sign on the trajectory");
}

enum class Stencil { Central, FourPoint };

struct OrbitalDerivativeOptions {
  /// Step; non-positive selects the default 1e-4 * clamp(|x|/|f(x)|, 1e-3, 1).
  double h = 0.0;
  Stencil stencil = Stencil::Central;
  bool monitor = true;
  Tolerances tol{1e-12, 1e-14};
};

template <class R>
struct OrbitalDerivativeResult {
  R value;
  double h = 0.0;
  /// |D(h) - D(h/2)| when monitoring is on, NaN otherwise.
  double halving_change = kNaN;
};

[[nodiscard]] inline double default_orbital_step(const OdeSystem& sys, const Vec& x) {
  const double fn = sys.f(x).norm();
  const double scale = fn > 0.0 ? x.norm() / fn : 1.0;
  return 1e-4 * std::clamp(scale, 1e-3, 1.0);
}

namespace detail {
template <class R>
double magnitude(const R& r) {
  if constexpr (std::is_arithmetic_v<R>) {
    return std::abs(static_cast<double>(r));
  } else {
    return r.norm();
  }
}
}  // namespace detail

/// d/dt field(S_t x) at t = 0 by finite differences along the flow.
template <class Field>
[[nodiscard]] auto orbital_derivative(Field&& field, const Vec& x, const OdeSystem& sys,
                                      const OrbitalDerivativeOptions& opt = {}) {
  using Raw = std::decay_t<decltype(field(x))>;
  using R = std::conditional_t<std::is_arithmetic_v<Raw>, double, Mat>;
  const double h = opt.h > 0.0 ? opt.h : default_orbital_step(sys, x);
  const int reach = opt.stencil == Stencil::FourPoint ? 2 : 1;
  const Trajectory fwd = integrate(sys, x, {0.0, reach * h}, opt.tol);
  const Trajectory bwd = integrate(sys, x, {0.0, -reach * h}, opt.tol);
  auto at = [&](double s) -> R {
    const Vec y = s >= 0 ? fwd.state(s) : bwd.state(s);
    try {
      return R(field(y));
    } catch (const Error& e) {
      throw Error(ErrorKind::FieldUndefined, std::string("field not evaluable on the flow: ") + e.what());
    }
  };
  auto stencil = [&](double k) -> R {
    if (opt.stencil == Stencil::Central) return R((at(k) - at(-k)) / (2.0 * k));
    return R((at(-2.0 * k) - at(-k) * 8.0 + at(k) * 8.0 - at(2.0 * k)) / (12.0 * k));
  };
  OrbitalDerivativeResult<R> out{stencil(h), h, kNaN};
  if (opt.monitor) {
    const R half = stencil(0.5 * h);
    out.halving_change = detail::magnitude(R(out.value - half));
  }
  return out;
}

}  // namespace cmetric
