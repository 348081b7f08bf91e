/**
 * @file global_metric.hpp
 * @brief The blended metric M1, the target rate r, the potential V (local
 *        integral near the orbit, transported along trajectories further out)
 *        and the final contraction metric M = e^{2V} M1.
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/lm_eval.hpp"
#include "cmetric/projection_sync.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cstring>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <sstream>
#include <unordered_map>

namespace cmetric {

namespace detail {
inline double mollifier(double u) { return u > 0.0 ? std::exp(-1.0 / u) : 0.0; }
inline double mollifier_prime(double u) { return u > 0.0 ? std::exp(-1.0 / u) / (u * u) : 0.0; }
}  // namespace detail

/// Smooth step: 1 for s <= a, 0 for s >= b.
[[nodiscard]] inline double bump(double s, double a, double b) {
  if (!(a < b)) throw Error(ErrorKind::BadInterval, "bump needs a < b");
  if (s <= a) return 1.0;
  if (s >= b) return 0.0;
  const double u = (s - a) / (b - a);
  const double ga = detail::mollifier(1.0 - u), gb = detail::mollifier(u);
  return ga / (ga + gb);
}

/// d bump / ds.
[[nodiscard]] inline double bump_prime(double s, double a, double b) {
  if (!(a < b)) throw Error(ErrorKind::BadInterval, "bump needs a < b");
  if (s <= a || s >= b) return 0.0;
  const double u = (s - a) / (b - a);
  const double A = detail::mollifier(1.0 - u), B = detail::mollifier(u);
  const double dA = -detail::mollifier_prime(1.0 - u), dB = detail::mollifier_prime(u);
  return (dA * B - A * dB) / ((A + B) * (A + B)) / (b - a);
}

struct GlobalOptions {
  /// Level iota; non-positive selects U_level / 4.
  double iota = 0.0;
  double tail_tol = 1e-9;
  double quad_tol = 1e-9;
  /// Trajectories that do not reach the level within this many periods are outside the basin.
  double t_max_periods = 50.0;
  /// States with d below this count as on the orbit (V = 0).
  double snap_d = 1e-14;
  bool memoize = true;
  Tolerances tol{1e-11, 1e-13};
};

/// Everything known about M1 and r at one state.
struct MetricPoint {
  Vec x;
  Vec f;
  Mat Df;
  std::optional<Projection> pr;  // present inside U
  double d = kInf;
  double theta_dot = 1.0;
  double d_prime = 0.0;
  double h1 = 0.0, h2 = 0.0, h2_prime = 0.0;
  Mat M1;
  Mat M1p;
  double r = 0.0;
  double l_m1_orbit = 0.0;  // L_{M1}(pi(x)) when h1 > 0
  LmReport l_m1;            // L_{M1}(x)

  [[nodiscard]] double q() const { return l_m1.value - r; }
  [[nodiscard]] double v_prime() const { return -l_m1.value + r; }
};

struct VResult {
  double value = 0.0;
  double error = 0.0;  // quadrature plus tail estimate
  double tau = 0.0;
  enum class Region { Orbit, Local, Global } region = Region::Orbit;
};

struct GlobalMetric {
  std::shared_ptr<const ProjectionChart> chart;
  double iota = 0.0;
  double mu = 0.0;
  double nu = 0.0;
  double epsilon = 0.0;
  GlobalOptions opt;

  struct Cache {
    std::mutex mutex;
    std::unordered_map<std::string, VResult> values;
  };
  std::shared_ptr<Cache> cache = std::make_shared<Cache>();

  [[nodiscard]] const OdeSystem& system() const { return chart->system(); }
  [[nodiscard]] double T() const { return chart->T(); }
  [[nodiscard]] const OrbitMetric& om() const { return *chart->om; }
};

[[nodiscard]] inline GlobalMetric make_global_metric(std::shared_ptr<const ProjectionChart> chart,
                                                     const GlobalOptions& opt = {}) {
  GlobalMetric gm;
  gm.chart = std::move(chart);
  gm.opt = opt;
  gm.nu = gm.chart->nu;
  gm.epsilon = gm.chart->epsilon;
  gm.mu = gm.nu - gm.epsilon;
  gm.iota = opt.iota > 0.0 ? opt.iota : gm.chart->U_level / 4.0;
  return gm;
}

/// M1, M1', r and L_{M1} at x, with the projection hint used when supplied.
[[nodiscard]] inline MetricPoint metric_point(const GlobalMetric& gm, const Vec& x,
                                              std::optional<double> hint = std::nullopt) {
  const OdeSystem& sys = gm.system();
  const int n = sys.n;
  MetricPoint mp;
  mp.x = x;
  mp.f = sys.f(x);
  mp.Df = sys.jac(x);
  if (!(mp.f.norm() > 0.0)) throw Error(ErrorKind::SingularF, "f vanishes; L_M is undefined");
  const double iota = gm.iota;
  mp.pr = project_in_chart(*gm.chart, x, hint);
  mp.M1 = Mat::Identity(n, n);
  mp.M1p = Mat::Zero(n, n);
  mp.r = -gm.mu;
  if (mp.pr) {
    const Projection& pr = *mp.pr;
    mp.d = pr.d;
    if (mp.d < 5.0 * iota / 3.0) {
      mp.theta_dot = theta_dot(pr, x, mp.f);
      mp.d_prime = d_prime(pr, x, mp.f, mp.theta_dot);
      mp.h2 = bump(mp.d, 4.0 * iota / 3.0, 5.0 * iota / 3.0);
      mp.h2_prime = bump_prime(mp.d, 4.0 * iota / 3.0, 5.0 * iota / 3.0) * mp.d_prime;
      const Mat I = Mat::Identity(n, n);
      mp.M1 = mp.h2 * pr.at.M0 + (1.0 - mp.h2) * I;
      // (M0 o pi)' = theta_dot M0'(theta*).
      mp.M1p = symmetric_part(mp.h2_prime * (pr.at.M0 - I) + mp.h2 * mp.theta_dot * pr.at.M0p);
      mp.h1 = bump(mp.d, iota / 3.0, 2.0 * iota / 3.0);
      if (mp.h1 > 0.0) {
        const OrbitSample& s = pr.at;
        mp.l_m1_orbit = l_m_eval(s.f, s.Df, s.M0, s.M0p, reanchor_basis(s.p, s.f, s.M0)).value;
        mp.r = -gm.mu * (1.0 - mp.h1) + mp.h1 * mp.l_m1_orbit;
      }
    }
  }
  mp.l_m1 = l_m_eval(mp.f, mp.Df, mp.M1, mp.M1p, reanchor_basis(x, mp.f, mp.M1));
  return mp;
}

[[nodiscard]] inline Mat m1_at(const GlobalMetric& gm, const Vec& x) { return metric_point(gm, x).M1; }

[[nodiscard]] inline double r_at(const GlobalMetric& gm, const Vec& x) { return metric_point(gm, x).r; }

namespace detail {

inline std::string state_key(const Vec& x) {
  std::string k(static_cast<std::size_t>(x.size()) * sizeof(double), '\0');
  std::memcpy(k.data(), x.data(), k.size());
  return k;
}

/// Globally adaptive Gauss-Kronrod (15 points): the panel with the largest
/// error estimate is bisected until the summed estimate meets abs_tol. Panels
/// whose estimate sits at the rounding level of the integrand are final.
template <class G>
double gk_adaptive(G&& g, double a, double b, double abs_tol, int max_panels, double* error) {
  using GK = boost::math::quadrature::gauss_kronrod<double, 15>;
  struct Panel {
    double a, b, value, err;
    bool operator<(const Panel& o) const { return err < o.err; }
  };
  auto eval = [&](double lo, double hi) {
    double err = 0.0, l1 = 0.0;
    const double v = GK::integrate(g, lo, hi, 0, 0.0, &err, &l1);
    // Kronrod estimates below a few hundred ulps of |g| are rounding noise.
    if (err <= 256.0 * std::numeric_limits<double>::epsilon() * l1) err = 0.0;
    return Panel{lo, hi, v, err};
  };
  std::priority_queue<Panel> heap;
  heap.push(eval(a, b));
  double total = heap.top().value, err = heap.top().err;
  int panels = 1;
  while (err > abs_tol && panels < max_panels) {
    const Panel p = heap.top();
    heap.pop();
    const double m = 0.5 * (p.a + p.b);
    const Panel l = eval(p.a, m), r = eval(m, p.b);
    total += l.value + r.value - p.value;
    err += l.err + r.err - p.err;
    heap.push(l);
    heap.push(r);
    ++panels;
  }
  if (error) *error += std::max(err, 0.0);
  return total;
}

/// Integral of field(t, S_t y0) over [a, b] on a dense trajectory.
template <class F>
double integrate_along(const Trajectory& traj, double a, double b, F&& field, double abs_tol, double* error) {
  auto g = [&](double t) { return field(t, traj.state(t)); };
  return gk_adaptive(g, a, b, abs_tol, 64, error);
}

}  // namespace detail

/// V_loc(x) = int_0^inf [L_{M1}(S_t x) - L_{M1}(pi(S_t x))] dt for d(x) <= iota.
[[nodiscard]] inline VResult v_loc(const GlobalMetric& gm, const Vec& x) {
  VResult out;
  out.region = VResult::Region::Local;
  const auto pr0 = project_in_chart(*gm.chart, x);
  if (!pr0) throw Error(ErrorKind::OutsideChart, "V_loc needs a state inside U");
  if (pr0->d <= gm.opt.snap_d) {
    out.region = VResult::Region::Orbit;
    return out;
  }
  const OdeSystem& sys = gm.system();
  const double T = gm.T();
  const double rate = gm.nu - 2.0 * gm.epsilon;
  Vec y = x;
  double theta_hint = pr0->theta;
  std::vector<double> envelope;
  const int max_chunks = static_cast<int>(std::ceil(gm.opt.t_max_periods));
  for (int k = 0; k < max_chunks; ++k) {
    const double t0 = k * T;
    const Trajectory traj = integrate(sys, y, {t0, t0 + T}, gm.opt.tol);
    double env = 0.0;
    // Phases advance at about unit rate; the last projection seeds the next one.
    double last_theta = theta_hint, last_t = t0;
    auto integrand = [&](double t, const Vec& s) {
      const MetricPoint mp = metric_point(gm, s, last_theta + (t - last_t));
      if (!mp.pr) throw Error(ErrorKind::NoDecayDetected, "trajectory left U while integrating V_loc");
      last_theta = mp.pr->theta;
      last_t = t;
      const OrbitSample& o = mp.pr->at;
      const double on_orbit = l_m_eval(o.f, o.Df, o.M0, o.M0p, reanchor_basis(o.p, o.f, o.M0)).value;
      const double v = mp.l_m1.value - on_orbit;
      env = std::max(env, std::abs(v));
      return v;
    };
    out.value += detail::integrate_along(traj, t0, t0 + T, integrand, gm.opt.quad_tol, &out.error);
    envelope.push_back(env);
    y = traj.state(t0 + T);
    theta_hint = last_theta + (t0 + T - last_t);
    const double tail = env / rate;
    if (tail <= gm.opt.tail_tol) {
      out.error += tail;
      return out;
    }
    if (k >= 2 && env > envelope[k - 2]) {
      std::ostringstream os;
      os << "V_loc integrand envelope grew from " << envelope[k - 2] << " to " << env;
      throw Error(ErrorKind::NoDecayDetected, os.str(), env);
    }
  }
  throw Error(ErrorKind::NoDecayDetected, "V_loc integrand did not decay within the horizon");
}

/// Time at which d(S_t x) = iota/3 (negative when x is already closer).
[[nodiscard]] inline double tau_crossing(const GlobalMetric& gm, const Vec& x) {
  const OdeSystem& sys = gm.system();
  const double level = gm.iota / 3.0;
  const double outside = gm.chart->U_level - level;
  auto g = [&](const Vec& y) {
    const auto pr = project_in_chart(*gm.chart, y);
    return pr ? pr->d - level : outside;
  };
  const double g0 = g(x);
  if (g0 == 0.0) return 0.0;
  const int dir = g0 > 0.0 ? 1 : -1;
  const double T = gm.T();
  const double t_max = gm.opt.t_max_periods * T;
  Vec y = x;
  double chunk = T;
  for (double t0 = 0.0; t0 < t_max;) {
    const double t1 = std::min(t0 + chunk, t_max);
    std::optional<Trajectory> traj;
    try {
      traj = integrate(sys, y, {dir * t0, dir * t1}, gm.opt.tol);
    } catch (const Error& e) {
      // Backward flows may blow up in finite time; the crossing can still
      // precede the blow-up, so retry on a shorter piece.
      const bool blowup = e.kind() == ErrorKind::StepSizeUnderflow || e.kind() == ErrorKind::NonFiniteState;
      if (!blowup || chunk < 1e-6 * T) {
        throw Error(ErrorKind::NeverReachesLevel, std::string("trajectory ends before the level: ") + e.what());
      }
      chunk *= 0.5;
      continue;
    }
    try {
      return event_root(*traj, g);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoSignChange) throw;
    }
    y = traj->state(dir * t1);
    t0 = t1;
  }
  throw Error(ErrorKind::NeverReachesLevel, "trajectory does not reach the level within the horizon");
}

namespace detail {

inline VResult v_compute(const GlobalMetric& gm, const Vec& x) {
  const auto pr = project_in_chart(*gm.chart, x);
  if (pr && pr->d <= gm.opt.snap_d) return {};
  if (pr && pr->d <= gm.iota / 3.0) return v_loc(gm, x);
  VResult out;
  out.region = VResult::Region::Global;
  try {
    out.tau = tau_crossing(gm, x);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::NeverReachesLevel) throw Error(ErrorKind::OutsideBasin, e.what());
    throw;
  }
  const OdeSystem& sys = gm.system();
  const double T = gm.T();
  // int_0^tau q(S_t x) dt in pieces of at most one period.
  Vec y = x;
  std::optional<double> hint;
  double last_t = 0.0;
  for (double a = 0.0; a < out.tau; a += T) {
    const double b = std::min(a + T, out.tau);
    const Trajectory traj = integrate(sys, y, {a, b}, gm.opt.tol);
    auto integrand = [&](double t, const Vec& s) {
      const MetricPoint mp = metric_point(gm, s, hint ? std::optional<double>(*hint + (t - last_t)) : std::nullopt);
      if (mp.pr) {
        hint = mp.pr->theta;
        last_t = t;
      }
      return mp.q();
    };
    out.value += integrate_along(traj, a, b, integrand, gm.opt.quad_tol, &out.error);
    y = traj.state(b);
  }
  const VResult loc = v_loc(gm, y);
  out.value += loc.value;
  out.error += loc.error;
  return out;
}

}  // namespace detail

/// V(x): 0 on the orbit, V_loc for d(x) <= iota/3, the transported value otherwise.
[[nodiscard]] inline VResult v_eval(const GlobalMetric& gm, const Vec& x) {
  if (!gm.opt.memoize) return detail::v_compute(gm, x);
  const std::string key = detail::state_key(x);
  {
    std::lock_guard<std::mutex> lock(gm.cache->mutex);
    auto it = gm.cache->values.find(key);
    if (it != gm.cache->values.end()) return it->second;
  }
  const VResult v = detail::v_compute(gm, x);
  std::lock_guard<std::mutex> lock(gm.cache->mutex);
  gm.cache->values.emplace(key, v);
  return v;
}

[[nodiscard]] inline double v_at(const GlobalMetric& gm, const Vec& x) { return v_eval(gm, x).value; }

[[nodiscard]] inline Mat m_at(const GlobalMetric& gm, const Vec& x) {
  return std::exp(2.0 * v_at(gm, x)) * metric_point(gm, x).M1;
}

/// M = e^{2V} M1 and M' = e^{2V}(2 V' M1 + M1') with V' = -L_{M1} + r.
struct FinalMetricPoint {
  MetricPoint base;
  VResult V;
  Mat M;
  Mat Mp;
  LmReport l_m;
};

[[nodiscard]] inline FinalMetricPoint final_metric_point(const GlobalMetric& gm, const Vec& x) {
  FinalMetricPoint fp;
  fp.base = metric_point(gm, x);
  fp.V = v_eval(gm, x);
  const double s = std::exp(2.0 * fp.V.value);
  fp.M = s * fp.base.M1;
  fp.Mp = s * (2.0 * fp.base.v_prime() * fp.base.M1 + fp.base.M1p);
  fp.l_m = l_m_eval(fp.base.f, fp.base.Df, fp.M, fp.Mp, reanchor_basis(x, fp.base.f, fp.M));
  return fp;
}

/// Handles on M1 and on the final metric for use with lm_eval.
[[nodiscard]] inline MetricFieldHandle m1_handle(const GlobalMetric& gm) {
  MetricFieldHandle h;
  h.M = [gm](const Vec& x) { return metric_point(gm, x).M1; };
  h.Mprime = [gm](const Vec& x) { return metric_point(gm, x).M1p; };
  h.provenance = "M1 (analytic orbital derivative)";
  return h;
}

[[nodiscard]] inline MetricFieldHandle final_metric_handle(const GlobalMetric& gm) {
  MetricFieldHandle h;
  h.M = [gm](const Vec& x) { return m_at(gm, x); };
  h.Mprime = [gm](const Vec& x) { return final_metric_point(gm, x).Mp; };
  h.provenance = "e^{2V} M1";
  return h;
}

}  // namespace cmetric
