/**
 * @file projection_sync.hpp
 * @brief Projection of nearby states onto the orbit along M0-orthogonal
 *        hyperplanes, the squared M0-distance d(x), phase synchronization
 *        theta_x(t) and the decay checks that go with them.
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/orbit_metric.hpp"

#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

namespace cmetric {

struct ChartOptions {
  /// Orbit phases sampled for nearest-point seeding.
  int seed_count = 512;
  /// Level of U; non-positive selects adaptive calibration.
  double iota_U = 0.0;
  /// Half-width of the admissible theta_dot band; non-positive selects 0.5 min(nu, 1).
  double eps0 = 0.0;
  int calibration_samples = 500;
  int max_halvings = 40;
  std::uint64_t seed = 20240611;
  /// |G(x, theta*)| <= g_tol * |M0 f| is required of every projection.
  double g_tol = 1e-10;
};

struct CalibrationRecord {
  double iota_start = 0.0;
  int halvings = 0;
  int samples = 0;
  double worst_theta_dot_deviation = 0.0;
  double min_denominator_ratio = kInf;  // min -G_theta / f^T M0 f over samples
  double worst_decay_rate = -kInf;      // max d'/(2d) over samples
  std::string last_failure;
};

struct ProjectionChart {
  std::shared_ptr<const OrbitMetric> om;
  double epsilon = 0.0;
  double nu = 0.0;
  double eps0 = 0.0;
  double U_level = 0.0;
  double g_tol = 1e-10;
  std::vector<double> seed_theta;
  std::vector<Vec> seed_p;
  std::vector<Mat> seed_M0;
  /// Largest M0-length between consecutive seed points.
  double seed_gap = 0.0;
  CalibrationRecord calibration;

  [[nodiscard]] const OdeSystem& system() const { return om->orbit.system; }
  [[nodiscard]] double T() const { return om->T(); }
};

struct Projection {
  double theta = 0.0;  // in [0, T)
  OrbitSample at;      // orbit data at theta
  double residual = 0.0;  // |G(x, theta)|
  double g_theta = 0.0;
  double d = 0.0;
};

[[nodiscard]] inline double g_eval(const OrbitSample& s, const Vec& x) { return (x - s.p).dot(s.M0 * s.f); }

[[nodiscard]] inline double g_theta_eval(const OrbitSample& s, const Vec& x) {
  const Vec r = x - s.p;
  return -s.f.dot(s.M0 * s.f) + r.dot(s.M0p * s.f) + r.dot(s.M0 * (s.Df * s.f));
}

[[nodiscard]] inline double g_eval(const ProjectionChart& chart, const Vec& x, double theta) {
  return g_eval(orbit_sample(*chart.om, theta), x);
}

namespace detail {

/// Newton on theta -> G(x, theta) from theta0; nullopt when it leaves the
/// G_theta < 0 region or fails to settle.
inline std::optional<Projection> project_newton(const ProjectionChart& chart, const Vec& x, double theta0,
                                                bool& degenerate) {
  const double T = chart.T();
  const double max_step = T / 16.0;
  double theta = theta0;
  double prev_G = kInf;
  for (int it = 0; it < 60; ++it) {
    const OrbitSample s = orbit_sample(*chart.om, theta);
    const double G = g_eval(s, x);
    const double Gt = g_theta_eval(s, x);
    const double scale = (s.M0 * s.f).norm();
    if (!(Gt < 0.0)) {
      degenerate = true;
      return std::nullopt;
    }
    double step = -G / Gt;
    // Newton stops contracting once G reaches the accuracy of the orbit data.
    const bool stalled = std::abs(G) >= 0.5 * prev_G && std::abs(G) <= chart.g_tol * scale;
    const bool settled =
        stalled || std::abs(G) <= 1e-14 * scale * std::max(1.0, x.norm()) || std::abs(step) <= 1e-13 * T;
    prev_G = std::abs(G);
    if (settled) {
      Projection pr;
      pr.theta = s.theta;
      pr.at = s;
      pr.residual = std::abs(G);
      pr.g_theta = Gt;
      const Vec r = x - s.p;
      pr.d = r.dot(s.M0 * r);
      if (pr.residual > chart.g_tol * scale) return std::nullopt;
      return pr;
    }
    step = std::clamp(step, -max_step, max_step);
    theta = reduce_phase(theta + step, T);
  }
  return std::nullopt;
}

}  // namespace detail

/// Phases ranked by the M0-distance from x to the seed points.
[[nodiscard]] inline std::vector<std::size_t> seed_ranking(const ProjectionChart& chart, const Vec& x,
                                                           std::size_t keep = 3) {
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(chart.seed_p.size());
  for (std::size_t k = 0; k < chart.seed_p.size(); ++k) {
    const Vec r = x - chart.seed_p[k];
    dist.emplace_back(r.dot(chart.seed_M0[k] * r), k);
  }
  keep = std::min(keep, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(keep), dist.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep; ++i) out.push_back(dist[i].second);
  return out;
}

/// pi(x) = S_theta q with (x - S_theta q)^T M0 f(S_theta q) = 0.
[[nodiscard]] inline Projection project(const ProjectionChart& chart, const Vec& x,
                                        std::optional<double> hint = std::nullopt) {
  bool degenerate = false;
  if (hint) {
    if (auto pr = detail::project_newton(chart, x, reduce_phase(*hint, chart.T()), degenerate)) return *pr;
  }
  for (std::size_t k : seed_ranking(chart, x)) {
    if (auto pr = detail::project_newton(chart, x, chart.seed_theta[k], degenerate)) return *pr;
  }
  if (degenerate) throw Error(ErrorKind::DegenerateDenominator, "G_theta >= 0 at the candidate phase");
  throw Error(ErrorKind::OutsideChart, "no seed phase yields a converged projection");
}

[[nodiscard]] inline double distance_d(const ProjectionChart& chart, const Vec& x) { return project(chart, x).d; }

/// True when x projects and lies in U.
[[nodiscard]] inline std::optional<Projection> project_in_chart(const ProjectionChart& chart, const Vec& x,
                                                                std::optional<double> hint = std::nullopt) {
  // A phase hint from a nearby state usually converges at once; the seed scan
  // below is the fallback.
  if (hint) {
    bool degenerate = false;
    auto pr = detail::project_newton(chart, x, reduce_phase(*hint, chart.T()), degenerate);
    if (pr && pr->d <= chart.U_level) return pr;
  }
  // Cheap rejection of states far outside U from the nearest seed point.
  double nearest = kInf;
  for (std::size_t k = 0; k < chart.seed_p.size(); ++k) {
    const Vec r = x - chart.seed_p[k];
    nearest = std::min(nearest, r.dot(chart.seed_M0[k] * r));
  }
  if (std::sqrt(nearest) > 2.0 * std::sqrt(chart.U_level) + chart.seed_gap) return std::nullopt;
  try {
    Projection pr = project(chart, x);
    if (pr.d <= chart.U_level) return pr;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::OutsideChart && e.kind() != ErrorKind::DegenerateDenominator) throw;
  }
  return std::nullopt;
}

/// theta_dot at x from the rational expression in M0, M0', Df at pi(x).
[[nodiscard]] inline double theta_dot(const Projection& pr, const Vec& x, const Vec& fx) {
  const double den = -pr.g_theta;
  if (!(den > 0.0)) throw Error(ErrorKind::DegenerateDenominator, "theta_dot denominator is not positive", den);
  return fx.dot(pr.at.M0 * pr.at.f) / den;
}

[[nodiscard]] inline double theta_dot(const ProjectionChart& chart, const Vec& x) {
  return theta_dot(project(chart, x), x, chart.system().f(x));
}

/// Orbital derivative of d at x.
[[nodiscard]] inline double d_prime(const Projection& pr, const Vec& x, const Vec& fx, double thdot) {
  const Vec r = x - pr.at.p;
  const Vec rdot = fx - thdot * pr.at.f;
  return 2.0 * rdot.dot(pr.at.M0 * r) + thdot * r.dot(pr.at.M0p * r);
}

namespace detail {

inline void fill_seeds(ProjectionChart& chart, int count) {
  chart.seed_theta.clear();
  chart.seed_p.clear();
  chart.seed_M0.clear();
  for (int k = 0; k < count; ++k) {
    const double th = chart.T() * k / count;
    const OrbitSample s = orbit_sample(*chart.om, th);
    chart.seed_theta.push_back(th);
    chart.seed_p.push_back(s.p);
    chart.seed_M0.push_back(s.M0);
  }
  chart.seed_gap = 0.0;
  for (int k = 0; k < count; ++k) {
    const Vec step = chart.seed_p[(k + 1) % count] - chart.seed_p[k];
    chart.seed_gap = std::max(chart.seed_gap, std::sqrt(step.dot(chart.seed_M0[k] * step)));
  }
}

struct ChartSample {
  double theta;
  Vec direction;  // M0-unit, M0-orthogonal to f
  double u;       // fraction of the level
};

inline std::vector<ChartSample> chart_samples(const ProjectionChart& chart, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ph(0.0, chart.T()), uu(0.0, 1.0);
  std::normal_distribution<double> g;
  std::vector<ChartSample> out;
  const int n = chart.om->n();
  for (int i = 0; i < count; ++i) {
    ChartSample cs;
    cs.theta = ph(rng);
    const OrbitSample s = orbit_sample(*chart.om, cs.theta);
    Vec v(n);
    for (int j = 0; j < n; ++j) v(j) = g(rng);
    const Vec Mf = s.M0 * s.f;
    v -= (Mf.dot(v) / s.f.dot(Mf)) * s.f;
    v /= std::sqrt(v.dot(s.M0 * v));
    cs.direction = v;
    // Every fourth sample sits on the boundary of U.
    cs.u = i % 4 == 0 ? 1.0 : std::max(uu(rng), 1e-3);
    out.push_back(cs);
  }
  return out;
}

}  // namespace detail

/// The state at M0-distance sqrt(d) from the orbit point at phase theta, along an M0-unit direction.
[[nodiscard]] inline Vec chart_point(const ProjectionChart& chart, double theta, const Vec& direction, double d) {
  return chart.om->point(theta) + std::sqrt(d) * direction;
}

/// Calibrate U: halve the level until projection, the positive denominator,
/// the theta_dot band and the d' decay rate hold on the sample.
[[nodiscard]] inline ProjectionChart calibrate_chart(std::shared_ptr<const OrbitMetric> om, double epsilon,
                                                     const ChartOptions& opt = {}) {
  ProjectionChart chart;
  chart.om = std::move(om);
  chart.epsilon = epsilon;
  chart.nu = chart.om->nu;
  chart.eps0 = opt.eps0 > 0.0 ? opt.eps0 : 0.5 * std::min(chart.nu, 1.0);
  chart.g_tol = opt.g_tol;
  detail::fill_seeds(chart, opt.seed_count);
  double min_f = kInf;
  for (const auto& p : chart.seed_p) min_f = std::min(min_f, chart.system().f(p).norm());
  double level = opt.iota_U > 0.0 ? opt.iota_U : std::pow(0.05 * min_f, 2);
  chart.calibration.iota_start = level;
  const auto samples = detail::chart_samples(chart, opt.calibration_samples, opt.seed);
  chart.calibration.samples = static_cast<int>(samples.size());
  const double rate = 2.0 * (-chart.nu + 2.0 * epsilon);

  for (int halving = 0; halving <= opt.max_halvings; ++halving) {
    chart.U_level = level;
    CalibrationRecord rec = chart.calibration;
    rec.halvings = halving;
    rec.worst_theta_dot_deviation = 0.0;
    rec.min_denominator_ratio = kInf;
    rec.worst_decay_rate = -kInf;
    std::string failure;
    for (const auto& cs : samples) {
      const double d_target = level * cs.u;
      const Vec x = chart_point(chart, cs.theta, cs.direction, d_target);
      Projection pr;
      try {
        pr = project(chart, x);
      } catch (const Error& e) {
        failure = std::string("projection failed: ") + e.what();
        break;
      }
      const double dth = std::remainder(pr.theta - cs.theta, chart.T());
      if (std::abs(dth) > 1e-6 * chart.T()) {
        failure = "projection landed on a different phase";
        break;
      }
      const Vec fx = chart.system().f(x);
      const double fMf = pr.at.f.dot(pr.at.M0 * pr.at.f);
      rec.min_denominator_ratio = std::min(rec.min_denominator_ratio, -pr.g_theta / fMf);
      if (!(pr.g_theta < 0.0)) {
        failure = "non-positive theta_dot denominator";
        break;
      }
      const double thd = theta_dot(pr, x, fx);
      rec.worst_theta_dot_deviation = std::max(rec.worst_theta_dot_deviation, std::abs(thd - 1.0));
      if (std::abs(thd - 1.0) > chart.eps0) {
        failure = "theta_dot outside the admissible band";
        break;
      }
      const double dp = d_prime(pr, x, fx, thd);
      rec.worst_decay_rate = std::max(rec.worst_decay_rate, dp / (2.0 * pr.d));
      if (!(dp <= rate * pr.d)) {
        failure = "d' exceeds 2(-nu + 2 eps) d";
        break;
      }
    }
    chart.calibration = rec;
    if (failure.empty()) return chart;
    chart.calibration.last_failure = failure;
    if (opt.iota_U > 0.0) break;
    level *= 0.5;
  }
  throw Error(ErrorKind::OutsideChart, "chart calibration failed: " + chart.calibration.last_failure, level);
}

struct SyncNode {
  double t = 0.0;
  double theta = 0.0;  // theta_x(t), unwound, theta_x(0) = 0
  double d = 0.0;
  double theta_dot = 1.0;
  Vec y;               // S_t x
  Vec p;               // pi(S_t x)
};

struct SyncPath {
  Vec x0;
  double theta0 = 0.0;  // phase of pi(x0)
  std::vector<SyncNode> nodes;

  /// t_x'(theta) = 1 / theta_x'(t) at node k.
  [[nodiscard]] double t_dot(std::size_t k) const { return 1.0 / nodes[k].theta_dot; }
};

struct SyncOptions {
  int nodes_per_period = 64;
  int max_refinements = 4;
  Tolerances tol{1e-11, 1e-13};
};

/// theta_x at the requested times (ascending, starting at 0).
[[nodiscard]] inline SyncPath synchronize_at(const ProjectionChart& chart, const Vec& x,
                                             const std::vector<double>& times, const SyncOptions& opt = {}) {
  const OdeSystem& sys = chart.system();
  const double T = chart.T();
  SyncPath path;
  path.x0 = x;
  const double t_end = times.empty() ? 0.0 : times.back();
  std::optional<Trajectory> traj;
  if (t_end > 0.0) traj = integrate(sys, x, {0.0, t_end}, opt.tol);
  double prev_unwound = 0.0, prev_reduced = 0.0, prev_t = 0.0, prev_rate = 1.0;
  for (std::size_t k = 0; k < times.size(); ++k) {
    const double t = times[k];
    const Vec y = t == 0.0 ? x : traj->state(t);
    const std::optional<double> hint =
        k == 0 ? std::nullopt : std::optional<double>(prev_reduced + prev_rate * (t - prev_t));
    const Projection pr = project(chart, y, hint);
    SyncNode node;
    node.t = t;
    node.y = y;
    node.p = pr.at.p;
    node.d = pr.d;
    node.theta_dot = theta_dot(pr, y, sys.f(y));
    if (k == 0) {
      path.theta0 = pr.theta;
      node.theta = 0.0;
      prev_unwound = pr.theta;
    } else {
      const double jump = std::remainder(pr.theta - prev_reduced, T);
      if (std::abs(jump - (t - prev_t)) > T / 4 || !(jump > 0.0)) {
        std::ostringstream os;
        os << "phase increment " << jump << " over dt " << (t - prev_t);
        throw Error(ErrorKind::BranchJump, os.str(), jump);
      }
      prev_unwound += jump;
      node.theta = prev_unwound - path.theta0;
    }
    prev_reduced = pr.theta;
    prev_t = t;
    prev_rate = node.theta_dot;
    path.nodes.push_back(std::move(node));
  }
  return path;
}

/// theta_x on a uniform mesh of [0, t_end], refined on branch jumps.
[[nodiscard]] inline SyncPath synchronize(const ProjectionChart& chart, const Vec& x, double t_end,
                                          const SyncOptions& opt = {}) {
  int per = std::max(opt.nodes_per_period, 4);
  for (int ref = 0;; ++ref) {
    const int count = std::max(1, static_cast<int>(std::ceil(t_end / chart.T() * per)));
    std::vector<double> times(count + 1);
    for (int k = 0; k <= count; ++k) times[k] = t_end * k / count;
    if (t_end == 0.0) times.resize(1);
    try {
      return synchronize_at(chart, x, times, opt);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::BranchJump || ref >= opt.max_refinements) throw;
    }
    per *= 2;
  }
}

struct DecayReport {
  double d0 = 0.0;
  /// max of d(S_t x) / (e^{2(-nu + 2 eps) t} d(x)) over nodes where the bound exceeds floor_d.
  double worst_decay_ratio = 0.0;
  int decay_violations = 0;
  double C_tdot = 0.0;   // fitted constant for |t_x'(theta) - 1|
  double C_dist = 0.0;   // fitted constant for |S_{t_x(theta)} x - S_theta pi(x)|
  int envelope_violations = 0;
  std::size_t nodes = 0;
};

/// Decay of d along the flow and the fitted exponential envelopes for the
/// synchronized time and distance. The constants are fitted on the first half
/// of the grid and checked (x1.5) on all of it.
[[nodiscard]] inline DecayReport verify_decay(const ProjectionChart& chart, const Vec& x,
                                              const std::vector<double>& t_grid, double nu, double epsilon,
                                              double tol = 0.05, double floor_d = 1e-20) {
  DecayReport rep;
  const SyncPath path = synchronize_at(chart, x, t_grid);
  rep.nodes = path.nodes.size();
  rep.d0 = path.nodes.front().d;
  if (rep.d0 == 0.0) return rep;
  const double rate = 2.0 * (-nu + 2.0 * epsilon);
  const double env_rate = -nu + chart.eps0;
  const double dist0 = std::sqrt(rep.d0);
  const double t_half = 0.5 * t_grid.back();
  for (const auto& nd : path.nodes) {
    const double bound = std::exp(rate * nd.t) * rep.d0;
    // Below floor_d the computed d is rounding noise of the orbit data.
    if (bound > floor_d) rep.worst_decay_ratio = std::max(rep.worst_decay_ratio, nd.d / bound);
    if (nd.d > bound * (1.0 + tol) + floor_d) ++rep.decay_violations;
    if (nd.t <= t_half) {
      const double e = std::exp(env_rate * nd.theta);
      rep.C_tdot = std::max(rep.C_tdot, std::abs(1.0 / nd.theta_dot - 1.0) / e);
      rep.C_dist = std::max(rep.C_dist, (nd.y - nd.p).norm() / (e * dist0));
    }
  }
  const double floor_tdot = 1e-8, floor_dist = 1e-10;
  for (const auto& nd : path.nodes) {
    const double e = std::exp(env_rate * nd.theta);
    if (std::abs(1.0 / nd.theta_dot - 1.0) > 1.5 * rep.C_tdot * e + floor_tdot) ++rep.envelope_violations;
    if ((nd.y - nd.p).norm() > 1.5 * rep.C_dist * e * dist0 + floor_dist) ++rep.envelope_violations;
  }
  return rep;
}

}  // namespace cmetric
