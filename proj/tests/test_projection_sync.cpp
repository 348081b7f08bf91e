#include "cmetric/projection_sync.hpp"
#include "cmetric/systems.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace cmetric;

namespace {

int kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return static_cast<int>(e.kind());
  }
  return -1;
}

std::shared_ptr<const ProjectionChart> radial_chart() {
  static const auto chart = [] {
    auto om = std::make_shared<const OrbitMetric>(
        make_orbit_metric(find_orbit(systems::radial(), Vec2(1.0, 0.0), 2 * kPi), 0.2));
    return std::make_shared<const ProjectionChart>(calibrate_chart(om, 0.2));
  }();
  return chart;
}

std::shared_ptr<const ProjectionChart> vdp_chart() {
  static const auto chart = [] {
    const auto po = find_orbit(systems::vdp(1.0), Vec2(2.0, 0.0), 6.5);
    const double eps = 0.3 * floquet_spectrum(po).nu;
    auto om = std::make_shared<const OrbitMetric>(make_orbit_metric(po, eps));
    return std::make_shared<const ProjectionChart>(calibrate_chart(om, eps));
  }();
  return chart;
}

// Polar closed form of the radial system: r' = r(1 - r^2).
double radial_r(double r0, double t) { return 1.0 / std::sqrt(1.0 + (1.0 / (r0 * r0) - 1.0) * std::exp(-2.0 * t)); }

Vec polar(double r, double phi) { return Vec2(r * std::cos(phi), r * std::sin(phi)); }

// Random states of U at a fraction of the level, M0-orthogonal to f.
std::vector<Vec> states_in_chart(const ProjectionChart& chart, int count, std::uint64_t seed, double fraction) {
  std::vector<Vec> out;
  for (const auto& cs : detail::chart_samples(chart, count, seed)) {
    out.push_back(chart_point(chart, cs.theta, cs.direction, fraction * cs.u * chart.U_level));
  }
  return out;
}

}  // namespace

TEST(GEval, VanishesOnTheOrbit) {
  const auto& chart = *radial_chart();
  for (double th : {0.0, 1.0, 4.0}) EXPECT_EQ(g_eval(chart, chart.om->point(th), th), 0.0);
}

TEST(GEval, RadialHandValues) {
  const auto& chart = *radial_chart();
  EXPECT_NEAR(g_eval(chart, Vec2(1.5, 0.0), 0.0), 0.0, 1e-10);
  EXPECT_NEAR(g_eval(chart, Vec2(1.5, 0.0), kPi / 2), -1.5, 1e-8);
}

TEST(Project, RadialIsRadialProjection) {
  const auto& chart = *radial_chart();
  for (double phi : {0.0, 0.3, 2.0, 3.5, 6.0}) {
    const auto pr = project(chart, polar(1.5, phi));
    EXPECT_NEAR(std::remainder(pr.theta - phi, 2 * kPi), 0.0, 1e-9) << phi;
    EXPECT_LT((pr.at.p - polar(1.0, phi)).norm(), 1e-9);
    EXPECT_NEAR(pr.d, 0.25, 1e-8);
  }
}

TEST(Project, OrbitPointsProjectToThemselves) {
  const auto& chart = *vdp_chart();
  for (double th : {0.0, 0.9, 3.1, 6.0}) {
    const auto pr = project(chart, chart.om->point(th));
    EXPECT_NEAR(std::remainder(pr.theta - th, chart.T()), 0.0, 1e-9);
    EXPECT_LE(pr.residual, 1e-12);
    EXPECT_LE(pr.d, 1e-20);
  }
}

TEST(Project, VdpSmallNormalOffset) {
  const auto& chart = *vdp_chart();
  const OdeSystem& sys = chart.system();
  for (double th : {0.5, 2.0, 4.5}) {
    const Vec p = chart.om->point(th);
    const Vec f = sys.f(p);
    const Vec normal = Vec2(-f(1), f(0)).normalized();
    const auto pr = project(chart, p + 1e-3 * normal);
    EXPECT_LE(pr.residual, 1e-10 * (pr.at.M0 * pr.at.f).norm());
    EXPECT_LE((pr.at.p - p).norm(), 2e-3);
  }
}

TEST(Project, ResidualSmallOnRandomStatesOfU) {
  for (const auto& chart : {radial_chart(), vdp_chart()}) {
    for (const Vec& x : states_in_chart(*chart, 200, 77, 0.999)) {
      const auto pr = project_in_chart(*chart, x);
      ASSERT_TRUE(pr.has_value());
      EXPECT_LE(pr->residual, 1e-10 * (pr->at.M0 * pr->at.f).norm());
    }
  }
}

TEST(Project, Idempotent) {
  const auto& chart = *vdp_chart();
  for (const Vec& x : states_in_chart(chart, 50, 5, 1.0)) {
    const auto a = project(chart, x);
    const auto b = project(chart, a.at.p);
    EXPECT_LE(std::abs(std::remainder(a.theta - b.theta, chart.T())), 1e-9);
    EXPECT_LE((a.at.p - b.at.p).norm(), 1e-9);
  }
}

TEST(Project, FarStatesAreRejected) {
  const auto& chart = *vdp_chart();
  EXPECT_FALSE(project_in_chart(chart, Vec2(0.0, 0.0)).has_value());
  EXPECT_FALSE(project_in_chart(chart, Vec2(5.0, 5.0)).has_value());
  EXPECT_EQ(kind_of([&] { (void)project(chart, Vec2(0.01, -0.02)); }) >= 0, true);
}

TEST(DistanceD, RadialClosedForm) {
  const auto& chart = *radial_chart();
  EXPECT_NEAR(distance_d(chart, Vec2(1.5, 0.0)), 0.25, 1e-8);
  EXPECT_LE(distance_d(chart, Vec2(0.0, 1.0)), 1e-16);
  const OdeSystem& sys = chart.system();
  const Vec x = polar(1.04, 0.2);
  for (double t : {0.3, 1.0, 2.5}) {
    const double r = radial_r(1.04, t);
    EXPECT_NEAR(distance_d(chart, flow(sys, x, t, {1e-12, 1e-14})), (r - 1.0) * (r - 1.0), 1e-11) << t;
  }
}

TEST(Chart, CalibrationRecordsPassingLevel) {
  for (const auto& chart : {radial_chart(), vdp_chart()}) {
    EXPECT_GT(chart->U_level, 0.0);
    EXPECT_LE(chart->calibration.worst_theta_dot_deviation, chart->eps0);
    EXPECT_GT(chart->calibration.min_denominator_ratio, 0.0);
    EXPECT_LE(chart->calibration.worst_decay_rate, -chart->nu + 2 * chart->epsilon);
    EXPECT_EQ(chart->calibration.samples, 500);
  }
}

TEST(Chart, BoundaryIsPositivelyInvariant) {
  const auto& chart = *vdp_chart();
  const OdeSystem& sys = chart.system();
  for (const auto& cs : detail::chart_samples(chart, 40, 13)) {
    const Vec x = chart_point(chart, cs.theta, cs.direction, chart.U_level);
    const Vec y = flow(sys, x, 1e-3, {1e-12, 1e-14});
    EXPECT_LE(distance_d(chart, y), distance_d(chart, x));
  }
}

TEST(Chart, ExplicitLevelThatFailsThrows) {
  const auto& chart = *vdp_chart();
  ChartOptions opt;
  opt.iota_U = 4.0;
  EXPECT_EQ(kind_of([&] { (void)calibrate_chart(chart.om, chart.epsilon, opt); }),
            static_cast<int>(ErrorKind::OutsideChart));
}

TEST(ThetaDot, OrbitAndRadialValues) {
  EXPECT_NEAR(theta_dot(*vdp_chart(), vdp_chart()->om->point(1.7)), 1.0, 1e-12);
  EXPECT_NEAR(theta_dot(*radial_chart(), Vec2(1.5, 0.0)), 1.0, 1e-8);
  EXPECT_NEAR(theta_dot(*radial_chart(), polar(0.97, 2.0)), 1.0, 1e-8);
}

TEST(ThetaDot, InsideTheBandOnU) {
  const auto& chart = *vdp_chart();
  for (const Vec& x : states_in_chart(chart, 200, 41, 1.0)) {
    EXPECT_LE(std::abs(theta_dot(chart, x) - 1.0), chart.eps0);
  }
}

TEST(ThetaDot, MatchesSlopeOfSynchronizedPhase) {
  const auto& chart = *vdp_chart();
  const double h = 1e-4;
  for (const Vec& x : states_in_chart(chart, 10, 8, 1.0)) {
    const auto path = synchronize_at(chart, x, {0.0, h, 2 * h});
    const double slope = (-3 * path.nodes[0].theta + 4 * path.nodes[1].theta - path.nodes[2].theta) / (2 * h);
    EXPECT_NEAR(slope, path.nodes[0].theta_dot, 1e-6);
  }
}

TEST(DPrime, NegativeOffTheOrbit) {
  const auto& chart = *vdp_chart();
  const OdeSystem& sys = chart.system();
  for (const Vec& x : states_in_chart(chart, 40, 19, 1.0)) {
    const auto pr = project(chart, x);
    const Vec fx = sys.f(x);
    const double analytic = d_prime(pr, x, fx, theta_dot(pr, x, fx));
    const auto fd = orbital_derivative([&](const Vec& y) { return distance_d(chart, y); }, x, sys);
    EXPECT_LT(analytic, 0.0);
    EXPECT_LT(fd.value, 0.0);
    EXPECT_NEAR(fd.value, analytic, 1e-6 * std::abs(analytic) + 1e-12);
  }
}

TEST(Synchronize, RadialPhaseAdvancesAtUnitRate) {
  const auto& chart = *radial_chart();
  const auto path = synchronize(chart, Vec2(1.5, 0.0), 3 * chart.T());
  EXPECT_EQ(path.nodes.front().theta, 0.0);
  for (const auto& nd : path.nodes) {
    EXPECT_NEAR(nd.theta, nd.t, 1e-8) << nd.t;
    const double r = radial_r(1.5, nd.t);
    EXPECT_NEAR(nd.d, (r - 1.0) * (r - 1.0), 1e-9);
  }
}

TEST(Synchronize, OrbitStatesFollowTheFlow) {
  const auto& chart = *vdp_chart();
  const auto path = synchronize(chart, chart.om->point(2.0), 2 * chart.T());
  for (const auto& nd : path.nodes) EXPECT_NEAR(nd.theta, nd.t, 1e-8);
}

TEST(Synchronize, StrictlyIncreasingAndConsistentWithProjection) {
  const auto& chart = *vdp_chart();
  for (const Vec& x : states_in_chart(chart, 5, 2, 1.0)) {
    const auto path = synchronize(chart, x, 2 * chart.T());
    for (std::size_t k = 1; k < path.nodes.size(); ++k) {
      EXPECT_GT(path.nodes[k].theta, path.nodes[k - 1].theta);
      // S_{theta_x(t)} pi(x) = pi(S_t x).
      const Vec lhs = chart.om->point(path.theta0 + path.nodes[k].theta);
      EXPECT_LE((lhs - path.nodes[k].p).norm(), 1e-8);
    }
  }
}

TEST(Synchronize, SemiflowCompatibility) {
  const auto& chart = *vdp_chart();
  const OdeSystem& sys = chart.system();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 3.0);
  for (const Vec& x : states_in_chart(chart, 4, 29, 1.0)) {
    const double tau = u(rng);
    const std::vector<double> ts{0.0, 0.5, 1.0, 2.0};
    std::vector<double> shifted;
    for (double t : ts) shifted.push_back(t + tau);
    shifted.insert(shifted.begin(), 0.0);
    const auto from_x = synchronize_at(chart, x, shifted);
    const auto from_y = synchronize_at(chart, flow(sys, x, tau, {1e-12, 1e-14}), ts);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      EXPECT_LE((from_x.nodes[k + 1].p - from_y.nodes[k].p).norm(), 1e-8);
      const double lhs = from_y.nodes[k].theta;
      const double rhs = from_x.nodes[k + 1].theta - from_x.nodes[1].theta;
      EXPECT_NEAR(lhs, rhs, 1e-8);
    }
  }
}

TEST(Synchronize, TDotInvertsThetaDot) {
  const auto& chart = *radial_chart();
  const auto path = synchronize(chart, polar(1.03, 1.0), chart.T());
  for (std::size_t k = 0; k < path.nodes.size(); ++k) EXPECT_NEAR(path.t_dot(k), 1.0, 1e-8);
}

TEST(VerifyDecay, RadialFromFarOutside) {
  const auto& chart = *radial_chart();
  std::vector<double> grid;
  for (int k = 0; k <= 96; ++k) grid.push_back(3 * chart.T() * k / 96);
  const auto rep = verify_decay(chart, Vec2(1.5, 0.0), grid, 2.0, 0.2);
  EXPECT_EQ(rep.decay_violations, 0);
  EXPECT_LE(rep.worst_decay_ratio, 1.0);
  EXPECT_EQ(rep.envelope_violations, 0);
  EXPECT_TRUE(std::isfinite(rep.C_dist));
}

TEST(VerifyDecay, OrbitStateIsTrivial) {
  const auto& chart = *vdp_chart();
  const auto rep = verify_decay(chart, chart.om->point(1.0), {0.0, 1.0, 2.0}, chart.nu, chart.epsilon);
  EXPECT_LE(rep.d0, 1e-20);
  EXPECT_EQ(rep.decay_violations, 0);
  EXPECT_EQ(rep.envelope_violations, 0);
}

TEST(VerifyDecay, VdpNormalOffset) {
  const auto& chart = *vdp_chart();
  const OdeSystem& sys = chart.system();
  std::vector<double> grid;
  for (int k = 0; k <= 120; ++k) grid.push_back(3 * chart.T() * k / 120);
  for (double th : {0.0, 1.5, 4.0}) {
    const Vec p = chart.om->point(th);
    const Vec f = sys.f(p);
    const auto rep = verify_decay(chart, p + 1e-2 * Vec2(-f(1), f(0)).normalized(), grid, chart.nu, chart.epsilon);
    EXPECT_EQ(rep.decay_violations, 0) << th;
    EXPECT_EQ(rep.envelope_violations, 0) << th;
    EXPECT_TRUE(std::isfinite(rep.C_tdot));
  }
}
