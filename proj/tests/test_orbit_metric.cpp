#include "cmetric/orbit_metric.hpp"
#include "cmetric/systems.hpp"

#include <gtest/gtest.h>

using namespace cmetric;

namespace {

const OrbitMetric& radial_metric() {
  static const OrbitMetric om = make_orbit_metric(find_orbit(systems::radial(), Vec2(1.0, 0.0), 2 * kPi), 0.2);
  return om;
}

const OrbitMetric& vdp_metric() {
  static const OrbitMetric om = [] {
    const auto po = find_orbit(systems::vdp(1.0), Vec2(2.0, 0.0), 6.5);
    const double nu = floquet_spectrum(po).nu;
    return make_orbit_metric(po, 0.3 * nu);
  }();
  return om;
}

const OrbitMetric& cylinder_metric() {
  static const OrbitMetric om =
      make_orbit_metric(find_orbit(systems::cylinder3d(), Vec3(1.0, 0.0, 0.0), 2 * kPi), 0.2);
  return om;
}

std::vector<double> phases(double T, int count) {
  std::vector<double> out;
  for (int k = 0; k < count; ++k) out.push_back(T * (k + 0.37) / count);
  return out;
}

}  // namespace

TEST(OrbitMetric, RadialIsIdentityWithZeroDerivative) {
  const auto& om = radial_metric();
  for (double th : phases(om.T(), 50)) {
    const auto s = orbit_sample(om, th);
    EXPECT_LT((s.M0 - Mat::Identity(2, 2)).norm(), 1e-8) << th;
    EXPECT_LT(s.M0p.norm(), 1e-7) << th;
  }
}

TEST(OrbitMetric, RadialRateIsMinusTwoAtEveryPhase) {
  const auto& om = radial_metric();
  EXPECT_NEAR(om.nu, 2.0, 1e-6);
  for (double th : phases(om.T(), 200)) EXPECT_NEAR(l_m0_at(om, th).lm.value, -2.0, 1e-6) << th;
}

TEST(OrbitMetric, CylinderRateIsMinusOne) {
  const auto& om = cylinder_metric();
  EXPECT_NEAR(om.nu, 1.0, 1e-6);
  EXPECT_NEAR(l_m0_restricted(om), -1.0, 1e-8);
  for (double th : phases(om.T(), 40)) EXPECT_NEAR(l_m0_at(om, th).lm.value, -1.0, 1e-6) << th;
}

TEST(OrbitMetric, ValueAtPhaseZeroIsExact) {
  const auto& om = vdp_metric();
  const Mat& Si = om.dec.Sinv;
  const Mat expected = 0.5 * (Si.transpose() * Si + (Si.transpose() * Si).transpose());
  EXPECT_EQ((m0_at(om, 0.0) - expected).norm(), 0.0);
}

TEST(OrbitMetric, PeriodicAcrossTheSeam) {
  const auto& om = vdp_metric();
  const Mat a = m0_at(om, 0.0);
  EXPECT_LT((m0_at(om, om.T()) - a).norm(), 1e-15);
  EXPECT_LT((m0_at(om, om.T() - 1e-9) - a).norm(), 1e-6 * a.norm());
  EXPECT_LT((m0_at(om, 1e-9) - a).norm(), 1e-6 * a.norm());
}

TEST(OrbitMetric, SymmetricPositiveDefinite) {
  for (const OrbitMetric* om : {&vdp_metric(), &cylinder_metric()}) {
    for (double th : phases(om->T(), 40)) {
      const auto s = orbit_sample(*om, th);
      EXPECT_LT((s.M0 - s.M0.transpose()).norm(), 1e-14);
      EXPECT_GT(Eigen::SelfAdjointEigenSolver<Mat>(s.M0).eigenvalues()(0), 0.0);
    }
  }
}

TEST(OrbitMetric, DerivativeMatchesFiniteDifference) {
  const auto& om = vdp_metric();
  const double h = 1e-5;
  for (double th : phases(om.T(), 25)) {
    const Mat fd = (m0_at(om, th + h) - m0_at(om, th - h)) / (2 * h);
    const Mat an = m0_prime_at(om, th);
    EXPECT_LE((fd - an).norm(), 1e-5 * std::max(1.0, an.norm())) << th;
  }
}

TEST(OrbitMetric, ImaginaryResidueIsNegligible) {
  for (const OrbitMetric* om : {&radial_metric(), &vdp_metric(), &cylinder_metric()}) {
    double worst = 0.0;
    for (double th : phases(om->T(), 200)) worst = std::max(worst, orbit_sample(*om, th).imag_residue);
    EXPECT_LE(worst, 1e-9) << om->orbit.system.name;
  }
}

TEST(OrbitMetric, RealForNegativeMultipliers) {
  // P is genuinely complex here; only W^* W must be real.
  const auto lp = systems::rotating_half_turn();
  const auto dec = floquet_decomposition(linear_periodic_path(lp), 0.1);
  double worst = 0.0, complex_part = 0.0;
  for (double th : phases(lp.T, 200)) {
    worst = std::max(worst, metric_product(dec, th).imag().cwiseAbs().maxCoeff());
    complex_part = std::max(complex_part, inverse_frame(dec, th).imag().cwiseAbs().maxCoeff());
  }
  EXPECT_LE(worst, 1e-9);
  EXPECT_GT(complex_part, 1e-3);
}

TEST(OrbitMetric, MaximizerHasNoFlowComponent) {
  for (const OrbitMetric* om : {&vdp_metric(), &cylinder_metric()}) {
    for (double th : phases(om->T(), 30)) {
      const auto rep = l_m0_at(*om, th);
      EXPECT_LE(std::abs(rep.w(0)), 1e-7 * rep.w.norm()) << th;
    }
  }
}

TEST(OrbitMetric, RestrictedHermitianRouteAgrees) {
  for (const OrbitMetric* om : {&radial_metric(), &vdp_metric(), &cylinder_metric()}) {
    const double restricted = l_m0_restricted(*om);
    for (double th : phases(om->T(), 50)) {
      EXPECT_NEAR(l_m0_at(*om, th).lm.value, restricted, 1e-8) << om->orbit.system.name << " " << th;
    }
  }
}

TEST(OrbitMetric, RateBoundHoldsForEverySystem) {
  for (const OrbitMetric* om : {&radial_metric(), &vdp_metric(), &cylinder_metric()}) {
    double worst = -kInf;
    for (double th : phases(om->T(), 200)) worst = std::max(worst, l_m0_at(*om, th).lm.value);
    EXPECT_LE(worst, -om->nu + om->dec.epsilon + 1e-8) << om->orbit.system.name;
  }
}

TEST(OrbitMetric, VdpRateMatchesFrozenExponent) {
  // Two-dimensional orbit: L_{M0} is exactly the transverse exponent -nu.
  EXPECT_NEAR(vdp_metric().nu, 1.0593769948422551, 1e-8);
  EXPECT_NEAR(l_m0_restricted(vdp_metric()), -1.0593769948422551, 1e-8);
}
