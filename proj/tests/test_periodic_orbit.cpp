#include "cmetric/periodic_orbit.hpp"
#include "cmetric/systems.hpp"

#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

using namespace cmetric;

namespace {

// Period of the mu = 1 van der Pol cycle from an independent DOP853 section
// run at rtol 1e-13 (x-axis return map, 15 revolutions).
constexpr double kVdpPeriod = 6.6632868593231365;
// Transverse exponent -ln|lambda_2|/T from the same run.
constexpr double kVdpNu = 1.0593769948422551;

int kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return static_cast<int>(e.kind());
  }
  return -1;
}

}  // namespace

TEST(FindOrbit, RadialFromOffOrbitGuess) {
  const auto po = find_orbit(systems::radial(), Vec2(1.2, 0.0), 6.0);
  EXPECT_NEAR(po.q.norm(), 1.0, 1e-9);
  EXPECT_NEAR(po.T, 2 * kPi, 1e-8);
  EXPECT_LE(po.residual, 1e-9 * (1 + po.q.norm()));
}

TEST(FindOrbit, GuessOnOrbitNeedsNoCorrection) {
  const auto po = find_orbit(systems::radial(), Vec2(1.0, 0.0), 2 * kPi);
  EXPECT_EQ(po.newton_steps, 0);
  EXPECT_EQ(po.q, Vec2(1.0, 0.0));
}

TEST(FindOrbit, VanDerPolMatchesTightOracle) {
  const auto po = find_orbit(systems::vdp(1.0), Vec2(2.0, 0.0), 6.5);
  EXPECT_NEAR(po.T, kVdpPeriod, 1e-7);
  // Phase condition keeps q on the hyperplane through the guess normal to f(guess) = (0, -2).
  EXPECT_NEAR(po.q(1), 0.0, 1e-12);
}

TEST(FindOrbit, EquilibriumGuessIsRejected) {
  EXPECT_EQ(kind_of([] { (void)find_orbit(systems::vdp(1.0), Vec2(0.0, 0.0), 6.0); }),
            static_cast<int>(ErrorKind::EquilibriumFound));
}

TEST(FindOrbit, DoubledPeriodIsRejected) {
  EXPECT_EQ(kind_of([] { (void)find_orbit(systems::radial(), Vec2(1.0, 0.0), 4 * kPi + 0.05); }),
            static_cast<int>(ErrorKind::NoConvergence));
}

TEST(FloquetSpectrum, RadialMultipliersAndRate) {
  const auto po = find_orbit(systems::radial(), Vec2(1.2, 0.0), 6.0);
  const auto sp = floquet_spectrum(po);
  ASSERT_EQ(sp.groups.size(), 2u);
  EXPECT_TRUE(sp.groups[0].trivial);
  EXPECT_EQ(sp.groups[0].value, cplx(1.0, 0.0));
  EXPECT_NEAR(sp.groups[1].value.real() / std::exp(-4 * kPi), 1.0, 1e-6);
  EXPECT_NEAR(sp.nu, 2.0, 1e-6);
  EXPECT_EQ(sp.total_multiplicity(), 2);
}

TEST(FloquetSpectrum, CylinderRate) {
  const auto po = find_orbit(systems::cylinder3d(), Vec3(1.2, 0.0, 0.3), 6.0);
  const auto sp = floquet_spectrum(po);
  ASSERT_EQ(sp.groups.size(), 3u);
  EXPECT_NEAR(sp.groups[1].value.real() / std::exp(-2 * kPi), 1.0, 1e-6);
  EXPECT_NEAR(sp.groups[2].value.real() / std::exp(-4 * kPi), 1.0, 1e-5);
  EXPECT_NEAR(sp.nu, 1.0, 1e-6);
}

TEST(FloquetSpectrum, ProductMatchesAbelLiouville) {
  const auto sys = systems::vdp(1.0);
  const auto po = find_orbit(sys, Vec2(2.0, 0.0), 6.5);
  const auto sp = floquet_spectrum(po);
  cplx prod = 1.0;
  for (const auto& m : sp.multipliers) prod *= m;
  auto trace = [&](double t) { return sys.jac(po.orbit.state(t)).trace(); };
  const double integral =
      boost::math::quadrature::gauss_kronrod<double, 31>::integrate(trace, 0.0, po.T, 15, 1e-13);
  EXPECT_NEAR(prod.real() / std::exp(integral), 1.0, 1e-6);
  EXPECT_NEAR(sp.nu, kVdpNu, 1e-7);
}

TEST(FloquetSpectrum, RejectsUnstableAndAmbiguousSpectra) {
  Mat unstable = Mat::Zero(2, 2);
  unstable.diagonal() << 1.0, 1.2;
  EXPECT_EQ(kind_of([&] { (void)floquet_spectrum_of(unstable, 1.0); }),
            static_cast<int>(ErrorKind::NotExponentiallyStable));
  Mat ambiguous = Mat::Zero(2, 2);
  ambiguous.diagonal() << 1.0, 1.0 + 1e-7;
  EXPECT_EQ(kind_of([&] { (void)floquet_spectrum_of(ambiguous, 1.0); }),
            static_cast<int>(ErrorKind::AmbiguousTrivialMultiplier));
}

TEST(FloquetSpectrum, ClustersAndConjugatePairs) {
  Mat C = Mat::Zero(4, 4);
  C(0, 0) = 1.0;
  C(1, 1) = 0.5;
  C.block(2, 2, 2, 2) = 0.3 * rotation2(1.0);
  const auto sp = floquet_spectrum_of(C, 2.0);
  EXPECT_EQ(sp.total_multiplicity(), 4);
  int pairs = 0;
  for (const auto& g : sp.groups) pairs += g.complex_pair ? 1 : 0;
  EXPECT_EQ(pairs, 1);
  EXPECT_NEAR(sp.nu, -std::log(0.5) / 2.0, 1e-14);

  Mat D = Mat::Zero(3, 3);
  D.diagonal() << 1.0, 0.25, 0.25 + 1e-9;
  const auto sd = floquet_spectrum_of(D, 1.0);
  ASSERT_EQ(sd.groups.size(), 2u);
  EXPECT_EQ(sd.groups[1].multiplicity, 2);
}

TEST(PeriodicOrbitProperties, FlowDirectionIsTrivialEigenvector) {
  for (const auto& [sys, guess, Tg] :
       std::vector<std::tuple<OdeSystem, Vec, double>>{{systems::radial(), Vec2(1.2, 0.0), 6.0},
                                                       {systems::vdp(1.0), Vec2(2.0, 0.0), 6.5}}) {
    const auto po = find_orbit(sys, guess, Tg);
    const Vec fq = sys.f(po.q);
    EXPECT_LE((po.monodromy * fq - fq).norm(), 1e-7 * fq.norm()) << sys.name;
  }
}

TEST(PeriodicOrbitProperties, PeriodTranslationAlongOrbit) {
  const auto sys = systems::vdp(1.0);
  const auto po = find_orbit(sys, Vec2(2.0, 0.0), 6.5);
  for (int k = 0; k < 20; ++k) {
    const Vec p = po.point(po.T * (k + 0.37) / 20.0);
    EXPECT_LT((flow(sys, p, po.T) - p).norm(), 1e-8) << k;
  }
}

TEST(PeriodicOrbitProperties, RateIsAnchorIndependent) {
  const auto sys = systems::vdp(1.0);
  const auto po = find_orbit(sys, Vec2(2.0, 0.0), 6.5);
  const double nu = floquet_spectrum(po).nu;
  for (double frac : {0.13, 0.5, 0.81}) {
    const auto moved = orbit_from_anchor(sys, po.point(frac * po.T), po.T);
    EXPECT_NEAR(floquet_spectrum(moved).nu, nu, 1e-9) << frac;
  }
}
