#include "cmetric/floquet.hpp"
#include "cmetric/periodic_orbit.hpp"
#include "cmetric/systems.hpp"

#include <gtest/gtest.h>

#include <unsupported/Eigen/MatrixFunctions>

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

Mat diag2(double a, double b) {
  Mat d = Mat::Zero(2, 2);
  d(0, 0) = a;
  d(1, 1) = b;
  return d;
}

const PeriodicOrbit& radial_orbit() {
  static const PeriodicOrbit po = find_orbit(systems::radial(), Vec2(1.0, 0.0), 2 * kPi);
  return po;
}

const PeriodicOrbit& vdp_orbit() {
  static const PeriodicOrbit po = find_orbit(systems::vdp(1.0), Vec2(2.0, 0.0), 6.5);
  return po;
}

}  // namespace

TEST(ModifiedJordan, DiagonalInputIsAlreadyInForm) {
  const auto jf = modified_real_jordan(diag2(1.0, 0.5), 0.1);
  EXPECT_LT((jf.J - diag2(1.0, 0.5)).norm(), 1e-15);
  EXPECT_LT((jf.S - Mat::Identity(2, 2)).norm(), 1e-15);
  EXPECT_EQ(jf.blocks.size(), 2u);
}

TEST(ModifiedJordan, DefectiveTwoByTwoGetsScaledSuperdiagonal) {
  Mat C(2, 2);
  C << 0.5, 1.0, 0.0, 0.5;
  const auto jf = modified_real_jordan(C, 0.1);
  Mat J(2, 2);
  J << 0.5, 0.05, 0.0, 0.5;
  EXPECT_LT((jf.J - J).norm(), 1e-15);
  ASSERT_EQ(jf.blocks.size(), 1u);
  EXPECT_EQ(jf.blocks[0].m, 2);
  // S = S1 diag(1, eps'|lambda|) with unit chain vectors e1, e2.
  EXPECT_NEAR(jf.S.col(0).norm(), 1.0, 1e-15);
  EXPECT_NEAR(jf.S.col(1).norm(), 0.05, 1e-15);
  EXPECT_LE(jf.residual, 1e-14);
}

TEST(ModifiedJordan, RotationScalingIsRecordedAsComplexPair) {
  const Mat C = 0.8 * rotation2(kPi / 3);
  const auto jf = modified_real_jordan(C, 0.1);
  ASSERT_EQ(jf.blocks.size(), 1u);
  EXPECT_EQ(jf.blocks[0].kind, BlockKind::ComplexPair);
  EXPECT_NEAR(jf.blocks[0].r, 0.8, 1e-15);
  EXPECT_NEAR(jf.blocks[0].theta, kPi / 3, 1e-15);
  EXPECT_LT((jf.J - C).norm(), 1e-14);
}

TEST(ModifiedJordan, RepeatedSemisimpleGivesSeparateBlocks) {
  Mat C = Mat::Zero(3, 3);
  C.diagonal() << 0.5, 1.0, 0.5;
  const auto jf = modified_real_jordan(C, 0.2);
  ASSERT_EQ(jf.blocks.size(), 3u);
  for (const auto& b : jf.blocks) EXPECT_EQ(b.m, 1);
  EXPECT_LE(jf.residual, 1e-14);
}

TEST(ModifiedJordan, DefectiveChainsUnderSimilarity) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  // Real eigenvalue 0.6 with blocks {3, 1} plus a simple 1.
  Mat J0 = Mat::Zero(5, 5);
  J0.diagonal() << 0.6, 0.6, 0.6, 0.6, 1.0;
  J0(0, 1) = 1.0;
  J0(1, 2) = 1.0;
  Mat S0(5, 5);
  for (int i = 0; i < 25; ++i) S0.data()[i] = g(rng);
  S0 += 3.0 * Mat::Identity(5, 5);
  const Mat C = S0 * J0 * S0.inverse();
  JordanOptions opt;
  opt.hints = {{cplx(0.6, 0.0), {3, 1}}, {cplx(1.0, 0.0), {1}}};
  const double ep = 0.05;
  const auto jf = modified_real_jordan(C, ep, opt);
  EXPECT_LE(jf.residual, 1e-8);
  std::vector<int> sizes;
  for (const auto& b : jf.blocks) sizes.push_back(b.m);
  std::sort(sizes.begin(), sizes.end());
  EXPECT_EQ(sizes, (std::vector<int>{1, 1, 3}));
  // The superdiagonal carries eps'|lambda|.
  for (const auto& b : jf.blocks) {
    if (b.m == 3) {
      EXPECT_DOUBLE_EQ(jf.J(b.offset, b.offset + 1), ep * 0.6);
    }
  }
}

TEST(ModifiedJordan, DefectiveStructureDetectedWithoutHints) {
  // Exact upper-triangular input: eigenvalues come out exactly equal.
  Mat C = Mat::Zero(4, 4);
  C.diagonal() << 0.4, 0.4, 0.4, -0.7;
  C(0, 1) = 1.0;
  C(1, 2) = 0.5;
  const auto jf = modified_real_jordan(C, 0.1);
  EXPECT_LE(jf.residual, 1e-10);
  int defective = 0;
  for (const auto& b : jf.blocks) defective += b.m == 3 ? 1 : 0;
  EXPECT_EQ(defective, 1);
}

TEST(ModifiedJordan, DefectiveComplexPair) {
  // Real Jordan form of a double complex pair, conjugated.
  Mat J0 = Mat::Zero(4, 4);
  J0.block(0, 0, 2, 2) = 0.7 * rotation2(0.9);
  J0.block(2, 2, 2, 2) = 0.7 * rotation2(0.9);
  J0.block(0, 2, 2, 2) = Mat::Identity(2, 2);
  Mat S0(4, 4);
  S0 << 1, 0.2, 0, 0.1, 0, 1, 0.3, 0, 0.1, 0, 1, 0.2, 0, 0.1, 0, 1;
  const Mat C = S0 * J0 * S0.inverse();
  JordanOptions opt;
  opt.hints = {{std::polar(0.7, 0.9), {2}}};
  const auto jf = modified_real_jordan(C, 0.1, opt);
  ASSERT_EQ(jf.blocks.size(), 1u);
  EXPECT_EQ(jf.blocks[0].kind, BlockKind::ComplexPair);
  EXPECT_EQ(jf.blocks[0].m, 2);
  EXPECT_LE(jf.residual, 1e-8);
}

TEST(ModifiedJordan, AmbiguousRankIsReported) {
  Mat C(2, 2);
  C << 0.5, 1e-8, 0.0, 0.5;
  EXPECT_EQ(kind_of([&] { (void)modified_real_jordan(C, 0.1); }),
            static_cast<int>(ErrorKind::DefectiveStructureUnresolved));
}

TEST(BlockLog, DocumentedCases) {
  Mat J1(2, 2);
  J1 << 2.0, 0.2, 0.0, 2.0;
  const auto k1 = block_log(J1, BlockKind::RealPositive, 1.0, 0.1);
  Mat K1(2, 2);
  K1 << std::log(2.0), 0.1, 0.0, std::log(2.0);
  EXPECT_LT((k1.K - K1.cast<cplx>()).norm(), 1e-15);
  EXPECT_TRUE(k1.is_real());

  const auto k2 = block_log(Mat::Constant(1, 1, -2.0), BlockKind::RealNegative, 1.0, 0.1);
  EXPECT_LT(std::abs(k2.K(0, 0) - cplx(std::log(2.0), kPi)), 1e-15);

  const auto k3 = block_log(rotation2(kPi / 2), BlockKind::ComplexPair, 1.0, 0.1);
  Mat K3(2, 2);
  K3 << 0.0, -kPi / 2, kPi / 2, 0.0;
  EXPECT_LT((k3.K - K3.cast<cplx>()).norm(), 1e-15);
}

TEST(BlockLog, KindMismatchIsReported) {
  EXPECT_EQ(kind_of([] { (void)block_log(Mat::Constant(1, 1, -2.0), BlockKind::RealPositive, 1.0, 0.1); }),
            static_cast<int>(ErrorKind::KindMismatch));
  EXPECT_EQ(kind_of([] { (void)block_log(Mat::Identity(2, 2), BlockKind::ComplexPair, 1.0, 0.1); }),
            static_cast<int>(ErrorKind::KindMismatch));
}

TEST(BlockLog, RandomBlocksRoundTripAndRespectBound) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> mod(0.05, 1.5), ang(0.1, 3.0), per(0.5, 7.0), eps(0.01, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    for (BlockKind kind : {BlockKind::RealPositive, BlockKind::RealNegative, BlockKind::ComplexPair}) {
      for (int m = 1; m <= 4; ++m) {
        JordanBlock b;
        b.kind = kind;
        b.m = m;
        const double T = per(rng), e = eps(rng);
        const double ep = eps_prime_for(e, T);
        if (kind == BlockKind::ComplexPair) {
          b.r = mod(rng);
          b.theta = ang(rng);
          b.alpha = b.r * std::cos(b.theta);
          b.beta = b.r * std::sin(b.theta);
        } else {
          b.lambda = kind == BlockKind::RealPositive ? mod(rng) : -mod(rng);
        }
        const Mat J = block_matrix(b, ep);
        const auto bl = block_log(J, kind, T, ep);
        const CMat eK = (bl.K * T).exp();
        EXPECT_LE((eK - J.cast<cplx>()).norm(), 1e-12 * J.norm()) << to_string(kind) << " m=" << m;
        EXPECT_LE((bl.exp(T) - J.cast<cplx>()).norm(), 1e-13 * J.norm());
        const double t = 0.37 * T;
        EXPECT_LE((bl.exp(t) - (bl.K * t).exp()).norm(), 1e-12 * (1 + bl.exp(t).norm()));
        EXPECT_LE(lambda_max_herm(bl.K), spectral_bound_c(b, T, e) + 1e-10) << to_string(kind) << " m=" << m;
        if (kind == BlockKind::RealNegative) {
          EXPECT_FALSE(bl.is_real());
          EXPECT_NEAR(bl.K(0, 0).imag(), kPi / T, 1e-14);
        } else {
          EXPECT_LE(bl.K.imag().norm(), 0.0);
        }
      }
    }
  }
}

TEST(SpectralBound, CaseTwoScalarIsTight) {
  JordanBlock b;
  b.kind = BlockKind::RealNegative;
  b.lambda = -2.0;
  const auto bl = block_log(b, 1.0, 0.1);
  EXPECT_NEAR(lambda_max_herm(bl.K), std::log(2.0), 1e-15);
  EXPECT_NEAR(spectral_bound_c(b, 1.0, 0.1), std::log(2.0), 1e-15);
}

TEST(Assemble, ConstantCoefficientSystem) {
  FundamentalPath path;
  path.T = 1.0;
  path.n = 2;
  path.phi = [](double t) { return diag2(1.0, std::exp(-t)); };
  path.coefficient = [](double) { return diag2(0.0, -1.0); };
  const auto dec = floquet_decomposition(path, 0.1);
  EXPECT_LT((dec.B - diag2(0.0, -1.0).cast<cplx>()).norm(), 1e-14);
  for (double t : {0.0, 0.25, 0.5, 0.9}) {
    EXPECT_LT((dec.P(t) - CMat::Identity(2, 2)).norm(), 1e-14) << t;
  }
  EXPECT_EQ(dec.P(0.0), CMat(CMat::Identity(2, 2)));
}

TEST(Assemble, RadialDecompositionIsPlaneRotation) {
  const auto& po = radial_orbit();
  const auto dec = floquet_decomposition(po, 0.1);
  // S = [f(q) | e_r] at q = (1, 0).
  EXPECT_LT((dec.jordan.S.col(0) - Vec2(0.0, 1.0)).norm(), 1e-15);
  EXPECT_NEAR(std::abs(dec.jordan.S(0, 1)), 1.0, 1e-8);
  EXPECT_NEAR(dec.jordan.S(1, 1), 0.0, 1e-8);
  EXPECT_EQ(dec.blocks_K[0].K(0, 0), cplx(0.0, 0.0));
  EXPECT_NEAR(dec.blocks_K[1].K(0, 0).real(), -2.0, 1e-9);
  for (double t : {0.3, 1.1, 2.9, 5.0}) {
    EXPECT_LT((dec.P_direct(t) - rotation2(t).cast<cplx>()).norm(), 1e-8) << t;
  }
  EXPECT_EQ(dec.P(0.0), CMat(CMat::Identity(2, 2)));
  EXPECT_LE(dec.roundtrip_residual, 1e-8);
  EXPECT_LE(dec.periodicity_residual, 1e-8);
}

TEST(Assemble, RoundTripForAllBuiltInOrbits) {
  const auto cyl = find_orbit(systems::cylinder3d(), Vec3(1.0, 0.0, 0.0), 2 * kPi);
  for (const PeriodicOrbit* po : {&radial_orbit(), &vdp_orbit(), &cyl}) {
    const double nu = floquet_spectrum(*po).nu;
    const auto dec = floquet_decomposition(*po, 0.2 * nu);
    EXPECT_LE(dec.roundtrip_residual, 1e-8) << po->system.name;
    EXPECT_LE(dec.periodicity_residual, 1e-8) << po->system.name;
    EXPECT_LE(dec.bound.worst_margin, 1e-10);
  }
}

TEST(Assemble, SpectralBoundReportForRadial) {
  const auto dec = floquet_decomposition(radial_orbit(), 0.1);
  const auto rep = verify_spectral_bound(dec, 0.1);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_NEAR(rep.rows[0].lambda_max, 0.0, 1e-12);
  EXPECT_NEAR(rep.rows[1].lambda_max, -2.0, 1e-9);
  for (const auto& r : rep.rows) EXPECT_LE(r.margin, 1e-12);
}

TEST(Assemble, InvariantViolationCarriesResidual) {
  const auto& po = vdp_orbit();
  const double ep = eps_prime_for(0.1, po.T);
  const auto jf = modified_real_jordan(po.monodromy, ep);
  std::vector<BlockLog> logs;
  for (const auto& b : jf.blocks) logs.push_back(block_log(b, po.T, ep));
  FundamentalPath wrong = orbit_path(po);
  wrong.phi = [](double t) { return diag2(1.0, std::exp(-t)); };
  try {
    (void)assemble(jf, logs, wrong, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvariantViolation);
    EXPECT_GT(e.residual(), 1e-8);
  }
}

TEST(Reorder, FlowDirectionFirstAndIdempotent) {
  const auto& po = vdp_orbit();
  const auto dec = floquet_decomposition(po, 0.1);
  const Vec fq = po.system.f(po.q);
  EXPECT_EQ(dec.jordan.S.col(0), fq);
  EXPECT_EQ(dec.blocks_K[0].K(0, 0), cplx(0.0, 0.0));
  const auto again = reorder_for_orbit(dec, fq);
  EXPECT_EQ(again.jordan.S, dec.jordan.S);
  EXPECT_EQ(again.A, dec.A);
  // f(S_t q) = P(t) S e_1 along the mesh.
  for (std::size_t k = 0; k < dec.mesh.size(); k += 7) {
    const double t = dec.mesh[k];
    const CVec lhs = po.system.f(po.orbit.state(t)).cast<cplx>();
    const CVec rhs = dec.P_mesh[k] * dec.jordan.S.col(0).cast<cplx>();
    EXPECT_LE((lhs - rhs).norm(), 1e-7) << t;
  }
}

TEST(Reorder, MissingTrivialMultiplierIsReported) {
  const auto lp = systems::rotating_half_turn();
  const auto dec = floquet_decomposition(linear_periodic_path(lp), 0.1);
  EXPECT_EQ(kind_of([&] { (void)reorder_for_orbit(dec, Vec2(1.0, 0.0)); }),
            static_cast<int>(ErrorKind::TrivialBlockMissing));
}

TEST(FloquetProperties, NegativeMultipliersGiveComplexPButRealMetric) {
  const auto lp = systems::rotating_half_turn();
  const auto path = linear_periodic_path(lp);
  EXPECT_LT((path.phi(lp.T) - systems::rotating_half_turn_phi(lp.T)).norm(), 1e-10);
  const auto dec = floquet_decomposition(path, 0.1);
  for (const auto& b : dec.jordan.blocks) EXPECT_EQ(b.kind, BlockKind::RealNegative);
  double max_imag_P = 0.0, max_imag_M = 0.0;
  const CMat Si = dec.Sinv.cast<cplx>();
  for (std::size_t k = 0; k < dec.mesh.size(); ++k) {
    const CMat P = dec.P_mesh[k];
    max_imag_P = std::max(max_imag_P, P.imag().cwiseAbs().maxCoeff());
    const CMat W = Si * P.inverse();
    max_imag_M = std::max(max_imag_M, (W.adjoint() * W).imag().cwiseAbs().maxCoeff());
  }
  EXPECT_GT(max_imag_P, 0.1);
  EXPECT_LE(max_imag_M, 1e-9);
}

TEST(FloquetProperties, PeriodicityThroughMonodromy) {
  const auto& po = vdp_orbit();
  const auto dec = floquet_decomposition(po, 0.1);
  const CMat S = dec.jordan.S.cast<cplx>(), Si = dec.Sinv.cast<cplx>();
  const CMat phiT = po.monodromy.cast<cplx>();
  for (double frac : {0.1, 0.45, 0.8}) {
    const double t = frac * po.T;
    const CMat shifted = po.orbit.phi(t).cast<cplx>() * phiT * S * dec.exp_At(-(t + po.T)) * Si;
    EXPECT_LE((shifted - dec.P_direct(t)).norm(), 1e-7) << frac;
  }
}

TEST(FloquetProperties, MeshInterpolationMatchesDirectRecomputation) {
  const auto& po = vdp_orbit();
  const auto dec = floquet_decomposition(po, 0.1);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, po.T);
  for (int k = 0; k < 50; ++k) {
    const double t = u(rng);
    EXPECT_LE((dec.P(t) - dec.P_direct(t)).norm(), 1e-8) << t;
  }
}

TEST(FloquetProperties, ExpAtGramianIsReal) {
  const auto dec = floquet_decomposition(linear_periodic_path(systems::rotating_half_turn()), 0.1);
  for (double t : {0.1, 0.5, 0.77, 2.3}) {
    const CMat E = dec.exp_At(t);
    EXPECT_LE((E.adjoint() * E).imag().cwiseAbs().maxCoeff(), 1e-15) << t;
  }
}
