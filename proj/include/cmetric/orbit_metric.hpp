/**
 * @file orbit_metric.hpp
 * @brief The metric M0 on the periodic orbit, M0(S_t q) = Re W(t)^* W(t) with
 *        W(t) = S^-1 P^-1(t) = e^{At} S^-1 Phi(t)^-1, its orbital derivative
 *        and L_{M0} along the orbit.
 */
#pragma once

#include "cmetric/floquet.hpp"
#include "cmetric/lm_eval.hpp"
#include "cmetric/periodic_orbit.hpp"

#include <memory>

namespace cmetric {

struct OrbitMetric {
  PeriodicOrbit orbit;
  FloquetDecomposition dec;
  double nu = 0.0;

  [[nodiscard]] double T() const { return orbit.T; }
  [[nodiscard]] int n() const { return orbit.system.n; }
  [[nodiscard]] Vec point(double theta) const { return orbit.point(theta); }

  [[nodiscard]] CMat W(double theta) const;
};

/// W(t) = S^-1 P^-1(t) = e^{At} S^-1 Phi(t)^-1 for any decomposition; t is reduced mod T.
[[nodiscard]] inline CMat inverse_frame(const FloquetDecomposition& dec, double t) {
  const double tr = reduce_phase(t, dec.T);
  if (tr == 0.0) return dec.Sinv.cast<cplx>();
  const Mat phi_inv = dec.path.phi(tr).inverse();
  return dec.exp_At(tr) * (dec.Sinv * phi_inv).cast<cplx>();
}

/// The complex product W^* W before real parts are taken.
[[nodiscard]] inline CMat metric_product(const FloquetDecomposition& dec, double t) {
  const CMat W = inverse_frame(dec, t);
  return W.adjoint() * W;
}

inline CMat OrbitMetric::W(double theta) const { return inverse_frame(dec, theta); }

/// Everything the downstream stages need at one orbit phase.
struct OrbitSample {
  double theta = 0.0;
  Vec p;
  Vec f;
  Mat Df;
  Mat M0;
  Mat M0p;
  double imag_residue = 0.0;
};

[[nodiscard]] inline OrbitMetric make_orbit_metric(const PeriodicOrbit& po, double epsilon,
                                                   const FloquetOptions& opt = {}) {
  OrbitMetric om;
  om.orbit = po;
  om.nu = floquet_spectrum(po, opt.jordan.cluster_tol).nu;
  om.dec = floquet_decomposition(po, epsilon, opt);
  return om;
}

[[nodiscard]] inline OrbitSample orbit_sample(const OrbitMetric& om, double theta) {
  OrbitSample s;
  s.theta = reduce_phase(theta, om.T());
  s.p = om.point(s.theta);
  s.f = om.orbit.system.f(s.p);
  s.Df = om.orbit.system.jac(s.p);
  const CMat W = om.W(s.theta);
  if (s.theta == 0.0) {
    const Mat& Si = om.dec.Sinv;
    s.M0 = symmetric_part(Si.transpose() * Si);
  } else {
    const CMat G = W.adjoint() * W;
    s.imag_residue = G.imag().cwiseAbs().maxCoeff();
    s.M0 = symmetric_part(G.real());
  }
  // M0' = -Df^T M0 - M0 Df + Re W^* (A^* + A) W.
  const CMat AA = om.dec.A.adjoint() + om.dec.A;
  const Mat middle = (W.adjoint() * AA * W).real();
  s.M0p = symmetric_part(middle - s.Df.transpose() * s.M0 - s.M0 * s.Df);
  return s;
}

[[nodiscard]] inline Mat m0_at(const OrbitMetric& om, double theta) { return orbit_sample(om, theta).M0; }

[[nodiscard]] inline Mat m0_prime_at(const OrbitMetric& om, double theta) { return orbit_sample(om, theta).M0p; }

struct LM0Report {
  LmReport lm;
  /// w = S^-1 P^-1 v for the maximizing v.
  CVec w;
};

[[nodiscard]] inline LM0Report l_m0_at(const OrbitMetric& om, double theta) {
  const OrbitSample s = orbit_sample(om, theta);
  LM0Report out;
  out.lm = l_m_eval(s.f, s.Df, s.M0, s.M0p, reanchor_basis(s.p, s.f, s.M0));
  out.w = om.W(s.theta) * out.lm.direction.cast<cplx>();
  return out;
}

/// lambda_max of the Hermitian part of A on {w : w_1 = 0}.
[[nodiscard]] inline double l_m0_restricted(const OrbitMetric& om) {
  const auto n = om.dec.A.rows();
  const CMat H = hermitian_part(om.dec.A).bottomRightCorner(n - 1, n - 1);
  return lambda_max_herm(H);
}

}  // namespace cmetric
