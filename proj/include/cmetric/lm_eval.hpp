/**
 * @file lm_eval.hpp
 * @brief L_M(y): the largest value of the quadratic form
 *        1/2 v^T (M Df + Df^T M + M') v over M-unit directions M-orthogonal
 *        to f(y), computed through a flow-adapted basis, a Cholesky
 *        reduction and a symmetric eigenproblem of size n-1.
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"
#include "cmetric/ode_core.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <string>

namespace cmetric {

/// A metric field M(x) with its orbital derivative. Mprime may be left empty,
/// in which case it is obtained by finite differences along the flow.
struct MetricFieldHandle {
  std::function<Mat(const Vec&)> M;
  std::function<Mat(const Vec&)> Mprime;
  std::string provenance;
};

[[nodiscard]] inline Mat metric_prime(const MetricFieldHandle& h, const OdeSystem& sys, const Vec& y) {
  if (h.Mprime) return h.Mprime(y);
  OrbitalDerivativeOptions opt;
  opt.stencil = Stencil::FourPoint;
  opt.monitor = false;
  opt.h = 1e-3 * std::clamp(y.norm() / std::max(sys.f(y).norm(), 1e-300), 1e-3, 1.0);
  return symmetric_part(orbital_derivative(h.M, y, sys, opt).value);
}

/// L_M(y; v) from already evaluated pieces.
[[nodiscard]] inline double l_m_direct(const Vec& v, const Mat& M, const Mat& Mprime, const Mat& Df) {
  const Mat X = M * Df + Df.transpose() * M + Mprime;
  return 0.5 * v.dot(X * v);
}

[[nodiscard]] inline double l_m_direct(const Vec& y, const Vec& v, const MetricFieldHandle& h, const OdeSystem& sys) {
  return l_m_direct(v, h.M(y), metric_prime(h, sys, y), sys.jac(y));
}

/// v_1 = f(x_ref) and v_2..v_n M(x_ref)-orthogonal to it and to each other.
struct ReferenceBasis {
  Vec x_ref;
  Mat V;       // columns v_1..v_n
  Mat M_ref;   // M(x_ref)
  Vec Mf_ref;  // M(x_ref) f(x_ref)
};

[[nodiscard]] inline ReferenceBasis reanchor_basis(const Vec& x_ref, const Vec& f_ref, const Mat& M_ref) {
  const auto n = x_ref.size();
  if (!(f_ref.norm() > 0.0)) throw Error(ErrorKind::SingularF, "f vanishes at the reference point");
  ReferenceBasis b;
  b.x_ref = x_ref;
  b.M_ref = M_ref;
  b.Mf_ref = M_ref * f_ref;
  b.V = Mat::Zero(n, n);
  b.V.col(0) = f_ref;
  auto ip = [&](const Vec& a, const Vec& c) { return a.dot(M_ref * c); };
  // Gram-Schmidt in the M_ref inner product over the standard basis, taking
  // candidates in order of least alignment with f.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const Vec fa = f_ref.cwiseAbs() / f_ref.norm();
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return fa(i) < fa(j); });
  int filled = 1;
  for (int idx : order) {
    if (filled == n) break;
    Vec v = Vec::Unit(n, idx);
    for (int pass = 0; pass < 2; ++pass) {
      for (int k = 0; k < filled; ++k) v -= ip(b.V.col(k), v) / ip(b.V.col(k), b.V.col(k)) * b.V.col(k);
    }
    const double nv = std::sqrt(ip(v, v));
    if (nv < 1e-8) continue;
    b.V.col(filled++) = v / nv;
  }
  if (filled != n) throw Error(ErrorKind::BasisDegenerate, "could not complete an M-orthogonal basis");
  return b;
}

[[nodiscard]] inline ReferenceBasis reanchor_basis(const Vec& x_ref, const MetricFieldHandle& h, const OdeSystem& sys) {
  return reanchor_basis(x_ref, sys.f(x_ref), h.M(x_ref));
}

/// The validity condition f(y)^T M(x_ref) f(x_ref) != 0 with a 0.1 margin.
[[nodiscard]] inline bool basis_valid(const ReferenceBasis& b, const Vec& f_y, double threshold = 0.1) {
  return std::abs(f_y.dot(b.Mf_ref)) >= threshold * f_y.norm() * b.Mf_ref.norm();
}

struct LmReport {
  double value = 0.0;
  Vec direction;  // M-unit, M-orthogonal to f(y)
  Mat H;
  Mat Q;
  double q_condition = 1.0;
  int eigenspace_dim = 1;
};

/// Core evaluation from the pieces M(y), M'(y), Df(y), f(y) and a reference basis.
[[nodiscard]] inline LmReport l_m_eval(const Vec& f, const Mat& Df, const Mat& M, const Mat& Mprime,
                                       const ReferenceBasis& basis) {
  const auto n = f.size();
  if (!(f.norm() > 0.0)) throw Error(ErrorKind::SingularF, "f vanishes; L_M is undefined");
  if (f.dot(basis.Mf_ref) == 0.0) {
    throw Error(ErrorKind::BasisDegenerate, "reference basis is not valid at this point");
  }
  LmReport r;
  const Vec Mf = M * f;
  const double fMf = f.dot(Mf);
  r.Q = Mat(n, n);
  r.Q.col(0) = f;
  for (Eigen::Index i = 1; i < n; ++i) {
    const Vec& v = basis.V.col(i);
    r.Q.col(i) = v - (Mf.dot(v) / fMf) * f;
  }
  r.q_condition = condition_number(r.Q);
  const Mat X = M * Df + Df.transpose() * M + Mprime;
  const Mat G = (r.Q.transpose() * M * r.Q).bottomRightCorner(n - 1, n - 1);
  const Mat Y = (r.Q.transpose() * X * r.Q).bottomRightCorner(n - 1, n - 1);
  Eigen::LLT<Mat> llt(symmetric_part(G));
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::CholeskyFail, "reduced metric block is not positive definite");
  // C = L^T upper triangular; H = 1/2 C^-T Y C^-1 = 1/2 L^-1 Y L^-T.
  const auto L = llt.matrixL();
  Mat Z = L.solve(Y);
  Mat Ht = L.solve(Z.transpose());
  r.H = symmetric_part(0.5 * Ht);
  Eigen::SelfAdjointEigenSolver<Mat> es(r.H);
  const auto& ev = es.eigenvalues();
  r.value = ev(n - 2);
  r.eigenspace_dim = 0;
  for (Eigen::Index k = 0; k < n - 1; ++k) {
    if (std::abs(ev(k) - r.value) <= 1e-10 * std::max(1.0, std::abs(r.value))) ++r.eigenspace_dim;
  }
  const Vec vt = es.eigenvectors().col(n - 2);
  const Vec ut = llt.matrixU().solve(vt);
  Vec u = Vec::Zero(n);
  u.tail(n - 1) = ut;
  r.direction = r.Q * u;
  r.direction /= std::sqrt(r.direction.dot(M * r.direction));
  return r;
}

/// L_M(y) with the basis anchored at y itself unless a valid basis is supplied.
[[nodiscard]] inline LmReport l_m_at(const Vec& y, const MetricFieldHandle& h, const OdeSystem& sys,
                                     const ReferenceBasis* reference = nullptr) {
  const Vec f = sys.f(y);
  if (!(f.norm() > 0.0)) throw Error(ErrorKind::SingularF, "f vanishes; L_M is undefined");
  const Mat M = h.M(y);
  if (reference && !basis_valid(*reference, f)) {
    throw Error(ErrorKind::BasisDegenerate, "reference basis fails the validity condition; re-anchor");
  }
  const ReferenceBasis local = reference ? *reference : reanchor_basis(y, f, M);
  return l_m_eval(f, sys.jac(y), M, metric_prime(h, sys, y), local);
}

struct LipschitzProbe {
  double ratio = 0.0;
  Vec y, y_prime;
  int pairs = 0;
};

/// sup |L_M(y) - L_M(y')| / |y - y'| over random nearby pairs.
[[nodiscard]] inline LipschitzProbe lipschitz_probe(const MetricFieldHandle& h, const OdeSystem& sys,
                                                    const std::function<Vec(std::mt19937_64&)>& sampler, int pairs,
                                                    std::uint64_t seed = 1, double radius = 1e-2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  LipschitzProbe out;
  for (int k = 0; k < pairs; ++k) {
    const Vec y = sampler(rng);
    Vec dir(y.size());
    for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = g(rng);
    const Vec yp = y + radius * dir.normalized();
    const double a = l_m_at(y, h, sys).value, b = l_m_at(yp, h, sys).value;
    const double ratio = std::abs(a - b) / (y - yp).norm();
    if (ratio > out.ratio) {
      out.ratio = ratio;
      out.y = y;
      out.y_prime = yp;
    }
    ++out.pairs;
  }
  return out;
}

}  // namespace cmetric
