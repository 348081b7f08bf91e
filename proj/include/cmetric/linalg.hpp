#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <limits>

namespace cmetric {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using cplx = std::complex<double>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
inline constexpr double kPi = 3.14159265358979323846264338327950288;

[[nodiscard]] inline Vec Vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

[[nodiscard]] inline Vec Vec3(double a, double b, double c) {
  Vec v(3);
  v << a, b, c;
  return v;
}

[[nodiscard]] inline Mat symmetric_part(const Mat& a) { return 0.5 * (a + a.transpose()); }

[[nodiscard]] inline CMat hermitian_part(const CMat& a) { return 0.5 * (a + a.adjoint()); }

/// Largest eigenvalue of a symmetric matrix (only the lower triangle is read).
[[nodiscard]] inline double lambda_max_sym(const Mat& a) {
  if (a.size() == 0) return -kInf;
  Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues()(a.rows() - 1);
}

[[nodiscard]] inline double lambda_min_sym(const Mat& a) {
  if (a.size() == 0) return kInf;
  Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

[[nodiscard]] inline double lambda_max_herm(const CMat& a) {
  if (a.size() == 0) return -kInf;
  Eigen::SelfAdjointEigenSolver<CMat> es(hermitian_part(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(a.rows() - 1);
}

/// 2-norm condition number via singular values.
[[nodiscard]] inline double condition_number(const Mat& a) {
  Eigen::JacobiSVD<Mat> svd(a);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 1.0;
  const double lo = s(s.size() - 1);
  return lo > 0.0 ? s(0) / lo : kInf;
}

/// Reduce a phase into [0, period).
[[nodiscard]] inline double reduce_phase(double theta, double period) {
  double r = std::fmod(theta, period);
  if (r < 0.0) r += period;
  if (r >= period) r = 0.0;
  return r;
}

[[nodiscard]] inline Mat rotation2(double angle) {
  Mat r(2, 2);
  const double c = std::cos(angle), s = std::sin(angle);
  r << c, -s, s, c;
  return r;
}

[[nodiscard]] inline bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace cmetric
