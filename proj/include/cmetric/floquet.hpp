/**
 * @file floquet.hpp
 * @brief Floquet normal form Phi(t) = P(t) e^{Bt} built from a modified real
 *        Jordan form of the monodromy, with explicit block logarithms.
 *
 * Real blocks carry eps'|lambda| on the superdiagonal and complex pairs carry
 * eps' r I_2 blocks, which keeps the Hermitian part of each logarithm within
 * eps of ln|lambda|/T.
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"
#include "cmetric/ode_core.hpp"
#include "cmetric/periodic_orbit.hpp"
#include "cmetric/systems.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

namespace cmetric {

enum class BlockKind { RealPositive, RealNegative, ComplexPair };

[[nodiscard]] inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::RealPositive: return "real+";
    case BlockKind::RealNegative: return "real-";
    case BlockKind::ComplexPair: return "complex-pair";
  }
  return "?";
}

struct JordanBlock {
  BlockKind kind = BlockKind::RealPositive;
  double lambda = 0.0;  // real kinds
  double alpha = 0.0, beta = 0.0, r = 0.0, theta = 0.0;  // complex pair: lambda = alpha + i beta = r e^{i theta}
  int m = 1;            // Jordan size (number of 2x2 rotation blocks for complex pairs)
  int offset = 0;

  [[nodiscard]] int size() const { return kind == BlockKind::ComplexPair ? 2 * m : m; }
  [[nodiscard]] double modulus() const { return kind == BlockKind::ComplexPair ? r : std::abs(lambda); }
};

/// eps' = 1/2 min(eps T / 2, 1).
[[nodiscard]] inline double eps_prime_for(double epsilon, double T) { return 0.5 * std::min(0.5 * epsilon * T, 1.0); }

/// The block J_j in modified real Jordan form.
[[nodiscard]] inline Mat block_matrix(const JordanBlock& b, double eps_prime) {
  const int s = b.size();
  Mat J = Mat::Zero(s, s);
  if (b.kind == BlockKind::ComplexPair) {
    const Mat D = b.r * rotation2(b.theta);
    for (int k = 0; k < b.m; ++k) {
      J.block(2 * k, 2 * k, 2, 2) = D;
      if (k + 1 < b.m) J.block(2 * k, 2 * k + 2, 2, 2) = eps_prime * b.r * Mat::Identity(2, 2);
    }
  } else {
    for (int k = 0; k < s; ++k) {
      J(k, k) = b.lambda;
      if (k + 1 < s) J(k, k + 1) = eps_prime * std::abs(b.lambda);
    }
  }
  return J;
}

struct ModifiedJordanForm {
  Mat S;
  Mat J;
  std::vector<JordanBlock> blocks;
  double eps_prime = 0.0;
  Mat C;                 // the matrix that was decomposed
  double residual = 0.0;  // |S J S^-1 - C|_F / |C|_F
  /// Human-readable record of the multiplicity decisions taken.
  std::vector<std::string> decisions;
};

struct JordanStructureHint {
  cplx eigenvalue;
  std::vector<int> block_sizes;
};

struct JordanOptions {
  double cluster_tol = 1e-6;
  /// Singular values below rank_tol * max(1, |N|^k) count as zero.
  double rank_tol = 1e-9;
  /// Singular values in (tau, gray_factor * tau) make the rank decision ambiguous.
  double gray_factor = 100.0;
  std::vector<JordanStructureHint> hints;
};

namespace detail {

template <class Sc>
using DMat = Eigen::Matrix<Sc, Eigen::Dynamic, Eigen::Dynamic>;

/// Orthonormal basis of the span of the columns of X at the given tolerance.
template <class Sc>
DMat<Sc> orth(const DMat<Sc>& X, double tol) {
  if (X.cols() == 0) return DMat<Sc>(X.rows(), 0);
  Eigen::JacobiSVD<DMat<Sc>> svd(X, Eigen::ComputeThinU);
  const auto& s = svd.singularValues();
  int r = 0;
  const double ref = s.size() ? std::max(s(0), 1.0) : 1.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > tol * ref) ++r;
  }
  return svd.matrixU().leftCols(r);
}

/// Last d right singular vectors of X (a basis for its numerical null space).
template <class Sc>
DMat<Sc> null_basis(const DMat<Sc>& X, int d) {
  Eigen::JacobiSVD<DMat<Sc>> svd(X, Eigen::ComputeFullV);
  return svd.matrixV().rightCols(d);
}

template <class Sc>
DMat<Sc> mat_pow(const DMat<Sc>& X, int k) {
  DMat<Sc> out = DMat<Sc>::Identity(X.rows(), X.cols());
  for (int i = 0; i < k; ++i) out = out * X;
  return out;
}

/// Jordan chains of C for the eigenvalue mu with algebraic multiplicity m.
/// Returns chains as n x len matrices (eigenvector first), longest first.
template <class Sc>
std::vector<DMat<Sc>> jordan_chains(const DMat<Sc>& C, Sc mu, int m, const std::vector<int>* sizes_hint,
                                    const JordanOptions& opt, std::string& note) {
  const auto n = C.rows();
  const DMat<Sc> N = C - mu * DMat<Sc>::Identity(n, n);
  const DMat<Sc> G = null_basis<Sc>(mat_pow<Sc>(N, m), m);  // generalized eigenspace
  const DMat<Sc> Nr = G.adjoint() * N * G;                 // restricted nilpotent part

  // dims[k] = dim null(Nr^k), k = 0..m
  std::vector<int> dims(m + 1, 0);
  if (sizes_hint) {
    for (int k = 0; k <= m; ++k) {
      int d = 0;
      for (int s : *sizes_hint) d += std::min(s, k);
      dims[k] = d;
    }
    if (dims[m] != m) throw Error(ErrorKind::DefectiveStructureUnresolved, "hinted block sizes do not sum to the multiplicity");
  } else {
    const double nrm = std::max(1.0, static_cast<double>(Nr.norm()));
    for (int k = 1; k <= m; ++k) {
      const DMat<Sc> Pk = mat_pow<Sc>(Nr, k);
      Eigen::JacobiSVD<DMat<Sc>> svd(Pk);
      const auto& s = svd.singularValues();
      const double tau = opt.rank_tol * std::pow(nrm, k);
      int zero = 0;
      for (Eigen::Index i = 0; i < s.size(); ++i) {
        if (s(i) <= tau) {
          ++zero;
        } else if (s(i) < opt.gray_factor * tau) {
          std::ostringstream os;
          os << "singular value " << s(i) << " of (C - lambda I)^" << k << " is within the ambiguity band";
          throw Error(ErrorKind::DefectiveStructureUnresolved, os.str(), s(i));
        }
      }
      dims[k] = std::max(zero, dims[k - 1]);
    }
    if (dims[m] != m) {
      throw Error(ErrorKind::DefectiveStructureUnresolved, "generalized eigenspace dimension does not match the multiplicity");
    }
  }
  // b[k] = number of blocks of size >= k
  std::vector<int> b(m + 2, 0);
  for (int k = 1; k <= m; ++k) b[k] = dims[k] - dims[k - 1];
  std::vector<DMat<Sc>> W(m + 1);
  for (int k = 0; k <= m; ++k) {
    W[k] = k == 0 ? DMat<Sc>(m, 0) : (k == m ? DMat<Sc>(DMat<Sc>::Identity(m, m)) : null_basis<Sc>(mat_pow<Sc>(Nr, k), dims[k]));
  }

  std::vector<DMat<Sc>> chains_r;  // in restricted coordinates
  std::ostringstream sizes;
  for (int s = m; s >= 1; --s) {
    const int need = b[s] - b[s + 1];
    if (need <= 0) continue;
    // Span to avoid: null(Nr^{s-1}) plus level-s vectors of longer chains.
    DMat<Sc> avoid = W[s - 1];
    for (const auto& ch : chains_r) {
      if (ch.cols() > s) {
        avoid.conservativeResize(m, avoid.cols() + 1);
        avoid.col(avoid.cols() - 1) = ch.col(s - 1);
      }
    }
    const DMat<Sc> Q = orth<Sc>(avoid, 1e-10);
    DMat<Sc> proj = W[s] - Q * (Q.adjoint() * W[s]);
    Eigen::JacobiSVD<DMat<Sc>> svd(proj, Eigen::ComputeThinU);
    if (svd.singularValues().size() < need) {
      throw Error(ErrorKind::DefectiveStructureUnresolved, "could not complete Jordan chains");
    }
    for (int c = 0; c < need; ++c) {
      DMat<Sc> chain(m, s);
      Eigen::Matrix<Sc, Eigen::Dynamic, 1> v = svd.matrixU().col(c);
      chain.col(s - 1) = v;
      for (int k = s - 2; k >= 0; --k) chain.col(k) = Nr * chain.col(k + 1);
      chains_r.push_back(chain);
      sizes << s << ' ';
    }
  }
  note = "block sizes { " + sizes.str() + "}";
  std::vector<DMat<Sc>> chains;
  for (const auto& ch : chains_r) {
    DMat<Sc> full = G * ch;
    const double scale = full.col(0).norm();
    chains.push_back(full / scale);
  }
  return chains;
}

inline void normalize_real_sign(Vec& v) {
  Eigen::Index imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  if (v(imax) < 0) v = -v;
}

/// Rotate a complex chain by a common phase so that Re v1 and Im v1 are orthogonal.
inline CMat align_complex_chain(const CMat& chain) {
  const CVec v = chain.col(0);
  const cplx vv = (v.transpose() * v)(0, 0);
  const double phi = -0.5 * std::arg(vv);
  CMat out = chain * std::polar(1.0, phi);
  // Prefer |Re v1| >= |Im v1|.
  if (out.col(0).real().norm() < out.col(0).imag().norm()) out *= cplx(0.0, 1.0);
  return out;
}

}  // namespace detail

/// Modified real Jordan form C = S J S^{-1}.
[[nodiscard]] inline ModifiedJordanForm modified_real_jordan(const Mat& C, double eps_prime,
                                                             const JordanOptions& opt = {}) {
  const auto n = C.rows();
  if (C.cols() != n || n == 0) throw std::invalid_argument("modified_real_jordan needs a square matrix");
  Eigen::EigenSolver<Mat> es(C, true);
  std::vector<cplx> ev(es.eigenvalues().data(), es.eigenvalues().data() + n);
  for (const auto& v : ev) {
    if (std::abs(v) == 0.0) throw std::invalid_argument("modified_real_jordan needs an invertible matrix");
  }

  struct Cluster {
    cplx mu;
    std::vector<int> members;
    const std::vector<int>* sizes = nullptr;
  };
  std::vector<Cluster> clusters;
  if (!opt.hints.empty()) {
    for (const auto& h : opt.hints) clusters.push_back({h.eigenvalue, {}, &h.block_sizes});
    // Conjugate partners of complex hints collect the remaining eigenvalues.
    const std::size_t nh = clusters.size();
    for (std::size_t i = 0; i < nh; ++i) {
      if (std::abs(clusters[i].mu.imag()) > 0.0) clusters.push_back({std::conj(clusters[i].mu), {}, clusters[i].sizes});
    }
    for (int i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < clusters.size(); ++c) {
        if (std::abs(ev[i] - clusters[c].mu) < std::abs(ev[i] - clusters[best].mu)) best = c;
      }
      clusters[best].members.push_back(i);
    }
    for (auto& c : clusters) {
      int want = 0;
      for (int s : *c.sizes) want += s;
      if (static_cast<int>(c.members.size()) != want) {
        throw Error(ErrorKind::DefectiveStructureUnresolved, "hinted structure does not match the spectrum");
      }
    }
  } else {
    std::vector<bool> used(n, false);
    for (int i = 0; i < n; ++i) {
      if (used[i]) continue;
      Cluster c{ev[i], {i}, nullptr};
      used[i] = true;
      bool grew = true;
      while (grew) {
        grew = false;
        for (int j = 0; j < n; ++j) {
          if (used[j]) continue;
          for (int k : c.members) {
            if (std::abs(ev[j] - ev[k]) <= opt.cluster_tol * std::max(1.0, std::abs(ev[k]))) {
              c.members.push_back(j);
              used[j] = true;
              grew = true;
              break;
            }
          }
        }
      }
      cplx s = 0.0;
      for (int k : c.members) s += ev[k];
      c.mu = s / static_cast<double>(c.members.size());
      clusters.push_back(std::move(c));
    }
  }

  auto is_real = [&](cplx z) { return std::abs(z.imag()) <= opt.cluster_tol * std::max(1.0, std::abs(z)); };
  // Pair complex clusters with their conjugates.
  std::vector<Cluster> selected;
  {
    std::vector<bool> taken(clusters.size(), false);
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      if (taken[i]) continue;
      auto& c = clusters[i];
      if (is_real(c.mu)) {
        c.mu = cplx(c.mu.real(), 0.0);
        selected.push_back(c);
        taken[i] = true;
        continue;
      }
      std::optional<std::size_t> partner;
      for (std::size_t j = 0; j < clusters.size(); ++j) {
        if (j == i || taken[j]) continue;
        if (std::abs(clusters[j].mu - std::conj(c.mu)) <= opt.cluster_tol * std::max(1.0, std::abs(c.mu)) &&
            clusters[j].members.size() == c.members.size()) {
          partner = j;
          break;
        }
      }
      if (!partner) throw Error(ErrorKind::ComplexPairMismatch, "complex eigenvalue without a conjugate partner");
      taken[i] = taken[*partner] = true;
      const Cluster& lower = c.mu.imag() > 0 ? clusters[*partner] : c;
      Cluster up = c.mu.imag() > 0 ? c : clusters[*partner];
      // Average with the conjugate so the pair is exactly conjugate.
      up.mu = 0.5 * (up.mu + std::conj(lower.mu));
      selected.push_back(up);
    }
  }
  std::stable_sort(selected.begin(), selected.end(), [](const Cluster& a, const Cluster& b) {
    if (std::abs(std::abs(a.mu) - std::abs(b.mu)) > 1e-14) return std::abs(a.mu) > std::abs(b.mu);
    return std::arg(a.mu) > std::arg(b.mu);
  });

  ModifiedJordanForm out;
  out.eps_prime = eps_prime;
  out.C = C;
  out.S = Mat::Zero(n, n);
  int col = 0;
  for (const auto& c : selected) {
    const int m = static_cast<int>(c.members.size());
    std::ostringstream note;
    note << "lambda=" << c.mu.real() << (c.mu.imag() >= 0 ? "+" : "") << c.mu.imag() << "i multiplicity " << m;
    if (c.mu.imag() == 0.0) {
      const double lam = c.mu.real();
      std::vector<Mat> chains;
      if (m == 1 && !c.sizes) {
        Vec v = es.eigenvectors().col(c.members[0]).real();
        v.normalize();
        detail::normalize_real_sign(v);
        chains.push_back(v);
        note << ", simple";
      } else {
        std::string sizes;
        chains = detail::jordan_chains<double>(C, lam, m, c.sizes, opt, sizes);
        note << ", " << sizes;
      }
      for (auto& ch : chains) {
        if (ch.cols() == 1) {
          Vec v = ch.col(0);
          detail::normalize_real_sign(v);
          ch.col(0) = v;
        }
        JordanBlock b;
        b.kind = lam > 0 ? BlockKind::RealPositive : BlockKind::RealNegative;
        b.lambda = lam;
        b.m = static_cast<int>(ch.cols());
        b.offset = col;
        for (int k = 0; k < b.m; ++k) out.S.col(col + k) = ch.col(k) * std::pow(eps_prime * std::abs(lam), k);
        col += b.m;
        out.blocks.push_back(b);
      }
    } else {
      const cplx lam = c.mu;
      const int mpair = m;
      std::vector<CMat> chains;
      if (mpair == 1 && !c.sizes) {
        CMat v = es.eigenvectors().col(c.members[0]);
        // Use the eigenvector belonging to the upper half-plane eigenvalue.
        if (es.eigenvalues()(c.members[0]).imag() < 0) v = v.conjugate().eval();
        v /= v.col(0).norm();
        chains.push_back(v);
        note << ", simple pair";
      } else {
        std::string sizes;
        chains = detail::jordan_chains<cplx>(C.cast<cplx>(), lam, mpair, c.sizes, opt, sizes);
        note << ", " << sizes;
      }
      for (auto& ch0 : chains) {
        const CMat ch = detail::align_complex_chain(ch0);
        JordanBlock b;
        b.kind = BlockKind::ComplexPair;
        b.alpha = lam.real();
        b.beta = lam.imag();
        b.r = std::abs(lam);
        b.theta = std::arg(lam);
        b.m = static_cast<int>(ch.cols());
        b.offset = col;
        for (int k = 0; k < b.m; ++k) {
          const double sc = std::pow(eps_prime * b.r, k);
          out.S.col(col + 2 * k) = ch.col(k).imag() * sc;
          out.S.col(col + 2 * k + 1) = ch.col(k).real() * sc;
        }
        col += 2 * b.m;
        out.blocks.push_back(b);
      }
    }
    out.decisions.push_back(note.str());
  }
  if (col != n) throw Error(ErrorKind::DefectiveStructureUnresolved, "Jordan basis is incomplete");

  out.J = Mat::Zero(n, n);
  for (const auto& b : out.blocks) out.J.block(b.offset, b.offset, b.size(), b.size()) = block_matrix(b, eps_prime);
  Eigen::FullPivLU<Mat> lu(out.S);
  if (!lu.isInvertible()) throw Error(ErrorKind::DefectiveStructureUnresolved, "Jordan basis is singular");
  out.residual = (out.S * out.J * lu.inverse() - C).norm() / C.norm();
  if (!(out.residual <= 1e-8)) {
    throw Error(ErrorKind::DefectiveStructureUnresolved, "S J S^-1 does not reproduce the matrix", out.residual);
  }
  return out;
}

/// Logarithm of one Jordan block over the period: e^{K T} = J_j.
struct BlockLog {
  BlockKind kind = BlockKind::RealPositive;
  int size = 1;
  double T = 1.0;
  cplx scalar;      // ln(lambda), i pi + ln|lambda| or ln r
  double angle = 0.0;  // theta for complex pairs
  CMat nilpotent;   // finite log series in the nilpotent part
  CMat K;

  [[nodiscard]] bool is_real() const { return kind != BlockKind::RealNegative; }

  /// e^{t K} from the closed form: scalar exponential, rotation, finite series.
  [[nodiscard]] CMat exp(double t) const {
    const double s = t / T;
    CMat series = CMat::Identity(size, size);
    CMat term = CMat::Identity(size, size);
    const CMat sL = s * nilpotent;
    for (int k = 1; k < size; ++k) {
      term = (term * sL / static_cast<double>(k)).eval();
      series += term;
    }
    CMat rot = CMat::Identity(size, size);
    if (kind == BlockKind::ComplexPair) {
      const Mat R = rotation2(angle * s);
      for (int k = 0; k < size / 2; ++k) rot.block(2 * k, 2 * k, 2, 2) = R.cast<cplx>();
    }
    return std::exp(scalar * s) * rot * series;
  }
};

namespace detail {

/// sum_{k=1}^{m-1} (-1)^{k+1}/k (c Nmat)^k for nilpotent Nmat.
inline CMat log_series(const CMat& Nmat, double c, int terms) {
  const auto s = Nmat.rows();
  CMat out = CMat::Zero(s, s);
  CMat p = CMat::Identity(s, s);
  for (int k = 1; k <= terms; ++k) {
    p = (p * (c * Nmat)).eval();
    out += (k % 2 == 1 ? 1.0 : -1.0) / static_cast<double>(k) * p;
  }
  return out;
}

}  // namespace detail

[[nodiscard]] inline BlockLog block_log(const JordanBlock& b, double T, double eps_prime) {
  BlockLog out;
  out.kind = b.kind;
  out.size = b.size();
  out.T = T;
  const int s = b.size();
  if (b.kind == BlockKind::ComplexPair) {
    if (!(b.r > 0.0)) throw Error(ErrorKind::KindMismatch, "complex block needs positive modulus");
    CMat Ncal = CMat::Zero(s, s);
    const Mat Rm = rotation2(-b.theta);  // [[cos, sin], [-sin, cos]]
    for (int k = 0; k + 1 < b.m; ++k) Ncal.block(2 * k, 2 * k + 2, 2, 2) = Rm.cast<cplx>();
    out.scalar = std::log(b.r);
    out.angle = b.theta;
    out.nilpotent = detail::log_series(Ncal, eps_prime, b.m - 1);
    CMat theta_gen = CMat::Zero(s, s);
    for (int k = 0; k < b.m; ++k) {
      theta_gen(2 * k, 2 * k + 1) = -b.theta;
      theta_gen(2 * k + 1, 2 * k) = b.theta;
    }
    out.K = (out.scalar * CMat::Identity(s, s) + theta_gen + out.nilpotent) / T;
    return out;
  }
  CMat N = CMat::Zero(s, s);
  for (int k = 0; k + 1 < s; ++k) N(k, k + 1) = 1.0;
  if (b.kind == BlockKind::RealPositive) {
    if (!(b.lambda > 0.0)) throw Error(ErrorKind::KindMismatch, "real+ block with non-positive eigenvalue");
    out.scalar = std::log(b.lambda);
    out.nilpotent = detail::log_series(N, eps_prime, s - 1);
  } else {
    if (!(b.lambda < 0.0)) throw Error(ErrorKind::KindMismatch, "real- block with non-negative eigenvalue");
    out.scalar = cplx(std::log(-b.lambda), kPi);
    out.nilpotent = detail::log_series(N, -eps_prime, s - 1);
  }
  out.K = (out.scalar * CMat::Identity(s, s) + out.nilpotent) / T;
  return out;
}

/// Parse a block matrix J_j of the given kind and return its logarithm.
[[nodiscard]] inline BlockLog block_log(const Mat& Jj, BlockKind kind, double T, double eps_prime) {
  const auto s = Jj.rows();
  if (Jj.cols() != s || s == 0) throw Error(ErrorKind::KindMismatch, "block must be square");
  JordanBlock b;
  b.kind = kind;
  if (kind == BlockKind::ComplexPair) {
    if (s % 2 != 0) throw Error(ErrorKind::KindMismatch, "complex-pair block must have even size");
    b.m = static_cast<int>(s / 2);
    b.alpha = Jj(0, 0);
    b.beta = Jj(1, 0);
    if (b.beta == 0.0 || std::abs(Jj(0, 1) + b.beta) > 1e-12 * std::abs(b.beta) ||
        std::abs(Jj(1, 1) - b.alpha) > 1e-12 * std::hypot(b.alpha, b.beta)) {
      throw Error(ErrorKind::KindMismatch, "block is not a rotation-scaling pair");
    }
    b.r = std::hypot(b.alpha, b.beta);
    b.theta = std::atan2(b.beta, b.alpha);
  } else {
    b.m = static_cast<int>(s);
    b.lambda = Jj(0, 0);
    if ((kind == BlockKind::RealPositive) != (b.lambda > 0.0)) {
      throw Error(ErrorKind::KindMismatch, "eigenvalue sign does not match the block kind");
    }
  }
  const Mat expected = block_matrix(b, eps_prime);
  if ((expected - Jj).norm() > 1e-12 * Jj.norm()) {
    throw Error(ErrorKind::KindMismatch, "block is not in modified real Jordan form for this eps'",
                (expected - Jj).norm());
  }
  return block_log(b, T, eps_prime);
}

/// c_j = ln|lambda_j|/T (+ eps when the block is defective).
[[nodiscard]] inline double spectral_bound_c(const JordanBlock& b, double T, double epsilon) {
  return std::log(b.modulus()) / T + (b.m >= 2 ? epsilon : 0.0);
}

/// Fundamental matrix path Phi(t) on [0, T] with its coefficient matrix.
struct FundamentalPath {
  double T = 0.0;
  int n = 0;
  std::function<Mat(double)> phi;
  std::function<Mat(double)> coefficient;
};

[[nodiscard]] inline FundamentalPath orbit_path(const PeriodicOrbit& po) {
  FundamentalPath p;
  p.T = po.T;
  p.n = po.system.n;
  auto vt = po.orbit;
  auto jac = po.system.jac;
  p.phi = [vt](double t) { return vt.phi(t); };
  p.coefficient = [vt, jac](double t) { return jac(vt.state(t)); };
  return p;
}

[[nodiscard]] inline FundamentalPath linear_periodic_path(const systems::LinearPeriodic& lp, const Tolerances& tol = {}) {
  auto traj = std::make_shared<const Trajectory>(
      integrate_fundamental([lp](double t) { return lp.F(t); }, lp.n, {0.0, lp.T}, tol));
  FundamentalPath p;
  p.T = lp.T;
  p.n = lp.n;
  const int n = lp.n;
  p.phi = [traj, n](double t) {
    const Vec y = traj->state(t);
    return Mat(Eigen::Map<const Mat>(y.data(), n, n));
  };
  p.coefficient = [lp](double t) { return lp.F(t); };
  return p;
}

struct SpectralBoundRow {
  int block = 0;
  double lambda_max = 0.0;
  double bound = 0.0;
  /// lambda_max - bound; non-positive when the bound holds.
  double margin = 0.0;
};

struct SpectralBoundReport {
  std::vector<SpectralBoundRow> rows;
  double worst_margin = -kInf;
};

struct AssembleOptions {
  /// Starting node count; doubled until the midpoint monitor passes.
  int mesh_nodes = 512;
  int max_mesh_nodes = 32769;
  double interpolation_tolerance = 1e-8;
  double tolerance = 1e-8;
  double block_tolerance = 1e-12;
  double bound_tolerance = 1e-10;
  bool throw_on_violation = true;
};

struct FloquetDecomposition {
  ModifiedJordanForm jordan;
  std::vector<BlockLog> blocks_K;
  CMat A;
  CMat B;
  Mat Sinv;
  double T = 0.0;
  double epsilon = 0.0;
  FundamentalPath path;
  std::vector<double> mesh;
  std::vector<CMat> P_mesh;
  std::vector<CMat> dP_mesh;
  double roundtrip_residual = 0.0;    // |e^{BT} - Phi(T)|_F / |Phi(T)|_F
  double periodicity_residual = 0.0;  // |P(T) - I|_F
  double block_residual = 0.0;        // max_j |e^{K_j T} - J_j| / |J_j|
  double interpolation_residual = 0.0;  // max midpoint |P - P_direct|_F
  SpectralBoundReport bound;

  [[nodiscard]] int n() const { return static_cast<int>(A.rows()); }

  /// Block diagonal e^{At} from the closed-form block exponentials.
  [[nodiscard]] CMat exp_At(double t) const {
    CMat E = CMat::Zero(A.rows(), A.cols());
    for (std::size_t j = 0; j < blocks_K.size(); ++j) {
      const auto& b = jordan.blocks[j];
      E.block(b.offset, b.offset, b.size(), b.size()) = blocks_K[j].exp(t);
    }
    return E;
  }

  /// P(t) = Phi(t) S e^{-At} S^{-1}, recomputed from the fundamental matrix.
  [[nodiscard]] CMat P_direct(double t) const {
    const double tr = reduce_phase(t, T);
    if (tr == 0.0) return CMat::Identity(n(), n());
    return path.phi(tr).cast<cplx>() * jordan.S.cast<cplx>() * exp_At(-tr) * Sinv.cast<cplx>();
  }

  /// P(t) by cubic Hermite interpolation on the stored mesh.
  [[nodiscard]] CMat P(double t) const {
    const double tr = reduce_phase(t, T);
    const double h = mesh[1] - mesh[0];
    std::size_t k = std::min(static_cast<std::size_t>(tr / h), mesh.size() - 2);
    const double s = (tr - mesh[k]) / h;
    if (s == 0.0) return P_mesh[k];
    const double s2 = s * s, s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * P_mesh[k] + (s3 - 2 * s2 + s) * h * dP_mesh[k] + (-2 * s3 + 3 * s2) * P_mesh[k + 1] +
           (s3 - s2) * h * dP_mesh[k + 1];
  }
};

[[nodiscard]] inline SpectralBoundReport verify_spectral_bound(const ModifiedJordanForm& jordan,
                                                              const std::vector<BlockLog>& blocks_K, double T,
                                                              double epsilon) {
  SpectralBoundReport rep;
  for (std::size_t j = 0; j < blocks_K.size(); ++j) {
    SpectralBoundRow row;
    row.block = static_cast<int>(j);
    row.lambda_max = lambda_max_herm(blocks_K[j].K);
    row.bound = spectral_bound_c(jordan.blocks[j], T, epsilon);
    row.margin = row.lambda_max - row.bound;
    rep.worst_margin = std::max(rep.worst_margin, row.margin);
    rep.rows.push_back(row);
  }
  return rep;
}

[[nodiscard]] inline SpectralBoundReport verify_spectral_bound(const FloquetDecomposition& dec, double epsilon) {
  return verify_spectral_bound(dec.jordan, dec.blocks_K, dec.T, epsilon);
}

[[nodiscard]] inline FloquetDecomposition assemble(const ModifiedJordanForm& jordan, const std::vector<BlockLog>& blocks_K,
                                                   const FundamentalPath& path, double epsilon,
                                                   const AssembleOptions& opt = {}) {
  if (blocks_K.size() != jordan.blocks.size()) throw std::invalid_argument("one logarithm per Jordan block expected");
  FloquetDecomposition dec;
  dec.jordan = jordan;
  dec.blocks_K = blocks_K;
  dec.T = path.T;
  dec.epsilon = epsilon;
  dec.path = path;
  const int n = path.n;
  dec.A = CMat::Zero(n, n);
  for (std::size_t j = 0; j < blocks_K.size(); ++j) {
    const auto& b = jordan.blocks[j];
    if (blocks_K[j].size != b.size()) throw std::invalid_argument("logarithm size does not match its block");
    dec.A.block(b.offset, b.offset, b.size(), b.size()) = blocks_K[j].K;
    const Mat Jj = block_matrix(b, jordan.eps_prime);
    const CMat eK = (blocks_K[j].K * path.T).exp();
    dec.block_residual = std::max(dec.block_residual, (eK - Jj.cast<cplx>()).norm() / Jj.norm());
  }
  dec.Sinv = jordan.S.inverse();
  const CMat S = jordan.S.cast<cplx>();
  const CMat Si = dec.Sinv.cast<cplx>();
  dec.B = S * dec.A * Si;

  const Mat phiT = path.phi(path.T);
  const CMat eBT = (dec.B * path.T).exp();
  dec.roundtrip_residual = (eBT - phiT.cast<cplx>()).norm() / phiT.norm();

  // Midpoint of each interval is checked against direct recomputation; the
  // uniform mesh is refined until Hermite interpolation meets the tolerance.
  int nodes = std::max(opt.mesh_nodes, 2);
  for (;;) {
    dec.mesh.resize(nodes);
    dec.P_mesh.resize(nodes);
    dec.dP_mesh.resize(nodes);
    for (int k = 0; k < nodes; ++k) {
      const double t = path.T * k / (nodes - 1);
      dec.mesh[k] = t;
      dec.P_mesh[k] = k == 0 ? CMat(CMat::Identity(n, n))
                             : CMat(path.phi(t).cast<cplx>() * S * dec.exp_At(-t) * Si);
      dec.dP_mesh[k] = path.coefficient(t).cast<cplx>() * dec.P_mesh[k] - dec.P_mesh[k] * dec.B;
    }
    dec.periodicity_residual = (dec.P_mesh.back() - CMat::Identity(n, n)).norm();
    // The end node is P(T) = I up to the residual; store the exact periodic value.
    dec.P_mesh.back() = dec.P_mesh.front();
    dec.dP_mesh.back() = dec.dP_mesh.front();
    dec.interpolation_residual = 0.0;
    for (int k = 0; k + 1 < nodes; ++k) {
      const double t = 0.5 * (dec.mesh[k] + dec.mesh[k + 1]);
      dec.interpolation_residual = std::max(dec.interpolation_residual, (dec.P(t) - dec.P_direct(t)).norm());
    }
    if (dec.interpolation_residual <= 0.25 * opt.interpolation_tolerance || 2 * (nodes - 1) + 1 > opt.max_mesh_nodes) {
      break;
    }
    nodes = 2 * (nodes - 1) + 1;
  }
  dec.bound = verify_spectral_bound(dec, epsilon);

  if (opt.throw_on_violation) {
    if (!(dec.roundtrip_residual <= opt.tolerance)) {
      throw Error(ErrorKind::InvariantViolation, "e^{BT} differs from the monodromy", dec.roundtrip_residual);
    }
    if (!(dec.periodicity_residual <= opt.tolerance)) {
      throw Error(ErrorKind::InvariantViolation, "P(T) differs from the identity", dec.periodicity_residual);
    }
    if (!(dec.interpolation_residual <= opt.interpolation_tolerance)) {
      throw Error(ErrorKind::InvariantViolation, "P mesh interpolation error above tolerance", dec.interpolation_residual);
    }
    if (!(dec.block_residual <= opt.block_tolerance)) {
      throw Error(ErrorKind::InvariantViolation, "block logarithm round trip failed", dec.block_residual);
    }
    if (!(dec.bound.worst_margin <= opt.bound_tolerance)) {
      throw Error(ErrorKind::InvariantViolation, "spectral bound violated", dec.bound.worst_margin);
    }
  }
  return dec;
}

/// Put the trivial block first with K_1 = 0 and S e_1 = f(q).
[[nodiscard]] inline FloquetDecomposition reorder_for_orbit(const FloquetDecomposition& dec, const Vec& f_q,
                                                            const AssembleOptions& opt = {}, double trivial_tol = 1e-6) {
  const auto& jb = dec.jordan.blocks;
  std::optional<std::size_t> triv;
  for (std::size_t j = 0; j < jb.size(); ++j) {
    if (jb[j].kind != BlockKind::RealPositive || jb[j].m != 1) continue;
    if (std::abs(jb[j].lambda - 1.0) > trivial_tol) continue;
    if (!triv || std::abs(jb[j].lambda - 1.0) < std::abs(jb[*triv].lambda - 1.0)) triv = j;
  }
  if (!triv) throw Error(ErrorKind::TrivialBlockMissing, "no simple multiplier at 1");
  const Vec c = dec.jordan.S.col(jb[*triv].offset);
  const double sin_angle = std::sqrt(std::max(0.0, 1.0 - std::pow(c.dot(f_q) / (c.norm() * f_q.norm()), 2)));
  if (!(sin_angle <= 1e-5)) {
    throw Error(ErrorKind::TrivialBlockMissing, "f(q) is not an eigenvector for the trivial multiplier", sin_angle);
  }
  if (*triv == 0 && jb[0].lambda == 1.0 && c == f_q) return dec;

  ModifiedJordanForm jf = dec.jordan;
  const int n = static_cast<int>(jf.S.rows());
  jf.blocks.clear();
  Mat S(n, n);
  int col = 0;
  auto place = [&](const JordanBlock& src) {
    JordanBlock b = src;
    S.block(0, col, n, b.size()) = dec.jordan.S.block(0, src.offset, n, b.size());
    b.offset = col;
    col += b.size();
    jf.blocks.push_back(b);
  };
  place(jb[*triv]);
  jf.blocks[0].lambda = 1.0;
  S.col(0) = f_q;
  for (std::size_t j = 0; j < jb.size(); ++j) {
    if (j != *triv) place(jb[j]);
  }
  jf.S = S;
  jf.J = Mat::Zero(n, n);
  for (const auto& b : jf.blocks) jf.J.block(b.offset, b.offset, b.size(), b.size()) = block_matrix(b, jf.eps_prime);
  jf.residual = (jf.S * jf.J * jf.S.inverse() - jf.C).norm() / jf.C.norm();
  std::vector<BlockLog> logs;
  for (const auto& b : jf.blocks) logs.push_back(block_log(b, dec.T, jf.eps_prime));
  return assemble(jf, logs, dec.path, dec.epsilon, opt);
}

struct FloquetOptions {
  JordanOptions jordan;
  AssembleOptions assemble;
};

/// Full construction for a linear T-periodic fundamental path (no orbit).
[[nodiscard]] inline FloquetDecomposition floquet_decomposition(const FundamentalPath& path, double epsilon,
                                                                const FloquetOptions& opt = {}) {
  const double ep = eps_prime_for(epsilon, path.T);
  const auto jf = modified_real_jordan(path.phi(path.T), ep, opt.jordan);
  std::vector<BlockLog> logs;
  for (const auto& b : jf.blocks) logs.push_back(block_log(b, path.T, ep));
  return assemble(jf, logs, path, epsilon, opt.assemble);
}

/// Orbit version: decomposition reordered so that S e_1 = f(q).
[[nodiscard]] inline FloquetDecomposition floquet_decomposition(const PeriodicOrbit& po, double epsilon,
                                                                const FloquetOptions& opt = {}) {
  const auto path = orbit_path(po);
  const double ep = eps_prime_for(epsilon, po.T);
  const auto jf = modified_real_jordan(po.monodromy, ep, opt.jordan);
  std::vector<BlockLog> logs;
  for (const auto& b : jf.blocks) logs.push_back(block_log(b, po.T, ep));
  AssembleOptions first = opt.assemble;
  first.throw_on_violation = false;
  const auto raw = assemble(jf, logs, path, epsilon, first);
  return reorder_for_orbit(raw, po.system.f(po.q), opt.assemble);
}

}  // namespace cmetric
