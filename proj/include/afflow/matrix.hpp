#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <vector>

#include "afflow/error.hpp"

namespace afflow {

using Complex = std::complex<double>;
using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;
using RVec = Eigen::VectorXd;

/// Tolerance ladder used throughout: construction identities, cross-oracle
/// agreement, and spectral guard bands. `scale` multiplies all three.
struct ToleranceLadder {
  double scale = 1.0;
  double construction() const { return 1e-10 * scale; }
  double oracle() const { return 1e-8 * scale; }
  double guard() const { return 1e-6 * scale; }
};

inline constexpr double kConstructionTol = 1e-10;
inline constexpr double kOracleTol = 1e-8;
inline constexpr double kGuardTol = 1e-6;

/// Largest singular value, computed through the eigenvalues of x*x.
inline double opnorm(const CMat& x) {
  if (x.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<CMat> es(x.adjoint() * x,
                                         Eigen::EigenvaluesOnly);
  const double top = es.eigenvalues().maxCoeff();
  return top > 0 ? std::sqrt(top) : 0.0;
}

inline double vecnorm(const CVec& v) { return v.norm(); }

inline CMat identity(Eigen::Index n) { return CMat::Identity(n, n); }

/// Normalized trace tau = Tr/N.
inline Complex ntrace(const CMat& x) {
  return x.trace() / static_cast<double>(x.rows());
}

/// Hilbert-Schmidt inner product <x,y> = tau(y* x).
inline Complex hs_inner(const CMat& x, const CMat& y) {
  return (y.adjoint() * x).trace() / static_cast<double>(x.rows());
}

class HermitianMatrix {
 public:
  explicit HermitianMatrix(const CMat& x) : m_((x + x.adjoint()) / 2.0) {
    if (x.rows() != x.cols())
      throw DimensionMismatch("HermitianMatrix: matrix not square");
  }
  static HermitianMatrix zero(Eigen::Index n) {
    return HermitianMatrix(CMat::Zero(n, n));
  }
  const CMat& mat() const { return m_; }
  Eigen::Index dim() const { return m_.rows(); }

 private:
  CMat m_;
};

class UnitaryMatrix {
 public:
  explicit UnitaryMatrix(const CMat& x, double tol = kConstructionTol)
      : m_(x) {
    if (x.rows() != x.cols())
      throw DimensionMismatch("UnitaryMatrix: matrix not square");
    const double r = opnorm(x * x.adjoint() - identity(x.rows()));
    if (r > tol)
      throw InternalError("UnitaryMatrix: unitarity residual " +
                          std::to_string(r));
  }
  static UnitaryMatrix id(Eigen::Index n) {
    return UnitaryMatrix(identity(n));
  }
  const CMat& mat() const { return m_; }
  CMat adjoint() const { return m_.adjoint(); }
  Eigen::Index dim() const { return m_.rows(); }

 private:
  CMat m_;
};

struct SpectralDecomposition {
  RVec eigenvalues;           // ascending
  UnitaryMatrix eigenvectors; // columns form the eigenbasis
};

struct PolarFactors {
  UnitaryMatrix unitary;
  HermitianMatrix positive;  // z = positive * unitary
};

namespace detail {

/// Deterministic per-column phase fix: the entry of largest magnitude is made
/// real and positive.
inline void fix_phases(CMat& v) {
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index imax = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      const double a = std::abs(v(i, j));
      if (a > best + 1e-14) {
        best = a;
        imax = i;
      }
    }
    if (best > 0) {
      const Complex ph = v(imax, j) / best;
      v.col(j) *= std::conj(ph);
    }
  }
}

}  // namespace detail

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending, column
/// phases fixed deterministically.
inline SpectralDecomposition herm_eig(const HermitianMatrix& x) {
  Eigen::SelfAdjointEigenSolver<CMat> es(x.mat());
  if (es.info() != Eigen::Success)
    throw EigensolverFailure("herm_eig: solver did not converge",
                             std::numeric_limits<double>::quiet_NaN());
  CMat v = es.eigenvectors();
  detail::fix_phases(v);
  const RVec w = es.eigenvalues();
  const double resid =
      opnorm(v * w.asDiagonal().toDenseMatrix().cast<Complex>() * v.adjoint() -
             x.mat());
  const double scale = std::max(1.0, opnorm(x.mat()));
  if (resid > kConstructionTol * scale)
    throw EigensolverFailure("herm_eig: reconstruction residual too large",
                             resid);
  return SpectralDecomposition{w, UnitaryMatrix(v)};
}

/// e^{ith} through the eigendecomposition of h.
inline UnitaryMatrix exp_ith(const HermitianMatrix& h, double t) {
  const auto sd = herm_eig(h);
  CVec ph(sd.eigenvalues.size());
  for (Eigen::Index i = 0; i < ph.size(); ++i)
    ph(i) = std::exp(Complex(0.0, t * sd.eigenvalues(i)));
  const CMat& v = sd.eigenvectors.mat();
  return UnitaryMatrix(v * ph.asDiagonal() * v.adjoint());
}

/// Polar decomposition z = |z| u with the positive factor on the left.
inline PolarFactors polar_factors(const CMat& z, double rel_tol = 1e-8) {
  Eigen::JacobiSVD<CMat> svd(z, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double smax = s.size() ? s(0) : 0.0;
  const double smin = s.size() ? s(s.size() - 1) : 0.0;
  if (smin <= rel_tol * smax || smax == 0.0)
    throw NearSingular("polar: input nearly singular", smin);
  const CMat u = svd.matrixU() * svd.matrixV().adjoint();
  const CMat pos = svd.matrixU() * s.asDiagonal() * svd.matrixU().adjoint();
  return PolarFactors{UnitaryMatrix(u), HermitianMatrix(pos)};
}

struct Interval {
  double lo;
  double hi;
  static Interval at_least(double lo) {
    return {lo, std::numeric_limits<double>::infinity()};
  }
};

/// Orthogonal projection onto the eigenspaces of x with eigenvalue inside the
/// interval. Eigenvalues inside the guard band of an endpoint are rejected.
inline HermitianMatrix spectral_projection(const HermitianMatrix& x,
                                           Interval cut,
                                           double gap_tol = kGuardTol) {
  const auto sd = herm_eig(x);
  const CMat& v = sd.eigenvectors.mat();
  CMat p = CMat::Zero(x.dim(), x.dim());
  for (Eigen::Index i = 0; i < sd.eigenvalues.size(); ++i) {
    const double w = sd.eigenvalues(i);
    if (std::abs(w - cut.lo) < gap_tol ||
        (std::isfinite(cut.hi) && std::abs(w - cut.hi) < gap_tol))
      throw GapTooSmall("spectral_projection: eigenvalue inside guard band",
                        w);
    if (w > cut.lo && w < cut.hi) p += v.col(i) * v.col(i).adjoint();
  }
  return HermitianMatrix(p);
}

/// Contour integral (2*pi*i)^{-1} of the resolvent of x over the circle
/// |z - center| = radius, by the trapezoidal rule. For Hermitian gapped input
/// this reproduces the spectral projection; it is kept as an independent
/// cross-check of the eigendecomposition route.
inline CMat riesz_projection(const CMat& x, Complex center, double radius,
                             int nodes, double cond_limit = 1e8) {
  const Eigen::Index n = x.rows();
  CMat acc = CMat::Zero(n, n);
  for (int j = 0; j < nodes; ++j) {
    const double th = 2.0 * M_PI * j / nodes;
    const Complex e(std::cos(th), std::sin(th));
    const Complex z = center + radius * e;
    const CMat m = z * identity(n) - x;
    Eigen::PartialPivLU<CMat> lu(m);
    const CMat res = lu.solve(identity(n));
    if (!res.allFinite())
      throw ContourHitsSpectrum(
          "riesz_projection: resolvent blow-up on contour",
          std::numeric_limits<double>::infinity());
    const double cond = opnorm(res) * (std::abs(z) + opnorm(x) + 1.0);
    if (!std::isfinite(cond) || cond > cond_limit)
      throw ContourHitsSpectrum(
          "riesz_projection: resolvent blow-up on contour", cond);
    acc += e * res;
  }
  return (radius / nodes) * acc;
}

/// f applied to the eigenvalues of x in its eigenbasis.
inline HermitianMatrix matrix_function(const HermitianMatrix& x,
                                       const std::function<double(double)>& f) {
  const auto sd = herm_eig(x);
  CVec d(sd.eigenvalues.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = f(sd.eigenvalues(i));
  const CMat& v = sd.eigenvectors.mat();
  return HermitianMatrix(v * d.asDiagonal() * v.adjoint());
}

/// Orthonormal basis of the column span of `cols`, rank revealed by SVD.
inline CMat range_basis(const CMat& cols, double rel_tol = 1e-10) {
  Eigen::JacobiSVD<CMat> svd(cols, Eigen::ComputeThinU);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return CMat(cols.rows(), 0);
  Eigen::Index r = 0;
  while (r < s.size() && s(r) > rel_tol * s(0)) ++r;
  return svd.matrixU().leftCols(r);
}

}  // namespace afflow
