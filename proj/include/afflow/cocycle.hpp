#pragma once

#include <cmath>
#include <vector>

#include "afflow/flow.hpp"

namespace afflow {

/// A unitary path u_t = w e^{it(H+k)} w* e^{-itH} over the flow generated by
/// H. Paths of this form satisfy the cocycle identity u_s alpha_s(u_t) =
/// u_{s+t} identically, and every construction in this library produces one:
/// coboundaries have k = 0, differentiable cocycles have w = 1, and products
/// stay in the family. The evaluation depends on (w, k) only through the
/// perturbed generator w(H+k)w*.
class Cocycle {
 public:
  Cocycle(InnerFlow base, UnitaryMatrix w, HermitianMatrix k)
      : base_(std::move(base)),
        w_(std::move(w)),
        k_(std::move(k)),
        perturbed_(HermitianMatrix(
            w_.mat() * (base_.hamiltonian().mat() + k_.mat()) *
            w_.adjoint())) {
    if (w_.dim() != base_.dim() || k_.dim() != base_.dim())
      throw DimensionMismatch("Cocycle: dimension mismatch");
  }

  static Cocycle trivial(InnerFlow base) {
    const auto n = base.dim();
    return Cocycle(std::move(base), UnitaryMatrix::id(n),
                   HermitianMatrix::zero(n));
  }
  static Cocycle differentiable(InnerFlow base, HermitianMatrix k) {
    const auto n = base.dim();
    return Cocycle(std::move(base), UnitaryMatrix::id(n), std::move(k));
  }
  static Cocycle coboundary(InnerFlow base, UnitaryMatrix w) {
    const auto n = base.dim();
    return Cocycle(std::move(base), std::move(w), HermitianMatrix::zero(n));
  }

  const InnerFlow& base() const { return base_; }
  const UnitaryMatrix& w() const { return w_; }
  const HermitianMatrix& k() const { return k_; }

  /// The perturbed flow Ad u_t alpha_t, inner with generator w(H+k)w*.
  const InnerFlow& perturbed() const { return perturbed_; }

  UnitaryMatrix eval(double t) const {
    return UnitaryMatrix(
        perturbed_.unitary(t).mat() * base_.unitary(-t).mat(), 1e-9);
  }

 private:
  InnerFlow base_;
  UnitaryMatrix w_;
  HermitianMatrix k_;
  InnerFlow perturbed_;
};

struct CocycleMetrics {
  double sup_dev = 0.0;  // sup over the grid of ||u_t - 1||
  double k_norm = 0.0;
  double w_dev = 0.0;
};

inline CocycleMetrics metrics(const Cocycle& c,
                              const std::vector<double>& grid) {
  CocycleMetrics m;
  m.k_norm = opnorm(c.k().mat());
  m.w_dev = opnorm(c.w().mat() - identity(c.base().dim()));
  for (const double t : grid)
    m.sup_dev =
        std::max(m.sup_dev, opnorm(c.eval(t).mat() - identity(c.base().dim())));
  return m;
}

/// Product cocycle: outer must be a cocycle over the flow perturbed by inner.
/// The result evaluates to eval(outer, t) * eval(inner, t) and lives over
/// inner's base flow.
inline Cocycle compose(const Cocycle& outer, const Cocycle& inner,
                       double tol = 1e-8) {
  const double mismatch = opnorm(outer.base().hamiltonian().mat() -
                                 inner.perturbed().hamiltonian().mat());
  if (mismatch > tol * (1.0 + opnorm(inner.perturbed().hamiltonian().mat())))
    throw PreconditionError("compose: outer base is not inner's perturbed flow");
  // u^out u^in = w2 e^{it(H'+k2)} w2* e^{-itH}; match w(H+k)w* = w2(H'+k2)w2*.
  const CMat h = inner.base().hamiltonian().mat();
  const CMat hp = inner.perturbed().hamiltonian().mat();
  return Cocycle(inner.base(), outer.w(),
                 HermitianMatrix(hp + outer.k().mat() - h));
}

/// Rewrites a small cocycle as (v, k') with v the polar unitary of the
/// kernel-smoothed path m = integral f(t) u_t dt and k' = v* H' v - H. The
/// evaluation is unchanged; the point is that ||k'|| is controlled by the
/// total variation of f times the size of the path over the kernel support.
inline Cocycle resplit_small(const Cocycle& c, const BumpKernel& kernel) {
  const InnerFlow& base = c.base();
  const InnerFlow& pert = c.perturbed();
  const CMat& vb = base.eig().eigenvectors.mat();
  const CMat& vp = pert.eig().eigenvectors.mat();
  const RVec& lb = base.eig().eigenvalues;
  const RVec& lp = pert.eig().eigenvalues;
  const Eigen::Index n = base.dim();
  // m = sum_j w_j e^{i t_j H'} e^{-i t_j H} via the two eigenbases
  const CMat cross = vp.adjoint() * vb;
  CMat w = CMat::Zero(n, n);
  for (std::size_t j = 0; j < kernel.nodes().size(); ++j) {
    const double t = kernel.nodes()[j];
    const double wt = kernel.weights()[j];
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = 0; b < n; ++b)
        w(a, b) += wt * std::exp(Complex(0.0, t * (lp(a) - lb(b))));
  }
  const CMat m = vp * w.cwiseProduct(cross) * vb.adjoint();
  PolarFactors pf = [&] {
    try {
      return polar_factors(m, 1e-6);
    } catch (const NearSingular& e) {
      throw CocycleTooLarge(
          "resplit_small: smoothed path nearly singular (cocycle too far "
          "from 1), sigma_min " +
          std::to_string(e.sigma_min));
    }
  }();
  const CMat v = pf.unitary.mat();
  const CMat kp =
      v.adjoint() * pert.hamiltonian().mat() * v - base.hamiltonian().mat();
  return Cocycle(base, pf.unitary, HermitianMatrix(kp));
}

/// Extracts the scalar winding rate of a nearly scalar cocycle: unwraps the
/// phase of the normalized trace of u_t along the grid and returns the
/// unwrapped phase at t = 1. Requires the path to stay within delta < 1/6 of
/// the scalars on the grid.
inline double scalar_phase(const Cocycle& c, std::vector<double> grid,
                           double delta) {
  if (delta >= 1.0 / 6.0)
    throw PreconditionError("scalar_phase: delta must be < 1/6");
  if (grid.empty() || std::abs(grid.front()) > 1e-12 ||
      std::abs(grid.back() - 1.0) > 1e-12)
    throw PreconditionError("scalar_phase: grid must run from 0 to 1");
  // ensure mesh <= 1/64 for the nearest-branch continuation
  double mesh = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    mesh = std::max(mesh, grid[i] - grid[i - 1]);
  if (mesh > 1.0 / 64.0 + 1e-12) {
    const int pts = 129;
    grid = uniform_grid(pts);
  }
  double f = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const CMat u = c.eval(grid[i]).mat();
    const Complex tr = ntrace(u);
    if (std::abs(tr) < 1e-9)
      throw PhaseUndefined("scalar_phase: trace vanishes on grid");
    const Complex lam = tr / std::abs(tr);
    const double dev = opnorm(u - lam * identity(u.rows()));
    if (dev >= delta)
      throw PreconditionError(
          "scalar_phase: path is " + std::to_string(dev) +
          " from the scalars, exceeds delta");
    const double raw = std::arg(lam);
    if (i == 0) {
      f = raw;
      prev = raw;
      continue;
    }
    double step = raw - prev;
    while (step > M_PI) step -= 2.0 * M_PI;
    while (step < -M_PI) step += 2.0 * M_PI;
    if (std::abs(step) > M_PI / 2.0)
      throw PhaseUndefined("scalar_phase: phase jump exceeds pi/2 per step");
    f += step;
    prev = raw;
  }
  return f;
}

}  // namespace afflow
