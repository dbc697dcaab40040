#pragma once

#include <chrono>
#include <cmath>
#include <vector>

#include "afflow/cocycle.hpp"
#include "afflow/flow.hpp"
#include "afflow/subalgebra.hpp"

namespace afflow {

struct FixConfig {
  double admissible_delta = 1e-2;      // hypothesis gate for defect-based fixes
  double conjugation_defect_max = 1e-2;
  double exact_tol = 1e-8;             // postcondition exactness gate
  int grid_points = 65;
  int trials = 64;
  std::uint64_t seed = 0;
  double eps_budget = 0.5;             // total tower budget, split geometrically
  bool enforce_budget = true;
  int kernel_scale = 0;                // 0 = adapt per stage
  int kernel_nodes = 129;
  double ground_gap_tol = 1e-8;
  double window_eps = 0.0;             // 0 = derived from measured norms
};

struct ProjectionFixDiagnostics {
  double drift = 0.0;           // ||E_n - E||
  double u_dev = 0.0;           // ||u - 1||
  double h_norm = 0.0;          // ||h||
  double comm_en = 0.0;         // ||[iH, E_n]||
  double comm_f = 0.0;          // ||[iH, F]||
  double exact_residual = 0.0;  // ||[H + h, F]||
  int kernel_scale = 1;
};

struct ProjectionFix {
  UnitaryMatrix u;
  HermitianMatrix h;
  HermitianMatrix f;  // the repaired projection, f = u E u*
  ProjectionFixDiagnostics diag;
};

namespace detail {

inline CMat commutator(const CMat& a, const CMat& b) { return a * b - b * a; }

/// Largest kernel dilation in {1, 2, 4, ...} (capped) whose flow-average of E
/// stays within `drift_budget` of E; larger dilations shrink the averaged
/// commutator with H.
inline BumpKernel adapt_kernel_scale(const InnerFlow& flow,
                                     const HermitianMatrix& e,
                                     const BumpKernel& base,
                                     const FixConfig& cfg,
                                     double drift_budget = 0.125) {
  if (cfg.kernel_scale > 0) return base.rescaled(cfg.kernel_scale);
  BumpKernel best = base.rescaled(1);
  bool found = false;
  for (int s = 1; s <= 16; s *= 2) {
    const BumpKernel k = base.rescaled(s);
    const double drift = opnorm(smooth(flow, k, e.mat()) - e.mat());
    if (drift < drift_budget) {
      best = k;
      found = true;
    } else {
      break;
    }
  }
  if (!found) return base.rescaled(1);  // let fix_projection report the drift
  return best;
}

}  // namespace detail

/// Repairs an almost-invariant projection: the flow-averaged E is close to E
/// and almost commutes with H; its upper spectral projection F commutes with
/// H + h exactly, where h = -(1-F)HF - FH(1-F), and u (the polar unitary of
/// FE + (1-F)(1-E)) carries E onto F. If a unit vector Omega with
/// E Omega = Omega and H Omega = 0 is pinned, u fixes it and h kills it.
inline ProjectionFix fix_projection(const InnerFlow& flow,
                                    const HermitianMatrix& e,
                                    const BumpKernel& kernel,
                                    const CVec* pinned = nullptr) {
  const Eigen::Index n = flow.dim();
  const CMat& h_mat = flow.hamiltonian().mat();
  if (pinned) {
    if ((e.mat() * *pinned - *pinned).norm() > 1e-8)
      throw PreconditionError("fix_projection: pinned vector not in range(E)");
    if ((h_mat * *pinned).norm() > 1e-8 * std::max(1.0, opnorm(h_mat)))
      throw PreconditionError("fix_projection: pinned vector not H-null");
  }

  const CMat en = smooth(flow, kernel, e.mat());
  ProjectionFixDiagnostics diag;
  diag.kernel_scale = kernel.scale();
  diag.drift = opnorm(en - e.mat());
  if (diag.drift >= 0.25)
    throw DriftTooLarge("fix_projection: ||E_n - E|| = " +
                            std::to_string(diag.drift) + " >= 1/4",
                        diag.drift);
  diag.comm_en = opnorm(detail::commutator(Complex(0, 1) * h_mat, en));

  const HermitianMatrix f =
      spectral_projection(HermitianMatrix(en), Interval::at_least(0.5));
  diag.comm_f = opnorm(detail::commutator(Complex(0, 1) * h_mat, f.mat()));

  const CMat one = identity(n);
  const CMat z = f.mat() * e.mat() + (one - f.mat()) * (one - e.mat());
  const PolarFactors pf = polar_factors(z, 1e-6);
  const CMat hcorr = -(one - f.mat()) * h_mat * f.mat() -
                     f.mat() * h_mat * (one - f.mat());

  diag.u_dev = opnorm(pf.unitary.mat() - one);
  diag.h_norm = opnorm(hcorr);
  diag.exact_residual = opnorm(detail::commutator(h_mat + hcorr, f.mat()));
  const double scale = opnorm(h_mat) + diag.h_norm + 1.0;
  if (diag.exact_residual > kConstructionTol * scale)
    throw InternalBoundViolation(
        "fix_projection: [H+h, F] residual " +
        std::to_string(diag.exact_residual));
  if (opnorm(pf.unitary.mat() * e.mat() * pf.unitary.adjoint() - f.mat()) >
      kConstructionTol * 10)
    throw InternalBoundViolation("fix_projection: u E u* != F");
  if (pinned) {
    if ((pf.unitary.mat() * *pinned - *pinned).norm() > kConstructionTol ||
        (hcorr * *pinned).norm() > kConstructionTol * scale)
      throw InternalBoundViolation(
          "fix_projection: pinned vector not preserved");
  }
  return ProjectionFix{pf.unitary, HermitianMatrix(hcorr), f, diag};
}

/// Orthogonalizes a family of almost-projections a_i >= 0 with sum close to 1
/// and spectra inside [0,1/3) u (2/3,1]: returns q_i = b^{-1/2} g1(a_i)
/// b^{-1/2} with g1 = 0 below 1/3 and g1(t) = t above 2/3, b = sum g1(a_j).
/// The q_i are mutually orthogonal projections summing to one exactly.
inline std::vector<HermitianMatrix> orthogonalize_family(
    const std::vector<HermitianMatrix>& a, double guard = kGuardTol) {
  if (a.empty()) throw DimensionMismatch("orthogonalize_family: empty family");
  const Eigen::Index n = a[0].dim();
  const auto g1 = [](double t) {
    if (t <= 1.0 / 3.0) return 0.0;
    if (t >= 2.0 / 3.0) return t;
    const double s = 3.0 * (t - 1.0 / 3.0);
    return t * (3.0 * s * s - 2.0 * s * s * s);
  };
  std::vector<HermitianMatrix> g1a;
  for (const auto& ai : a) {
    const auto sd = herm_eig(ai);
    for (Eigen::Index i = 0; i < sd.eigenvalues.size(); ++i) {
      const double w = sd.eigenvalues(i);
      if (w < -guard || w > 1.0 + guard ||
          (w > 1.0 / 3.0 - guard && w < 2.0 / 3.0 + guard))
        throw SpectralBandViolation(
            "orthogonalize_family: eigenvalue in forbidden band", w);
    }
    g1a.push_back(matrix_function(ai, g1));
  }
  CMat b = CMat::Zero(n, n);
  for (const auto& g : g1a) b += g.mat();
  const HermitianMatrix binvh = matrix_function(
      HermitianMatrix(b), [](double t) { return 1.0 / std::sqrt(t); });
  std::vector<HermitianMatrix> q;
  CMat sum = CMat::Zero(n, n);
  for (const auto& g : g1a) {
    q.push_back(HermitianMatrix(binvh.mat() * g.mat() * binvh.mat()));
    sum += q.back().mat();
  }
  double worst = opnorm(sum - identity(n));
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < q.size(); ++j) {
      const CMat prod = q[i].mat() * q[j].mat();
      worst = std::max(worst,
                       opnorm(prod - (i == j ? q[i].mat() : CMat(CMat::Zero(n, n)))));
    }
  if (worst > kConstructionTol * 10)
    throw InternalBoundViolation(
        "orthogonalize_family: output not an exact orthogonal decomposition, "
        "residual " + std::to_string(worst));
  return q;
}

/// Kernel-smooths each projection and orthogonalizes the smoothed family.
inline std::vector<HermitianMatrix> orthogonalize_abelian(
    const InnerFlow& flow, const BumpKernel& kernel,
    const std::vector<HermitianMatrix>& e) {
  std::vector<HermitianMatrix> a;
  a.reserve(e.size());
  for (const auto& ei : e)
    a.push_back(HermitianMatrix(smooth(flow, kernel, ei.mat())));
  return orthogonalize_family(a);
}

/// The polar unitary of v = sum q_i e_i, which carries each e_i onto q_i
/// exactly: v e_i = q_i v and v*v commutes with every e_i, so conjugation by
/// the polar part is exact.
inline UnitaryMatrix implement_inner(const std::vector<HermitianMatrix>& e,
                                     const std::vector<HermitianMatrix>& q) {
  if (e.size() != q.size() || e.empty())
    throw DimensionMismatch("implement_inner: family size mismatch");
  const Eigen::Index n = e[0].dim();
  CMat v = CMat::Zero(n, n);
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double re = e[i].mat().trace().real();
    const double rq = q[i].mat().trace().real();
    if (std::abs(re - rq) > 0.5)
      throw PreconditionError("implement_inner: rank mismatch at index " +
                              std::to_string(i));
    if (opnorm(q[i].mat() - e[i].mat()) >= 0.5)
      throw PreconditionError(
          "implement_inner: ||q_i - e_i|| >= 1/2 at index " +
          std::to_string(i));
    v += q[i].mat() * e[i].mat();
  }
  const PolarFactors pf = [&] {
    try {
      return polar_factors(v, 1e-6);
    } catch (const NearSingular& ns) {
      throw PreconditionError(
          std::string("implement_inner: alignment nearly singular, ") +
          ns.what());
    }
  }();
  for (std::size_t i = 0; i < e.size(); ++i)
    if (opnorm(pf.unitary.mat() * e[i].mat() * pf.unitary.adjoint() -
               q[i].mat()) > kConstructionTol * 10)
      throw InternalBoundViolation("implement_inner: conjugation not exact");
  return pf.unitary;
}

/// Hermitian h with [ih, x] = i[H, x] for every x commuting with all q_j:
/// the Haar average of delta(u)u* over the unitary group of the abelian
/// algebra spanned by the q_j collapses to the pinching difference
/// h = H - sum_j q_j H q_j.
inline HermitianMatrix average_out_derivation(
    const HermitianMatrix& h, const std::vector<HermitianMatrix>& q) {
  const Eigen::Index n = h.dim();
  CMat pinched = CMat::Zero(n, n);
  for (const auto& qj : q) pinched += qj.mat() * h.mat() * qj.mat();
  const CMat out = h.mat() - pinched;
  for (const auto& qj : q) {
    const double r = opnorm(detail::commutator(out, qj.mat()) -
                            detail::commutator(h.mat(), qj.mat()));
    if (r > kConstructionTol * (1.0 + opnorm(h.mat())))
      throw InternalBoundViolation(
          "average_out_derivation: pinching identity failed");
  }
  return HermitianMatrix(out);
}

/// Monte-Carlo oracle for the same average: samples the torus of the abelian
/// algebra directly. Returns the sampled mean of -i * delta(u) u*.
inline HermitianMatrix average_out_derivation_montecarlo(
    const HermitianMatrix& h, const std::vector<HermitianMatrix>& q,
    int samples, Substream& rng) {
  const Eigen::Index n = h.dim();
  CMat acc = CMat::Zero(n, n);
  for (int s = 0; s < samples; ++s) {
    CMat u = CMat::Zero(n, n);
    for (const auto& qj : q) {
      const double th = 2.0 * M_PI * rng.uniform();
      u += std::exp(Complex(0, th)) * qj.mat();
    }
    const CMat du = detail::commutator(h.mat(), u);  // -i delta(u) = [H,u]
    acc += du * u.adjoint();
  }
  acc /= static_cast<double>(samples);
  return HermitianMatrix(acc);
}

/// Given a flow that fixes every diagonal unit of D elementwise, returns the
/// cocycle v_t = sum e_{i1} alpha_t(e_{1i}) in canonical form; the perturbed
/// flow is the identity on all of D.
inline Cocycle matrix_unit_cocycle(const InnerFlow& flow_p,
                                   const MatrixSubalgebra& d,
                                   double fix_tol = 1e-8) {
  const CMat& hp = flow_p.hamiltonian().mat();
  const Eigen::Index n = flow_p.dim();
  const double hscale = 1.0 + opnorm(hp);
  for (int b = 0; b < d.block_count(); ++b)
    for (int i = 0; i < d.blocks()[b].k; ++i) {
      const CMat di = d.unit(b, i, i);
      if (opnorm(detail::commutator(hp, di)) > fix_tol * hscale)
        throw PreconditionError(
            "matrix_unit_cocycle: diagonal unit not flow-fixed");
    }
  CMat g = CMat::Zero(n, n);
  for (int b = 0; b < d.block_count(); ++b)
    for (int i = 0; i < d.blocks()[b].k; ++i)
      g += d.unit(b, i, 0) * hp * d.unit(b, 0, i);
  const CMat kappa = g - hp;
  return Cocycle(flow_p, UnitaryMatrix::id(n),
                 HermitianMatrix(kappa));
}

/// Makes the flow the identity on D: orthogonalizes the smoothed diagonal
/// units, implements the correction by a unitary, removes the remaining
/// derivation on the diagonal by the pinching average, and extends to the
/// off-diagonal units through the matrix-unit cocycle.
inline Cocycle fix_pointwise(const InnerFlow& flow, const MatrixSubalgebra& d,
                             const BumpKernel& kernel, const FixConfig& cfg) {
  const auto grid = uniform_grid(cfg.grid_points);
  const auto defect = with_stage("pointwise-defect", [&] {
    return pointwise_defect(flow, d, grid, cfg.trials, cfg.seed);
  });
  if (defect.upper >= cfg.admissible_delta)
    throw PreconditionError(
        "fix_pointwise: pointwise defect upper bound " +
        std::to_string(defect.upper) + " exceeds admissible " +
        std::to_string(cfg.admissible_delta));

  const auto e = d.diagonal_units();
  const auto q = with_stage("orthogonalize", [&] {
    BumpKernel k = cfg.kernel_scale > 0 ? kernel.rescaled(cfg.kernel_scale)
                                        : kernel;
    return orthogonalize_abelian(flow, k, e);
  });
  const UnitaryMatrix w =
      with_stage("implement-inner", [&] { return implement_inner(e, q); });
  const HermitianMatrix h = with_stage("average-derivation", [&] {
    return average_out_derivation(flow.hamiltonian(), q);
  });
  const Cocycle c_z(flow, UnitaryMatrix(w.adjoint()),
                    HermitianMatrix(-h.mat()));

  bool abelian = true;
  for (const auto& b : d.blocks())
    if (b.k > 1) abelian = false;
  Cocycle total = c_z;
  if (!abelian) {
    const Cocycle c_mu = with_stage("matrix-units", [&] {
      return matrix_unit_cocycle(c_z.perturbed(), d, cfg.exact_tol);
    });
    total = compose(c_mu, c_z);
  }

  // exactness gate
  const CMat& hf = total.perturbed().hamiltonian().mat();
  double worst = 0.0;
  for (const auto& u : d.units())
    worst = std::max(worst, opnorm(detail::commutator(hf, u)));
  if (worst > cfg.exact_tol * (1.0 + opnorm(hf)))
    throw InternalBoundViolation(
        "fix_pointwise: perturbed flow does not fix D, generator residual " +
        std::to_string(worst));
  return total;
}

/// Finds a unitary conjugating a nearby subalgebra onto the target exactly:
/// the conditional-expectation images of the diagonal units are
/// orthogonalized inside the target, the diagonals are aligned by a polar
/// unitary, and the off-diagonal units are intertwined blockwise through
/// polar parts of expectation images.
inline UnitaryMatrix conjugate_subalgebra(const MatrixSubalgebra& target,
                                          const MatrixSubalgebra& near,
                                          const FixConfig& cfg = {}) {
  if (target.ambient_dim() != near.ambient_dim())
    throw DimensionMismatch("conjugate_subalgebra: ambient dims differ");
  const auto dist = dist_estimate(target, near, cfg.trials, cfg.seed);
  if (dist.upper >= cfg.conjugation_defect_max)
    throw PreconditionError(
        "conjugate_subalgebra: defect upper bound " +
        std::to_string(dist.upper) + " exceeds " +
        std::to_string(cfg.conjugation_defect_max));
  if (target.block_count() != near.block_count())
    throw PreconditionError("conjugate_subalgebra: block count mismatch");
  for (int b = 0; b < target.block_count(); ++b)
    if (target.blocks()[b].k != near.blocks()[b].k ||
        target.blocks()[b].m != near.blocks()[b].m)
      throw PreconditionError("conjugate_subalgebra: block structure mismatch");

  const ConditionalExpectation et(target);
  // orthogonalize expectation images of the diagonal units inside the target
  std::vector<HermitianMatrix> a;
  for (int b = 0; b < near.block_count(); ++b)
    for (int i = 0; i < near.blocks()[b].k; ++i)
      a.push_back(HermitianMatrix(et.apply(near.unit(b, i, i))));
  const auto q = with_stage("orthogonalize", [&] {
    return orthogonalize_family(a);
  });
  std::vector<HermitianMatrix> ediag;
  for (int b = 0; b < near.block_count(); ++b)
    for (int i = 0; i < near.blocks()[b].k; ++i)
      ediag.push_back(HermitianMatrix(near.unit(b, i, i)));
  const UnitaryMatrix w1 =
      with_stage("align-diagonals", [&] { return implement_inner(ediag, q); });

  const Eigen::Index n = target.ambient_dim();
  CMat v = CMat::Zero(n, n);
  int flat = 0;
  for (int b = 0; b < near.block_count(); ++b) {
    const int k = near.blocks()[b].k;
    const int m = near.blocks()[b].m;
    std::vector<CMat> yhat(k);
    yhat[0] = q[flat].mat();
    for (int j = 1; j < k; ++j) {
      const CMat g1j =
          w1.mat() * near.unit(b, 0, j) * w1.adjoint();
      const CMat t = q[flat].mat() * et.apply(g1j) * q[flat + j].mat();
      Eigen::JacobiSVD<CMat> svd(t, Eigen::ComputeThinU | Eigen::ComputeThinV);
      const auto& s = svd.singularValues();
      int r = 0;
      while (r < s.size() && s(r) > 1e-6 * std::max(s(0), 1e-30)) ++r;
      if (r != m)
        throw PreconditionError(
            "conjugate_subalgebra: intertwiner rank mismatch in block " +
            std::to_string(b));
      yhat[j] = svd.matrixU().leftCols(m) * svd.matrixV().leftCols(m).adjoint();
    }
    for (int i = 0; i < k; ++i) {
      const CMat gi0 =
          w1.mat() * near.unit(b, i, 0) * w1.adjoint();
      const CMat ghat_i0 = i == 0 ? yhat[0] : CMat(yhat[i].adjoint());
      v += ghat_i0 * (gi0.adjoint());  // ghat_{i0} g_{0i}
    }
    flat += k;
  }
  const UnitaryMatrix vtot = UnitaryMatrix(v * w1.mat(), 1e-7);
  const auto conj_dist =
      dist_estimate(target, near.conjugated(vtot), cfg.trials, cfg.seed);
  if (conj_dist.upper > cfg.exact_tol)
    throw InternalBoundViolation(
        "conjugate_subalgebra: conjugated defect " +
        std::to_string(conj_dist.upper));
  return vtot;
}

/// Restores exact invariance of a single-factor subalgebra when the flow has
/// an invariant vector state that is a product across B and its commutant:
/// fixes the cyclic projection of B, then the minimal projection carried by
/// the state, diagonalizes the compressed flow, and closes with the phased
/// matrix-unit cocycle. The returned cocycle's perturbed flow maps B onto B
/// and keeps the state invariant.
inline Cocycle fix_invariant(const InnerFlow& flow, const MatrixSubalgebra& b,
                             const BumpKernel& kernel, const CVec& omega,
                             const FixConfig& cfg) {
  if (b.block_count() != 1)
    throw PreconditionError("fix_invariant: B must be a single factor");
  const int k = b.blocks()[0].k;
  const Eigen::Index n = flow.dim();
  if (omega.size() != n)
    throw DimensionMismatch("fix_invariant: state vector dimension");

  // normalize the eigenvalue of omega to zero by a scalar shift; the shift
  // changes neither the path nor the perturbed automorphisms
  const Complex lam_c = omega.dot(flow.hamiltonian().mat() * omega);
  const double lam = lam_c.real();
  if ((flow.hamiltonian().mat() * omega - lam * omega).norm() >
      1e-8 * (1.0 + opnorm(flow.hamiltonian().mat())))
    throw PreconditionError("fix_invariant: state is not an eigenvector");
  const InnerFlow shifted(HermitianMatrix(
      flow.hamiltonian().mat() - lam * identity(n)));

  // defect hypothesis
  const auto grid = uniform_grid(std::min(cfg.grid_points, 17));
  const auto defect = invariance_defect(shifted, b, grid,
                                        std::min(cfg.trials, 16), cfg.seed);
  if (defect.upper >= cfg.admissible_delta)
    throw PreconditionError("fix_invariant: invariance defect upper bound " +
                            std::to_string(defect.upper) +
                            " exceeds admissible " +
                            std::to_string(cfg.admissible_delta));

  // cyclic projection of B at omega
  const auto units = b.units();
  CMat cols(n, units.size());
  for (std::size_t g = 0; g < units.size(); ++g) cols.col(g) = units[g] * omega;
  const CMat q0 = range_basis(cols, 1e-9);
  if (q0.cols() != k)
    throw PreconditionError(
        "fix_invariant: cyclic subspace has wrong dimension " +
        std::to_string(q0.cols()));
  const HermitianMatrix e_cyc(q0 * q0.adjoint());

  const BumpKernel k1 =
      detail::adapt_kernel_scale(shifted, e_cyc, kernel, cfg);
  const ProjectionFix fix1 = with_stage("cyclic-projection", [&] {
    return fix_projection(shifted, e_cyc, k1, &omega);
  });
  const Cocycle c1(shifted, UnitaryMatrix(fix1.u.adjoint()), fix1.h);
  const InnerFlow flow1 = c1.perturbed();

  // minimal projection of B carried by the state
  CMat s(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      s(i, j) = omega.dot(b.unit(0, i, j) * omega);
  const CMat e1c = s.conjugate();
  if (std::abs(e1c.trace().real() - 1.0) > 1e-6 ||
      opnorm(e1c * e1c - e1c) > 1e-6)
    throw PreconditionError(
        "fix_invariant: state is not a product vector across B and its "
        "commutant");
  const HermitianMatrix e1(b.embed_block(0, e1c));

  const BumpKernel k2 = detail::adapt_kernel_scale(flow1, e1, kernel, cfg);
  const ProjectionFix fix2 = with_stage("minimal-projection", [&] {
    return fix_projection(flow1, e1, k2, &omega);
  });
  const Cocycle c2(flow1, UnitaryMatrix(fix2.u.adjoint()), fix2.h);
  const InnerFlow flow2 = c2.perturbed();
  const CMat& h2 = flow2.hamiltonian().mat();

  // compressed generator on the cyclic subspace; rotate the kernel so the
  // state direction is an eigenvector slot
  const CMat he = q0.adjoint() * h2 * q0;
  const CVec w0 = q0.adjoint() * omega;
  if ((he * w0).norm() > 1e-7 * (1.0 + opnorm(h2)))
    throw InternalBoundViolation(
        "fix_invariant: compressed generator does not kill the state");
  const auto sd = herm_eig(HermitianMatrix(he));
  std::vector<CVec> chi;
  std::vector<double> phases;
  chi.push_back(w0 / w0.norm());
  phases.push_back(0.0);
  {
    // orthonormal completion of the remaining eigenvectors against chi_0
    std::vector<CVec> rest;
    for (Eigen::Index i = 0; i < k; ++i) {
      CVec v = sd.eigenvectors.mat().col(i);
      for (const auto& c : chi) v -= c * c.dot(v);
      for (const auto& c : rest) v -= c * c.dot(v);
      if (v.norm() > 1e-6) rest.push_back(v / v.norm());
    }
    if (static_cast<int>(rest.size()) != k - 1)
      throw InternalBoundViolation(
          "fix_invariant: eigenbasis completion failed");
    for (auto& v : rest) {
      chi.push_back(v);
      phases.push_back((v.dot(he * v)).real());
    }
  }

  // pull matrix units of B through the compression x -> x restricted to E
  Eigen::Index kk = static_cast<Eigen::Index>(k) * k;
  CMat cmat(kk, kk);
  for (Eigen::Index g = 0; g < kk; ++g) {
    const CMat gc = q0.adjoint() * units[g] * q0;
    for (int a2 = 0; a2 < k; ++a2)
      for (int b2 = 0; b2 < k; ++b2)
        cmat(a2 * k + b2, g) = chi[a2].dot(gc * chi[b2]);
  }
  const CMat cinv = cmat.partialPivLu().solve(CMat::Identity(kk, kk));
  const auto pulled_unit = [&](int a2, int b2) {
    CMat out = CMat::Zero(n, n);
    for (Eigen::Index g = 0; g < kk; ++g)
      out += cinv(g, a2 * k + b2) * units[g];
    return out;
  };

  // phased matrix-unit cocycle: kappa from the derivative at t = 0
  CMat kappa = CMat::Zero(n, n);
  for (int j = 0; j < k; ++j) {
    const CMat ej1 = pulled_unit(j, 0);
    const CMat e1j = pulled_unit(0, j);
    const CMat ejj = pulled_unit(j, j);
    kappa += phases[j] * ejj + ej1 * h2 * e1j;
  }
  kappa -= h2;
  const Cocycle c3(flow2, UnitaryMatrix::id(n),
                   HermitianMatrix((kappa + kappa.adjoint()) / 2.0));

  Cocycle total_shifted = compose(c3, compose(c2, c1));
  // re-express over the caller's (unshifted) flow: same path, same flow
  Cocycle total(flow, total_shifted.w(), total_shifted.k());

  // exactness gate: the perturbed generator normalizes B
  const ConditionalExpectation eb(b);
  const CMat& hf = total.perturbed().hamiltonian().mat();
  double worst = 0.0;
  for (const auto& u : units) {
    const CMat der = detail::commutator(hf, u);
    worst = std::max(worst, opnorm(der - eb.apply(der)));
  }
  if (worst > cfg.exact_tol * (1.0 + opnorm(hf)))
    throw InternalBoundViolation(
        "fix_invariant: perturbed generator does not normalize B, residual " +
        std::to_string(worst));
  const CVec resid = hf * omega -
                     omega * Complex(omega.dot(hf * omega));
  if (resid.norm() > cfg.exact_tol * (1.0 + opnorm(hf)))
    throw InternalBoundViolation(
        "fix_invariant: state invariance lost");
  return total;
}

}  // namespace afflow
