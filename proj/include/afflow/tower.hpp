#pragma once

#include <chrono>
#include <vector>

#include "afflow/doubled.hpp"

namespace afflow {

struct TowerLevelDiagnostics {
  int level = 0;
  double center_sup_dev = 0.0;     // correction spent fixing the center
  double corner_sup_dev = 0.0;     // correction spent on the corner blocks
  double split_residual = 0.0;     // generator mass absorbed by exactification
  double budget = 0.0;             // allowed sup_dev at this level
  double generator_residual = 0.0; // normalizer residual after this level
  double seconds = 0.0;
};

struct TowerFixResult {
  Cocycle cocycle;
  std::vector<TowerLevelDiagnostics> levels;
};

namespace detail {

/// The abelian algebra spanned by the central projections of A. With the
/// canonical column layout the corner columns are contiguous, so the center
/// reuses A's basis with one rank-(k_b m_b) block per central projection.
inline MatrixSubalgebra center_algebra(const MatrixSubalgebra& a) {
  std::vector<BlockSpec> blocks;
  for (const auto& b : a.blocks()) blocks.push_back({1, b.k * b.m});
  return MatrixSubalgebra::block_partition(a.ambient_dim(), blocks, a.basis());
}

inline bool is_scalars(const MatrixSubalgebra& a) {
  return a.block_count() == 1 && a.blocks()[0].k == 1;
}

/// Relative commutant of the corner block algebra inside the corner-compressed
/// span of `upper`, pulled into the commutant's small matrix algebra.
inline MatrixSubalgebra pulled_relative_commutant(
    const MatrixSubalgebra& corner_block,   // factor inside the corner
    const MatrixSubalgebra& corner_comm,    // its commutant, single block
    const std::vector<CMat>& upper_corner_span,  // corner-compressed algebra
    int small_dim) {
  // solve for the subspace of span(upper) commuting with the block units
  const int r = corner_block.ambient_dim();
  const auto units = corner_block.units();
  const int d = static_cast<int>(upper_corner_span.size());
  CMat constraints(static_cast<Eigen::Index>(units.size()) * r * r, d);
  for (int g = 0; g < d; ++g) {
    for (std::size_t s = 0; s < units.size(); ++s) {
      const CMat c = upper_corner_span[g] * units[s] -
                     units[s] * upper_corner_span[g];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j)
          constraints(static_cast<Eigen::Index>(s) * r * r + i * r + j, g) =
              c(i, j);
    }
  }
  Eigen::JacobiSVD<CMat> svd(constraints, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  std::vector<CMat> small_span;
  for (Eigen::Index c = svd.matrixV().cols() - 1; c >= 0; --c) {
    if (sv(c) > 1e-8 * std::max(smax, 1.0)) break;
    CMat x = CMat::Zero(r, r);
    for (int g = 0; g < d; ++g) x += svd.matrixV()(g, c) * upper_corner_span[g];
    small_span.push_back(corner_comm.coefficients(x)[0]);
  }
  if (small_span.empty())
    throw InternalError("pulled_relative_commutant: empty commutant");
  return MatrixSubalgebra::from_span(small_dim, small_span);
}

inline Cocycle fix_tower_frame(const InnerFlow& flow,
                               const std::vector<MatrixSubalgebra>& tower,
                               const BumpKernel& kernel, const FixConfig& cfg,
                               int level, std::vector<TowerLevelDiagnostics>& diags) {
  const auto t_start = std::chrono::steady_clock::now();
  const Eigen::Index n = flow.dim();
  const MatrixSubalgebra& a = tower.front();
  TowerLevelDiagnostics diag;
  diag.level = level;
  diag.budget = cfg.eps_budget / std::pow(2.0, level);
  const auto short_grid = uniform_grid(17);

  Cocycle acc = Cocycle::trivial(flow);

  // center first: make every central projection of this level exactly fixed
  const MatrixSubalgebra dz = center_algebra(a);
  if (!is_scalars(dz)) {
    const Cocycle cz = with_stage("tower-center", [&] {
      return fix_pointwise(acc.perturbed(), dz, kernel, cfg);
    });
    diag.center_sup_dev = metrics(cz, short_grid).sup_dev;
    acc = compose(cz, acc);
  }

  // pinch the generator to the corners (exact by construction after the
  // center stage; the pinch absorbs only numerical residue)
  {
    const CMat& h = acc.perturbed().hamiltonian().mat();
    CMat pinched = CMat::Zero(n, n);
    const auto zs = a.center_projections();
    for (const auto& z : zs) pinched += z.mat() * h * z.mat();
    const double resid = opnorm(pinched - h);
    diag.split_residual += resid;
    if (resid > 0.1)
      throw InternalBoundViolation(
          "fix_tower: center stage left the generator off-diagonal");
    if (resid > 0) {
      const Cocycle cp = Cocycle::differentiable(
          acc.perturbed(), HermitianMatrix(pinched - h));
      acc = compose(cp, acc);
    }
  }

  // corner stage: restore invariance of each corner block
  {
    const InnerFlow cur = acc.perturbed();
    CMat w = CMat::Zero(n, n);
    CMat k = CMat::Zero(n, n);
    for (int b = 0; b < a.block_count(); ++b) {
      const CMat v = a.corner_isometry(b);
      const InnerFlow corner_flow(
          HermitianMatrix(v.adjoint() * cur.hamiltonian().mat() * v));
      const auto res = with_stage("tower-corner", [&] {
        return fix_prop_a(corner_flow, a.corner(b), kernel, cfg);
      });
      diag.corner_sup_dev = std::max(diag.corner_sup_dev, res.diag.sup_dev);
      w += v * res.cocycle.w().mat() * v.adjoint();
      k += v * res.cocycle.k().mat() * v.adjoint();
    }
    const Cocycle cc(cur, UnitaryMatrix(w, 1e-7), HermitianMatrix(k));
    acc = compose(cc, acc);
  }
  diag.generator_residual =
      normalizer_residual(acc.perturbed().hamiltonian().mat(), a);

  if (cfg.enforce_budget &&
      diag.center_sup_dev + diag.corner_sup_dev > diag.budget)
    throw BudgetExhausted(
        "fix_tower: level " + std::to_string(level) + " correction " +
        std::to_string(diag.center_sup_dev + diag.corner_sup_dev) +
        " exceeds budget " + std::to_string(diag.budget));

  if (tower.size() > 1) {
    // split the generator into the block part and the commutant part per
    // corner, absorb the (numerically tiny) cross residue, and recurse on
    // the commutant of each corner block
    const InnerFlow cur = acc.perturbed();
    const CMat& h = cur.hamiltonian().mat();
    CMat kfix = CMat::Zero(n, n);
    struct CornerWork {
      CMat v;                      // corner isometry
      MatrixSubalgebra comm;       // commutant of the block inside the corner
      HermitianMatrix h_small;     // pulled commutant generator
      std::vector<MatrixSubalgebra> tower_small;
    };
    std::vector<CornerWork> work;
    for (int b = 0; b < a.block_count(); ++b) {
      const CMat v = a.corner_isometry(b);
      const MatrixSubalgebra bc = a.corner(b);
      const MatrixSubalgebra cc = bc.commutant();
      const CMat hc = v.adjoint() * h * v;
      const ConditionalExpectation ein(bc);
      const ConditionalExpectation eout(cc);
      const CMat h_in = ein.apply(hc) -
                        ntrace(hc) * identity(hc.rows());
      const CMat h_out = eout.apply(hc);
      const CMat resid = hc - h_in - h_out;
      diag.split_residual += opnorm(resid);
      kfix -= v * resid * v.adjoint();
      CornerWork cw{v, cc, HermitianMatrix(cc.coefficients(h_out)[0]), {}};
      for (std::size_t j = 1; j < tower.size(); ++j) {
        std::vector<CMat> upper_span;
        for (const auto& u : tower[j].units())
          upper_span.push_back(v.adjoint() * u * v);
        cw.tower_small.push_back(with_stage("tower-pull", [&] {
          return detail::pulled_relative_commutant(bc, cc, upper_span,
                                                   cc.blocks()[0].k);
        }));
      }
      work.push_back(std::move(cw));
    }
    if (opnorm(kfix) > 0) {
      const Cocycle cf = Cocycle::differentiable(cur, HermitianMatrix(kfix));
      acc = compose(cf, acc);
    }
    diags.push_back(diag);
    diags.back().seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      t_start)
            .count();

    // recurse per corner and lift
    const InnerFlow cur2 = acc.perturbed();
    CMat w2 = CMat::Zero(n, n);
    CMat k2 = CMat::Zero(n, n);
    for (auto& cw : work) {
      const Cocycle csmall =
          fix_tower_frame(InnerFlow(cw.h_small), cw.tower_small, kernel, cfg,
                          level + 1, diags);
      const CMat wl = cw.comm.assemble({csmall.w().mat()});
      const CMat kl = cw.comm.assemble({csmall.k().mat()});
      w2 += cw.v * wl * cw.v.adjoint();
      k2 += cw.v * kl * cw.v.adjoint();
    }
    const Cocycle cnext(cur2, UnitaryMatrix(w2, 1e-7), HermitianMatrix(k2));
    acc = compose(cnext, acc);
  } else {
    diags.push_back(diag);
    diags.back().seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      t_start)
            .count();
  }
  return acc;
}

}  // namespace detail

/// Corrects the flow into one leaving every level of the tower invariant:
/// per level, the center is fixed pointwise first, each corner block is made
/// invariant through the doubled-system pipeline, the generator is split
/// exactly across the block and its commutant, and the construction recurses
/// on the relative commutant. Corrections at level j+1 commute with level j.
inline TowerFixResult fix_tower(const InnerFlow& flow,
                                const std::vector<MatrixSubalgebra>& tower,
                                const BumpKernel& kernel,
                                const FixConfig& cfg) {
  if (tower.empty()) throw DimensionMismatch("fix_tower: empty tower");
  for (std::size_t j = 0; j + 1 < tower.size(); ++j) {
    const auto nest = one_sided_defect(tower[j], tower[j + 1],
                                       std::min(cfg.trials, 16), cfg.seed);
    if (nest.upper > kConstructionTol * 10)
      throw PreconditionError("fix_tower: level " + std::to_string(j + 1) +
                              " not nested in level " + std::to_string(j + 2) +
                              ", defect " + std::to_string(nest.upper));
  }
  TowerFixResult out{Cocycle::trivial(flow), {}};
  out.cocycle =
      detail::fix_tower_frame(flow, tower, kernel, cfg, 1, out.levels);

  // exactness gate at every level
  const CMat& hf = out.cocycle.perturbed().hamiltonian().mat();
  for (std::size_t j = 0; j < tower.size(); ++j) {
    const double r = normalizer_residual(hf, tower[j]);
    if (r > cfg.exact_tol * (1.0 + opnorm(hf)))
      throw InternalBoundViolation(
          "fix_tower: level " + std::to_string(j + 1) +
          " generator residual " + std::to_string(r));
  }
  return out;
}

}  // namespace afflow
