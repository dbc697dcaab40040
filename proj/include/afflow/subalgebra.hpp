#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "afflow/matrix.hpp"
#include "afflow/rng.hpp"

namespace afflow {

struct BlockSpec {
  int k;  // block size: the block is a copy of the k x k matrices
  int m;  // multiplicity of the block inside the ambient algebra
};

/// A unital *-subalgebra of the N x N matrices, presented per central block
/// by matrix units. Canonically stored as (block list, basis): the basis
/// columns order the ambient space as, per block, (block index i, copy r),
/// and every matrix unit is a basis-conjugated canonical unit.
class MatrixSubalgebra {
 public:
  static MatrixSubalgebra block_partition(int ambient_dim,
                                          std::vector<BlockSpec> blocks,
                                          const UnitaryMatrix& basis) {
    int total = 0;
    for (const auto& b : blocks) {
      if (b.k < 1 || b.m < 1)
        throw DimensionMismatch("block_partition: nonpositive block spec");
      total += b.k * b.m;
    }
    if (total != ambient_dim)
      throw DimensionMismatch("block_partition: sum k_b*m_b != ambient dim");
    if (basis.dim() != ambient_dim)
      throw DimensionMismatch("block_partition: basis dimension mismatch");
    return MatrixSubalgebra(ambient_dim, std::move(blocks), basis);
  }

  /// The full matrix algebra.
  static MatrixSubalgebra full(int n) {
    return block_partition(n, {{n, 1}}, UnitaryMatrix::id(n));
  }

  /// The scalars C*1.
  static MatrixSubalgebra scalars(int n) {
    return block_partition(n, {{1, n}}, UnitaryMatrix::id(n));
  }

  /// Normalizes an arbitrary spanning set of a unital *-subalgebra into the
  /// canonical matrix-unit presentation (linear-algebraic Artin-Wedderburn).
  static MatrixSubalgebra from_span(int ambient_dim,
                                    const std::vector<CMat>& spanning,
                                    double tol = 1e-8);

  int ambient_dim() const { return n_; }
  const std::vector<BlockSpec>& blocks() const { return blocks_; }
  const UnitaryMatrix& basis() const { return basis_; }
  int block_count() const { return static_cast<int>(blocks_.size()); }

  /// Linear dimension sum_b k_b^2.
  int dim() const {
    int d = 0;
    for (const auto& b : blocks_) d += b.k * b.k;
    return d;
  }

  int block_offset(int b) const {
    int o = 0;
    for (int c = 0; c < b; ++c) o += blocks_[c].k * blocks_[c].m;
    return o;
  }

  /// Matrix unit e^{(b)}_{ij} as an ambient matrix (0-based i, j).
  CMat unit(int b, int i, int j) const {
    const auto& bs = blocks_[b];
    const int o = block_offset(b);
    const CMat& u = basis_.mat();
    CMat out = CMat::Zero(n_, n_);
    for (int r = 0; r < bs.m; ++r)
      out += u.col(o + i * bs.m + r) * u.col(o + j * bs.m + r).adjoint();
    return out;
  }

  /// All matrix units in block-major, row-major order.
  std::vector<CMat> units() const {
    std::vector<CMat> out;
    out.reserve(dim());
    for (int b = 0; b < block_count(); ++b)
      for (int i = 0; i < blocks_[b].k; ++i)
        for (int j = 0; j < blocks_[b].k; ++j) out.push_back(unit(b, i, j));
    return out;
  }

  /// Diagonal units e^{(b)}_{ii}, block-major.
  std::vector<HermitianMatrix> diagonal_units() const {
    std::vector<HermitianMatrix> out;
    for (int b = 0; b < block_count(); ++b)
      for (int i = 0; i < blocks_[b].k; ++i)
        out.push_back(HermitianMatrix(unit(b, i, i)));
    return out;
  }

  /// Minimal central projections z_b = sum_i e^{(b)}_{ii}.
  std::vector<HermitianMatrix> center_projections() const {
    std::vector<HermitianMatrix> out;
    for (int b = 0; b < block_count(); ++b) {
      CMat z = CMat::Zero(n_, n_);
      for (int i = 0; i < blocks_[b].k; ++i) z += unit(b, i, i);
      out.push_back(HermitianMatrix(z));
    }
    return out;
  }

  /// Embeds a dim-k_b square matrix into block b.
  CMat embed_block(int b, const CMat& x) const {
    const auto& bs = blocks_[b];
    if (x.rows() != bs.k)
      throw DimensionMismatch("embed_block: size mismatch");
    const int o = block_offset(b);
    const CMat& u = basis_.mat();
    // columns of the block, ordered (i, r) -> o + i*m + r
    CMat cols(n_, bs.k * bs.m);
    for (int i = 0; i < bs.k; ++i)
      for (int r = 0; r < bs.m; ++r)
        cols.col(i * bs.m + r) = u.col(o + i * bs.m + r);
    CMat big = CMat::Zero(bs.k * bs.m, bs.k * bs.m);
    for (int i = 0; i < bs.k; ++i)
      for (int j = 0; j < bs.k; ++j)
        for (int r = 0; r < bs.m; ++r) big(i * bs.m + r, j * bs.m + r) = x(i, j);
    return cols * big * cols.adjoint();
  }

  /// Element with the given block coefficient matrices (one per block).
  CMat assemble(const std::vector<CMat>& coeff) const {
    CMat out = CMat::Zero(n_, n_);
    for (int b = 0; b < block_count(); ++b) out += embed_block(b, coeff[b]);
    return out;
  }

  /// Block coefficient matrices of the nearest algebra element (exact for
  /// members): coeff^{(b)}_{ij} = <x e^{(b)}_{jj} basis-cols...> read off in
  /// the stored basis.
  std::vector<CMat> coefficients(const CMat& x) const {
    const CMat& u = basis_.mat();
    std::vector<CMat> out;
    for (int b = 0; b < block_count(); ++b) {
      const auto& bs = blocks_[b];
      const int o = block_offset(b);
      CMat c = CMat::Zero(bs.k, bs.k);
      for (int i = 0; i < bs.k; ++i)
        for (int j = 0; j < bs.k; ++j) {
          Complex acc = 0;
          for (int r = 0; r < bs.m; ++r)
            acc += u.col(o + i * bs.m + r).adjoint() * x *
                   u.col(o + j * bs.m + r);
          c(i, j) = acc / static_cast<double>(bs.m);
        }
      out.push_back(c);
    }
    return out;
  }

  /// The commutant inside the ambient matrix algebra, with its own canonical
  /// matrix-unit presentation: block (k, m) becomes (m, k).
  MatrixSubalgebra commutant() const {
    std::vector<BlockSpec> cb;
    cb.reserve(blocks_.size());
    for (const auto& b : blocks_) cb.push_back({b.m, b.k});
    // within each block permute (i, r) -> (r, i)
    CMat perm = CMat::Zero(n_, n_);
    for (int b = 0; b < block_count(); ++b) {
      const auto& bs = blocks_[b];
      const int o = block_offset(b);
      for (int i = 0; i < bs.k; ++i)
        for (int r = 0; r < bs.m; ++r)
          perm(o + i * bs.m + r, o + r * bs.k + i) = 1.0;
    }
    return MatrixSubalgebra(n_, std::move(cb),
                            UnitaryMatrix(basis_.mat() * perm));
  }

  /// Conjugated algebra u A u*.
  MatrixSubalgebra conjugated(const UnitaryMatrix& u) const {
    return MatrixSubalgebra(n_, blocks_,
                            UnitaryMatrix(u.mat() * basis_.mat()));
  }

  /// Isometry identifying the corner cut by the b-th minimal central
  /// projection with a small matrix algebra (columns of the stored basis).
  CMat corner_isometry(int b) const {
    const auto& bs = blocks_[b];
    const int o = block_offset(b);
    return basis_.mat().middleCols(o, bs.k * bs.m);
  }

  /// The compressed algebra z_b A z_b presented inside its corner.
  MatrixSubalgebra corner(int b) const {
    const auto& bs = blocks_[b];
    const int r = bs.k * bs.m;
    return MatrixSubalgebra(r, {bs}, UnitaryMatrix::id(r));
  }

  /// Max residual over the defining relations: unit algebra, adjoints,
  /// unitality, rank pattern.
  double invariant_residual() const {
    double worst = 0.0;
    CMat sum = CMat::Zero(n_, n_);
    for (int b = 0; b < block_count(); ++b) {
      const int k = blocks_[b].k;
      const CMat e01 = unit(b, 0, std::min(1, k - 1));
      const CMat e00 = unit(b, 0, 0);
      worst = std::max(worst, opnorm(e00 * e00 - e00));
      worst = std::max(worst, opnorm(e01.adjoint() -
                                     unit(b, std::min(1, k - 1), 0)));
      if (k > 1)
        worst = std::max(worst, opnorm(unit(b, 0, 1) * unit(b, 1, 0) - e00));
      for (int i = 0; i < k; ++i) sum += unit(b, i, i);
    }
    worst = std::max(worst, opnorm(sum - identity(n_)));
    return worst;
  }

 private:
  MatrixSubalgebra(int n, std::vector<BlockSpec> blocks, UnitaryMatrix basis)
      : n_(n), blocks_(std::move(blocks)), basis_(std::move(basis)) {}

  int n_;
  std::vector<BlockSpec> blocks_;
  UnitaryMatrix basis_;
};

/// Trace-orthogonal conditional expectation onto a subalgebra: the orthogonal
/// projection in the normalized-trace inner product <x,y> = tau(y* x).
/// Unital, positive, trace-preserving bimodule map.
class ConditionalExpectation {
 public:
  explicit ConditionalExpectation(const MatrixSubalgebra& target)
      : target_(target) {
    const int n = target.ambient_dim();
    for (int b = 0; b < target.block_count(); ++b) {
      const auto& bs = target.blocks()[b];
      const double scale =
          std::sqrt(static_cast<double>(n) / static_cast<double>(bs.m));
      for (int i = 0; i < bs.k; ++i)
        for (int j = 0; j < bs.k; ++j)
          onb_.push_back(scale * target.unit(b, i, j));
    }
  }

  CMat apply(const CMat& x) const {
    CMat out = CMat::Zero(x.rows(), x.cols());
    for (const auto& f : onb_) out += hs_inner(x, f) * f;
    return out;
  }

  const std::vector<CMat>& onb() const { return onb_; }
  const MatrixSubalgebra& target() const { return target_; }

 private:
  MatrixSubalgebra target_;
  std::vector<CMat> onb_;
};

struct SubalgebraDistance {
  double lower = 0.0;  // attained by a sampled norm-one witness
  double upper = 0.0;  // certified relaxation
  std::optional<std::pair<CMat, CMat>> witness;  // (x, E_C(x))
};

/// Haar-distributed unitary of the subalgebra, drawn per block by the
/// Ginibre + QR construction with the diagonal phase correction, embedded in
/// the ambient algebra.
inline UnitaryMatrix haar_unitary_in(const MatrixSubalgebra& b,
                                     Substream& rng) {
  std::vector<CMat> coeff;
  for (int bi = 0; bi < b.block_count(); ++bi) {
    const int k = b.blocks()[bi].k;
    CMat g(k, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) g(i, j) = rng.cgaussian();
    Eigen::HouseholderQR<CMat> qr(g);
    CMat q = qr.householderQ();
    const CMat r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < k; ++j) {
      const Complex d = r(j, j);
      const double a = std::abs(d);
      q.col(j) *= (a > 0 ? d / a : Complex(1, 0));
    }
    coeff.push_back(q);
  }
  return UnitaryMatrix(b.assemble(coeff), 1e-8);
}

namespace detail {

/// Hill-climb over the unitary group of B maximizing the objective, starting
/// from the given block coefficients. Used to tighten sampled lower bounds.
template <typename Objective>
double polish_unitary(const MatrixSubalgebra& b, std::vector<CMat> coeff,
                      const Objective& obj, Substream& rng, int iters) {
  double best = obj(b.assemble(coeff));
  double step = 0.3;
  for (int it = 0; it < iters; ++it) {
    std::vector<CMat> trial = coeff;
    for (int bi = 0; bi < b.block_count(); ++bi) {
      const int k = b.blocks()[bi].k;
      CMat g(k, k);
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) g(i, j) = rng.cgaussian();
      const HermitianMatrix h((g + g.adjoint()) / 2.0);
      trial[bi] = exp_ith(h, step).mat() * trial[bi];
    }
    const double v = obj(b.assemble(trial));
    if (v > best) {
      best = v;
      coeff = std::move(trial);
    } else {
      step *= 0.92;
      if (step < 1e-6) break;
    }
  }
  return best;
}

}  // namespace detail

/// Certified interval for sup over the unit ball of B of ||x - E_C(x)||.
/// The lower bound is attained by sampled extreme points (matrix units and
/// Haar unitaries of B, hill-climb polished); the upper bound is the smaller
/// of two relaxations valid for every norm-one x in B:
///   sqrt(N) * (Hilbert-Schmidt norm of (id - E_C)|B), and
///   the Cauchy-Schwarz bound sqrt(sum_u ||(id-E_C) f_u||^2) over a
///   trace-orthonormal basis (f_u) of B.
inline SubalgebraDistance one_sided_defect(const MatrixSubalgebra& b,
                                           const MatrixSubalgebra& c,
                                           int trials = 64,
                                           std::uint64_t seed = 0) {
  if (b.ambient_dim() != c.ambient_dim())
    throw DimensionMismatch("one_sided_defect: ambient dims differ");
  const int n = b.ambient_dim();
  const ConditionalExpectation ec(c);

  SubalgebraDistance out;
  const auto consider = [&](const CMat& x) {
    const CMat px = ec.apply(x);
    const double v = opnorm(x - px);
    if (v > out.lower) {
      out.lower = v;
      out.witness = std::make_pair(x, px);
    }
    return v;
  };

  // matrix units are norm-one extreme points
  for (const auto& u : b.units()) consider(u);

  Substream rng(seed, "defect-sampling");
  std::vector<CMat> best_coeff;
  double best_val = -1.0;
  for (int t = 0; t < trials; ++t) {
    std::vector<CMat> coeff;
    for (int bi = 0; bi < b.block_count(); ++bi) {
      const int k = b.blocks()[bi].k;
      CMat g(k, k);
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) g(i, j) = rng.cgaussian();
      Eigen::HouseholderQR<CMat> qr(g);
      CMat q = qr.householderQ();
      const CMat r = qr.matrixQR().triangularView<Eigen::Upper>();
      for (int j = 0; j < k; ++j) {
        const Complex d = r(j, j);
        const double a = std::abs(d);
        q.col(j) *= (a > 0 ? d / a : Complex(1, 0));
      }
      coeff.push_back(q);
    }
    const double v = consider(b.assemble(coeff));
    if (v > best_val) {
      best_val = v;
      best_coeff = coeff;
    }
  }
  if (!best_coeff.empty()) {
    Substream prng(seed, "defect-polish");
    const double polished = detail::polish_unitary(
        b, best_coeff,
        [&](const CMat& x) { return opnorm(x - ec.apply(x)); }, prng, 160);
    if (polished > out.lower) out.lower = polished;
  }

  // relaxation upper bounds
  const ConditionalExpectation eb(b);
  double hs_sq = 0.0;     // squared HS->HS norm via explicit map matrix
  double cs_sq = 0.0;     // Cauchy-Schwarz basis bound
  const int db = b.dim();
  CMat map(n * n, db);
  int col = 0;
  const double rootn = std::sqrt(static_cast<double>(n));
  for (const auto& f : eb.onb()) {
    const CMat g = f - ec.apply(f);
    cs_sq += std::pow(opnorm(g), 2);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        map(i * n + j, col) = g(i, j) / rootn;
    ++col;
  }
  Eigen::JacobiSVD<CMat> svd(map);
  hs_sq = svd.singularValues().size()
              ? std::pow(svd.singularValues()(0), 2)
              : 0.0;
  out.upper = std::min(std::sqrt(cs_sq),
                       rootn * std::sqrt(hs_sq));
  out.upper = std::max(out.upper, out.lower);
  return out;
}

/// Symmetrized subalgebra distance interval.
inline SubalgebraDistance dist_estimate(const MatrixSubalgebra& b,
                                        const MatrixSubalgebra& c,
                                        int trials = 64,
                                        std::uint64_t seed = 0) {
  const auto bc = one_sided_defect(b, c, trials, seed);
  const auto cb = one_sided_defect(c, b, trials, seed + 1);
  SubalgebraDistance out;
  out.lower = std::max(bc.lower, cb.lower);
  out.upper = std::max(bc.upper, cb.upper);
  out.witness = bc.lower >= cb.lower ? bc.witness : cb.witness;
  return out;
}

// ---------------------------------------------------------------------------
// Artin-Wedderburn normalization of a spanning set.

namespace detail {

inline CMat generic_hermitian_combo(const std::vector<CMat>& basis,
                                    int salt) {
  const Eigen::Index n = basis.empty() ? 0 : basis[0].rows();
  CMat z = CMat::Zero(n, n);
  for (std::size_t g = 0; g < basis.size(); ++g) {
    const double c = std::cos(0.7 + 1.3 * (salt + 1) * (g + 1));
    const double s = std::sin(1.1 + 0.9 * (salt + 1) * (g + 1));
    z += c * (basis[g] + basis[g].adjoint()) +
         s * Complex(0, 1) * (basis[g] - basis[g].adjoint());
  }
  return (z + z.adjoint()) / 2.0;
}

/// Groups ascending eigenvalues into clusters separated by more than tol.
inline std::vector<std::pair<int, int>> cluster_eigenvalues(const RVec& w,
                                                            double tol) {
  std::vector<std::pair<int, int>> groups;
  int start = 0;
  for (int i = 1; i <= w.size(); ++i) {
    if (i == w.size() || w(i) - w(i - 1) > tol) {
      groups.emplace_back(start, i);
      start = i;
    }
  }
  return groups;
}

}  // namespace detail

inline MatrixSubalgebra MatrixSubalgebra::from_span(
    int ambient_dim, const std::vector<CMat>& spanning, double tol) {
  const int n = ambient_dim;
  // orthonormal basis of the span (as vectors), then of its *-closure
  std::vector<CMat> gens;
  for (const auto& g : spanning) {
    gens.push_back(g);
    gens.push_back(g.adjoint());
  }
  gens.push_back(identity(n));
  CMat stacked(n * n, gens.size());
  for (std::size_t g = 0; g < gens.size(); ++g)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        stacked(i * n + j, g) = gens[g](i, j);
  CMat rb = range_basis(stacked, 1e-10);
  std::vector<CMat> sbasis;
  for (Eigen::Index cidx = 0; cidx < rb.cols(); ++cidx) {
    CMat m(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) m(i, j) = rb(i * n + j, cidx);
    sbasis.push_back(m);
  }

  // center: x in span with [x, s] = 0 for all basis elements s
  const int d = static_cast<int>(sbasis.size());
  CMat constraints(n * n * d, d);
  for (int g = 0; g < d; ++g) {
    for (int s = 0; s < d; ++s) {
      const CMat comm = sbasis[g] * sbasis[s] - sbasis[s] * sbasis[g];
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
          constraints(s * n * n + i * n + j, g) = comm(i, j);
    }
  }
  Eigen::JacobiSVD<CMat> svd(constraints, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double smax = sv.size() ? sv(0) : 0.0;
  std::vector<CMat> center;
  for (Eigen::Index cidx = svd.matrixV().cols() - 1; cidx >= 0; --cidx) {
    if (sv(cidx) > std::max(tol, 1e-9 * std::max(smax, 1.0))) break;
    CMat z = CMat::Zero(n, n);
    for (int g = 0; g < d; ++g) z += svd.matrixV()(g, cidx) * sbasis[g];
    center.push_back(z);
  }
  if (center.empty())
    throw InternalError("from_span: empty center (identity missing?)");

  for (int salt = 0; salt < 8; ++salt) {
    const CMat zc = detail::generic_hermitian_combo(center, salt);
    const auto zd = herm_eig(HermitianMatrix(zc));
    const auto groups = detail::cluster_eigenvalues(
        zd.eigenvalues, 1e-6 * std::max(1.0, opnorm(zc)));
    // central projections from clusters
    std::vector<CMat> zprojs;
    bool ok = true;
    for (const auto& [lo, hi] : groups) {
      const CMat v = zd.eigenvectors.mat().middleCols(lo, hi - lo);
      zprojs.push_back(v * v.adjoint());
    }
    std::vector<BlockSpec> blocks;
    CMat basis = CMat::Zero(n, n);
    int colpos = 0;
    for (const auto& z : zprojs) {
      // corner span: z s z for basis elements s
      std::vector<CMat> corner_span;
      for (const auto& s : sbasis) corner_span.push_back(z * s * z);
      CMat st(n * n, corner_span.size());
      for (std::size_t g = 0; g < corner_span.size(); ++g)
        for (Eigen::Index i = 0; i < n; ++i)
          for (Eigen::Index j = 0; j < n; ++j)
            st(i * n + j, g) = corner_span[g](i, j);
      const CMat crb = range_basis(st, 1e-8);
      const int dimb = static_cast<int>(crb.cols());
      const int k = static_cast<int>(std::lround(std::sqrt(double(dimb))));
      const int rz = static_cast<int>(std::lround(z.trace().real()));
      if (k * k != dimb || rz % k != 0) {
        ok = false;
        break;
      }
      const int m = rz / k;
      std::vector<CMat> cb;
      for (Eigen::Index cidx = 0; cidx < crb.cols(); ++cidx) {
        CMat mm(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
          for (Eigen::Index j = 0; j < n; ++j) mm(i, j) = crb(i * n + j, cidx);
        cb.push_back(mm);
      }
      // maximal abelian inside the corner block: generic hermitian element,
      // shifted by a multiple of z so the corner spectrum is separated from
      // the complement's zero eigenvalue
      CMat s1 = detail::generic_hermitian_combo(cb, salt);
      s1 += (3.0 * opnorm(s1) + 1.0) * z;
      const auto sd = herm_eig(HermitianMatrix(s1));
      // eigen-clusters restricted to range(z)
      std::vector<std::pair<double, CVec>> inz;
      for (Eigen::Index i = 0; i < sd.eigenvalues.size(); ++i) {
        const CVec v = sd.eigenvectors.mat().col(i);
        if ((z * v - v).norm() < 1e-6) inz.emplace_back(sd.eigenvalues(i), v);
      }
      if (static_cast<int>(inz.size()) != rz) {
        ok = false;
        break;
      }
      std::sort(inz.begin(), inz.end(),
                [](const auto& a, const auto& bb) { return a.first < bb.first; });
      RVec ws(rz);
      for (int i = 0; i < rz; ++i) ws(i) = inz[i].first;
      const auto cl = detail::cluster_eigenvalues(ws, 1e-6 * std::max(1.0, opnorm(s1)));
      if (static_cast<int>(cl.size()) != k) {
        ok = false;
        break;
      }
      std::vector<CMat> diag_units;
      for (const auto& [lo, hi] : cl) {
        if (hi - lo != m) {
          ok = false;
          break;
        }
        CMat p = CMat::Zero(n, n);
        for (int i = lo; i < hi; ++i)
          p += inz[i].second * inz[i].second.adjoint();
        diag_units.push_back(p);
      }
      if (!ok) break;
      // partial isometries e_{i1} via polar parts of e_ii s' e_11
      const CMat s2 = detail::generic_hermitian_combo(cb, salt + 3);
      std::vector<CMat> e_i1(k);
      e_i1[0] = diag_units[0];
      for (int i = 1; i < k; ++i) {
        const CMat t = diag_units[i] * s2 * diag_units[0];
        Eigen::JacobiSVD<CMat> tsvd(t, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& tsv = tsvd.singularValues();
        int rr = 0;
        while (rr < tsv.size() && tsv(rr) > 1e-8 * std::max(tsv(0), 1.0)) ++rr;
        if (rr != m) {
          ok = false;
          break;
        }
        e_i1[i] = tsvd.matrixU().leftCols(m) * tsvd.matrixV().leftCols(m).adjoint();
      }
      if (!ok) break;
      // basis columns: onb of range(e_11), then v_{ir} = e_{i1} v_{1r}
      const CMat v1 = range_basis(diag_units[0], 1e-8);
      if (v1.cols() != m) {
        ok = false;
        break;
      }
      for (int i = 0; i < k; ++i)
        for (int r = 0; r < m; ++r) basis.col(colpos++) = e_i1[i] * v1.col(r);
      blocks.push_back({k, m});
    }
    if (!ok || colpos != n) continue;
    // orthonormality check and final validation
    if (opnorm(basis.adjoint() * basis - identity(n)) > 1e-7) continue;
    // re-orthonormalize mildly to absorb fp drift
    Eigen::HouseholderQR<CMat> qr(basis);
    CMat q = qr.householderQ();
    const CMat r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j) {
      const Complex dd = r(j, j);
      const double a = std::abs(dd);
      q.col(j) *= (a > 0 ? dd / a : Complex(1, 0));
    }
    auto alg = MatrixSubalgebra(n, blocks, UnitaryMatrix(q));
    // confirm the span matches: every generator reproduced by coefficients
    double worst = 0.0;
    for (const auto& g : spanning) {
      const CMat back = alg.assemble(alg.coefficients(g));
      worst = std::max(worst, opnorm(back - g));
    }
    if (worst > std::max(tol, 1e-7)) continue;
    return alg;
  }
  throw InternalError("from_span: could not normalize spanning set");
}

}  // namespace afflow
