#pragma once

#include <cmath>
#include <vector>

#include "afflow/matrix.hpp"
#include "afflow/subalgebra.hpp"

namespace afflow {

/// The inner flow t -> Ad e^{itH} generated by a Hermitian H, with its
/// eigendecomposition cached so evolution at any time is two dense products.
class InnerFlow {
 public:
  explicit InnerFlow(HermitianMatrix h)
      : h_(std::move(h)), eig_(herm_eig(h_)) {}

  const HermitianMatrix& hamiltonian() const { return h_; }
  Eigen::Index dim() const { return h_.dim(); }
  const SpectralDecomposition& eig() const { return eig_; }

  UnitaryMatrix unitary(double t) const {
    const CMat& v = eig_.eigenvectors.mat();
    CVec ph(eig_.eigenvalues.size());
    for (Eigen::Index i = 0; i < ph.size(); ++i)
      ph(i) = std::exp(Complex(0.0, t * eig_.eigenvalues(i)));
    return UnitaryMatrix(v * ph.asDiagonal() * v.adjoint(), 1e-9);
  }

  /// alpha_t(x) = e^{itH} x e^{-itH}.
  CMat evolve(double t, const CMat& x) const {
    const CMat& v = eig_.eigenvectors.mat();
    CMat xt = v.adjoint() * x * v;
    for (Eigen::Index a = 0; a < xt.rows(); ++a)
      for (Eigen::Index b = 0; b < xt.cols(); ++b)
        xt(a, b) *= std::exp(
            Complex(0.0, t * (eig_.eigenvalues(a) - eig_.eigenvalues(b))));
    return v * xt * v.adjoint();
  }

  /// Generator delta(x) = i[H, x].
  CMat derivation(const CMat& x) const {
    return Complex(0, 1) * (h_.mat() * x - x * h_.mat());
  }

  /// The flow-conjugated subalgebra alpha_t(B).
  MatrixSubalgebra evolve_algebra(double t, const MatrixSubalgebra& b) const {
    return b.conjugated(unitary(t));
  }

 private:
  HermitianMatrix h_;
  SpectralDecomposition eig_;
};

/// Quadrature representation of the dilated standard mollifier
///   f_n(t) = f(t/n)/n,  f(t) = c exp(-1/(1-t^2)) on (-1,1),  integral 1.
/// The total variation of f is 2 max f, so the L1 norm of f_n' is the base
/// value divided by n exactly.
class BumpKernel {
 public:
  /// integral of exp(-1/(1-t^2)) over (-1,1)
  static constexpr double kBumpMass = 0.44399381616807865;
  /// 2/(e * kBumpMass) = total variation of the normalized base bump
  static constexpr double kBaseDerivL1 = 1.6571376797382131;

  explicit BumpKernel(int scale = 1, int base_nodes = 129)
      : scale_(scale), base_nodes_(base_nodes) {
    if (scale < 1) throw DimensionMismatch("BumpKernel: scale must be >= 1");
    build(base_nodes, nodes_, weights_);
    build(2 * base_nodes + 1, nodes2_, weights2_);
  }

  int scale() const { return scale_; }
  double support_radius() const { return static_cast<double>(scale_); }
  double deriv_l1() const { return kBaseDerivL1 / scale_; }
  const std::vector<double>& nodes() const { return nodes_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& nodes_fine() const { return nodes2_; }
  const std::vector<double>& weights_fine() const { return weights2_; }
  int base_node_count() const { return base_nodes_; }

  BumpKernel rescaled(int new_scale) const {
    return BumpKernel(new_scale, base_nodes_);
  }

 private:
  void build(int m, std::vector<double>& nodes, std::vector<double>& weights) {
    // Gauss-Legendre nodes/weights on [-1,1] by Newton on Legendre P_m
    nodes.resize(m);
    weights.resize(m);
    for (int i = 0; i < m; ++i) {
      double x = std::cos(M_PI * (i + 0.75) / (m + 0.5));
      double pp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= m; ++k) {
          const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        pp = m * (x * p1 - p0) / (x * x - 1.0);
        const double dx = p1 / pp;
        x -= dx;
        if (std::abs(dx) < 1e-15) break;
      }
      nodes[m - 1 - i] = x;
      weights[m - 1 - i] = 2.0 / ((1.0 - x * x) * pp * pp);
    }
    // weight by the bump, dilate, renormalize so the weights sum to one
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
      const double t = nodes[i];
      const double f = std::abs(t) < 1.0 ? std::exp(-1.0 / (1.0 - t * t)) : 0.0;
      weights[i] *= f;
      total += weights[i];
      nodes[i] = t * scale_;
    }
    for (auto& w : weights) w /= total;
  }

  int scale_;
  int base_nodes_;
  std::vector<double> nodes_, weights_;
  std::vector<double> nodes2_, weights2_;
};

namespace detail {

inline CMat smooth_with(const InnerFlow& flow, const std::vector<double>& ts,
                        const std::vector<double>& ws, const CMat& x) {
  const CMat& v = flow.eig().eigenvectors.mat();
  const RVec& lam = flow.eig().eigenvalues;
  CMat xt = v.adjoint() * x * v;
  const Eigen::Index n = xt.rows();
  CMat w = CMat::Zero(n, n);
  for (std::size_t j = 0; j < ts.size(); ++j)
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = 0; b < n; ++b)
        w(a, b) += ws[j] * std::exp(Complex(0.0, ts[j] * (lam(a) - lam(b))));
  return v * w.cwiseProduct(xt) * v.adjoint();
}

}  // namespace detail

/// The smoothing alpha_f(x) = integral of f(t) alpha_t(x) dt, evaluated by
/// quadrature in the eigenbasis of H. Unital and completely positive (a
/// convex combination of automorphisms).
inline CMat smooth(const InnerFlow& flow, const BumpKernel& k, const CMat& x) {
  return detail::smooth_with(flow, k.nodes(), k.weights(), x);
}

/// A posteriori quadrature error estimate by node doubling.
inline double smooth_error(const InnerFlow& flow, const BumpKernel& k,
                           const CMat& x) {
  const CMat a = detail::smooth_with(flow, k.nodes(), k.weights(), x);
  const CMat b = detail::smooth_with(flow, k.nodes_fine(), k.weights_fine(), x);
  return opnorm(a - b);
}

/// Norm bound for the smoothed derivation: ||delta(alpha_f(x))|| is at most
/// this times ||x|| (up to quadrature error).
inline double smoothed_derivation_bound(const BumpKernel& k) {
  return k.deriv_l1();
}

inline std::vector<double> uniform_grid(int points, double lo = 0.0,
                                        double hi = 1.0) {
  std::vector<double> g(points);
  for (int i = 0; i < points; ++i)
    g[i] = points == 1 ? lo : lo + (hi - lo) * i / (points - 1);
  return g;
}

/// Residual of the normalizer condition [H, B] inside B; zero means the flow
/// maps B onto B for every t.
inline double normalizer_residual(const CMat& h, const MatrixSubalgebra& b) {
  const ConditionalExpectation eb(b);
  double worst = 0.0;
  for (const auto& u : b.units()) {
    const CMat c = h * u - u * h;
    worst = std::max(worst, opnorm(c - eb.apply(c)));
  }
  return worst;
}

/// Residual of elementwise fixing: max over units of ||[H, u]||; zero means
/// the flow is the identity on the subalgebra for every t.
inline double fixes_residual(const CMat& h, const MatrixSubalgebra& d) {
  double worst = 0.0;
  for (const auto& u : d.units())
    worst = std::max(worst, opnorm(h * u - u * h));
  return worst;
}

namespace detail {

/// Rigorous rate bound for the motion of alpha_t(B): twice the norm of H
/// with its B-preserving part removed. The trivial bound 2||H|| is useless
/// at the thresholds in play; removing the expectation onto B and its
/// commutant leaves only the part that actually moves the algebra.
inline double motion_rate(const CMat& h, const MatrixSubalgebra& b) {
  const ConditionalExpectation eb(b);
  const ConditionalExpectation ec(b.commutant());
  const CMat res = h - eb.apply(h) - ec.apply(h) +
                   ntrace(h) * identity(h.rows());
  return 2.0 * opnorm(res);
}

}  // namespace detail

/// Interval-valued sup over the grid of dist(alpha_t(B), B). The upper bound
/// carries a rigorous Lipschitz pad (mesh times the motion rate of B under
/// the flow) for the sup over the continuum; after the grid pass a short
/// Chebyshev refinement is run near the argmax.
inline SubalgebraDistance invariance_defect(const InnerFlow& flow,
                                            const MatrixSubalgebra& b,
                                            const std::vector<double>& grid,
                                            int trials = 32,
                                            std::uint64_t seed = 0) {
  if (grid.empty())
    throw DimensionMismatch("invariance_defect: empty grid");
  SubalgebraDistance out;
  double mesh = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    mesh = std::max(mesh, grid[i] - grid[i - 1]);
  double arg = grid[0];
  double rate = 0.0;
  for (const double t : grid) {
    const auto bt = flow.evolve_algebra(t, b);
    const auto d = dist_estimate(bt, b, trials, seed);
    if (d.lower > out.lower) {
      out.lower = d.lower;
      arg = t;
      out.witness = d.witness;
    }
    out.upper = std::max(out.upper, d.upper);
    rate = std::max(rate, detail::motion_rate(flow.hamiltonian().mat(), bt));
  }
  // Chebyshev refinement near the argmax
  if (grid.size() > 1) {
    for (int j = 1; j <= 6; ++j) {
      const double t =
          arg + mesh * std::cos(M_PI * j / 7.0);
      if (t < grid.front() || t > grid.back()) continue;
      const auto d = dist_estimate(flow.evolve_algebra(t, b), b, trials, seed);
      out.lower = std::max(out.lower, d.lower);
      out.upper = std::max(out.upper, d.upper);
    }
  }
  out.upper += rate * mesh;
  return out;
}

/// Interval-valued sup over the grid and the unit ball of D of
/// ||alpha_t(x) - x||. Lower bound from sampled extreme points, upper bound
/// from the same certified relaxations as the one-sided defect, plus the
/// Lipschitz pad.
inline SubalgebraDistance pointwise_defect(const InnerFlow& flow,
                                           const MatrixSubalgebra& d,
                                           const std::vector<double>& grid,
                                           int trials = 32,
                                           std::uint64_t seed = 0) {
  SubalgebraDistance out;
  const int n = d.ambient_dim();
  const double rootn = std::sqrt(static_cast<double>(n));
  const ConditionalExpectation ed(d);
  double mesh = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    mesh = std::max(mesh, grid[i] - grid[i - 1]);

  Substream rng(seed, "pointwise-sampling");
  std::vector<CMat> samples = d.units();
  for (int t = 0; t < trials; ++t)
    samples.push_back(haar_unitary_in(d, rng).mat());

  double rate = 0.0;
  const ConditionalExpectation edc(d.commutant());
  for (const double t : grid) {
    for (const auto& x : samples)
      out.lower = std::max(out.lower, opnorm(flow.evolve(t, x) - x));
    // certified relaxations of sup over the unit ball
    double cs_sq = 0.0;
    CMat map(n * n, d.dim());
    int col = 0;
    for (const auto& f : ed.onb()) {
      const CMat g = flow.evolve(t, f) - f;
      cs_sq += std::pow(opnorm(g), 2);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
          map(i * n + j, col) = g(i, j) / rootn;
      ++col;
    }
    Eigen::JacobiSVD<CMat> svd(map);
    const double hs = svd.singularValues().size() ? svd.singularValues()(0)
                                                  : 0.0;
    out.upper =
        std::max(out.upper, std::min(std::sqrt(cs_sq), rootn * hs));
    // motion-rate pad: only the part of H outside D's commutant moves D
    const CMat hback = flow.evolve(-t, flow.hamiltonian().mat());
    rate = std::max(rate, 2.0 * opnorm(hback - edc.apply(hback)));
  }
  out.upper = std::max(out.upper, out.lower);
  out.upper += rate * mesh;
  return out;
}

}  // namespace afflow
