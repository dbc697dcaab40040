#include <catch_amalgamated.hpp>

#include "afflow/json_io.hpp"
#include "afflow/matrix.hpp"
#include "afflow/rng.hpp"

using namespace afflow;

namespace {

CMat random_matrix(int n, Substream& rng) {
  CMat x(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) x(i, j) = rng.cgaussian();
  return x;
}

HermitianMatrix random_hermitian(int n, Substream& rng) {
  const CMat x = random_matrix(n, rng);
  return HermitianMatrix((x + x.adjoint()) / 2.0);
}

CMat diag(std::initializer_list<Complex> d) {
  CMat x = CMat::Zero(d.size(), d.size());
  int i = 0;
  for (const auto v : d) x(i, i) = v, ++i;
  return x;
}

// step-doubling oracle for the unitary exponential: fourth-order Taylor for
// a tiny step, then 2^10 squarings
CMat exp_ith_oracle(const CMat& h, double t) {
  const int squarings = 10;
  const double dt = t / std::pow(2.0, squarings);
  const Eigen::Index n = h.rows();
  CMat a = Complex(0, dt) * h;
  CMat u = identity(n) + a + a * a / 2.0 + a * a * a / 6.0 +
           a * a * a * a / 24.0;
  for (int s = 0; s < squarings; ++s) u = u * u;
  return u;
}

double power_iteration_opnorm(const CMat& x, Substream& rng) {
  const CMat g = x.adjoint() * x;
  CVec v(x.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.cgaussian();
  v.normalize();
  double lam = 0.0;
  for (int it = 0; it < 2000; ++it) {
    const CVec w = g * v;
    const double nl = w.norm();
    if (nl == 0) return 0.0;
    v = w / nl;
    lam = nl;
  }
  return std::sqrt(lam);
}

}  // namespace

TEST_CASE("hermitian eigendecomposition") {
  SECTION("diagonal input sorts eigenvalues") {
    const auto sd = herm_eig(HermitianMatrix(diag({3.0, 1.0, 2.0})));
    REQUIRE(sd.eigenvalues(0) == Catch::Approx(1.0));
    REQUIRE(sd.eigenvalues(1) == Catch::Approx(2.0));
    REQUIRE(sd.eigenvalues(2) == Catch::Approx(3.0));
  }
  SECTION("symmetric flip") {
    CMat x(2, 2);
    x << 0, 1, 1, 0;
    const auto sd = herm_eig(HermitianMatrix(x));
    REQUIRE(sd.eigenvalues(0) == Catch::Approx(-1.0));
    REQUIRE(sd.eigenvalues(1) == Catch::Approx(1.0));
  }
  SECTION("reconstruction residual on random input") {
    Substream rng(7, "herm-eig");
    const auto h = random_hermitian(8, rng);
    const auto sd = herm_eig(h);
    const CMat& v = sd.eigenvectors.mat();
    const CMat rebuilt =
        v * sd.eigenvalues.asDiagonal().toDenseMatrix().cast<Complex>() *
        v.adjoint();
    REQUIRE(opnorm(rebuilt - h.mat()) <= 1e-12 * std::max(1.0, opnorm(h.mat())));
  }
}

TEST_CASE("unitary exponential") {
  SECTION("t = 0 gives the identity") {
    Substream rng(3, "expm");
    const auto h = random_hermitian(5, rng);
    REQUIRE(opnorm(exp_ith(h, 0.0).mat() - identity(5)) < 1e-12);
  }
  SECTION("diagonal case") {
    const auto u = exp_ith(HermitianMatrix(diag({1.0, -1.0})), M_PI / 2);
    REQUIRE(std::abs(u.mat()(0, 0) - Complex(0, 1)) < 1e-12);
    REQUIRE(std::abs(u.mat()(1, 1) - Complex(0, -1)) < 1e-12);
  }
  SECTION("step-doubling oracle") {
    Substream rng(11, "expm-oracle");
    const auto h = random_hermitian(6, rng);
    const CMat want = exp_ith_oracle(h.mat(), 0.3);
    REQUIRE(opnorm(exp_ith(h, 0.3).mat() - want) <= 1e-8);
  }
  SECTION("group law") {
    Substream rng(5, "expm-group");
    const auto h = random_hermitian(4, rng);
    for (const auto [s, t] : {std::pair{0.3, 0.7}, {-2.0, 9.5}, {10.0, -10.0}}) {
      const CMat lhs = exp_ith(h, s).mat() * exp_ith(h, t).mat();
      REQUIRE(opnorm(lhs - exp_ith(h, s + t).mat()) <= 1e-10);
    }
  }
}

TEST_CASE("polar decomposition") {
  Substream rng(13, "polar");
  SECTION("unitary input is its own unitary factor") {
    const auto u = exp_ith(random_hermitian(4, rng), 1.0);
    const auto pf = polar_factors(u.mat());
    REQUIRE(opnorm(pf.unitary.mat() - u.mat()) <= 1e-10);
    REQUIRE(opnorm(pf.positive.mat() - identity(4)) <= 1e-10);
  }
  SECTION("positive scalar input") {
    const auto pf = polar_factors(2.0 * identity(3));
    REQUIRE(opnorm(pf.unitary.mat() - identity(3)) <= 1e-12);
    REQUIRE(opnorm(pf.positive.mat() - 2.0 * identity(3)) <= 1e-12);
  }
  SECTION("reconstruction, positive factor on the left") {
    const auto u = exp_ith(random_hermitian(5, rng), 0.7);
    const auto k = random_hermitian(5, rng);
    const CMat z = u.mat() * (identity(5) + 0.1 * k.mat());
    const auto pf = polar_factors(z);
    REQUIRE(opnorm(pf.positive.mat() * pf.unitary.mat() - z) <= 1e-10);
  }
  SECTION("near-unitary input stays near its unitary factor") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto u = exp_ith(random_hermitian(4, rng), 0.5);
      const auto k = random_hermitian(4, rng);
      const double eps = 0.02 * (trial + 1.0) / 20.0;
      const CMat z = u.mat() * (identity(4) + eps * k.mat() / opnorm(k.mat()));
      const auto pf = polar_factors(z);
      const double defect = opnorm(z.adjoint() * z - identity(4));
      REQUIRE(opnorm(pf.unitary.mat() - z) <= defect);
    }
  }
  SECTION("near-singular input is rejected with the singular value") {
    CMat z = identity(3);
    z(2, 2) = 1e-12;
    REQUIRE_THROWS_AS(polar_factors(z), NearSingular);
  }
}

TEST_CASE("spectral projection") {
  SECTION("diagonal case") {
    const auto p = spectral_projection(HermitianMatrix(diag({0.0, 1.0})),
                                       Interval{0.5, 1.5});
    REQUIRE(opnorm(p.mat() - diag({0.0, 1.0})) <= 1e-12);
  }
  SECTION("projection input is reproduced") {
    Substream rng(17, "specproj");
    const auto h = random_hermitian(5, rng);
    const auto p0 = spectral_projection(h, Interval::at_least(0.0));
    const auto p1 =
        spectral_projection(HermitianMatrix(p0.mat()), Interval::at_least(0.5));
    REQUIRE(opnorm(p1.mat() - p0.mat()) <= 1e-10);
  }
  SECTION("disjoint intervals give orthogonal projections") {
    Substream rng(19, "specproj-orth");
    for (int trial = 0; trial < 10; ++trial) {
      const auto h = random_hermitian(6, rng);
      const auto sd = herm_eig(h);
      const double cut = (sd.eigenvalues(2) + sd.eigenvalues(3)) / 2;
      const auto lo = spectral_projection(h, Interval{-1e9, cut});
      const auto hi = spectral_projection(h, Interval{cut, 1e9});
      REQUIRE(opnorm(lo.mat() * hi.mat()) <= 1e-10);
      REQUIRE(opnorm(lo.mat() + hi.mat() - identity(6)) <= 1e-10);
    }
  }
  SECTION("eigenvalue in the guard band is rejected") {
    REQUIRE_THROWS_AS(spectral_projection(HermitianMatrix(diag({0.5, 1.0})),
                                          Interval{0.5 + 1e-8, 2.0}),
                      GapTooSmall);
  }
}

TEST_CASE("contour projection") {
  SECTION("identity inside the contour") {
    const CMat p = riesz_projection(identity(3), Complex(1, 0), 0.5, 32);
    REQUIRE(opnorm(p - identity(3)) <= 1e-10);
  }
  SECTION("spectrum outside the contour") {
    const CMat p =
        riesz_projection(CMat::Zero(3, 3), Complex(1, 0), 0.5, 64);
    REQUIRE(opnorm(p) <= 1e-10);
  }
  SECTION("agrees with the eigendecomposition route on gapped input") {
    Substream rng(23, "riesz");
    for (int trial = 0; trial < 5; ++trial) {
      auto h = random_hermitian(6, rng);
      // push spectrum into [0,1] and pick a contour around the top cluster
      const auto sd = herm_eig(h);
      const double lo = sd.eigenvalues(0), hi = sd.eigenvalues(5);
      const HermitianMatrix x((h.mat() - lo * identity(6)) / (hi - lo));
      const auto sx = herm_eig(x);
      const double cut = (sx.eigenvalues(2) + sx.eigenvalues(3)) / 2;
      if (sx.eigenvalues(3) - sx.eigenvalues(2) < 0.25) continue;
      const CMat via_contour =
          riesz_projection(x.mat(), Complex((cut + 1.0) / 2, 0),
                           (1.0 - cut) / 2 + 0.1, 64);
      const auto via_eig = spectral_projection(x, Interval{cut, 2.0});
      REQUIRE(opnorm(via_contour - via_eig.mat()) <= 1e-8);
    }
  }
  SECTION("resolvent blow-up is reported") {
    REQUIRE_THROWS_AS(
        riesz_projection(identity(3), Complex(1, 0) + Complex(0.5, 0), 0.5,
                         16),
        ContourHitsSpectrum);
  }
}

TEST_CASE("matrix functions") {
  SECTION("identity function") {
    Substream rng(29, "matfun");
    const auto h = random_hermitian(5, rng);
    const auto y = matrix_function(h, [](double t) { return t; });
    REQUIRE(opnorm(y.mat() - h.mat()) <= 1e-10);
  }
  SECTION("square on a diagonal") {
    const auto y = matrix_function(HermitianMatrix(diag({1.0, 2.0})),
                                   [](double t) { return t * t; });
    REQUIRE(opnorm(y.mat() - diag({1.0, 4.0})) <= 1e-12);
  }
  SECTION("band function equals the pointwise eigenvalue oracle") {
    // spectrum split into [0, eps] and [1-eps, 1]
    const CMat d = diag({0.01, 0.05, 0.96, 0.99});
    Substream rng(31, "matfun-band");
    const auto u = exp_ith(random_hermitian(4, rng), 0.8);
    const HermitianMatrix x(u.mat() * d * u.adjoint());
    const auto g1 = [](double t) {
      if (t <= 1.0 / 3.0) return 0.0;
      if (t >= 2.0 / 3.0) return t;
      const double s = 3 * (t - 1.0 / 3.0);
      return t * (3 * s * s - 2 * s * s * s);
    };
    const auto y = matrix_function(x, g1);
    CMat want = CMat::Zero(4, 4);
    for (int i = 0; i < 4; ++i)
      want += g1(d(i, i).real()) * u.mat().col(i) * u.mat().col(i).adjoint();
    REQUIRE(opnorm(y.mat() - want) <= 1e-10);
  }
}

TEST_CASE("operator norm") {
  REQUIRE(opnorm(identity(4)) == Catch::Approx(1.0));
  REQUIRE(opnorm(diag({3.0, -4.0})) == Catch::Approx(4.0));
  SECTION("power iteration oracle") {
    Substream rng(37, "opnorm");
    for (int trial = 0; trial < 5; ++trial) {
      const CMat x = random_matrix(7, rng);
      Substream orng(41 + trial, "opnorm-oracle");
      REQUIRE(opnorm(x) ==
              Catch::Approx(power_iteration_opnorm(x, orng)).epsilon(1e-8));
    }
  }
}

TEST_CASE("matrix serialization round-trip") {
  Substream rng(43, "serialize");
  const CMat x = random_matrix(6, rng);
  const CMat back = matrix_from_json(matrix_to_json(x));
  REQUIRE(opnorm(back - x) <= 1e-15 * opnorm(x));
}
