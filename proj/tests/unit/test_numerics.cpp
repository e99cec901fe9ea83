#include "speedvae/numerics.hpp"

#include <cmath>
#include <set>

#include <gtest/gtest.h>

using namespace speedvae;

namespace {

Matrix random_spd(int n, RngStream& rng, double jitter = 0.5) {
  Matrix a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  return a * a.transpose() + jitter * Matrix::Identity(n, n);
}

}  // namespace

TEST(Cholesky, HandWorkedThreeByThree) {
  Matrix m(3, 3);
  m << 4, 12, -16, 12, 37, -43, -16, -43, 98;
  Matrix expected(3, 3);
  expected << 2, 0, 0, 6, 1, 0, -8, 5, 3;
  EXPECT_LT((cholesky_lower(m) - expected).norm(), 1e-12);
  EXPECT_NEAR(cholesky(m).log_det(), std::log(2.0 * 1.0 * 3.0), 1e-12);
}

TEST(Cholesky, ReconstructsRandomMatrices) {
  RngStream rng(7, 0);
  for (int n = 1; n <= 12; ++n) {
    const Matrix m = random_spd(n, rng);
    const Matrix l = cholesky(m).realized();
    EXPECT_LT((l * l.transpose() - m).norm(), 1e-10 * m.norm());
    EXPECT_TRUE(l.isLowerTriangular());
  }
}

TEST(Cholesky, RejectsIndefinite) {
  Matrix m(2, 2);
  m << 1, 2, 2, 1;
  try {
    cholesky(m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotPositiveDefinite);
  }
  EXPECT_THROW(cholesky(Matrix::Zero(3, 3)), Error);
}

TEST(Cholesky, RejectsAsymmetric) {
  Matrix m(2, 2);
  m << 2, 1, 0, 2;
  EXPECT_THROW(cholesky(m), Error);
}

TEST(LowerTriangularFactor, PackedRoundTrip) {
  RngStream rng(3, 1);
  const std::size_t n = 5;
  Vector packed(LowerTriangularFactor::packed_size(n));
  for (Eigen::Index i = 0; i < packed.size(); ++i) packed(i) = rng.normal();
  const auto f = LowerTriangularFactor::from_packed(n, packed);
  EXPECT_LT((f.packed() - packed).norm(), 1e-15);
  const Matrix l = f.realized();
  EXPECT_TRUE(l.isLowerTriangular());
  // Strict-lower entries come first, row by row.
  EXPECT_DOUBLE_EQ(l(1, 0), packed(0));
  EXPECT_DOUBLE_EQ(l(2, 0), packed(1));
  EXPECT_DOUBLE_EQ(l(2, 1), packed(2));
  EXPECT_DOUBLE_EQ(l(0, 0), std::exp(packed(10)));
  EXPECT_NEAR(f.log_det(), std::log(l.diagonal().prod()), 1e-12);
  const auto g = LowerTriangularFactor::from_realized(l);
  EXPECT_LT((g.packed() - packed).norm(), 1e-12);
}

TEST(LowerTriangularFactor, IdentityDefault) {
  const LowerTriangularFactor f(4);
  EXPECT_TRUE(f.realized().isIdentity(0.0));
  EXPECT_EQ(f.log_det(), 0.0);
}

TEST(SymmetricEigen, MatchesEigenSolver) {
  RngStream rng(11, 0);
  for (int n : {1, 2, 5, 30}) {
    const Matrix m = random_spd(n, rng);
    const SymmetricEigen ours = symmetric_eigen(m, true);
    const Eigen::SelfAdjointEigenSolver<Matrix> ref(m);
    EXPECT_LT((ours.values - ref.eigenvalues()).norm(), 1e-9 * ref.eigenvalues().maxCoeff());
    const Matrix recon = ours.vectors * ours.values.asDiagonal() * ours.vectors.transpose();
    EXPECT_LT((recon - m).norm(), 1e-9 * m.norm());
  }
}

TEST(ConditionNumber, DiagonalAndRotated) {
  Vector d(4);
  d << 1.0, 3.0, 7.0, 100.0;
  EXPECT_NEAR(condition_number(Matrix(d.asDiagonal())), 100.0, 1e-10);
  const double c = std::cos(0.3), s = std::sin(0.3);
  Matrix r(2, 2);
  r << c, -s, s, c;
  Vector d2(2);
  d2 << 2.0, 50.0;
  EXPECT_NEAR(condition_number(r * d2.asDiagonal() * r.transpose()), 25.0, 1e-9);
}

TEST(GaussianLogpdf, MatchesDirectFormula) {
  RngStream rng(5, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + trial % 6;
    const Matrix cov = random_spd(n, rng);
    const Vector mean = sample_standard_normal(n, rng);
    const Vector x = sample_standard_normal(n, rng);
    const Vector r = x - mean;
    const double direct = -0.5 * r.dot(cov.inverse() * r) - 0.5 * std::log(cov.determinant()) -
                          0.5 * n * std::log(2.0 * M_PI);
    EXPECT_NEAR(gaussian_logpdf(x, mean, cholesky(cov)), direct, 1e-10);
    EXPECT_NEAR(gaussian_logpdf_lower(x, mean, cholesky_lower(cov)), direct, 1e-10);
  }
}

TEST(KlGaussians, UnivariateAndIdentity) {
  Vector m1(1), m2(1);
  m1 << 0.3;
  m2 << -1.1;
  Matrix c1(1, 1), c2(1, 1);
  c1 << 0.49;
  c2 << 2.25;
  const double expected = std::log(1.5 / 0.7) + (0.49 + 1.4 * 1.4) / (2 * 2.25) - 0.5;
  EXPECT_NEAR(kl_gaussians(m1, c1, m2, c2), expected, 1e-12);
  RngStream rng(9, 0);
  const Matrix c = random_spd(4, rng);
  const Vector m = sample_standard_normal(4, rng);
  EXPECT_NEAR(kl_gaussians(m, c, m, c), 0.0, 1e-12);
}

TEST(KlGaussians, NonNegativeOnRandomPairs) {
  RngStream rng(10, 0);
  for (int t = 0; t < 50; ++t) {
    const Matrix c1 = random_spd(3, rng), c2 = random_spd(3, rng);
    EXPECT_GE(kl_gaussians(sample_standard_normal(3, rng), c1, sample_standard_normal(3, rng), c2), 0.0);
  }
}

TEST(LogAbsDet, SignAndMagnitude) {
  Matrix m(2, 2);
  m << 0, 2, 3, 0;
  const SignedLogDet r = log_abs_det(m);
  EXPECT_NEAR(r.log_abs, std::log(6.0), 1e-14);
  EXPECT_EQ(r.sign, -1);
}

TEST(LogSumExp, StableForLargeInputs) {
  Vector v(3);
  v << 1000.0, 1000.0, 1000.0;
  EXPECT_NEAR(log_sum_exp(v), 1000.0 + std::log(3.0), 1e-12);
  Vector w(2);
  w << -1e4, 0.0;
  EXPECT_NEAR(log_sum_exp(w), 0.0, 1e-12);
}

TEST(RngStream, ReplaysAndSeparatesStreams) {
  RngStream a(42, 1), b(42, 1), c(42, 2);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 100; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    seen.insert(x);
    EXPECT_NE(x, c());
  }
  EXPECT_EQ(seen.size(), 100u);
  RngStream d(42, 1);
  EXPECT_EQ(d.derive(3)(), RngStream(42, 1).derive(3)());
}

TEST(RngStream, NormalMoments) {
  RngStream rng(1, 0);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 1.0, 4.0 * std::sqrt(2.0 / n));
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}
