#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>

#include <Eigen/Dense>

#include "speedvae/error.hpp"

namespace speedvae {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Lower-triangular matrix with a strictly positive diagonal. The diagonal is
/// held in log-space so that any real parameter vector maps to a valid factor.
class LowerTriangularFactor {
 public:
  LowerTriangularFactor() = default;
  explicit LowerTriangularFactor(std::size_t dim);  // identity

  /// Takes a realized lower-triangular matrix; the diagonal must be positive.
  static LowerTriangularFactor from_realized(const Matrix& lower);

  /// Packed layout: row-major strictly-lower entries, then log-diagonal.
  static LowerTriangularFactor from_packed(std::size_t dim, const Vector& packed);
  Vector packed() const;
  static std::size_t packed_size(std::size_t dim) { return dim * (dim + 1) / 2; }

  std::size_t dim() const { return dim_; }
  Matrix realized() const;
  const Vector& log_diagonal() const { return log_diag_; }
  Vector& log_diagonal() { return log_diag_; }
  double strict_lower(std::size_t i, std::size_t j) const { return raw_(i, j); }
  double& strict_lower(std::size_t i, std::size_t j) { return raw_(i, j); }

  double log_det() const { return log_diag_.sum(); }

 private:
  std::size_t dim_ = 0;
  Matrix raw_;  // only the strictly lower part is meaningful
  Vector log_diag_;
};

/// Cholesky factor L with L L^T = m.
LowerTriangularFactor cholesky(const Matrix& m);
/// Same factorization returned as a plain lower-triangular matrix.
Matrix cholesky_lower(const Matrix& m);

struct SymmetricEigen {
  Vector values;   // ascending
  Matrix vectors;  // columns
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
SymmetricEigen symmetric_eigen(const Matrix& m, bool want_vectors = false);

/// lambda_max / lambda_min via the Jacobi eigensolver.
double condition_number(const Matrix& m);

/// log N(x; mean, L L^T).
double gaussian_logpdf(const Vector& x, const Vector& mean,
                       const LowerTriangularFactor& cov_factor);
double gaussian_logpdf_lower(const Vector& x, const Vector& mean,
                             const Matrix& cov_lower);

/// KL(N(mean1, cov1) || N(mean2, cov2)).
double kl_gaussians(const Vector& mean1, const Matrix& cov1,
                    const Vector& mean2, const Matrix& cov2);

struct SignedLogDet {
  double log_abs = 0.0;
  int sign = 1;
};
/// log|det m| with sign tracking, via partial-pivot LU.
SignedLogDet log_abs_det(const Matrix& m);

double log_sum_exp(const Vector& values);

std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept;

/// Counter-based 64-bit generator. The output for counter n is a bijective
/// mix of (key, n), so identical (seed, stream) pairs always replay the same
/// sequence and distinct stream ids give unrelated sequences.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() noexcept;

  double uniform();  // [0, 1)
  double normal();

  /// Independent child stream, derived from this stream's key.
  RngStream derive(std::uint64_t child_id) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

Vector sample_standard_normal(std::size_t dim, RngStream& rng);

}  // namespace speedvae
