#pragma once

#include "speedvae/numerics.hpp"
#include "speedvae/targets.hpp"

namespace speedvae::testing {

inline Matrix random_matrix(int r, int c, RngStream& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = scale * rng.normal();
  return m;
}

inline Matrix random_spd(int n, RngStream& rng, double jitter = 0.5) {
  const Matrix a = random_matrix(n, n, rng);
  return a * a.transpose() / n + jitter * Matrix::Identity(n, n);
}

/// Symmetric positive definite matrix with eigenvalues log-spaced in [1, kappa].
inline Matrix spd_with_condition(int n, double kappa, RngStream& rng) {
  const Eigen::HouseholderQR<Matrix> qr(random_matrix(n, n, rng));
  const Matrix q = qr.householderQ();
  Vector ev(n);
  for (int i = 0; i < n; ++i) ev(i) = n == 1 ? 1.0 : std::pow(kappa, static_cast<double>(i) / (n - 1));
  return q * ev.asDiagonal() * q.transpose();
}

inline GaussianPotential random_gaussian(int n, RngStream& rng) {
  return GaussianPotential(random_matrix(n, 1, rng).col(0), random_spd(n, rng));
}

/// Non-quadratic potential: 1/2 z^T A z + sum_i log cosh(z_i).
class LogCoshPotential final : public Potential {
 public:
  explicit LogCoshPotential(Matrix a) : a_(std::move(a)) {}
  std::size_t dim() const override { return static_cast<std::size_t>(a_.rows()); }
  double value(const Vector& z) const override {
    return 0.5 * z.dot(a_ * z) + z.array().cosh().log().sum();
  }
  Vector grad(const Vector& z) const override { return a_ * z + Vector(z.array().tanh()); }

 private:
  Matrix a_;
};

}  // namespace speedvae::testing
