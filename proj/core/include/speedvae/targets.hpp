#pragma once

#include <cstddef>
#include <optional>

#include "speedvae/autodiff.hpp"
#include "speedvae/numerics.hpp"

namespace speedvae {

/// Negative unnormalized log target U(z). Every sampler consumes this.
class Potential {
 public:
  virtual ~Potential() = default;

  virtual std::size_t dim() const = 0;
  virtual double value(const Vector& z) const = 0;
  virtual Vector grad(const Vector& z) const = 0;
  /// Hessian-vector product. Central differences of grad() unless overridden.
  virtual Vector hvp(const Vector& z, const Vector& v) const;
  /// Set when the Hessian does not depend on z (quadratic potentials).
  virtual std::optional<Matrix> constant_hessian() const { return std::nullopt; }
  /// Full Hessian, from constant_hessian() or from dim() HVP calls.
  Matrix hessian(const Vector& z) const;

  /// Accumulates weight * grad_theta [log p(x|z) + log p(z)] into theta's
  /// gradient slots, z held fixed.
  virtual bool has_theta_hook() const { return false; }
  virtual void theta_grad(const Vector& z, ad::ParamStore& theta, double weight) const;
};

/// U(z) = 1/2 (z - mean)^T P (z - mean) + offset.
class GaussianPotential final : public Potential {
 public:
  GaussianPotential(Vector mean, Matrix precision, double offset = 0.0);

  std::size_t dim() const override { return static_cast<std::size_t>(mean_.size()); }
  double value(const Vector& z) const override;
  Vector grad(const Vector& z) const override;
  Vector hvp(const Vector& z, const Vector& v) const override;
  std::optional<Matrix> constant_hessian() const override { return precision_; }

  const Vector& mean() const { return mean_; }
  const Matrix& precision() const { return precision_; }
  /// Covariance P^{-1}.
  Matrix covariance() const;

 private:
  Vector mean_;
  Matrix precision_;
  double offset_;
};

/// A latent variable model p(x, z) exposing what a posterior potential needs.
class LatentModel {
 public:
  virtual ~LatentModel() = default;

  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t data_dim() const = 0;
  /// False when log p(x|z) has no usable z-gradient.
  virtual bool has_latent_gradient() const { return true; }

  /// log p(x|z) + log p(z)
  virtual double log_joint(const Vector& x, const Vector& z) const = 0;
  virtual Vector grad_z_log_joint(const Vector& x, const Vector& z) const = 0;
  /// Hessian of log p(x, z) in z when it is constant (linear-Gaussian models).
  virtual std::optional<Matrix> constant_hessian_log_joint() const { return std::nullopt; }
  virtual void accumulate_theta_grad(const Vector& x, const Vector& z, ad::ParamStore& theta,
                                     double weight) const = 0;
};

/// U(z|x) = -log p(x|z) - log p(z) for a fixed observation x. Holds a
/// reference to the model; the model must outlive it.
class PosteriorPotential final : public Potential {
 public:
  PosteriorPotential(const LatentModel& model, Vector x);

  std::size_t dim() const override { return model_->latent_dim(); }
  double value(const Vector& z) const override;
  Vector grad(const Vector& z) const override;
  Vector hvp(const Vector& z, const Vector& v) const override;
  std::optional<Matrix> constant_hessian() const override { return hessian_; }

  bool has_theta_hook() const override { return true; }
  void theta_grad(const Vector& z, ad::ParamStore& theta, double weight) const override;

  const Vector& observation() const { return x_; }

 private:
  const LatentModel* model_;
  Vector x_;
  std::optional<Matrix> hessian_;
};

PosteriorPotential build_posterior_potential(const LatentModel& model, const Vector& x);

/// grad^2 U(z) v with a dimension check.
Vector potential_hvp(const Potential& p, const Vector& z, const Vector& v);

namespace ad {

/// U(z) as a tape node; the adjoint flows back through grad U.
Var potential_value(const Potential& p, Var z);
/// grad U(z) as a tape node; the adjoint flows back through HVPs.
Var potential_grad(const Potential& p, Var z);

}  // namespace ad

}  // namespace speedvae
