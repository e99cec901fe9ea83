#include "speedvae/targets.hpp"

#include <cmath>

namespace speedvae {

Vector Potential::hvp(const Vector& z, const Vector& v) const {
  return ad::hvp_finite_difference([this](const Vector& q) { return grad(q); }, z, v, ad::default_hvp_eps(z));
}

Matrix Potential::hessian(const Vector& z) const {
  if (auto h = constant_hessian()) return *h;
  const auto n = static_cast<Eigen::Index>(dim());
  Matrix h(n, n);
  for (Eigen::Index i = 0; i < n; ++i) h.col(i) = hvp(z, Vector::Unit(n, i));
  return 0.5 * (h + h.transpose());
}

void Potential::theta_grad(const Vector&, ad::ParamStore&, double) const {
  raise(ErrorCode::InvalidArgument, "Potential has no generative-parameter gradient hook");
}

GaussianPotential::GaussianPotential(Vector mean, Matrix precision, double offset)
    : mean_(std::move(mean)), precision_(std::move(precision)), offset_(offset) {
  if (precision_.rows() != mean_.size() || precision_.cols() != mean_.size()) {
    raise(ErrorCode::DimensionMismatch, "GaussianPotential: precision does not match mean");
  }
}

double GaussianPotential::value(const Vector& z) const {
  if (z.size() != mean_.size()) raise(ErrorCode::DimensionMismatch, "GaussianPotential: dimension mismatch");
  const Vector d = z - mean_;
  return 0.5 * d.dot(precision_ * d) + offset_;
}

Vector GaussianPotential::grad(const Vector& z) const {
  if (z.size() != mean_.size()) raise(ErrorCode::DimensionMismatch, "GaussianPotential: dimension mismatch");
  return precision_ * (z - mean_);
}

Vector GaussianPotential::hvp(const Vector&, const Vector& v) const { return precision_ * v; }

Matrix GaussianPotential::covariance() const {
  return precision_.llt().solve(Matrix::Identity(precision_.rows(), precision_.cols()));
}

PosteriorPotential::PosteriorPotential(const LatentModel& model, Vector x) : model_(&model), x_(std::move(x)) {
  if (!model.has_latent_gradient()) {
    raise(ErrorCode::UnsupportedLikelihood, "posterior potential: observation model has no latent gradient");
  }
  if (static_cast<std::size_t>(x_.size()) != model.data_dim()) {
    raise(ErrorCode::DimensionMismatch, "posterior potential: observation dimension mismatch");
  }
  if (auto h = model.constant_hessian_log_joint()) hessian_ = -*h;
}

double PosteriorPotential::value(const Vector& z) const { return -model_->log_joint(x_, z); }

Vector PosteriorPotential::grad(const Vector& z) const { return -model_->grad_z_log_joint(x_, z); }

Vector PosteriorPotential::hvp(const Vector& z, const Vector& v) const {
  if (hessian_) return *hessian_ * v;
  return Potential::hvp(z, v);
}

void PosteriorPotential::theta_grad(const Vector& z, ad::ParamStore& theta, double weight) const {
  model_->accumulate_theta_grad(x_, z, theta, weight);
}

PosteriorPotential build_posterior_potential(const LatentModel& model, const Vector& x) {
  return PosteriorPotential(model, x);
}

Vector potential_hvp(const Potential& p, const Vector& z, const Vector& v) {
  const auto n = static_cast<Eigen::Index>(p.dim());
  if (z.size() != n || v.size() != n) raise(ErrorCode::DimensionMismatch, "potential_hvp: dimension mismatch");
  if (v.isZero(0.0)) return Vector::Zero(n);
  return p.hvp(z, v);
}

namespace ad {

Var potential_value(const Potential& p, Var z) {
  const Vector zv = z.vec();
  Matrix out(1, 1);
  out(0, 0) = p.value(zv);
  const std::size_t iz = z.id;
  const Potential* pp = &p;
  return z.tape->record(std::move(out), z.tape->requires_grad(iz), [pp, iz](Tape& t, const Matrix& g) {
    t.add_adjoint(iz, Matrix(g(0, 0) * pp->grad(t.value(iz).col(0))));
  });
}

Var potential_grad(const Potential& p, Var z) {
  const Vector zv = z.vec();
  Vector gv = p.grad(zv);
  if (!gv.allFinite()) raise(ErrorCode::NonFiniteGradient, "potential gradient is not finite");
  const std::size_t iz = z.id;
  const Potential* pp = &p;
  return z.tape->record(Matrix(gv), z.tape->requires_grad(iz), [pp, iz](Tape& t, const Matrix& g) {
    const Vector zval = t.value(iz).col(0);
    t.add_adjoint(iz, Matrix(pp->hvp(zval, g.col(0))));
  });
}

}  // namespace ad

}  // namespace speedvae
