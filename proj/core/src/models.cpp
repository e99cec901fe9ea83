#include "speedvae/models.hpp"

#include <cmath>

namespace speedvae {

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, RngStream& rng) {
  Matrix m(rows, cols);
  // Column-major fill order is part of the reproducibility contract.
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * rng.normal();
  return m;
}

Matrix zeros(std::size_t rows, std::size_t cols = 1) {
  return Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

double diag_gaussian_logpdf(const Vector& x, const Vector& mean, const Vector& log_sigma) {
  const Vector white = (x - mean).cwiseQuotient(log_sigma.array().exp().matrix());
  return -0.5 * white.squaredNorm() - log_sigma.sum() - 0.5 * static_cast<double>(x.size()) * kLog2Pi;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bindings

ad::Var Bindings::operator()(const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) raise(ErrorCode::InvalidArgument, "Bindings: parameter '" + name + "' is not bound");
  return it->second;
}

Bindings bind(ad::Tape& tape, ad::ParamStore& store, bool differentiable) {
  Bindings b;
  for (auto& e : store.entries()) {
    b.set(e.name, differentiable ? tape.param(store, e.name) : tape.constant(e.value));
  }
  return b;
}

namespace {

Bindings bind_constants(ad::Tape& tape, const ad::ParamStore& store) {
  Bindings b;
  for (const auto& e : store.entries()) b.set(e.name, tape.constant(e.value));
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shared blocks

double layer_kl(const Vector& mu_res, const Vector& log_sigma_res) {
  const Vector s2 = (2.0 * log_sigma_res).array().exp();
  return 0.5 * (s2.array() + mu_res.array().square() - 1.0 - 2.0 * log_sigma_res.array()).sum();
}

ad::Var taped_layer_kl(ad::Var mu_res, ad::Var log_sigma_res) {
  const ad::Var s2 = ad::exp(ad::scale(log_sigma_res, 2.0));
  const ad::Var inner = ad::sub(ad::add(s2, ad::square(mu_res)), ad::scale(log_sigma_res, 2.0));
  const double n = static_cast<double>(mu_res.rows());
  return ad::scale_shift(ad::sum(inner), 0.5, -0.5 * n);
}

ad::Var taped_diag_gaussian_logpdf(ad::Tape& tape, ad::Var x, ad::Var mean, ad::Var log_sigma) {
  (void)tape;
  const ad::Var white = ad::mul(ad::sub(x, mean), ad::exp(ad::neg(log_sigma)));
  const double d = static_cast<double>(x.rows());
  return ad::scale_shift(ad::add(ad::scale(ad::squared_norm(white), -0.5), ad::neg(ad::sum(log_sigma))), 1.0,
                         -0.5 * d * kLog2Pi);
}

ad::Var taped_bernoulli_logpmf(ad::Tape& tape, const Vector& x, ad::Var logits) {
  const ad::Var xv = tape.constant(x);
  return ad::sub(ad::dot(xv, logits), ad::sum(ad::softplus(logits)));
}

// ---------------------------------------------------------------------------
// VariationalModel generic implementations

Vector VariationalModel::encoder_draw(const Vector& x, const Vector& eps) const {
  ad::Tape tape;
  const Bindings th = bind_constants(tape, theta());
  const Bindings ph = bind_constants(tape, phi0());
  return taped_elbo(tape, th, ph, x, eps).z.vec();
}

GaussianMoments VariationalModel::encoder_gaussian(const Vector& x) const {
  const auto d = idx(latent_dim());
  GaussianMoments out;
  out.mean = encoder_draw(x, Vector::Zero(d));
  Matrix jac(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    jac.col(i) = 0.5 * (encoder_draw(x, Vector::Unit(d, i)) - encoder_draw(x, -Vector::Unit(d, i)));
  }
  out.cov = jac * jac.transpose();
  return out;
}

namespace {

class GenericPosteriorFactory final : public PosteriorFactory {
 public:
  explicit GenericPosteriorFactory(const LatentModel& m) : model_(m) {}
  std::unique_ptr<Potential> make(const Vector& x) const override {
    return std::make_unique<PosteriorPotential>(model_, x);
  }

 private:
  const LatentModel& model_;
};

}  // namespace

std::unique_ptr<PosteriorFactory> VariationalModel::posterior_factory() const {
  return std::make_unique<GenericPosteriorFactory>(*this);
}

double VariationalModel::log_joint(const Vector& x, const Vector& z) const {
  ad::Tape tape;
  const Bindings th = bind_constants(tape, theta());
  return taped_log_joint(tape, th, x, tape.constant(z)).scalar();
}

Vector VariationalModel::grad_z_log_joint(const Vector& x, const Vector& z) const {
  ad::Tape tape;
  const Bindings th = bind_constants(tape, theta());
  const ad::Var zv = tape.leaf(z);
  tape.backward(taped_log_joint(tape, th, x, zv));
  return tape.grad(zv).col(0);
}

void VariationalModel::accumulate_theta_grad(const Vector& x, const Vector& z, ad::ParamStore& store,
                                             double weight) const {
  ad::Tape tape;
  const Bindings th = bind(tape, store, true);
  tape.backward(ad::scale(taped_log_joint(tape, th, x, tape.constant(z)), weight));
}

// ---------------------------------------------------------------------------
// LinearHVAE

Vector LatentSample::joined() const {
  Vector out(z1.size() + z2.size());
  out << z1, z2;
  return out;
}

LinearHVAE::LinearHVAE(std::size_t n1, std::size_t n2, std::size_t dx, double obs_sigma)
    : n1_(n1), n2_(n2), dx_(dx), obs_log_sigma_(Vector::Constant(idx(dx), std::log(obs_sigma))) {
  params_.add("A2", zeros(n2, n1));
  params_.add("c2_mu", zeros(n2));
  params_.add("log_sigma_z2", zeros(n2));
  params_.add("W2z", zeros(dx, n2));
  params_.add("W2d", zeros(dx, n2));
  params_.add("b", zeros(dx));
}

LinearHVAE LinearHVAE::random(std::size_t n1, std::size_t n2, std::size_t dx, double obs_sigma, RngStream& rng) {
  LinearHVAE m(n1, n2, dx, obs_sigma);
  m.params_.value("A2") = random_matrix(idx(n2), idx(n1), 1.0 / std::sqrt(static_cast<double>(n1)), rng);
  m.params_.value("W2z") = random_matrix(idx(dx), idx(n2), 1.0 / std::sqrt(static_cast<double>(n2)), rng);
  m.params_.value("W2d") = random_matrix(idx(dx), idx(n2), 1.0 / std::sqrt(static_cast<double>(n2)), rng);
  return m;
}

void LinearHVAE::set_obs_log_sigma(const Vector& v) {
  if (static_cast<std::size_t>(v.size()) != dx_) raise(ErrorCode::DimensionMismatch, "obs_log_sigma size");
  obs_log_sigma_ = v;
}

Vector LinearHVAE::obs_variance() const { return (2.0 * obs_log_sigma_).array().exp(); }

LatentSample LinearHVAE::prior_sample(RngStream& rng) const {
  LatentSample s;
  s.z1 = sample_standard_normal(n1_, rng);
  s.d1 = Vector::Zero(idx(2 * n1_));
  s.d2.resize(idx(2 * n2_));
  s.d2.head(idx(n2_)) = A2() * s.z1 + c2_mu();
  s.d2.tail(idx(n2_)) = 2.0 * log_sigma_z2();
  const Vector eps = sample_standard_normal(n2_, rng);
  s.z2 = s.d2.head(idx(n2_)) + log_sigma_z2().array().exp().matrix().cwiseProduct(eps);
  return s;
}

Vector LinearHVAE::sample_observation(RngStream& rng) const {
  const LatentSample s = prior_sample(rng);
  const Vector mean = W2z() * s.z2 + W2d() * s.d2.head(idx(n2_)) + b();
  const Vector eps = sample_standard_normal(dx_, rng);
  return mean + obs_log_sigma_.array().exp().matrix().cwiseProduct(eps);
}

Vector LinearHVAE::prior_mean() const {
  Vector m = Vector::Zero(idx(n1_ + n2_));
  m.tail(idx(n2_)) = c2_mu();
  return m;
}

Matrix LinearHVAE::prior_cov() const {
  const auto a = idx(n1_), b2 = idx(n2_);
  const Matrix A = A2();
  const Vector lam = (2.0 * log_sigma_z2()).array().exp();
  Matrix s(a + b2, a + b2);
  s.topLeftCorner(a, a).setIdentity();
  s.topRightCorner(a, b2) = A.transpose();
  s.bottomLeftCorner(b2, a) = A;
  s.bottomRightCorner(b2, b2) = A * A.transpose();
  s.bottomRightCorner(b2, b2).diagonal() += lam;
  return s;
}

Matrix LinearHVAE::prior_precision() const {
  const auto a = idx(n1_), b2 = idx(n2_);
  const Matrix A = A2();
  const Vector inv_lam = (-2.0 * log_sigma_z2()).array().exp();
  const Matrix la = inv_lam.asDiagonal() * A;
  Matrix p(a + b2, a + b2);
  p.topLeftCorner(a, a) = Matrix::Identity(a, a) + A.transpose() * la;
  p.topRightCorner(a, b2) = -la.transpose();
  p.bottomLeftCorner(b2, a) = -la;
  p.bottomRightCorner(b2, b2) = inv_lam.asDiagonal();
  return p;
}

Matrix LinearHVAE::loading() const {
  Matrix w(idx(dx_), idx(n1_ + n2_));
  w << W2d() * A2(), W2z();
  return w;
}

Vector LinearHVAE::decoder_offset() const { return b() + W2d() * c2_mu(); }

GaussianMoments LinearHVAE::marginal_moments() const {
  const Matrix w = loading();
  GaussianMoments out;
  out.mean = w * prior_mean() + decoder_offset();
  out.cov = w * prior_cov() * w.transpose();
  out.cov.diagonal() += obs_variance();
  return out;
}

GaussianMoments LinearHVAE::posterior_moments(const Vector& x) const {
  const Matrix w = loading();
  const Matrix sz = prior_cov();
  const GaussianMoments marg = marginal_moments();
  const Matrix wsz = w * sz;
  const Eigen::LLT<Matrix> llt(marg.cov);
  GaussianMoments out;
  out.cov = sz - wsz.transpose() * llt.solve(wsz);
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  out.mean = prior_mean() + wsz.transpose() * llt.solve(x - marg.mean);
  return out;
}

Matrix LinearHVAE::posterior_precision() const {
  const Matrix w = loading();
  const Vector inv_var = obs_variance().cwiseInverse();
  Matrix p = prior_precision() + w.transpose() * inv_var.asDiagonal() * w;
  return 0.5 * (p + p.transpose());
}

double LinearHVAE::marginal_loglik(const Vector& x) const {
  const GaussianMoments marg = marginal_moments();
  return gaussian_logpdf_lower(x, marg.mean, cholesky_lower(marg.cov));
}

double LinearHVAE::mean_marginal_loglik(const Matrix& data) const {
  if (data.rows() == 0) return 0.0;
  const GaussianMoments marg = marginal_moments();
  const Matrix l = cholesky_lower(marg.cov);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    acc += gaussian_logpdf_lower(data.row(i).transpose(), marg.mean, l);
  }
  return acc / static_cast<double>(data.rows());
}

double LinearHVAE::log_likelihood(const Vector& x, const Vector& z) const {
  return diag_gaussian_logpdf(x, loading() * z + decoder_offset(), obs_log_sigma_);
}

double LinearHVAE::log_prior(const Vector& z) const {
  const Vector z1 = z.head(idx(n1_));
  const Vector z2 = z.tail(idx(n2_));
  return -0.5 * z1.squaredNorm() - 0.5 * static_cast<double>(n1_) * kLog2Pi +
         diag_gaussian_logpdf(z2, A2() * z1 + c2_mu(), log_sigma_z2());
}

double LinearHVAE::log_joint(const Vector& x, const Vector& z) const {
  if (static_cast<std::size_t>(z.size()) != latent_dim() || static_cast<std::size_t>(x.size()) != dx_) {
    raise(ErrorCode::DimensionMismatch, "LinearHVAE::log_joint: dimension mismatch");
  }
  return log_likelihood(x, z) + log_prior(z);
}

Vector LinearHVAE::grad_z_log_joint(const Vector& x, const Vector& z) const {
  if (static_cast<std::size_t>(z.size()) != latent_dim() || static_cast<std::size_t>(x.size()) != dx_) {
    raise(ErrorCode::DimensionMismatch, "LinearHVAE::grad_z_log_joint: dimension mismatch");
  }
  const Matrix A = A2();
  const Vector z1 = z.head(idx(n1_));
  const Vector z2 = z.tail(idx(n2_));
  const Vector inv_lam = (-2.0 * log_sigma_z2()).array().exp();
  const Vector prior_res = inv_lam.cwiseProduct(z2 - A * z1 - c2_mu());
  const Matrix w = loading();
  const Vector lik_res = obs_variance().cwiseInverse().cwiseProduct(x - w * z - decoder_offset());
  Vector g(z.size());
  g.head(idx(n1_)) = -z1 + A.transpose() * prior_res;
  g.tail(idx(n2_)) = -prior_res;
  g += w.transpose() * lik_res;
  return g;
}

std::optional<Matrix> LinearHVAE::constant_hessian_log_joint() const { return Matrix(-posterior_precision()); }

ad::Var LinearHVAE::taped_log_prior(ad::Tape& tape, const Bindings& theta, ad::Var z) const {
  const ad::Var z1 = ad::slice(z, 0, idx(n1_));
  const ad::Var z2 = ad::slice(z, idx(n1_), idx(n2_));
  const ad::Var top = ad::scale_shift(ad::squared_norm(z1), -0.5, -0.5 * static_cast<double>(n1_) * kLog2Pi);
  const ad::Var mean2 = ad::affine(theta("A2"), z1, theta("c2_mu"));
  return ad::add(top, taped_diag_gaussian_logpdf(tape, z2, mean2, theta("log_sigma_z2")));
}

ad::Var LinearHVAE::taped_log_likelihood(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const {
  const ad::Var z1 = ad::slice(z, 0, idx(n1_));
  const ad::Var z2 = ad::slice(z, idx(n1_), idx(n2_));
  const ad::Var d2mu = ad::affine(theta("A2"), z1, theta("c2_mu"));
  const ad::Var mean = ad::add(ad::affine(theta("W2z"), z2, theta("b")), ad::matmul(theta("W2d"), d2mu));
  return taped_diag_gaussian_logpdf(tape, tape.constant(x), mean, tape.constant(obs_log_sigma_));
}

void LinearHVAE::accumulate_theta_grad(const Vector& x, const Vector& z, ad::ParamStore& theta, double weight) const {
  ad::Tape tape;
  const Bindings th = bind(tape, theta, true);
  const ad::Var zc = tape.constant(z);
  const ad::Var lj = ad::add(taped_log_likelihood(tape, th, x, zc), taped_log_prior(tape, th, zc));
  tape.backward(ad::scale(lj, weight));
}

// ---------------------------------------------------------------------------
// LinearPosteriorFactory

LinearPosteriorFactory::LinearPosteriorFactory(const LinearHVAE& model)
    : w_(model.loading()),
      offset_(model.decoder_offset()),
      inv_var_(model.obs_variance().cwiseInverse()),
      obs_log_sigma_(model.obs_log_sigma()),
      prior_mean_(model.prior_mean()),
      prior_precision_(model.prior_precision()),
      precision_(model.posterior_precision()) {
  const Matrix lp = cholesky_lower(model.prior_cov());
  prior_log_norm_ = -lp.diagonal().array().log().sum() - 0.5 * static_cast<double>(prior_mean_.size()) * kLog2Pi;
  llt_.compute(precision_);
  if (llt_.info() != Eigen::Success) raise(ErrorCode::NotPositiveDefinite, "posterior precision is not positive definite");
}

Vector LinearPosteriorFactory::posterior_mean(const Vector& x) const {
  if (x.size() != w_.rows()) raise(ErrorCode::DimensionMismatch, "posterior: observation dimension mismatch");
  const Vector rhs = w_.transpose() * inv_var_.cwiseProduct(x - offset_) + prior_precision_ * prior_mean_;
  return llt_.solve(rhs);
}

double LinearPosteriorFactory::neg_log_joint(const Vector& x, const Vector& z) const {
  const Vector dz = z - prior_mean_;
  return -(diag_gaussian_logpdf(x, w_ * z + offset_, obs_log_sigma_) - 0.5 * dz.dot(prior_precision_ * dz) +
           prior_log_norm_);
}

std::unique_ptr<Potential> LinearPosteriorFactory::make(const Vector& x) const {
  Vector mean = posterior_mean(x);
  const double offset = neg_log_joint(x, mean);
  return std::make_unique<GaussianPotential>(std::move(mean), precision_, offset);
}

// ---------------------------------------------------------------------------
// LinearEncoder

LinearEncoder::LinearEncoder(std::size_t n1, std::size_t n2, std::size_t dx) : n1_(n1), n2_(n2), dx_(dx) {
  params_.add("W2p", zeros(2 * n2, dx));
  params_.add("b2p", zeros(2 * n2));
  params_.add("W1p", zeros(2 * n1, 2 * n2));
  params_.add("b1p", zeros(2 * n1));
  params_.add("B1p", zeros(n1, 4 * n1));
  params_.add("c1p", zeros(n1));
  params_.add("s1", zeros(n1));
  params_.add("B2p", zeros(n2, 4 * n2));
  params_.add("c2p", zeros(n2));
  params_.add("s2", zeros(n2));
}

LinearEncoder LinearEncoder::random(std::size_t n1, std::size_t n2, std::size_t dx, RngStream& rng) {
  LinearEncoder e(n1, n2, dx);
  auto fill = [&](const std::string& name, double stddev) {
    Matrix& v = e.params_.value(name);
    v = random_matrix(v.rows(), v.cols(), stddev, rng);
  };
  fill("W2p", 1.0 / std::sqrt(static_cast<double>(dx)));
  fill("W1p", 1.0 / std::sqrt(static_cast<double>(2 * n2)));
  fill("B1p", 0.1 / std::sqrt(static_cast<double>(4 * n1)));
  fill("B2p", 0.1 / std::sqrt(static_cast<double>(4 * n2)));
  return e;
}

LinearEncoder::Pass LinearEncoder::taped_sample(ad::Tape& tape, const Bindings& theta, const Bindings& phi0,
                                                const Vector& x, const Vector& eps) const {
  if (static_cast<std::size_t>(eps.size()) != n1_ + n2_) {
    raise(ErrorCode::DimensionMismatch, "LinearEncoder: noise dimension mismatch");
  }
  const ad::Var xv = tape.constant(x);
  const ad::Var dp2 = ad::affine(phi0("W2p"), xv, phi0("b2p"));
  const ad::Var dp1 = ad::affine(phi0("W1p"), dp2, phi0("b1p"));

  Pass out;
  // Layer 1: d1 = 0, so mu_1 = 0 and sigma_1 = 1.
  const ad::Var d1 = tape.constant(Vector(Vector::Zero(idx(2 * n1_))));
  const ad::Var mu1 = ad::affine(phi0("B1p"), ad::concat({d1, dp1}), phi0("c1p"));
  const ad::Var e1 = tape.constant(Vector(eps.head(idx(n1_))));
  out.z1 = ad::add(mu1, ad::mul(ad::exp(phi0("s1")), e1));
  out.kl1 = taped_layer_kl(mu1, phi0("s1"));

  // Layer 2: d2 = [A2 z1 + c2_mu; 2 log sigma], prior read-outs d^mu and exp(d^sigma / 2).
  const ad::Var d2mu = ad::affine(theta("A2"), out.z1, theta("c2_mu"));
  const ad::Var d2sig = ad::scale(theta("log_sigma_z2"), 2.0);
  const ad::Var sigma2 = ad::exp(theta("log_sigma_z2"));
  const ad::Var mu2 = ad::affine(phi0("B2p"), ad::concat({d2mu, d2sig, dp2}), phi0("c2p"));
  const ad::Var e2 = tape.constant(Vector(eps.tail(idx(n2_))));
  const ad::Var spread = ad::mul(ad::mul(sigma2, ad::exp(phi0("s2"))), e2);
  out.z2 = ad::add(ad::add(d2mu, ad::mul(sigma2, mu2)), spread);
  out.kl2 = taped_layer_kl(mu2, phi0("s2"));
  out.z = ad::concat({out.z1, out.z2});
  return out;
}

// ---------------------------------------------------------------------------
// LinearVAE

LinearVAE::LinearVAE(LinearHVAE generator, LinearEncoder encoder)
    : gen_(std::move(generator)), enc_(std::move(encoder)) {}

VariationalModel::ElboPass LinearVAE::taped_elbo(ad::Tape& tape, const Bindings& theta, const Bindings& phi0,
                                                 const Vector& x, const Vector& eps) const {
  const LinearEncoder::Pass pass = enc_.taped_sample(tape, theta, phi0, x, eps);
  ElboPass out;
  out.z = pass.z;
  out.log_lik = gen_.taped_log_likelihood(tape, theta, x, pass.z);
  out.kl = ad::add(pass.kl1, pass.kl2);
  out.elbo = ad::sub(out.log_lik, out.kl);
  return out;
}

ad::Var LinearVAE::taped_log_joint(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const {
  return ad::add(gen_.taped_log_likelihood(tape, theta, x, z), gen_.taped_log_prior(tape, theta, z));
}

double LinearVAE::analytic_elbo(const Vector& x) const {
  const GaussianMoments q = encoder_gaussian(x);
  return linear_gaussian_elbo(gen_, x, q.mean, q.cov);
}

double LinearVAE::mean_analytic_elbo(const Matrix& data) const {
  if (data.rows() == 0) return 0.0;
  const auto d = static_cast<Eigen::Index>(latent_dim());
  const Matrix q_cov = encoder_gaussian(data.row(0).transpose()).cov;
  const Matrix w = gen_.loading();
  const Vector offset = gen_.decoder_offset();
  const Vector inv_var = gen_.obs_variance().cwiseInverse();
  const Vector& obs_ls = gen_.obs_log_sigma();
  const Matrix prior_prec = gen_.prior_precision();
  const Vector prior_mean = gen_.prior_mean();
  const Matrix lp = cholesky_lower(gen_.prior_cov());
  const Matrix lq = cholesky_lower(q_cov);
  const double constant = -0.5 * (inv_var.asDiagonal() * (w * q_cov * w.transpose())).trace() -
                          0.5 * (prior_prec * q_cov).trace() - lp.diagonal().array().log().sum() -
                          0.5 * static_cast<double>(d) * kLog2Pi + 0.5 * static_cast<double>(d) * (1.0 + kLog2Pi) +
                          lq.diagonal().array().log().sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const Vector x = data.row(i).transpose();
    const Vector m = encoder_draw(x, Vector::Zero(d));
    const Vector dm = m - prior_mean;
    acc += diag_gaussian_logpdf(x, w * m + offset, obs_ls) - 0.5 * dm.dot(prior_prec * dm);
  }
  return acc / static_cast<double>(data.rows()) + constant;
}

double linear_gaussian_elbo(const LinearHVAE& model, const Vector& x, const Vector& q_mean, const Matrix& q_cov) {
  const Matrix w = model.loading();
  const Vector inv_var = model.obs_variance().cwiseInverse();
  const double exp_lik = diag_gaussian_logpdf(x, w * q_mean + model.decoder_offset(), model.obs_log_sigma()) -
                         0.5 * (inv_var.asDiagonal() * (w * q_cov * w.transpose())).trace();
  const Matrix prior_prec = model.prior_precision();
  const Vector dm = q_mean - model.prior_mean();
  const Matrix lp = cholesky_lower(model.prior_cov());
  const double d = static_cast<double>(q_mean.size());
  const double exp_prior = -0.5 * dm.dot(prior_prec * dm) - 0.5 * (prior_prec * q_cov).trace() -
                           lp.diagonal().array().log().sum() - 0.5 * d * kLog2Pi;
  const Matrix lq = cholesky_lower(q_cov);
  const double entropy = 0.5 * d * (1.0 + kLog2Pi) + lq.diagonal().array().log().sum();
  return exp_lik + exp_prior + entropy;
}

// ---------------------------------------------------------------------------
// HVAELayerStack

HVAELayerStack::HVAELayerStack(std::size_t n1, std::size_t n2, std::size_t dx, std::size_t hidden,
                               ObservationKind obs, double obs_sigma, RngStream& rng)
    : n1_(n1), n2_(n2), dx_(dx), hidden_(hidden), obs_(obs), obs_log_sigma_(std::log(obs_sigma)) {
  auto glorot = [&](std::size_t rows, std::size_t cols) {
    return random_matrix(idx(rows), idx(cols), 1.0 / std::sqrt(static_cast<double>(cols)), rng);
  };
  theta_.add("d1", zeros(2 * n1));
  theta_.add("Wa", glorot(hidden, 3 * n1));
  theta_.add("ba", zeros(hidden));
  theta_.add("Wb", glorot(2 * n2, hidden));
  theta_.add("bb", zeros(2 * n2));
  theta_.add("Wo1", glorot(hidden, 3 * n2));
  theta_.add("bo1", zeros(hidden));
  theta_.add("Wo2", glorot(dx, hidden));
  theta_.add("bo2", zeros(dx));

  phi0_.add("W2p", glorot(2 * n2, dx));
  phi0_.add("b2p", zeros(2 * n2));
  phi0_.add("W1p", glorot(2 * n1, 2 * n2));
  phi0_.add("b1p", zeros(2 * n1));
  phi0_.add("B1p", Matrix(0.1 * glorot(n1, 4 * n1)));
  phi0_.add("c1p", zeros(n1));
  phi0_.add("S1p", Matrix(0.01 * glorot(n1, 4 * n1)));
  phi0_.add("s1", zeros(n1));
  phi0_.add("B2p", Matrix(0.1 * glorot(n2, 4 * n2)));
  phi0_.add("c2p", zeros(n2));
  phi0_.add("S2p", Matrix(0.01 * glorot(n2, 4 * n2)));
  phi0_.add("s2", zeros(n2));
}

ad::Var HVAELayerStack::top_down(const Bindings& theta, ad::Var z1) const {
  const ad::Var hidden = ad::tanh(ad::affine(theta("Wa"), ad::concat({z1, theta("d1")}), theta("ba")));
  return ad::affine(theta("Wb"), hidden, theta("bb"));
}

ad::Var HVAELayerStack::observation_log_lik(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z2,
                                            ad::Var d2) const {
  const ad::Var hidden = ad::tanh(ad::affine(theta("Wo1"), ad::concat({z2, d2}), theta("bo1")));
  const ad::Var out = ad::affine(theta("Wo2"), hidden, theta("bo2"));
  if (obs_ == ObservationKind::Bernoulli) return taped_bernoulli_logpmf(tape, x, out);
  return taped_diag_gaussian_logpdf(tape, tape.constant(x), out,
                                    tape.constant(Vector(Vector::Constant(idx(dx_), obs_log_sigma_))));
}

VariationalModel::ElboPass HVAELayerStack::taped_elbo(ad::Tape& tape, const Bindings& theta, const Bindings& phi0,
                                                      const Vector& x, const Vector& eps) const {
  if (static_cast<std::size_t>(eps.size()) != n1_ + n2_) {
    raise(ErrorCode::DimensionMismatch, "HVAELayerStack: noise dimension mismatch");
  }
  const ad::Var xv = tape.constant(x);
  const ad::Var dp2 = ad::tanh(ad::affine(phi0("W2p"), xv, phi0("b2p")));
  const ad::Var dp1 = ad::tanh(ad::affine(phi0("W1p"), dp2, phi0("b1p")));

  auto layer = [&](ad::Var d, ad::Var dp, std::size_t n, const char* B, const char* c, const char* S,
                   const char* s, const Vector& e, ad::Var& kl) {
    const ad::Var mu = ad::slice(d, 0, idx(n));
    const ad::Var log_sigma = ad::scale(ad::slice(d, idx(n), idx(n)), 0.5);
    const ad::Var both = ad::concat({d, dp});
    const ad::Var mu_res = ad::affine(phi0(B), both, phi0(c));
    const ad::Var ls_res = ad::affine(phi0(S), both, phi0(s));
    kl = taped_layer_kl(mu_res, ls_res);
    const ad::Var sigma = ad::exp(log_sigma);
    const ad::Var ev = tape.constant(e);
    return ad::add(ad::add(mu, ad::mul(sigma, mu_res)), ad::mul(ad::mul(sigma, ad::exp(ls_res)), ev));
  };

  ad::Var kl1, kl2;
  const ad::Var z1 = layer(theta("d1"), dp1, n1_, "B1p", "c1p", "S1p", "s1", eps.head(idx(n1_)), kl1);
  const ad::Var d2 = top_down(theta, z1);
  const ad::Var z2 = layer(d2, dp2, n2_, "B2p", "c2p", "S2p", "s2", eps.tail(idx(n2_)), kl2);

  ElboPass out;
  out.z = ad::concat({z1, z2});
  out.log_lik = observation_log_lik(tape, theta, x, z2, d2);
  out.kl = ad::add(kl1, kl2);
  out.elbo = ad::sub(out.log_lik, out.kl);
  return out;
}

ad::Var HVAELayerStack::taped_log_joint(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const {
  const ad::Var z1 = ad::slice(z, 0, idx(n1_));
  const ad::Var z2 = ad::slice(z, idx(n1_), idx(n2_));
  const ad::Var d1 = theta("d1");
  const ad::Var lp1 = taped_diag_gaussian_logpdf(tape, z1, ad::slice(d1, 0, idx(n1_)),
                                                 ad::scale(ad::slice(d1, idx(n1_), idx(n1_)), 0.5));
  const ad::Var d2 = top_down(theta, z1);
  const ad::Var lp2 = taped_diag_gaussian_logpdf(tape, z2, ad::slice(d2, 0, idx(n2_)),
                                                 ad::scale(ad::slice(d2, idx(n2_), idx(n2_)), 0.5));
  return ad::add(ad::add(lp1, lp2), observation_log_lik(tape, theta, x, z2, d2));
}

LatentSample HVAELayerStack::prior_sample(RngStream& rng) const {
  const auto n1 = idx(n1_), n2 = idx(n2_);
  LatentSample s;
  s.d1 = theta_.value("d1").col(0);
  s.z1 = s.d1.head(n1) + (0.5 * s.d1.tail(n1).array()).exp().matrix().cwiseProduct(sample_standard_normal(n1_, rng));
  Vector in(3 * n1);
  in << s.z1, s.d1;
  const Vector hidden = (theta_.value("Wa") * in + theta_.value("ba").col(0)).array().tanh().matrix();
  s.d2 = theta_.value("Wb") * hidden + theta_.value("bb").col(0);
  s.z2 = s.d2.head(n2) + (0.5 * s.d2.tail(n2).array()).exp().matrix().cwiseProduct(sample_standard_normal(n2_, rng));
  return s;
}

Vector HVAELayerStack::sample_observation(RngStream& rng) const {
  const LatentSample s = prior_sample(rng);
  Vector in(s.z2.size() + s.d2.size());
  in << s.z2, s.d2;
  const Vector hidden = (theta_.value("Wo1") * in + theta_.value("bo1").col(0)).array().tanh().matrix();
  const Vector out = theta_.value("Wo2") * hidden + theta_.value("bo2").col(0);
  Vector x(out.size());
  if (obs_ == ObservationKind::Bernoulli) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.uniform() < 1.0 / (1.0 + std::exp(-out(i))) ? 1.0 : 0.0;
    return x;
  }
  return out + std::exp(obs_log_sigma_) * sample_standard_normal(dx_, rng);
}

// ---------------------------------------------------------------------------
// MlpVAE

MlpVAE::MlpVAE(std::size_t latent, std::size_t dx, std::size_t hidden, ObservationKind obs, double obs_sigma,
               RngStream& rng)
    : latent_(latent), dx_(dx), hidden_(hidden), obs_(obs), obs_log_sigma_(std::log(obs_sigma)) {
  auto glorot = [&](std::size_t rows, std::size_t cols) {
    return random_matrix(idx(rows), idx(cols), 1.0 / std::sqrt(static_cast<double>(cols)), rng);
  };
  theta_.add("W1", glorot(hidden, latent));
  theta_.add("b1", zeros(hidden));
  theta_.add("W2", glorot(dx, hidden));
  theta_.add("b2", zeros(dx));
  phi0_.add("E1", glorot(hidden, dx));
  phi0_.add("e1", zeros(hidden));
  phi0_.add("Em", glorot(latent, hidden));
  phi0_.add("em", zeros(latent));
  phi0_.add("Es", Matrix(0.01 * glorot(latent, hidden)));
  phi0_.add("es", zeros(latent));
}

ad::Var MlpVAE::mlp_decode(const Bindings& theta, ad::Var z) const {
  if (static_cast<std::size_t>(z.rows()) != latent_ || z.cols() != 1) {
    raise(ErrorCode::ShapeMismatch, "mlp_decode: latent shape mismatch");
  }
  const ad::Var hidden = ad::tanh(ad::affine(theta("W1"), z, theta("b1")));
  return ad::affine(theta("W2"), hidden, theta("b2"));
}

MlpVAE::Encoded MlpVAE::mlp_encode(ad::Tape& tape, const Bindings& phi0, const Vector& x) const {
  if (static_cast<std::size_t>(x.size()) != dx_) raise(ErrorCode::ShapeMismatch, "mlp_encode: data shape mismatch");
  const ad::Var hidden = ad::tanh(ad::affine(phi0("E1"), tape.constant(x), phi0("e1")));
  return {ad::affine(phi0("Em"), hidden, phi0("em")), ad::affine(phi0("Es"), hidden, phi0("es"))};
}

ad::Var MlpVAE::taped_log_likelihood(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const {
  if (static_cast<std::size_t>(x.size()) != dx_) raise(ErrorCode::ShapeMismatch, "MlpVAE: data shape mismatch");
  const ad::Var out = mlp_decode(theta, z);
  if (obs_ == ObservationKind::Bernoulli) return taped_bernoulli_logpmf(tape, x, out);
  return taped_diag_gaussian_logpdf(tape, tape.constant(x), out,
                                    tape.constant(Vector(Vector::Constant(idx(dx_), obs_log_sigma_))));
}

VariationalModel::ElboPass MlpVAE::taped_elbo(ad::Tape& tape, const Bindings& theta, const Bindings& phi0,
                                              const Vector& x, const Vector& eps) const {
  const Encoded enc = mlp_encode(tape, phi0, x);
  ElboPass out;
  out.z = ad::add(enc.mean, ad::mul(ad::exp(enc.log_scale), tape.constant(eps)));
  out.log_lik = taped_log_likelihood(tape, theta, x, out.z);
  out.kl = taped_layer_kl(enc.mean, enc.log_scale);
  out.elbo = ad::sub(out.log_lik, out.kl);
  return out;
}

ad::Var MlpVAE::taped_log_joint(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const {
  const ad::Var prior =
      ad::scale_shift(ad::squared_norm(z), -0.5, -0.5 * static_cast<double>(latent_) * kLog2Pi);
  return ad::add(prior, taped_log_likelihood(tape, theta, x, z));
}

}  // namespace speedvae
