#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "speedvae/autodiff.hpp"
#include "speedvae/numerics.hpp"
#include "speedvae/targets.hpp"

namespace speedvae {

/// Parameter name -> tape variable, for one tape.
class Bindings {
 public:
  ad::Var operator()(const std::string& name) const;
  void set(const std::string& name, ad::Var v) { vars_[name] = v; }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

 private:
  std::unordered_map<std::string, ad::Var> vars_;
};

/// Puts every tensor of `store` on the tape, as bound leaves when
/// `differentiable`, otherwise as constants.
Bindings bind(ad::Tape& tape, ad::ParamStore& store, bool differentiable);

struct GaussianMoments {
  Vector mean;
  Matrix cov;
};

enum class ObservationKind { Gaussian, Bernoulli };

/// Builds U(z) = -log p(x, z) for many x under frozen parameters.
class PosteriorFactory {
 public:
  virtual ~PosteriorFactory() = default;
  virtual std::unique_ptr<Potential> make(const Vector& x) const = 0;
};

/// A latent variable model with an amortized encoder q0(z|x), trainable by
/// the ELBO and by the MCMC-corrected updates.
class VariationalModel : public LatentModel {
 public:
  struct ElboPass {
    ad::Var elbo;
    ad::Var z;         // reparameterized draw from q0
    ad::Var log_lik;   // log p(x|z)
    ad::Var kl;        // closed form, summed over layers
  };

  virtual ad::ParamStore& theta() = 0;
  virtual const ad::ParamStore& theta() const = 0;
  virtual ad::ParamStore& phi0() = 0;
  virtual const ad::ParamStore& phi0() const = 0;
  /// Names in theta() that parameterize the prior p(z).
  virtual std::vector<std::string> prior_param_names() const = 0;

  /// Single-sample pathwise ELBO with closed-form layer KLs.
  virtual ElboPass taped_elbo(ad::Tape& tape, const Bindings& theta, const Bindings& phi0, const Vector& x,
                              const Vector& eps) const = 0;
  /// log p(x|z) + log p(z) on a tape.
  virtual ad::Var taped_log_joint(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const = 0;

  /// Gaussian summary of q0(.|x): exact when the encoder is affine in its
  /// noise, a linearization around eps = 0 otherwise.
  virtual GaussianMoments encoder_gaussian(const Vector& x) const;
  /// Reparameterized draw z = z(x, eps) without recording gradients.
  Vector encoder_draw(const Vector& x, const Vector& eps) const;

  virtual std::unique_ptr<VariationalModel> clone() const = 0;

  /// Defaults to PosteriorPotential over this model; the factory must not
  /// outlive the model or a parameter update.
  virtual std::unique_ptr<PosteriorFactory> posterior_factory() const;

  // LatentModel, generic tape-based implementations.
  double log_joint(const Vector& x, const Vector& z) const override;
  Vector grad_z_log_joint(const Vector& x, const Vector& z) const override;
  void accumulate_theta_grad(const Vector& x, const Vector& z, ad::ParamStore& theta, double weight) const override;
};

// ---------------------------------------------------------------------------
// Two-layer linear-Gaussian hierarchical model

struct LatentSample {
  Vector z1, z2;  // stochastic layers
  Vector d1, d2;  // deterministic top-down variables
  Vector joined() const;
};

/// z1 ~ N(0, I), z2 | z1 ~ N(A2 z1 + c2_mu, diag(sigma^2)),
/// x | z ~ N(W2z z2 + W2d d2_mu + b, diag(obs_sigma^2)), d2_mu = A2 z1 + c2_mu.
/// Observation noise is fixed; every other tensor lives in params().
class LinearHVAE final : public LatentModel {
 public:
  LinearHVAE(std::size_t n1, std::size_t n2, std::size_t dx, double obs_sigma = 1.0);

  /// Random generator: A2, W2z, W2d entries N(0, 1/fan_in) (std 1/sqrt(fan_in)),
  /// c2_mu = 0, sigma_{z2|z1} = 1, b = 0.
  static LinearHVAE random(std::size_t n1, std::size_t n2, std::size_t dx, double obs_sigma, RngStream& rng);

  std::size_t n1() const { return n1_; }
  std::size_t n2() const { return n2_; }
  std::size_t latent_dim() const override { return n1_ + n2_; }
  std::size_t data_dim() const override { return dx_; }

  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  Matrix A2() const { return params_.value("A2"); }
  Vector c2_mu() const { return params_.value("c2_mu").col(0); }
  Vector log_sigma_z2() const { return params_.value("log_sigma_z2").col(0); }
  Matrix W2z() const { return params_.value("W2z"); }
  Matrix W2d() const { return params_.value("W2d"); }
  Vector b() const { return params_.value("b").col(0); }
  const Vector& obs_log_sigma() const { return obs_log_sigma_; }
  void set_obs_log_sigma(const Vector& v);

  LatentSample prior_sample(RngStream& rng) const;
  Vector sample_observation(RngStream& rng) const;

  Vector prior_mean() const;
  Matrix prior_cov() const;
  Matrix prior_precision() const;
  /// W = [W2d A2, W2z]
  Matrix loading() const;
  /// b + W2d c2_mu, so that E[x|z] = W z + decoder_offset().
  Vector decoder_offset() const;
  Vector obs_variance() const;

  GaussianMoments marginal_moments() const;
  GaussianMoments posterior_moments(const Vector& x) const;
  Matrix posterior_precision() const;
  double marginal_loglik(const Vector& x) const;
  /// Mean marginal log-likelihood over the rows of `data`, factorizing once.
  double mean_marginal_loglik(const Matrix& data) const;

  double log_likelihood(const Vector& x, const Vector& z) const;
  double log_prior(const Vector& z) const;

  double log_joint(const Vector& x, const Vector& z) const override;
  Vector grad_z_log_joint(const Vector& x, const Vector& z) const override;
  std::optional<Matrix> constant_hessian_log_joint() const override;
  void accumulate_theta_grad(const Vector& x, const Vector& z, ad::ParamStore& theta, double weight) const override;

  ad::Var taped_log_likelihood(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const;
  ad::Var taped_log_prior(ad::Tape& tape, const Bindings& theta, ad::Var z) const;

  static std::vector<std::string> prior_names() { return {"A2", "c2_mu", "log_sigma_z2"}; }

 private:
  std::size_t n1_, n2_, dx_;
  ad::ParamStore params_;
  Vector obs_log_sigma_;
};

/// Exact Gaussian posterior potentials for a LinearHVAE, sharing one
/// factorization of the posterior precision.
class LinearPosteriorFactory final : public PosteriorFactory {
 public:
  explicit LinearPosteriorFactory(const LinearHVAE& model);
  std::unique_ptr<Potential> make(const Vector& x) const override;
  /// Posterior mean and -log p(x, mean).
  Vector posterior_mean(const Vector& x) const;
  double neg_log_joint(const Vector& x, const Vector& z) const;
  const Matrix& precision() const { return precision_; }

 private:
  Matrix w_;
  Vector offset_, inv_var_, obs_log_sigma_;
  Vector prior_mean_;
  Matrix prior_precision_;
  double prior_log_norm_ = 0.0;
  Matrix precision_;
  Eigen::LLT<Matrix> llt_;
};

/// Bottom-up linear encoder with residual read-outs:
/// d'_2 = W'_2 x + b'_2, d'_1 = W'_1 d'_2 + b'_1,
/// mu'_l = B'_l [d_l; d'_l] + c'_l, sigma'_l = exp(b''_l).
class LinearEncoder {
 public:
  LinearEncoder(std::size_t n1, std::size_t n2, std::size_t dx);
  static LinearEncoder random(std::size_t n1, std::size_t n2, std::size_t dx, RngStream& rng);

  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  struct Pass {
    ad::Var z1, z2, z;
    ad::Var kl1, kl2;
  };
  Pass taped_sample(ad::Tape& tape, const Bindings& theta, const Bindings& phi0, const Vector& x,
                    const Vector& eps) const;

 private:
  std::size_t n1_, n2_, dx_;
  ad::ParamStore params_;
};

/// Linear hierarchical VAE: LinearHVAE generator plus LinearEncoder.
class LinearVAE final : public VariationalModel {
 public:
  LinearVAE(LinearHVAE generator, LinearEncoder encoder);

  LinearHVAE& generator() { return gen_; }
  const LinearHVAE& generator() const { return gen_; }
  LinearEncoder& encoder() { return enc_; }

  std::size_t latent_dim() const override { return gen_.latent_dim(); }
  std::size_t data_dim() const override { return gen_.data_dim(); }
  ad::ParamStore& theta() override { return gen_.params(); }
  const ad::ParamStore& theta() const override { return gen_.params(); }
  ad::ParamStore& phi0() override { return enc_.params(); }
  const ad::ParamStore& phi0() const override { return enc_.params(); }
  std::vector<std::string> prior_param_names() const override { return LinearHVAE::prior_names(); }

  ElboPass taped_elbo(ad::Tape& tape, const Bindings& theta, const Bindings& phi0, const Vector& x,
                      const Vector& eps) const override;
  ad::Var taped_log_joint(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const override;
  std::unique_ptr<VariationalModel> clone() const override { return std::make_unique<LinearVAE>(*this); }
  std::unique_ptr<PosteriorFactory> posterior_factory() const override {
    return std::make_unique<LinearPosteriorFactory>(gen_);
  }

  /// Exact ELBO E_q[log p(x, z)] + H(q) for the Gaussian q0(.|x).
  double analytic_elbo(const Vector& x) const;
  /// Mean analytic ELBO over the rows of `data`; the encoder covariance does
  /// not depend on x, so it is formed once.
  double mean_analytic_elbo(const Matrix& data) const;

  double log_joint(const Vector& x, const Vector& z) const override { return gen_.log_joint(x, z); }
  Vector grad_z_log_joint(const Vector& x, const Vector& z) const override { return gen_.grad_z_log_joint(x, z); }
  std::optional<Matrix> constant_hessian_log_joint() const override { return gen_.constant_hessian_log_joint(); }
  void accumulate_theta_grad(const Vector& x, const Vector& z, ad::ParamStore& theta, double weight) const override {
    gen_.accumulate_theta_grad(x, z, theta, weight);
  }

 private:
  LinearHVAE gen_;
  LinearEncoder enc_;
};

/// Exact ELBO of an arbitrary Gaussian q = N(mean, cov) under a linear model.
double linear_gaussian_elbo(const LinearHVAE& model, const Vector& x, const Vector& q_mean, const Matrix& q_cov);

// ---------------------------------------------------------------------------
// Non-linear two-layer top-down stack

/// Two stochastic layers with tanh MLP top-down map, observation head and
/// bottom-up encoder. Prior read-outs mu(d) = d^mu, sigma(d) = exp(d^sigma / 2);
/// the encoder uses the residual parameterization.
class HVAELayerStack final : public VariationalModel {
 public:
  HVAELayerStack(std::size_t n1, std::size_t n2, std::size_t dx, std::size_t hidden, ObservationKind obs,
                 double obs_sigma, RngStream& rng);

  std::size_t latent_dim() const override { return n1_ + n2_; }
  std::size_t data_dim() const override { return dx_; }
  ad::ParamStore& theta() override { return theta_; }
  const ad::ParamStore& theta() const override { return theta_; }
  ad::ParamStore& phi0() override { return phi0_; }
  const ad::ParamStore& phi0() const override { return phi0_; }
  std::vector<std::string> prior_param_names() const override { return {"d1", "Wa", "ba", "Wb", "bb"}; }

  ElboPass taped_elbo(ad::Tape& tape, const Bindings& theta, const Bindings& phi0, const Vector& x,
                      const Vector& eps) const override;
  ad::Var taped_log_joint(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const override;
  std::unique_ptr<VariationalModel> clone() const override { return std::make_unique<HVAELayerStack>(*this); }

  /// Ancestral draw of (z1, z2) with d1 = theta("d1") and d2 the top-down output.
  LatentSample prior_sample(RngStream& rng) const;
  /// Draw x from the observation head at a prior sample.
  Vector sample_observation(RngStream& rng) const;

 private:
  ad::Var top_down(const Bindings& theta, ad::Var z1) const;
  ad::Var observation_log_lik(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z2, ad::Var d2) const;

  std::size_t n1_, n2_, dx_, hidden_;
  ObservationKind obs_;
  double obs_log_sigma_;
  ad::ParamStore theta_;
  ad::ParamStore phi0_;
};

// ---------------------------------------------------------------------------
// Single-layer MLP VAE

class MlpVAE final : public VariationalModel {
 public:
  MlpVAE(std::size_t latent, std::size_t dx, std::size_t hidden, ObservationKind obs, double obs_sigma,
         RngStream& rng);

  std::size_t latent_dim() const override { return latent_; }
  std::size_t data_dim() const override { return dx_; }
  ad::ParamStore& theta() override { return theta_; }
  const ad::ParamStore& theta() const override { return theta_; }
  ad::ParamStore& phi0() override { return phi0_; }
  const ad::ParamStore& phi0() const override { return phi0_; }
  std::vector<std::string> prior_param_names() const override { return {}; }
  ObservationKind observation() const { return obs_; }

  /// Decoder output: Gaussian mean or Bernoulli logits.
  ad::Var mlp_decode(const Bindings& theta, ad::Var z) const;
  struct Encoded {
    ad::Var mean;
    ad::Var log_scale;
  };
  Encoded mlp_encode(ad::Tape& tape, const Bindings& phi0, const Vector& x) const;
  ad::Var taped_log_likelihood(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const;

  ElboPass taped_elbo(ad::Tape& tape, const Bindings& theta, const Bindings& phi0, const Vector& x,
                      const Vector& eps) const override;
  ad::Var taped_log_joint(ad::Tape& tape, const Bindings& theta, const Vector& x, ad::Var z) const override;
  std::unique_ptr<VariationalModel> clone() const override { return std::make_unique<MlpVAE>(*this); }

 private:
  std::size_t latent_, dx_, hidden_;
  ObservationKind obs_;
  double obs_log_sigma_;
  ad::ParamStore theta_;
  ad::ParamStore phi0_;
};

// ---------------------------------------------------------------------------
// Shared building blocks

/// Closed-form KL between the residual encoder and the prior conditional:
/// 1/2 sum_i [sigma'_i^2 + mu'_i^2 - 1 - 2 log sigma'_i]. Independent of the
/// prior scale.
double layer_kl(const Vector& mu_res, const Vector& log_sigma_res);
ad::Var taped_layer_kl(ad::Var mu_res, ad::Var log_sigma_res);

/// log N(x; mean, diag(exp(2 log_sigma))) on a tape.
ad::Var taped_diag_gaussian_logpdf(ad::Tape& tape, ad::Var x, ad::Var mean, ad::Var log_sigma);
/// sum_i [x_i l_i - softplus(l_i)]
ad::Var taped_bernoulli_logpmf(ad::Tape& tape, const Vector& x, ad::Var logits);

}  // namespace speedvae
