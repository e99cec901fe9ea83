#pragma once

#include <cstddef>
#include <vector>

#include "speedvae/numerics.hpp"
#include "speedvae/targets.hpp"

namespace speedvae {

enum class KernelKind { Mala, Hmc };
enum class PreconditionerKind { Diagonal, LowerTriangular };

/// How the HMC proposal log-density is approximated.
///  - LocalGaussian: Jacobian of the leapfrog map with the Hessian frozen at
///    the trajectory midpoint (exact on quadratic potentials).
///  - FirstOrder: the truncated form d log L + log|det(I - (L^2-1)/6 C^T H C)|.
enum class EntropyApprox { LocalGaussian, FirstOrder };

/// Adaptable proposal parameters. The packed vector used for gradient-based
/// adaptation is [log_h (MALA only), preconditioner entries]; preconditioner
/// diagonals are always stored as logs.
struct KernelParams {
  KernelKind kind = KernelKind::Mala;
  double log_h = 0.0;
  PreconditionerKind precond = PreconditionerKind::Diagonal;
  Vector diag_log_scales;
  LowerTriangularFactor lower;
  int leapfrog_steps = 1;
  double beta = 1.0;
  double target_accept = 0.574;
  EntropyApprox entropy = EntropyApprox::LocalGaussian;

  static KernelParams mala(std::size_t dim, PreconditionerKind precond, double log_h = 0.0);
  static KernelParams hmc(std::size_t dim, PreconditionerKind precond, int leapfrog_steps, double log_scale = 0.0);

  std::size_t dim() const;
  double step_size() const;
  /// Realized preconditioner C (for HMC, includes the exp(log_h) multiplier
  /// that dual averaging adapts; log_h stays 0 under gradient adaptation).
  Matrix preconditioner() const;
  double log_det_preconditioner() const;

  std::size_t packed_size() const;
  Vector packed() const;
  void set_packed(const Vector& packed);

  /// Throws InvalidArgument when an invariant is violated.
  void validate() const;
};

struct KernelOutput {
  Vector next_state;
  Vector proposed_state;
  Vector noise;  // the realized v
  bool accepted = false;
  double log_alpha = 0.0;
  double log_r_forward = 0.0;
  double energy_error = 0.0;
  bool divergent = false;
};

// MALA --------------------------------------------------------------------

Vector mala_propose(const Vector& z, const Vector& v, const Potential& p, const KernelParams& k);
double mala_energy_error(const Vector& z, const Vector& z_prop, const Vector& v, const Potential& p,
                         const KernelParams& k);
double mala_log_proposal_density(const Vector& z, const Vector& z_prop, const Potential& p,
                                 const KernelParams& k);
double mala_entropy(const KernelParams& k, std::size_t dim);

// HMC ---------------------------------------------------------------------

struct LeapfrogResult {
  std::vector<Vector> positions;  // q_0 .. q_L
  Vector initial_momentum;        // p_0 = C^{-T} v
  Vector final_momentum;          // p_L
  Vector proposed;                // q_L
};

/// L unit-step leapfrog steps with inverse mass matrix C C^T.
LeapfrogResult hmc_leapfrog(const Vector& z, const Vector& v, const Potential& p, const KernelParams& k);
/// Same integrator started from an explicit momentum.
LeapfrogResult hmc_leapfrog_from_momentum(const Vector& z, const Vector& momentum, const Potential& p,
                                          const KernelParams& k);
double hmc_energy_error(const Vector& z, const Vector& z_prop, const Vector& p0, const Vector& p_final,
                        const Potential& p, const KernelParams& k);
/// Approximate proposal entropy, including the (d/2)(1 + log 2 pi) constant.
double hmc_entropy_approx(const KernelParams& k, const Vector& q_mid, const Potential& p);
/// Approximate log r(z, T(v)) = log nu(v) - [entropy - constant].
double hmc_log_proposal_density_approx(const Vector& v, const KernelParams& k, const Vector& q_mid,
                                       const Potential& p);

// Metropolis-Hastings step and adaptation ---------------------------------

KernelOutput mh_step(const Vector& z, const Potential& p, const KernelParams& k, RngStream& rng);

struct SpeedMeasureTerm {
  double objective = 0.0;  // log alpha - beta log r
  double log_alpha = 0.0;
  double log_r = 0.0;
  Vector grad;  // d objective / d packed params
};

/// Pathwise gradient of log alpha(z_prev, T(v)) - beta log r(z_prev, T(v))
/// with respect to the packed kernel parameters, at the noise stored in `out`.
SpeedMeasureTerm speed_measure_grad_contrib(const KernelOutput& out, const Vector& z_prev, const Potential& p,
                                            const KernelParams& k);
/// Same objective evaluated at explicit packed parameters (no gradient).
double speed_measure_objective(const Vector& packed, const Vector& v, const Vector& z_prev, const Potential& p,
                               const KernelParams& k);

/// beta (1 + rho4 (accept_count / K - alpha_star)), floored at 1e-8.
double beta_update(double beta, std::size_t accept_count, std::size_t K, double alpha_star, double rho4);
double beta_update_fraction(double beta, double accept_fraction, double alpha_star, double rho4);

struct DualAveragingState {
  double log_h = 0.0;
  double log_h_avg = 0.0;
  double h_bar = 0.0;
  double mu = 0.0;
  std::size_t counter = 0;
  double gamma = 0.05;
  double t0 = 10.0;
  double kappa = 0.75;
};

DualAveragingState dual_averaging_init(double log_h0, double gamma = 0.05, double t0 = 10.0, double kappa = 0.75);
DualAveragingState dual_averaging_update(const DualAveragingState& s, double observed_accept, double alpha_star);

}  // namespace speedvae
