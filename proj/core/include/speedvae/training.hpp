#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "speedvae/autodiff.hpp"
#include "speedvae/kernels.hpp"
#include "speedvae/models.hpp"

namespace speedvae {

enum class OptimizerKind { Sgd, Adam };
enum class TrainPreconditioner { Diagonal, LowerTriangular, None };
enum class AdaptationKind { SpeedMeasure, DualAveraging, Fixed };

/// First/second moment buffers for one tensor.
struct OptimizerSlot {
  Matrix m, v;
  std::uint64_t t = 0;
};

/// Ascent step p += lr * g (sgd) or the bias-corrected Adam step.
void optimizer_apply(Matrix& param, const Matrix& grad, OptimizerKind kind, double lr, OptimizerSlot& slot,
                     double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Per-tensor optimizer state keyed by name.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  /// Applies the accumulated gradients of `store` (skipping `frozen`) and
  /// leaves them untouched.
  void step(ad::ParamStore& store, const std::vector<std::string>& frozen = {});
  void step(Vector& param, const Vector& grad, const std::string& slot = "_");

  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }

 private:
  OptimizerKind kind_ = OptimizerKind::Adam;
  double lr_ = 1e-3;
  std::unordered_map<std::string, OptimizerSlot> slots_;
};

struct TrainConfig {
  double lr_phi0 = 1e-3;
  double lr_phi1 = 1e-3;
  double lr_theta = 1e-3;
  double lr_beta = 1e-2;
  std::size_t K = 2;
  int leapfrog_L = 5;
  std::size_t pretrain_epochs = 100;
  std::size_t mcmc_epochs = 100;
  std::size_t batch_size = 20;
  /// Negative selects the kernel default (0.574 MALA, 0.65 HMC).
  double alpha_star = -1.0;
  std::uint64_t seed = 0;
  KernelKind kernel = KernelKind::Hmc;
  TrainPreconditioner preconditioner = TrainPreconditioner::LowerTriangular;
  AdaptationKind adaptation = AdaptationKind::SpeedMeasure;
  OptimizerKind optimizer = OptimizerKind::Adam;
  EntropyApprox entropy = EntropyApprox::LocalGaussian;
  /// Initial log step size (MALA) or log preconditioner scale (HMC);
  /// unset selects -2 for MALA and -3 for HMC.
  std::optional<double> init_log_scale;
  bool freeze_prior_during_mcmc = false;
  /// Compute analytic metrics every this many epochs (and at phase ends).
  std::size_t metrics_every = 1;

  double resolved_alpha_star() const;
  double resolved_init_log_scale() const;
  bool uses_mcmc() const { return preconditioner != TrainPreconditioner::None && K > 0; }
  /// Throws ConfigError on invalid values.
  void validate() const;
};

struct TrainEvent {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string kind;  // "non_finite_loss", "divergent", "singular_jacobian"
  std::string detail;
};

struct TrainState {
  KernelParams phi1;
  double beta = 1.0;
  std::size_t step = 0;
  std::optional<DualAveragingState> dual;
  std::size_t accepted_total = 0;
  std::size_t proposed_total = 0;
  std::deque<double> recent_accept;  // per kernel step 0/1, trailing window
  std::vector<TrainEvent> events;
  std::size_t consecutive_failures = 0;
};

struct ChainRecord {
  Vector z0, zK;
  std::size_t accepted = 0;
  std::size_t divergent = 0;
  double mean_log_alpha = 0.0;
  double elbo = 0.0;  // single-sample ELBO at z0
};

struct MetricsRow {
  std::size_t epoch = 0;
  std::string phase;  // "init", "pretrain" or "mcmc"
  double elbo = 0.0;
  double accept_rate = 0.0;
  double beta = 1.0;
  double log_h = 0.0;
  std::optional<double> delta_loglik;
  std::optional<double> kappa_raw;
  std::optional<double> kappa_transformed;
};

/// Optimizers and running state for one training run.
class Trainer {
 public:
  Trainer(VariationalModel& model, const TrainConfig& cfg);

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }
  VariationalModel& model() { return model_; }

  /// Pathwise ELBO step over a batch (rows of `data` listed in `rows`).
  /// Returns the batch-mean single-sample ELBO estimate.
  double elbo_step(const Matrix& data, const std::vector<std::size_t>& rows, const RngStream& rng);
  /// One short-run chain update of theta, phi0 and the kernel over a batch.
  std::vector<ChainRecord> algorithm1_step(const Matrix& data, const std::vector<std::size_t>& rows,
                                           const RngStream& rng);
  /// Trailing acceptance fraction over the last `window` kernel steps.
  double trailing_accept(std::size_t window) const;

  /// Kernel parameters to use after training (dual averaging uses its average).
  KernelParams final_kernel() const;
  void set_epoch(std::size_t epoch) { epoch_ = epoch; }

 private:
  void record_event(const std::string& kind, const std::string& detail);

  VariationalModel& model_;
  TrainConfig cfg_;
  TrainState state_;
  Optimizer opt_theta_, opt_phi0_, opt_phi1_;
  std::size_t epoch_ = 0;
};

/// Optional analytic hooks for metrics on linear models.
struct MetricsHooks {
  const LinearHVAE* truth = nullptr;  // enables delta_loglik
};

struct TrainResult {
  TrainState state;
  KernelParams kernel;
  std::vector<MetricsRow> metrics;
  double pretrain_delta_loglik = 0.0;  // gap right after pretraining (linear models with truth)
};

/// Kernel parameters implied by the config for a latent dimension.
KernelParams initial_kernel(const TrainConfig& cfg, std::size_t dim);

/// pretrain_epochs of elbo_step followed by mcmc_epochs of algorithm1_step.
TrainResult train(VariationalModel& model, const Matrix& data, const TrainConfig& cfg, const MetricsHooks& hooks = {});

/// Speed-measure (or dual-averaging) adaptation of a kernel on a fixed
/// target with a persistent chain; returns per-step acceptance probabilities.
struct AdaptResult {
  KernelParams kernel;
  double beta = 1.0;
  std::vector<double> accept_prob;
  std::vector<int> accepted;
  Vector final_state;
};
AdaptResult adapt_kernel(const Potential& target, KernelParams kernel, const Vector& z0, std::size_t steps,
                         AdaptationKind adaptation, double lr_phi1, double lr_beta, double alpha_star,
                         RngStream& rng, OptimizerKind optimizer = OptimizerKind::Adam);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);
void write_events_jsonl(const std::string& path, const std::vector<TrainEvent>& events);

std::string to_string(KernelKind k);
std::string to_string(TrainPreconditioner p);
std::string to_string(AdaptationKind a);
std::string to_string(OptimizerKind o);

}  // namespace speedvae
