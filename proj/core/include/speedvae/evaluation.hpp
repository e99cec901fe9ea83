#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "speedvae/kernels.hpp"
#include "speedvae/models.hpp"

namespace speedvae {

enum class ProposalMode { EncoderMean, ChainMean };

struct ISConfig {
  std::size_t S = 1000;
  double tau = 1.5;
  ProposalMode proposal_mode = ProposalMode::EncoderMean;
  /// Burn-in kernel steps for the chain-mean proposal.
  std::size_t chain_K = 10;

  void validate() const;
};

/// log (1/S) sum_s p(x, z_s) / r(z_s), z_s ~ r = N(mean, cov).
double importance_sampling_loglik(const LatentModel& model, const Vector& x, const GaussianMoments& proposal,
                                  std::size_t S, RngStream& rng);

/// Proposal N(m, tau * Sigma_q0(x)); m is the encoder mean or, in chain-mean
/// mode, the average of the last max(1, K/2) states of a K-step chain started
/// at the encoder mean (requires `kernel`).
double importance_sampling_loglik(const VariationalModel& model, const Vector& x, const ISConfig& cfg,
                                  RngStream& rng, const KernelParams* kernel = nullptr);

struct ConditionDiagnostics {
  double kappa_raw = 0.0;
  std::optional<double> kappa_transformed;
};

/// kappa(Sigma_{z|x}^{-1}) and, when `c` is given, kappa(C^T Sigma_{z|x}^{-1} C).
ConditionDiagnostics condition_diagnostics(const LinearHVAE& model, const Matrix* c);

struct LoglikGap {
  double mean = 0.0;  // true minus estimated
  double abs = 0.0;
};

LoglikGap loglik_gap(const LinearHVAE& truth, const LinearHVAE& estimate, const Matrix& data);

struct EvaluationReport {
  std::string dataset;
  std::string model;
  std::string kernel;
  std::string adaptation;
  std::optional<double> kappa_raw;
  std::optional<double> kappa_transformed;
  std::optional<double> gap_mean;
  std::optional<double> gap_abs;
  double is_loglik_mean = 0.0;
  std::size_t S = 0;
  double tau = 0.0;
  std::uint64_t seed = 0;

  std::string to_json() const;
};

}  // namespace speedvae
