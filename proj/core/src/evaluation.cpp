#include "speedvae/evaluation.hpp"

#include <cmath>

#include <json.hpp>

#include "speedvae/targets.hpp"

namespace speedvae {

void ISConfig::validate() const {
  if (S < 1) raise(ErrorCode::ConfigError, "ISConfig: S must be >= 1");
  if (!(tau >= 1.0)) raise(ErrorCode::ConfigError, "ISConfig: tau must be >= 1");
}

double importance_sampling_loglik(const LatentModel& model, const Vector& x, const GaussianMoments& proposal,
                                  std::size_t S, RngStream& rng) {
  if (S < 1) raise(ErrorCode::InvalidArgument, "importance sampling: S must be >= 1");
  Matrix lower;
  try {
    lower = cholesky_lower(proposal.cov);
  } catch (const Error& e) {
    raise(ErrorCode::DegenerateProposal, std::string("importance sampling: proposal scale is not positive (") +
                                             e.what() + ")");
  }
  if (!(lower.diagonal().array() > 0.0).all() || !lower.allFinite()) {
    raise(ErrorCode::DegenerateProposal, "importance sampling: proposal scale is not positive");
  }
  const double log_det = lower.diagonal().array().log().sum();
  const auto d = proposal.mean.size();
  Vector log_w(static_cast<Eigen::Index>(S));
  for (std::size_t s = 0; s < S; ++s) {
    const Vector eps = sample_standard_normal(static_cast<std::size_t>(d), rng);
    const Vector z = proposal.mean + lower * eps;
    const double log_r = -0.5 * eps.squaredNorm() - log_det - 0.5 * static_cast<double>(d) * kLog2Pi;
    log_w(static_cast<Eigen::Index>(s)) = model.log_joint(x, z) - log_r;
  }
  return log_sum_exp(log_w) - std::log(static_cast<double>(S));
}

double importance_sampling_loglik(const VariationalModel& model, const Vector& x, const ISConfig& cfg,
                                  RngStream& rng, const KernelParams* kernel) {
  cfg.validate();
  GaussianMoments q = model.encoder_gaussian(x);
  q.cov *= cfg.tau;
  if (cfg.proposal_mode == ProposalMode::ChainMean) {
    if (kernel == nullptr) raise(ErrorCode::InvalidArgument, "chain-mean proposal requires a kernel");
    const PosteriorPotential target(model, x);
    const std::size_t K = std::max<std::size_t>(cfg.chain_K, 1);
    const std::size_t keep = std::max<std::size_t>(1, K / 2);
    Vector z = q.mean;
    Vector acc = Vector::Zero(z.size());
    for (std::size_t k = 0; k < K; ++k) {
      z = mh_step(z, target, *kernel, rng).next_state;
      if (k + keep >= K) acc += z;
    }
    q.mean = acc / static_cast<double>(keep);
  }
  return importance_sampling_loglik(model, x, q, cfg.S, rng);
}

ConditionDiagnostics condition_diagnostics(const LinearHVAE& model, const Matrix* c) {
  const Matrix precision = model.posterior_precision();
  cholesky(precision);  // raises NotPositiveDefinite
  ConditionDiagnostics out;
  out.kappa_raw = condition_number(precision);
  if (c != nullptr) {
    if (c->rows() != precision.rows() || c->cols() != precision.cols()) {
      raise(ErrorCode::DimensionMismatch, "condition_diagnostics: preconditioner shape mismatch");
    }
    Matrix t = c->transpose() * precision * *c;
    t = 0.5 * (t + t.transpose());
    out.kappa_transformed = condition_number(t);
  }
  return out;
}

LoglikGap loglik_gap(const LinearHVAE& truth, const LinearHVAE& estimate, const Matrix& data) {
  LoglikGap g;
  if (data.rows() == 0) return g;
  g.mean = truth.mean_marginal_loglik(data) - estimate.mean_marginal_loglik(data);
  g.abs = std::abs(g.mean);
  return g;
}

std::string EvaluationReport::to_json() const {
  nlohmann::ordered_json j;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  j["dataset"] = dataset;
  j["model"] = model;
  j["kernel"] = kernel;
  j["adaptation"] = adaptation;
  j["kappa_raw"] = opt(kappa_raw);
  j["kappa_transformed"] = opt(kappa_transformed);
  j["gap_mean"] = opt(gap_mean);
  j["gap_abs"] = opt(gap_abs);
  j["is_loglik_mean"] = is_loglik_mean;
  j["S"] = S;
  j["tau"] = tau;
  j["seed"] = seed;
  return j.dump(2);
}

}  // namespace speedvae
