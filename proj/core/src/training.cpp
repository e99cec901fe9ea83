#include "speedvae/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "speedvae/evaluation.hpp"
#include "speedvae/targets.hpp"

namespace speedvae {

namespace {

constexpr std::size_t kAcceptWindow = 5000;
constexpr std::size_t kMaxConsecutiveFailures = 10;

bool recoverable(ErrorCode c) {
  return c == ErrorCode::NonFiniteLoss || c == ErrorCode::DivergentTrajectory || c == ErrorCode::SingularJacobian ||
         c == ErrorCode::NonFiniteGradient;
}

std::string event_kind(ErrorCode c) {
  switch (c) {
    case ErrorCode::NonFiniteLoss: return "non_finite_loss";
    case ErrorCode::DivergentTrajectory: return "divergent";
    case ErrorCode::SingularJacobian: return "singular_jacobian";
    case ErrorCode::NonFiniteGradient: return "non_finite_gradient";
    default: return std::string(to_string(c));
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

}  // namespace

// ---------------------------------------------------------------------------
// Optimizers

void optimizer_apply(Matrix& param, const Matrix& grad, OptimizerKind kind, double lr, OptimizerSlot& slot,
                     double beta1, double beta2, double eps) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
    raise(ErrorCode::ShapeMismatch, "optimizer_apply: parameter and gradient shapes differ");
  }
  if (kind == OptimizerKind::Sgd) {
    param += lr * grad;
    return;
  }
  if (slot.m.rows() != param.rows() || slot.m.cols() != param.cols()) {
    slot.m = Matrix::Zero(param.rows(), param.cols());
    slot.v = Matrix::Zero(param.rows(), param.cols());
    slot.t = 0;
  }
  ++slot.t;
  slot.m = beta1 * slot.m + (1.0 - beta1) * grad;
  slot.v = beta2 * slot.v + (1.0 - beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(slot.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(slot.t));
  param.array() += lr * (slot.m.array() / c1) / ((slot.v.array() / c2).sqrt() + eps);
}

void Optimizer::step(ad::ParamStore& store, const std::vector<std::string>& frozen) {
  for (auto& e : store.entries()) {
    if (std::find(frozen.begin(), frozen.end(), e.name) != frozen.end()) continue;
    optimizer_apply(e.value, e.grad, kind_, lr_, slots_[e.name]);
  }
}

void Optimizer::step(Vector& param, const Vector& grad, const std::string& slot) {
  Matrix p = param;
  optimizer_apply(p, Matrix(grad), kind_, lr_, slots_[slot]);
  param = p.col(0);
}

// ---------------------------------------------------------------------------
// Config

double TrainConfig::resolved_alpha_star() const {
  if (alpha_star > 0.0) return alpha_star;
  return kernel == KernelKind::Mala ? 0.574 : 0.65;
}

double TrainConfig::resolved_init_log_scale() const {
  if (init_log_scale) return *init_log_scale;
  return kernel == KernelKind::Mala ? -2.0 : -3.0;
}

void TrainConfig::validate() const {
  auto check = [](bool ok, const char* msg) {
    if (!ok) raise(ErrorCode::ConfigError, msg);
  };
  check(lr_phi0 > 0 && lr_phi1 > 0 && lr_theta > 0 && lr_beta > 0, "learning rates must be positive");
  check(K >= 1, "K must be >= 1");
  check(leapfrog_L >= 1, "leapfrog_L must be >= 1");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(metrics_every >= 1, "metrics_every must be >= 1");
  check(alpha_star < 0.0 || (alpha_star > 0.0 && alpha_star < 1.0), "alpha_star must lie in (0, 1)");
  check(!init_log_scale || std::isfinite(*init_log_scale), "init_log_scale must be finite");
}

KernelParams initial_kernel(const TrainConfig& cfg, std::size_t dim) {
  const PreconditionerKind pc = cfg.preconditioner == TrainPreconditioner::LowerTriangular
                                    ? PreconditionerKind::LowerTriangular
                                    : PreconditionerKind::Diagonal;
  KernelParams k;
  if (cfg.kernel == KernelKind::Mala) {
    k = KernelParams::mala(dim, pc, cfg.resolved_init_log_scale());
  } else if (cfg.adaptation == AdaptationKind::DualAveraging) {
    k = KernelParams::hmc(dim, pc, cfg.leapfrog_L, 0.0);
    k.log_h = cfg.resolved_init_log_scale();
  } else {
    k = KernelParams::hmc(dim, pc, cfg.leapfrog_L, cfg.resolved_init_log_scale());
  }
  k.entropy = cfg.entropy;
  k.target_accept = cfg.resolved_alpha_star();
  k.beta = 1.0;
  return k;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(VariationalModel& model, const TrainConfig& cfg)
    : model_(model),
      cfg_(cfg),
      opt_theta_(cfg.optimizer, cfg.lr_theta),
      opt_phi0_(cfg.optimizer, cfg.lr_phi0),
      opt_phi1_(cfg.optimizer, cfg.lr_phi1) {
  state_.phi1 = initial_kernel(cfg, model.latent_dim());
  state_.beta = 1.0;
  if (cfg.adaptation == AdaptationKind::DualAveraging) state_.dual = dual_averaging_init(state_.phi1.log_h);
}

void Trainer::record_event(const std::string& kind, const std::string& detail) {
  state_.events.push_back({state_.step, epoch_, kind, detail});
}

double Trainer::elbo_step(const Matrix& data, const std::vector<std::size_t>& rows, const RngStream& rng) {
  if (rows.empty()) raise(ErrorCode::InvalidArgument, "elbo_step: empty batch");
  ad::ParamStore& theta = model_.theta();
  ad::ParamStore& phi0 = model_.phi0();
  theta.zero_grad();
  phi0.zero_grad();
  const double w = 1.0 / static_cast<double>(rows.size());
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    RngStream r = rng.derive(i);
    const Vector x = data.row(static_cast<Eigen::Index>(rows[i])).transpose();
    const Vector eps = sample_standard_normal(model_.latent_dim(), r);
    ad::Tape tape;
    const Bindings th = bind(tape, theta, true);
    const Bindings ph = bind(tape, phi0, true);
    const auto pass = model_.taped_elbo(tape, th, ph, x, eps);
    const double value = pass.elbo.scalar();
    if (!std::isfinite(value)) {
      theta.zero_grad();
      phi0.zero_grad();
      ++state_.step;
      raise(ErrorCode::NonFiniteLoss, "elbo_step: non-finite ELBO");
    }
    tape.backward(ad::scale(pass.elbo, w));
    total += value;
  }
  opt_theta_.step(theta);
  opt_phi0_.step(phi0);
  ++state_.step;
  state_.consecutive_failures = 0;
  return total * w;
}

std::vector<ChainRecord> Trainer::algorithm1_step(const Matrix& data, const std::vector<std::size_t>& rows,
                                                  const RngStream& rng) {
  if (rows.empty()) raise(ErrorCode::InvalidArgument, "algorithm1_step: empty batch");
  ad::ParamStore& theta = model_.theta();
  ad::ParamStore& phi0 = model_.phi0();
  theta.zero_grad();
  phi0.zero_grad();
  KernelParams& k = state_.phi1;
  k.beta = state_.beta;
  const std::size_t B = rows.size();
  const std::size_t K = cfg_.K;
  const double w = 1.0 / static_cast<double>(B);
  Vector g_phi1 = Vector::Zero(static_cast<Eigen::Index>(k.packed_size()));
  std::size_t accepted = 0, gradient_terms = 0;
  double accept_prob_sum = 0.0;
  std::vector<ChainRecord> records;
  records.reserve(B);
  const std::unique_ptr<PosteriorFactory> posterior = model_.posterior_factory();

  for (std::size_t i = 0; i < B; ++i) {
    RngStream r = rng.derive(i);
    const Vector x = data.row(static_cast<Eigen::Index>(rows[i])).transpose();
    const Vector eps = sample_standard_normal(model_.latent_dim(), r);
    ChainRecord rec;
    {
      // (i) z0 from q0 and the phi0 ELBO gradient; theta is data here.
      ad::Tape tape;
      const Bindings th = bind(tape, theta, false);
      const Bindings ph = bind(tape, phi0, true);
      const auto pass = model_.taped_elbo(tape, th, ph, x, eps);
      if (!std::isfinite(pass.elbo.scalar())) {
        theta.zero_grad();
        phi0.zero_grad();
        ++state_.step;
        raise(ErrorCode::NonFiniteLoss, "algorithm1_step: non-finite ELBO");
      }
      tape.backward(ad::scale(pass.elbo, w));
      rec.z0 = pass.z.vec();
      rec.elbo = pass.elbo.scalar();
    }
    // (ii) K kernel steps with speed-measure gradient contributions.
    const std::unique_ptr<Potential> target_ptr = posterior->make(x);
    const Potential& target = *target_ptr;
    Vector z = rec.z0;
    double log_alpha_sum = 0.0;
    for (std::size_t s = 0; s < K; ++s) {
      const KernelOutput out = mh_step(z, target, k, r);
      if (out.divergent) {
        ++rec.divergent;
        record_event("divergent", "kernel step " + std::to_string(s) + " of batch element " + std::to_string(i));
      } else if (cfg_.adaptation == AdaptationKind::SpeedMeasure) {
        const SpeedMeasureTerm term = speed_measure_grad_contrib(out, z, target, k);
        if (term.grad.allFinite()) {
          g_phi1 += term.grad;
          ++gradient_terms;
        } else {
          record_event("singular_jacobian", "non-finite adaptation gradient");
        }
      }
      if (out.accepted) ++rec.accepted;
      const double prob = std::isfinite(out.log_alpha) ? std::exp(out.log_alpha) : 0.0;
      accept_prob_sum += prob;
      log_alpha_sum += std::isfinite(out.log_alpha) ? out.log_alpha : 0.0;
      state_.recent_accept.push_back(out.accepted ? 1.0 : 0.0);
      if (state_.recent_accept.size() > kAcceptWindow) state_.recent_accept.pop_front();
      z = out.next_state;
    }
    rec.zK = z;
    rec.mean_log_alpha = K > 0 ? log_alpha_sum / static_cast<double>(K) : 0.0;
    accepted += rec.accepted;
    // (iii) theta gradient at the detached final state.
    model_.accumulate_theta_grad(x, rec.zK, theta, w);
    records.push_back(std::move(rec));
  }

  // (iv) parameter updates.
  opt_phi0_.step(phi0);
  std::vector<std::string> frozen;
  if (cfg_.freeze_prior_during_mcmc) frozen = model_.prior_param_names();
  opt_theta_.step(theta, frozen);
  const std::size_t proposals = B * K;
  if (proposals > 0) {
    if (cfg_.adaptation == AdaptationKind::SpeedMeasure) {
      if (gradient_terms > 0) {
        Vector packed = k.packed();
        opt_phi1_.step(packed, g_phi1 / static_cast<double>(proposals));
        k.set_packed(packed);
      }
      state_.beta = beta_update(state_.beta, accepted, proposals, cfg_.resolved_alpha_star(), cfg_.lr_beta);
      k.beta = state_.beta;
    } else if (cfg_.adaptation == AdaptationKind::DualAveraging) {
      state_.dual = dual_averaging_update(*state_.dual, accept_prob_sum / static_cast<double>(proposals),
                                          cfg_.resolved_alpha_star());
      k.log_h = state_.dual->log_h;
    }
  }
  state_.accepted_total += accepted;
  state_.proposed_total += proposals;
  ++state_.step;
  state_.consecutive_failures = 0;
  return records;
}

double Trainer::trailing_accept(std::size_t window) const {
  const auto& r = state_.recent_accept;
  if (r.empty()) return 0.0;
  const std::size_t n = std::min(window, r.size());
  return std::accumulate(r.end() - static_cast<std::ptrdiff_t>(n), r.end(), 0.0) / static_cast<double>(n);
}

KernelParams Trainer::final_kernel() const {
  KernelParams k = state_.phi1;
  if (state_.dual && state_.dual->counter > 0) k.log_h = state_.dual->log_h_avg;
  k.beta = state_.beta;
  return k;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

double effective_log_scale(const KernelParams& k) {
  const double d = static_cast<double>(k.dim());
  const double base = k.log_det_preconditioner() / d;
  return k.kind == KernelKind::Mala ? base + k.log_h : base;
}

}  // namespace

TrainResult train(VariationalModel& model, const Matrix& data, const TrainConfig& cfg, const MetricsHooks& hooks) {
  cfg.validate();
  if (data.rows() == 0) raise(ErrorCode::InvalidArgument, "train: dataset is empty");
  if (static_cast<std::size_t>(data.cols()) != model.data_dim()) {
    raise(ErrorCode::DimensionMismatch, "train: data dimension does not match the model");
  }
  Trainer trainer(model, cfg);
  TrainResult result;
  const std::size_t total_epochs = cfg.pretrain_epochs + cfg.mcmc_epochs;
  const std::size_t n = static_cast<std::size_t>(data.rows());
  const RngStream root(cfg.seed, 0x7a11);
  const auto* linear = dynamic_cast<const LinearVAE*>(&model);
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 0; epoch < total_epochs; ++epoch) {
    trainer.set_epoch(epoch);
    const bool mcmc_phase = epoch >= cfg.pretrain_epochs;
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle_rng = root.derive(2 * epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const RngStream epoch_rng = root.derive(2 * epoch + 1);

    double elbo_sum = 0.0;
    std::size_t elbo_batches = 0;
    const std::size_t acc0 = trainer.state().accepted_total, prop0 = trainer.state().proposed_total;
    for (std::size_t start = 0, b = 0; start < n; start += cfg.batch_size, ++b) {
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + cfg.batch_size)));
      const RngStream rng = epoch_rng.derive(b);
      try {
        if (mcmc_phase && cfg.uses_mcmc()) {
          const std::vector<ChainRecord> recs = trainer.algorithm1_step(data, rows, rng);
          double batch = 0.0;
          for (const ChainRecord& rec : recs) batch += rec.elbo;
          elbo_sum += batch / static_cast<double>(recs.size());
          ++elbo_batches;
        } else {
          elbo_sum += trainer.elbo_step(data, rows, rng);
          ++elbo_batches;
        }
      } catch (const Error& e) {
        if (!recoverable(e.code())) throw;
        TrainState& st = trainer.state();
        st.events.push_back({st.step, epoch, event_kind(e.code()), e.what()});
        if (++st.consecutive_failures >= kMaxConsecutiveFailures) throw;
      }
    }

    const bool phase_end = epoch + 1 == cfg.pretrain_epochs || epoch + 1 == total_epochs;
    MetricsRow row;
    row.epoch = epoch + 1;
    row.phase = mcmc_phase ? "mcmc" : "pretrain";
    const TrainState& st = trainer.state();
    const std::size_t props = st.proposed_total - prop0;
    row.accept_rate = props > 0 ? static_cast<double>(st.accepted_total - acc0) / static_cast<double>(props) : 0.0;
    row.beta = st.beta;
    row.log_h = effective_log_scale(st.phi1);
    row.elbo = elbo_batches > 0 ? elbo_sum / static_cast<double>(elbo_batches) : 0.0;
    if (linear != nullptr && ((epoch + 1) % cfg.metrics_every == 0 || phase_end)) {
      row.elbo = linear->mean_analytic_elbo(data);
      if (hooks.truth != nullptr) row.delta_loglik = loglik_gap(*hooks.truth, linear->generator(), data).mean;
      const Matrix c = trainer.final_kernel().preconditioner();
      const ConditionDiagnostics diag =
          condition_diagnostics(linear->generator(), cfg.uses_mcmc() ? &c : nullptr);
      row.kappa_raw = diag.kappa_raw;
      row.kappa_transformed = diag.kappa_transformed;
    }
    if (epoch + 1 == cfg.pretrain_epochs && row.delta_loglik) result.pretrain_delta_loglik = *row.delta_loglik;
    result.metrics.push_back(row);
  }
  result.state = trainer.state();
  result.kernel = trainer.final_kernel();
  return result;
}

AdaptResult adapt_kernel(const Potential& target, KernelParams kernel, const Vector& z0, std::size_t steps,
                         AdaptationKind adaptation, double lr_phi1, double lr_beta, double alpha_star,
                         RngStream& rng, OptimizerKind optimizer) {
  AdaptResult res;
  Optimizer opt(optimizer, lr_phi1);
  std::optional<DualAveragingState> dual;
  if (adaptation == AdaptationKind::DualAveraging) dual = dual_averaging_init(kernel.log_h);
  Vector z = z0;
  res.accept_prob.reserve(steps);
  res.accepted.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const KernelOutput out = mh_step(z, target, kernel, rng);
    const double prob = std::isfinite(out.log_alpha) ? std::exp(out.log_alpha) : 0.0;
    if (adaptation == AdaptationKind::SpeedMeasure) {
      if (!out.divergent) {
        const SpeedMeasureTerm term = speed_measure_grad_contrib(out, z, target, kernel);
        if (term.grad.allFinite()) {
          Vector packed = kernel.packed();
          opt.step(packed, term.grad);
          kernel.set_packed(packed);
        }
      }
      kernel.beta = beta_update(kernel.beta, out.accepted ? 1 : 0, 1, alpha_star, lr_beta);
    } else if (adaptation == AdaptationKind::DualAveraging) {
      dual = dual_averaging_update(*dual, prob, alpha_star);
      kernel.log_h = dual->log_h;
    }
    res.accept_prob.push_back(prob);
    res.accepted.push_back(out.accepted ? 1 : 0);
    z = out.next_state;
  }
  if (dual && dual->counter > 0) kernel.log_h = dual->log_h_avg;
  res.beta = kernel.beta;
  res.kernel = kernel;
  res.final_state = z;
  return res;
}

// ---------------------------------------------------------------------------
// Output

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::IoError, "cannot open metrics file " + path);
  out << "epoch,phase,elbo,accept_rate,beta,log_h,delta_loglik,kappa_raw,kappa_transformed\n";
  for (const MetricsRow& r : rows) {
    out << r.epoch << ',' << r.phase << ',' << format_double(r.elbo) << ',' << format_double(r.accept_rate) << ','
        << format_double(r.beta) << ',' << format_double(r.log_h) << ',' << format_optional(r.delta_loglik) << ','
        << format_optional(r.kappa_raw) << ',' << format_optional(r.kappa_transformed) << '\n';
  }
  if (!out) raise(ErrorCode::IoError, "failed writing metrics file " + path);
}

void write_events_jsonl(const std::string& path, const std::vector<TrainEvent>& events) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::IoError, "cannot open event log " + path);
  for (const TrainEvent& e : events) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["epoch"] = e.epoch;
    j["kind"] = e.kind;
    j["detail"] = e.detail;
    out << j.dump() << '\n';
  }
  if (!out) raise(ErrorCode::IoError, "failed writing event log " + path);
}

std::string to_string(KernelKind k) { return k == KernelKind::Mala ? "mala" : "hmc"; }

std::string to_string(TrainPreconditioner p) {
  switch (p) {
    case TrainPreconditioner::Diagonal: return "diagonal";
    case TrainPreconditioner::LowerTriangular: return "lower-triangular";
    case TrainPreconditioner::None: return "none";
  }
  return "none";
}

std::string to_string(AdaptationKind a) {
  switch (a) {
    case AdaptationKind::SpeedMeasure: return "speed-measure";
    case AdaptationKind::DualAveraging: return "dual-averaging";
    case AdaptationKind::Fixed: return "fixed";
  }
  return "fixed";
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::Sgd ? "sgd" : "adam"; }

}  // namespace speedvae
