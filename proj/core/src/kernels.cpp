#include "speedvae/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "speedvae/autodiff.hpp"

namespace speedvae {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Vector checked_grad(const Potential& p, const Vector& z) {
  Vector g = p.grad(z);
  if (!g.allFinite()) raise(ErrorCode::NonFiniteGradient, "potential gradient is not finite");
  return g;
}

double log_std_normal(const Vector& v) {
  return -0.5 * v.squaredNorm() - 0.5 * static_cast<double>(v.size()) * kLog2Pi;
}

/// log|det| of the entropy determinant argument; throws SingularJacobian.
double checked_log_abs_det(const Matrix& m) {
  const Eigen::PartialPivLU<Matrix> lu(m);
  const Vector pivots = lu.matrixLU().diagonal().cwiseAbs();
  if (pivots.size() == 0) return 0.0;
  if (pivots.minCoeff() <= 1e-12 * std::max(1.0, pivots.maxCoeff())) {
    raise(ErrorCode::SingularJacobian, "entropy approximation: determinant argument is singular");
  }
  return pivots.array().log().sum();
}

/// Scalar leapfrog Jacobian polynomial q_L(lambda) with q_0 = 0, p_0 = 1, and
/// its derivative. The whitened Jacobian on a quadratic is q_L(B).
struct PolyValue {
  double q = 0.0;
  double dq = 0.0;
};

PolyValue leapfrog_polynomial(double lambda, int steps) {
  double p = 1.0, dp = 0.0, q = 0.0, dq = 0.0;
  for (int l = 0; l < steps; ++l) {
    const double half = p - 0.5 * lambda * q;
    const double dhalf = dp - 0.5 * q - 0.5 * lambda * dq;
    q += half;
    dq += dhalf;
    p = half - 0.5 * lambda * q;
    dp = dhalf - 0.5 * q - 0.5 * lambda * dq;
  }
  return {q, dq};
}

void check_poly_values(const Vector& qs) {
  const double scale = std::max(1.0, qs.cwiseAbs().maxCoeff());
  if ((qs.cwiseAbs().array() <= 1e-12 * scale).any()) {
    raise(ErrorCode::SingularJacobian, "entropy approximation: leapfrog Jacobian is singular");
  }
}

/// log|det q_L(B)| for symmetric B.
double leapfrog_log_det(const Matrix& b, int steps) {
  const Matrix sym = 0.5 * (b + b.transpose());
  const Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  Vector qs(sym.rows());
  for (Eigen::Index i = 0; i < qs.size(); ++i) qs(i) = leapfrog_polynomial(es.eigenvalues()(i), steps).q;
  check_poly_values(qs);
  return qs.cwiseAbs().array().log().sum();
}

/// Taped log|det q_L(B)|; the adjoint is V diag(q'/q) V^T.
ad::Var taped_leapfrog_log_det(ad::Var b, int steps) {
  const Matrix sym = 0.5 * (b.value() + b.value().transpose());
  const Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  const Eigen::Index n = sym.rows();
  Vector qs(n), ratio(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const PolyValue pv = leapfrog_polynomial(es.eigenvalues()(i), steps);
    qs(i) = pv.q;
    ratio(i) = pv.dq / pv.q;
  }
  check_poly_values(qs);
  Matrix out(1, 1);
  out(0, 0) = qs.cwiseAbs().array().log().sum();
  const Matrix grad = es.eigenvectors() * ratio.asDiagonal() * es.eigenvectors().transpose();
  const std::size_t ib = b.id;
  return b.tape->record(std::move(out), b.tape->requires_grad(ib),
                        [ib, grad](ad::Tape& t, const Matrix& g) { t.add_adjoint(ib, Matrix(g(0, 0) * grad)); });
}

double entropy_log_det_term(const KernelParams& k, const Matrix& c, const Matrix& h) {
  const Matrix b = c.transpose() * h * c;
  const int l = k.leapfrog_steps;
  if (k.entropy == EntropyApprox::FirstOrder) {
    const double factor = (static_cast<double>(l) * l - 1.0) / 6.0;
    const Matrix arg = Matrix::Identity(b.rows(), b.cols()) - factor * b;
    return static_cast<double>(b.rows()) * std::log(static_cast<double>(l)) + checked_log_abs_det(arg);
  }
  return leapfrog_log_det(b, l);
}

// Taped objective -----------------------------------------------------------

struct TapedObjective {
  ad::Var objective;
  ad::Var log_alpha;
  ad::Var log_r;
};

struct TapedPrecond {
  ad::Var c;
  ad::Var log_det;
};

TapedPrecond taped_preconditioner(ad::Tape& tape, ad::Var packed_precond, const KernelParams& k) {
  const std::size_t d = k.dim();
  if (k.precond == PreconditionerKind::Diagonal) {
    ad::Var scaled = packed_precond;
    if (k.kind == KernelKind::Hmc && k.log_h != 0.0) scaled = ad::scale_shift(packed_precond, 1.0, k.log_h);
    return {ad::diag_matrix(ad::exp(scaled)), ad::sum(scaled)};
  }
  ad::Var c = ad::lower_from_packed(packed_precond, d);
  ad::Var log_det = ad::log_det_lower_triangular(c);
  if (k.kind == KernelKind::Hmc && k.log_h != 0.0) {
    c = ad::scale(c, std::exp(k.log_h));
    log_det = ad::scale_shift(log_det, 1.0, static_cast<double>(d) * k.log_h);
  }
  (void)tape;
  return {c, log_det};
}

TapedObjective taped_objective(ad::Tape& tape, ad::Var packed, const Vector& v, const Vector& z_prev,
                               const Potential& p, const KernelParams& k) {
  const auto d = static_cast<Eigen::Index>(k.dim());
  const ad::Var z = tape.constant(z_prev);
  const ad::Var vv = tape.constant(v);
  const Vector g0 = checked_grad(p, z_prev);
  const double u0 = p.value(z_prev);
  const double log_nu = log_std_normal(v);

  if (k.kind == KernelKind::Mala) {
    const ad::Var log_h = ad::slice(packed, 0, 1);
    const TapedPrecond pc = taped_preconditioner(tape, ad::slice(packed, 1, packed.rows() - 1), k);
    const ad::Var h = ad::exp(log_h);
    const ad::Var half_h2 = ad::scale(ad::square(h), 0.5);
    const ad::Var g = tape.constant(g0);
    const ad::Var ct_g = ad::matmul(ad::transpose(pc.c), g);
    const ad::Var drift = ad::matmul(pc.c, ct_g);
    const ad::Var z_prop = ad::sub(ad::add(z, ad::scalar_times(h, ad::matmul(pc.c, vv))),
                                   ad::scalar_times(half_h2, drift));
    const ad::Var g_prop = ad::potential_grad(p, z_prop);
    const ad::Var u_prop = ad::potential_value(p, z_prop);
    const ad::Var w = ad::sub(vv, ad::scalar_times(ad::scale(h, 0.5),
                                                  ad::matmul(ad::transpose(pc.c), ad::add(g, g_prop))));
    const double const_part = -u0 - 0.5 * v.squaredNorm();
    const ad::Var delta = ad::scale_shift(ad::add(u_prop, ad::scale(ad::squared_norm(w), 0.5)), 1.0, const_part);
    const ad::Var log_alpha = ad::min_zero(ad::neg(delta));
    // log r(z, T(v)) = log nu(v) - d log h - log|det C|
    const ad::Var log_r =
        ad::scale_shift(ad::neg(ad::add(ad::scale(log_h, static_cast<double>(d)), pc.log_det)), 1.0, log_nu);
    const ad::Var obj = ad::sub(log_alpha, ad::scale(log_r, k.beta));
    return {obj, log_alpha, log_r};
  }

  // HMC in whitened momentum u = C^T p: u_0 = v, kinetic energy 1/2 |u|^2.
  const TapedPrecond pc = taped_preconditioner(tape, packed, k);
  const ad::Var ct = ad::transpose(pc.c);
  ad::Var q = z;
  ad::Var u = vv;
  ad::Var grad_q = tape.constant(g0);
  std::vector<Vector> positions{z_prev};
  for (int l = 0; l < k.leapfrog_steps; ++l) {
    const ad::Var u_half = ad::sub(u, ad::scale(ad::matmul(ct, grad_q), 0.5));
    q = ad::add(q, ad::matmul(pc.c, u_half));
    grad_q = ad::potential_grad(p, q);
    u = ad::sub(u_half, ad::scale(ad::matmul(ct, grad_q), 0.5));
    positions.push_back(q.vec());
  }
  const ad::Var u_prop = ad::potential_value(p, q);
  const double const_part = -u0 - 0.5 * v.squaredNorm();
  const ad::Var delta = ad::scale_shift(ad::add(u_prop, ad::scale(ad::squared_norm(u), 0.5)), 1.0, const_part);
  const ad::Var log_alpha = ad::min_zero(ad::neg(delta));

  // Entropy term with the Hessian frozen at the midpoint.
  const Vector& q_mid = positions[static_cast<std::size_t>(k.leapfrog_steps / 2)];
  const ad::Var hess = tape.constant(p.hessian(q_mid));
  const ad::Var b = ad::matmul(ct, ad::matmul(hess, pc.c));
  const int steps = k.leapfrog_steps;
  ad::Var det_term;
  if (k.entropy == EntropyApprox::FirstOrder) {
    const double factor = (static_cast<double>(steps) * steps - 1.0) / 6.0;
    const ad::Var arg = ad::sub(tape.constant(Matrix(Matrix::Identity(d, d))), ad::scale(b, factor));
    det_term = ad::scale_shift(ad::log_abs_det(arg), 1.0, static_cast<double>(d) * std::log(static_cast<double>(steps)));
  } else {
    det_term = taped_leapfrog_log_det(b, steps);
  }
  const ad::Var log_r = ad::scale_shift(ad::neg(ad::add(pc.log_det, det_term)), 1.0, log_nu);
  const ad::Var obj = ad::sub(log_alpha, ad::scale(log_r, k.beta));
  return {obj, log_alpha, log_r};
}

}  // namespace

// ---------------------------------------------------------------------------
// KernelParams

KernelParams KernelParams::mala(std::size_t dim, PreconditionerKind precond, double log_h) {
  KernelParams k;
  k.kind = KernelKind::Mala;
  k.log_h = log_h;
  k.precond = precond;
  k.diag_log_scales = Vector::Zero(static_cast<Eigen::Index>(dim));
  k.lower = LowerTriangularFactor(dim);
  k.leapfrog_steps = 1;
  k.target_accept = 0.574;
  return k;
}

KernelParams KernelParams::hmc(std::size_t dim, PreconditionerKind precond, int leapfrog_steps, double log_scale) {
  KernelParams k;
  k.kind = KernelKind::Hmc;
  k.log_h = 0.0;
  k.precond = precond;
  k.diag_log_scales = Vector::Constant(static_cast<Eigen::Index>(dim), log_scale);
  k.lower = LowerTriangularFactor(dim);
  k.lower.log_diagonal().setConstant(log_scale);
  k.leapfrog_steps = leapfrog_steps;
  k.target_accept = 0.65;
  return k;
}

std::size_t KernelParams::dim() const {
  return precond == PreconditionerKind::Diagonal ? static_cast<std::size_t>(diag_log_scales.size()) : lower.dim();
}

double KernelParams::step_size() const { return std::exp(log_h); }

Matrix KernelParams::preconditioner() const {
  Matrix c = precond == PreconditionerKind::Diagonal ? Matrix(diag_log_scales.array().exp().matrix().asDiagonal())
                                                      : lower.realized();
  if (kind == KernelKind::Hmc && log_h != 0.0) c *= std::exp(log_h);
  return c;
}

double KernelParams::log_det_preconditioner() const {
  const double base = precond == PreconditionerKind::Diagonal ? diag_log_scales.sum() : lower.log_det();
  return kind == KernelKind::Hmc ? base + static_cast<double>(dim()) * log_h : base;
}

std::size_t KernelParams::packed_size() const {
  const std::size_t pc = precond == PreconditionerKind::Diagonal ? dim() : LowerTriangularFactor::packed_size(dim());
  return pc + (kind == KernelKind::Mala ? 1 : 0);
}

Vector KernelParams::packed() const {
  const Vector pc = precond == PreconditionerKind::Diagonal ? diag_log_scales : lower.packed();
  if (kind == KernelKind::Hmc) return pc;
  Vector out(pc.size() + 1);
  out(0) = log_h;
  out.tail(pc.size()) = pc;
  return out;
}

void KernelParams::set_packed(const Vector& packed) {
  if (static_cast<std::size_t>(packed.size()) != packed_size()) {
    raise(ErrorCode::DimensionMismatch, "KernelParams::set_packed: size mismatch");
  }
  const Eigen::Index off = kind == KernelKind::Mala ? 1 : 0;
  if (kind == KernelKind::Mala) log_h = packed(0);
  const Vector pc = packed.tail(packed.size() - off);
  if (precond == PreconditionerKind::Diagonal) {
    diag_log_scales = pc;
  } else {
    lower = LowerTriangularFactor::from_packed(lower.dim(), pc);
  }
}

void KernelParams::validate() const {
  if (!std::isfinite(log_h)) raise(ErrorCode::InvalidArgument, "KernelParams: log step size must be finite");
  if (leapfrog_steps < 1) raise(ErrorCode::InvalidArgument, "KernelParams: leapfrog_steps must be >= 1");
  if (!(beta > 0.0)) raise(ErrorCode::InvalidArgument, "KernelParams: beta must be positive");
  if (!(target_accept > 0.0 && target_accept < 1.0)) {
    raise(ErrorCode::InvalidArgument, "KernelParams: target acceptance must lie in (0, 1)");
  }
  if (!packed().allFinite()) raise(ErrorCode::InvalidArgument, "KernelParams: non-finite preconditioner");
}

// ---------------------------------------------------------------------------
// MALA

Vector mala_propose(const Vector& z, const Vector& v, const Potential& p, const KernelParams& k) {
  if (k.kind != KernelKind::Mala) raise(ErrorCode::InvalidArgument, "mala_propose: kernel is not MALA");
  if (z.size() != v.size() || static_cast<std::size_t>(z.size()) != k.dim()) {
    raise(ErrorCode::DimensionMismatch, "mala_propose: dimension mismatch");
  }
  const double h = k.step_size();
  const Matrix c = k.preconditioner();
  const Vector g = checked_grad(p, z);
  return z - 0.5 * h * h * (c * (c.transpose() * g)) + h * (c * v);
}

double mala_energy_error(const Vector& z, const Vector& z_prop, const Vector& v, const Potential& p,
                         const KernelParams& k) {
  const double h = k.step_size();
  const Matrix c = k.preconditioner();
  const Vector g = checked_grad(p, z);
  const Vector g_prop = checked_grad(p, z_prop);
  const Vector w = v - 0.5 * h * (c.transpose() * (g + g_prop));
  return p.value(z_prop) - p.value(z) - 0.5 * v.squaredNorm() + 0.5 * w.squaredNorm();
}

double mala_log_proposal_density(const Vector& z, const Vector& z_prop, const Potential& p, const KernelParams& k) {
  if (z.size() != z_prop.size()) raise(ErrorCode::DimensionMismatch, "mala_log_proposal_density: dimension mismatch");
  const double h = k.step_size();
  const Matrix c = k.preconditioner();
  const Vector g = checked_grad(p, z);
  const Vector mean = z - 0.5 * h * h * (c * (c.transpose() * g));
  if (k.precond == PreconditionerKind::Diagonal) {
    const Vector scale = h * k.diag_log_scales.array().exp().matrix();
    const Vector white = (z_prop - mean).cwiseQuotient(scale);
    return log_std_normal(white) - scale.array().log().sum();
  }
  return gaussian_logpdf_lower(z_prop, mean, h * c);
}

double mala_entropy(const KernelParams& k, std::size_t dim) {
  const double d = static_cast<double>(dim);
  return 0.5 * d * (1.0 + kLog2Pi) + d * k.log_h + k.log_det_preconditioner();
}

// ---------------------------------------------------------------------------
// HMC

LeapfrogResult hmc_leapfrog_from_momentum(const Vector& z, const Vector& momentum, const Potential& p,
                                          const KernelParams& k) {
  if (k.kind != KernelKind::Hmc) raise(ErrorCode::InvalidArgument, "hmc_leapfrog: kernel is not HMC");
  const Matrix c = k.preconditioner();
  LeapfrogResult out;
  out.positions.reserve(static_cast<std::size_t>(k.leapfrog_steps) + 1);
  out.positions.push_back(z);
  out.initial_momentum = momentum;
  Vector q = z;
  Vector mom = momentum;
  Vector g = p.grad(q);
  for (int l = 0; l < k.leapfrog_steps; ++l) {
    if (!g.allFinite()) raise(ErrorCode::DivergentTrajectory, "hmc_leapfrog: non-finite gradient");
    const Vector half = mom - 0.5 * g;
    q += c * (c.transpose() * half);
    g = p.grad(q);
    if (!g.allFinite()) raise(ErrorCode::DivergentTrajectory, "hmc_leapfrog: non-finite gradient");
    mom = half - 0.5 * g;
    out.positions.push_back(q);
  }
  out.final_momentum = mom;
  out.proposed = q;
  return out;
}

LeapfrogResult hmc_leapfrog(const Vector& z, const Vector& v, const Potential& p, const KernelParams& k) {
  if (z.size() != v.size() || static_cast<std::size_t>(z.size()) != k.dim()) {
    raise(ErrorCode::DimensionMismatch, "hmc_leapfrog: dimension mismatch");
  }
  const Matrix c = k.preconditioner();
  const Vector p0 = c.transpose().triangularView<Eigen::Upper>().solve(v);
  return hmc_leapfrog_from_momentum(z, p0, p, k);
}

double hmc_energy_error(const Vector& z, const Vector& z_prop, const Vector& p0, const Vector& p_final,
                        const Potential& p, const KernelParams& k) {
  const Matrix c = k.preconditioner();
  const double kin_final = 0.5 * (c.transpose() * p_final).squaredNorm();
  const double kin_start = 0.5 * (c.transpose() * p0).squaredNorm();
  return p.value(z_prop) - p.value(z) + kin_final - kin_start;
}

double hmc_entropy_approx(const KernelParams& k, const Vector& q_mid, const Potential& p) {
  const Matrix c = k.preconditioner();
  const double d = static_cast<double>(k.dim());
  const Matrix h = p.hessian(q_mid);
  return 0.5 * d * (1.0 + kLog2Pi) + k.log_det_preconditioner() + entropy_log_det_term(k, c, h);
}

double hmc_log_proposal_density_approx(const Vector& v, const KernelParams& k, const Vector& q_mid,
                                       const Potential& p) {
  const double d = static_cast<double>(k.dim());
  return log_std_normal(v) - (hmc_entropy_approx(k, q_mid, p) - 0.5 * d * (1.0 + kLog2Pi));
}

// ---------------------------------------------------------------------------
// MH step

KernelOutput mh_step(const Vector& z, const Potential& p, const KernelParams& k, RngStream& rng) {
  if (!z.allFinite()) raise(ErrorCode::InvalidArgument, "mh_step: state is not finite");
  const std::size_t d = k.dim();
  KernelOutput out;
  out.noise = sample_standard_normal(d, rng);
  const double log_u = std::log(rng.uniform());
  out.next_state = z;

  const Matrix c = k.preconditioner();
  const Vector g = p.grad(z);
  const double u0 = p.value(z);
  if (!g.allFinite() || !std::isfinite(u0)) raise(ErrorCode::NonFiniteGradient, "mh_step: non-finite gradient at state");
  const Vector& v = out.noise;

  try {
    if (k.kind == KernelKind::Mala) {
      const double h = k.step_size();
      const Vector ctg = c.transpose() * g;
      out.proposed_state = z - 0.5 * h * h * (c * ctg) + h * (c * v);
      const Vector g_prop = p.grad(out.proposed_state);
      const double u_prop = p.value(out.proposed_state);
      if (!g_prop.allFinite() || !std::isfinite(u_prop)) {
        raise(ErrorCode::DivergentTrajectory, "mh_step: non-finite proposal");
      }
      const Vector w = v - 0.5 * h * (ctg + c.transpose() * g_prop);
      out.energy_error = u_prop - u0 - 0.5 * v.squaredNorm() + 0.5 * w.squaredNorm();
      out.log_r_forward = log_std_normal(v) - static_cast<double>(d) * k.log_h - k.log_det_preconditioner();
    } else {
      // Whitened momentum u = C^T p.
      Vector q = z;
      Vector u = v;
      Vector gq = g;
      Vector q_mid = z;
      const int mid = k.leapfrog_steps / 2;
      for (int l = 0; l < k.leapfrog_steps; ++l) {
        const Vector half = u - 0.5 * (c.transpose() * gq);
        q += c * half;
        gq = p.grad(q);
        if (!gq.allFinite()) raise(ErrorCode::DivergentTrajectory, "mh_step: non-finite gradient mid-trajectory");
        u = half - 0.5 * (c.transpose() * gq);
        if (l + 1 == mid) q_mid = q;
      }
      out.proposed_state = q;
      const double u_prop = p.value(q);
      if (!std::isfinite(u_prop)) raise(ErrorCode::DivergentTrajectory, "mh_step: non-finite potential");
      out.energy_error = u_prop - u0 + 0.5 * u.squaredNorm() - 0.5 * v.squaredNorm();
      out.log_r_forward = log_std_normal(v) - k.log_det_preconditioner() -
                          entropy_log_det_term(k, c, p.hessian(q_mid));
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DivergentTrajectory && e.code() != ErrorCode::SingularJacobian) throw;
    if (e.code() == ErrorCode::DivergentTrajectory) {
      out.divergent = true;
      out.accepted = false;
      out.log_alpha = kNegInf;
      out.energy_error = std::numeric_limits<double>::infinity();
      if (out.proposed_state.size() == 0) out.proposed_state = z;
      return out;
    }
    out.log_r_forward = std::numeric_limits<double>::quiet_NaN();
  }

  if (!std::isfinite(out.energy_error)) {
    out.divergent = true;
    out.log_alpha = kNegInf;
    out.accepted = false;
    return out;
  }
  out.log_alpha = std::min(0.0, -out.energy_error);
  out.accepted = log_u < out.log_alpha;
  if (out.accepted) out.next_state = out.proposed_state;
  return out;
}

SpeedMeasureTerm speed_measure_grad_contrib(const KernelOutput& out, const Vector& z_prev, const Potential& p,
                                            const KernelParams& k) {
  SpeedMeasureTerm term;
  term.grad = Vector::Zero(static_cast<Eigen::Index>(k.packed_size()));
  if (out.divergent) {
    term.log_alpha = kNegInf;
    term.objective = kNegInf;
    return term;
  }
  ad::Tape tape;
  const ad::Var packed = tape.leaf(k.packed());
  const TapedObjective t = taped_objective(tape, packed, out.noise, z_prev, p, k);
  tape.backward(t.objective);
  term.objective = t.objective.scalar();
  term.log_alpha = t.log_alpha.scalar();
  term.log_r = t.log_r.scalar();
  term.grad = tape.grad(packed).col(0);
  return term;
}

double speed_measure_objective(const Vector& packed, const Vector& v, const Vector& z_prev, const Potential& p,
                               const KernelParams& k) {
  KernelParams kk = k;
  kk.set_packed(packed);
  ad::Tape tape;
  const ad::Var leaf = tape.constant(packed);
  return taped_objective(tape, leaf, v, z_prev, p, kk).objective.scalar();
}

// ---------------------------------------------------------------------------

double beta_update_fraction(double beta, double accept_fraction, double alpha_star, double rho4) {
  return std::max(beta * (1.0 + rho4 * (accept_fraction - alpha_star)), 1e-8);
}

double beta_update(double beta, std::size_t accept_count, std::size_t K, double alpha_star, double rho4) {
  if (K == 0) raise(ErrorCode::InvalidArgument, "beta_update: K must be positive");
  if (accept_count > K) raise(ErrorCode::InvalidArgument, "beta_update: accept_count exceeds K");
  return beta_update_fraction(beta, static_cast<double>(accept_count) / static_cast<double>(K), alpha_star, rho4);
}

DualAveragingState dual_averaging_init(double log_h0, double gamma, double t0, double kappa) {
  DualAveragingState s;
  s.log_h = log_h0;
  s.log_h_avg = 0.0;
  s.h_bar = 0.0;
  s.mu = std::log(10.0) + log_h0;
  s.counter = 0;
  s.gamma = gamma;
  s.t0 = t0;
  s.kappa = kappa;
  return s;
}

DualAveragingState dual_averaging_update(const DualAveragingState& s, double observed_accept, double alpha_star) {
  DualAveragingState n = s;
  n.counter = s.counter + 1;
  const double m = static_cast<double>(n.counter);
  const double w = 1.0 / (m + s.t0);
  n.h_bar = (1.0 - w) * s.h_bar + w * (alpha_star - observed_accept);
  n.log_h = s.mu - std::sqrt(m) / s.gamma * n.h_bar;
  const double eta = std::pow(m, -s.kappa);
  n.log_h_avg = eta * n.log_h + (1.0 - eta) * s.log_h_avg;
  return n;
}

}  // namespace speedvae
