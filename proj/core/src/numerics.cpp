#include "speedvae/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

namespace speedvae {

namespace {

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << what << ": expected a square matrix, got " << m.rows() << "x" << m.cols();
    raise(ErrorCode::DimensionMismatch, os.str());
  }
}

void require_symmetric(const Matrix& m, const char* what) {
  require_square(m, what);
  const double scale = std::max(m.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    raise(ErrorCode::InvalidArgument, std::string(what) + ": matrix is not symmetric");
  }
}

}  // namespace

LowerTriangularFactor::LowerTriangularFactor(std::size_t dim)
    : dim_(dim),
      raw_(Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))),
      log_diag_(Vector::Zero(static_cast<Eigen::Index>(dim))) {}

LowerTriangularFactor LowerTriangularFactor::from_realized(const Matrix& lower) {
  require_square(lower, "LowerTriangularFactor");
  const auto n = static_cast<std::size_t>(lower.rows());
  LowerTriangularFactor f(n);
  for (Eigen::Index i = 0; i < lower.rows(); ++i) {
    if (!(lower(i, i) > 0.0)) {
      raise(ErrorCode::NotPositiveDefinite, "LowerTriangularFactor: non-positive diagonal entry");
    }
    f.log_diag_(i) = std::log(lower(i, i));
    for (Eigen::Index j = 0; j < i; ++j) f.raw_(i, j) = lower(i, j);
  }
  return f;
}

LowerTriangularFactor LowerTriangularFactor::from_packed(std::size_t dim, const Vector& packed) {
  if (static_cast<std::size_t>(packed.size()) != packed_size(dim)) {
    raise(ErrorCode::DimensionMismatch, "LowerTriangularFactor: packed size mismatch");
  }
  LowerTriangularFactor f(dim);
  Eigen::Index k = 0;
  const auto n = static_cast<Eigen::Index>(dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j) f.raw_(i, j) = packed(k++);
  for (Eigen::Index i = 0; i < n; ++i) f.log_diag_(i) = packed(k++);
  return f;
}

Vector LowerTriangularFactor::packed() const {
  Vector out(static_cast<Eigen::Index>(packed_size(dim_)));
  Eigen::Index k = 0;
  const auto n = static_cast<Eigen::Index>(dim_);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j) out(k++) = raw_(i, j);
  for (Eigen::Index i = 0; i < n; ++i) out(k++) = log_diag_(i);
  return out;
}

Matrix LowerTriangularFactor::realized() const {
  const auto n = static_cast<Eigen::Index>(dim_);
  Matrix l = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) l(i, j) = raw_(i, j);
    l(i, i) = std::exp(log_diag_(i));
  }
  return l;
}

Matrix cholesky_lower(const Matrix& m) {
  require_symmetric(m, "cholesky");
  const Eigen::Index n = m.rows();
  const double max_diag = n > 0 ? m.diagonal().maxCoeff() : 0.0;
  const double tol = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * max_diag;
  Matrix l = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double pivot = m(j, j) - l.row(j).head(j).squaredNorm();
    if (!(pivot > tol)) {
      std::ostringstream os;
      os << "cholesky: pivot " << pivot << " at index " << j << " is not positive";
      raise(ErrorCode::NotPositiveDefinite, os.str());
    }
    const double d = std::sqrt(pivot);
    l(j, j) = d;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      l(i, j) = (m(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / d;
    }
  }
  return l;
}

LowerTriangularFactor cholesky(const Matrix& m) {
  return LowerTriangularFactor::from_realized(cholesky_lower(m));
}

SymmetricEigen symmetric_eigen(const Matrix& input, bool want_vectors) {
  require_symmetric(input, "symmetric_eigen");
  const Eigen::Index n = input.rows();
  Matrix a = 0.5 * (input + input.transpose());
  Matrix v = want_vectors ? Matrix::Identity(n, n) : Matrix();

  const double total = a.squaredNorm();
  for (int sweep = 0; sweep < 100; ++sweep) {
    const double off = a.squaredNorm() - a.diagonal().squaredNorm();
    if (off <= 1e-30 * total || off == 0.0) break;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        if (want_vectors) {
          for (Eigen::Index k = 0; k < n; ++k) {
            const double vkp = v(k, p);
            const double vkq = v(k, q);
            v(k, p) = c * vkp - s * vkq;
            v(k, q) = s * vkp + c * vkq;
          }
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index i, Eigen::Index j) { return a(i, i) < a(j, j); });
  SymmetricEigen out;
  out.values.resize(n);
  if (want_vectors) out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto src = order[static_cast<std::size_t>(k)];
    out.values(k) = a(src, src);
    if (want_vectors) out.vectors.col(k) = v.col(src);
  }
  return out;
}

double condition_number(const Matrix& m) {
  const SymmetricEigen eig = symmetric_eigen(m);
  if (eig.values.size() == 0) raise(ErrorCode::DimensionMismatch, "condition_number: empty matrix");
  const double lo = eig.values(0);
  const double hi = eig.values(eig.values.size() - 1);
  if (!(lo > 0.0)) raise(ErrorCode::NotPositiveDefinite, "condition_number: smallest eigenvalue is not positive");
  return hi / lo;
}

double gaussian_logpdf_lower(const Vector& x, const Vector& mean, const Matrix& cov_lower) {
  if (x.size() != mean.size() || cov_lower.rows() != x.size() || cov_lower.cols() != x.size()) {
    raise(ErrorCode::DimensionMismatch, "gaussian_logpdf: dimension mismatch");
  }
  const Vector white = cov_lower.triangularView<Eigen::Lower>().solve(x - mean);
  const double d = static_cast<double>(x.size());
  return -0.5 * white.squaredNorm() - cov_lower.diagonal().array().log().sum() - 0.5 * d * kLog2Pi;
}

double gaussian_logpdf(const Vector& x, const Vector& mean, const LowerTriangularFactor& cov_factor) {
  if (static_cast<std::size_t>(x.size()) != cov_factor.dim()) {
    raise(ErrorCode::DimensionMismatch, "gaussian_logpdf: dimension mismatch");
  }
  if (x.size() != mean.size()) raise(ErrorCode::DimensionMismatch, "gaussian_logpdf: dimension mismatch");
  const Matrix l = cov_factor.realized();
  const Vector white = l.triangularView<Eigen::Lower>().solve(x - mean);
  const double d = static_cast<double>(x.size());
  return -0.5 * white.squaredNorm() - cov_factor.log_det() - 0.5 * d * kLog2Pi;
}

double kl_gaussians(const Vector& mean1, const Matrix& cov1, const Vector& mean2, const Matrix& cov2) {
  const Eigen::Index d = mean1.size();
  if (mean2.size() != d || cov1.rows() != d || cov2.rows() != d || cov1.cols() != d || cov2.cols() != d) {
    raise(ErrorCode::DimensionMismatch, "kl_gaussians: dimension mismatch");
  }
  const Matrix l1 = cholesky_lower(cov1);
  const Matrix l2 = cholesky_lower(cov2);
  // tr(S2^{-1} S1) = ||L2^{-1} L1||_F^2
  const Matrix m = l2.triangularView<Eigen::Lower>().solve(l1);
  const Vector diff = l2.triangularView<Eigen::Lower>().solve(mean2 - mean1);
  const double logdet1 = 2.0 * l1.diagonal().array().log().sum();
  const double logdet2 = 2.0 * l2.diagonal().array().log().sum();
  const double kl = 0.5 * (m.squaredNorm() + diff.squaredNorm() - static_cast<double>(d) + logdet2 - logdet1);
  return std::max(kl, 0.0);
}

SignedLogDet log_abs_det(const Matrix& m) {
  require_square(m, "log_abs_det");
  SignedLogDet out;
  if (m.rows() == 0) return out;
  const Eigen::PartialPivLU<Matrix> lu(m);
  const Matrix& packed = lu.matrixLU();
  int sign = lu.permutationP().determinant() > 0 ? 1 : -1;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < packed.rows(); ++i) {
    const double u = packed(i, i);
    if (u == 0.0) {
      out.log_abs = -std::numeric_limits<double>::infinity();
      out.sign = 0;
      return out;
    }
    if (u < 0.0) sign = -sign;
    acc += std::log(std::abs(u));
  }
  out.log_abs = acc;
  out.sign = sign;
  return out;
}

double log_sum_exp(const Vector& values) {
  if (values.size() == 0) return -std::numeric_limits<double>::infinity();
  const double hi = values.maxCoeff();
  if (!std::isfinite(hi)) return hi;
  return hi + std::log((values.array() - hi).exp().sum());
}

std::uint64_t mix64(std::uint64_t x) noexcept {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(mix64(a) ^ (b + 0x632be59bd9b4e019ULL + (a << 6) + (a >> 2)));
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), key_(hash_combine(seed, stream_id)) {}

RngStream::result_type RngStream::operator()() noexcept {
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c));
}

double RngStream::uniform() {
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double RngStream::normal() { return normal_(*this); }

RngStream RngStream::derive(std::uint64_t child_id) const {
  return RngStream(key_, child_id);
}

Vector sample_standard_normal(std::size_t dim, RngStream& rng) {
  Vector out(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = rng.normal();
  return out;
}

}  // namespace speedvae
