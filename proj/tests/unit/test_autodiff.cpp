#include "speedvae/autodiff.hpp"

#include <cmath>
#include <functional>

#include <gtest/gtest.h>

using namespace speedvae;
using ad::Tape;
using ad::Var;

namespace {

using Builder = std::function<Var(Tape&, Var)>;

// Central-difference gradient of a scalar-valued taped expression.
Matrix numeric_grad(const Builder& f, const Matrix& x, double eps = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix xp = x, xm = x;
    xp(i) += eps;
    xm(i) -= eps;
    Tape tp, tm;
    g(i) = (f(tp, tp.leaf(xp)).scalar() - f(tm, tm.leaf(xm)).scalar()) / (2 * eps);
  }
  return g;
}

void check_grad(const Builder& f, const Matrix& x, double tol = 1e-6) {
  Tape tape;
  const Var leaf = tape.leaf(x);
  tape.backward(f(tape, leaf));
  const Matrix analytic = tape.grad(leaf);
  const Matrix numeric = numeric_grad(f, x);
  EXPECT_LT((analytic - numeric).norm(), tol * (1.0 + numeric.norm())) << "analytic\n"
                                                                         << analytic << "\nnumeric\n"
                                                                         << numeric;
}

Matrix randn(int r, int c, RngStream& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal();
  return m;
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  RngStream rng(1, 0);
  const Matrix x = randn(4, 1, rng);
  const Matrix y = randn(4, 1, rng);
  check_grad([&](Tape& t, Var a) { return ad::sum(ad::mul(ad::exp(a), t.constant(y))); }, x);
  check_grad([&](Tape& t, Var a) { return ad::sum(ad::tanh(ad::scale_shift(a, 0.7, 0.2))); }, x);
  check_grad([&](Tape&, Var a) { return ad::sum(ad::softplus(ad::scale(a, 3.0))); }, x);
  check_grad([&](Tape&, Var a) { return ad::sum(ad::log(ad::add(ad::square(a), ad::exp(a)))); }, x);
  check_grad([&](Tape& t, Var a) { return ad::squared_norm(ad::sub(a, ad::neg(t.constant(y)))); }, x);
  check_grad([&](Tape&, Var a) { return ad::dot(a, ad::tanh(a)); }, x);
}

TEST(Autodiff, LinearAlgebraOps) {
  RngStream rng(2, 0);
  const Matrix w = randn(3, 4, rng);
  const Matrix x = randn(4, 1, rng);
  const Matrix b = randn(3, 1, rng);
  check_grad([&](Tape& t, Var a) { return ad::squared_norm(ad::affine(a, t.constant(x), t.constant(b))); }, w);
  check_grad([&](Tape& t, Var a) { return ad::squared_norm(ad::affine(t.constant(w), a, t.constant(b))); }, x);
  check_grad([&](Tape& t, Var a) { return ad::sum(ad::matmul(ad::transpose(a), t.constant(b))); }, w);
  const Matrix s = randn(4, 4, rng);
  check_grad([&](Tape& t, Var a) { return ad::quadratic_form(a, t.constant(s)); }, x);
  check_grad([&](Tape& t, Var a) { return ad::quadratic_form(t.constant(x), a); }, s);
  check_grad([&](Tape& t, Var a) { return ad::sum(ad::scalar_times(ad::sum(a), t.constant(b))); }, x);
}

TEST(Autodiff, StructuralOps) {
  RngStream rng(3, 0);
  const Matrix x = randn(5, 1, rng);
  check_grad(
      [&](Tape&, Var a) {
        const Var head = ad::slice(a, 0, 2);
        const Var tail = ad::slice(a, 2, 3);
        return ad::squared_norm(ad::concat({ad::exp(tail), head, tail}));
      },
      x);
  check_grad([&](Tape&, Var a) { return ad::sum(ad::exp(ad::diag_matrix(a))); }, x);
}

TEST(Autodiff, TriangularAndDeterminant) {
  RngStream rng(4, 0);
  const std::size_t n = 4;
  const Matrix packed = randn(static_cast<int>(LowerTriangularFactor::packed_size(n)), 1, rng);
  check_grad([&](Tape&, Var p) { return ad::log_det_lower_triangular(ad::lower_from_packed(p, n)); }, packed);
  check_grad([&](Tape&, Var p) { return ad::squared_norm(ad::lower_from_packed(p, n)); }, packed);
  {
    Tape t;
    const Var l = ad::lower_from_packed(t.constant(packed), n);
    EXPECT_LT((l.value() - LowerTriangularFactor::from_packed(n, packed.col(0)).realized()).norm(), 1e-14);
  }
  Matrix m = randn(4, 4, rng) + 3.0 * Matrix::Identity(4, 4);
  check_grad([&](Tape&, Var a) { return ad::log_abs_det(a); }, m);
  Tape t;
  EXPECT_NEAR(ad::log_abs_det(t.constant(m)).scalar(), std::log(std::abs(m.determinant())), 1e-12);
}

TEST(Autodiff, SingularDeterminantThrows) {
  Tape t;
  try {
    ad::log_abs_det(t.constant(Matrix(Matrix::Zero(3, 3))));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingularJacobian);
  }
}

TEST(Autodiff, MinZeroSubgradient) {
  Tape t;
  const Var neg = t.leaf(Matrix(Matrix::Constant(1, 1, -0.5)));
  t.backward(ad::min_zero(neg));
  EXPECT_DOUBLE_EQ(t.grad(neg)(0, 0), 1.0);
  Tape u;
  const Var pos = u.leaf(Matrix(Matrix::Constant(1, 1, 0.5)));
  const Var out = ad::min_zero(pos);
  EXPECT_DOUBLE_EQ(out.scalar(), 0.0);
  u.backward(out);
  EXPECT_DOUBLE_EQ(u.grad(pos)(0, 0), 0.0);
}

TEST(Autodiff, NonScalarBackwardThrows) {
  Tape t;
  const Var v = t.leaf(Matrix(Matrix::Ones(3, 1)));
  try {
    t.backward(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonScalarOutput);
  }
}

TEST(Autodiff, ShapeMismatchThrows) {
  Tape t;
  const Var a = t.constant(Matrix(Matrix::Ones(3, 1)));
  const Var b = t.constant(Matrix(Matrix::Ones(2, 1)));
  EXPECT_THROW(ad::add(a, b), Error);
  EXPECT_THROW(ad::matmul(a, b), Error);
}

TEST(Autodiff, ParamStoreAccumulates) {
  ad::ParamStore store;
  store.add("w", Matrix::Constant(2, 1, 1.5));
  store.add_vector("b", Vector::Constant(2, -1.0));
  EXPECT_EQ(store.total_elements(), 4u);
  for (int rep = 0; rep < 2; ++rep) {
    Tape t;
    const Var w = t.param(store, "w");
    const Var b = t.param(store, "b");
    t.backward(ad::dot(w, b));
  }
  EXPECT_LT((store.grad("w") - Matrix::Constant(2, 1, -2.0)).norm(), 1e-15);
  EXPECT_LT((store.grad("b") - Matrix::Constant(2, 1, 3.0)).norm(), 1e-15);
  store.scale_grad(0.5);
  EXPECT_DOUBLE_EQ(store.grad("b")(0), 1.5);
  store.zero_grad();
  EXPECT_TRUE(store.grad("w").isZero(0.0));
  EXPECT_EQ(store.names(), (std::vector<std::string>{"w", "b"}));
}

TEST(Autodiff, RepeatedBackwardDoesNotDoubleCount) {
  Tape t;
  const Var x = t.leaf(Matrix(Matrix::Constant(1, 1, 2.0)));
  const Var y = ad::square(x);
  t.backward(y);
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 4.0);
}

TEST(Autodiff, FiniteDifferenceHvp) {
  Matrix h(2, 2);
  h << 3.0, 1.0, 1.0, 2.0;
  auto grad = [&](const Vector& z) -> Vector {
    Vector g = h * z;
    g(0) += z(0) * z(0) * z(0);
    return g;
  };
  Vector z(2), v(2);
  z << 0.4, -0.2;
  v << 1.0, 0.5;
  Vector expected = h * v;
  expected(0) += 3 * z(0) * z(0) * v(0);
  EXPECT_LT((ad::hvp_finite_difference(grad, z, v, ad::default_hvp_eps(z)) - expected).norm(), 1e-8);
}
