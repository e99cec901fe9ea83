#include "speedvae/autodiff.hpp"

#include <cmath>
#include <sstream>

namespace speedvae::ad {

namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows() << "x"
     << b.cols();
  raise(ErrorCode::ShapeMismatch, os.str());
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

void require_column(const char* op, const Matrix& a) {
  if (a.cols() != 1) {
    std::ostringstream os;
    os << op << ": expected a column vector, got " << a.rows() << "x" << a.cols();
    raise(ErrorCode::ShapeMismatch, os.str());
  }
}

void require_scalar(const char* op, const Matrix& a) {
  if (a.rows() != 1 || a.cols() != 1) {
    std::ostringstream os;
    os << op << ": expected a scalar, got " << a.rows() << "x" << a.cols();
    raise(ErrorCode::ShapeMismatch, os.str());
  }
}

Tape& tape_of(Var a) { return *a.tape; }

bool any_grad(std::initializer_list<Var> vars) {
  for (const Var& v : vars)
    if (v.tape->requires_grad(v.id)) return true;
  return false;
}

Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(const std::string& name, Matrix value) {
  if (contains(name)) raise(ErrorCode::InvalidArgument, "ParamStore: duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  Matrix grad = Matrix::Zero(value.rows(), value.cols());
  entries_.push_back(Entry{name, std::move(value), std::move(grad)});
}

std::size_t ParamStore::locate(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) raise(ErrorCode::InvalidArgument, "ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

Matrix& ParamStore::value(const std::string& name) { return entries_[locate(name)].value; }
const Matrix& ParamStore::value(const std::string& name) const { return entries_[locate(name)].value; }
Matrix& ParamStore::grad(const std::string& name) { return entries_[locate(name)].grad; }
const Matrix& ParamStore::grad(const std::string& name) const { return entries_[locate(name)].grad; }

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.setZero(e.value.rows(), e.value.cols());
}

void ParamStore::scale_grad(double factor) {
  for (auto& e : entries_) e.grad *= factor;
}

void ParamStore::add_grads_from(const ParamStore& other) {
  for (const auto& e : other.entries_) {
    Matrix& g = grad(e.name);
    require_same_shape("ParamStore::add_grads_from", g, e.grad);
    g += e.grad;
  }
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape->value(id); }

double Var::scalar() const {
  require_scalar("Var::scalar", value());
  return value()(0, 0);
}

Vector Var::vec() const {
  require_column("Var::vec", value());
  return value().col(0);
}

Var Tape::record(Matrix value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) { return record(std::move(value), false, nullptr); }

Var Tape::scalar_constant(double value) { return constant(scalar_matrix(value)); }

Var Tape::leaf(Matrix value) { return record(std::move(value), true, nullptr); }

Var Tape::param(ParamStore& store, const std::string& name) {
  Var v = leaf(store.value(name));
  bindings_.push_back(Binding{v.id, &store, name});
  return v;
}

void Tape::add_adjoint(std::size_t id, const Matrix& contribution) {
  if (!nodes_[id].requires_grad) return;
  Matrix& adj = adjoints_[id];
  if (adj.size() == 0) {
    adj = contribution;
  } else {
    adj += contribution;
  }
}

void Tape::backward(Var output) {
  if (output.tape != this) raise(ErrorCode::InvalidArgument, "backward: variable belongs to another tape");
  const Matrix& out = nodes_[output.id].value;
  if (out.rows() != 1 || out.cols() != 1) {
    std::ostringstream os;
    os << "backward: output must be scalar, got " << out.rows() << "x" << out.cols();
    raise(ErrorCode::NonScalarOutput, os.str());
  }
  adjoints_.assign(nodes_.size(), Matrix());
  if (!nodes_[output.id].requires_grad) return;
  adjoints_[output.id] = scalar_matrix(1.0);
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || adjoints_[i].size() == 0) continue;
    node.backward(*this, adjoints_[i]);
  }
  for (const Binding& b : bindings_) {
    const Matrix& adj = adjoints_[b.node];
    if (adj.size() == 0) continue;
    b.store->grad(b.name) += adj;
  }
}

Matrix Tape::grad(Var v) const {
  if (v.id < adjoints_.size() && adjoints_[v.id].size() != 0) return adjoints_[v.id];
  const Matrix& val = nodes_[v.id].value;
  return Matrix::Zero(val.rows(), val.cols());
}

// ---------------------------------------------------------------------------
// Ops

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(a.value() + b.value(), any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.add_adjoint(ia, g);
    t.add_adjoint(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(a.value() - b.value(), any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.add_adjoint(ia, g);
    t.add_adjoint(ib, -g);
  });
}

Var neg(Var a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(-a.value(), any_grad({a}), [ia](Tape& t, const Matrix& g) { t.add_adjoint(ia, -g); });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(a.value().cwiseProduct(b.value()), any_grad({a, b}),
                           [ia, ib](Tape& t, const Matrix& g) {
                             t.add_adjoint(ia, g.cwiseProduct(t.value(ib)));
                             t.add_adjoint(ib, g.cwiseProduct(t.value(ia)));
                           });
}

Var scale(Var a, double factor) { return scale_shift(a, factor, 0.0); }

Var scale_shift(Var a, double factor, double shift) {
  const std::size_t ia = a.id;
  Matrix out = (factor * a.value()).array() + shift;
  return tape_of(a).record(std::move(out), any_grad({a}),
                           [ia, factor](Tape& t, const Matrix& g) { t.add_adjoint(ia, factor * g); });
}

Var scalar_times(Var s, Var a) {
  require_scalar("scalar_times", s.value());
  const std::size_t is = s.id, ia = a.id;
  return tape_of(a).record(s.value()(0, 0) * a.value(), any_grad({s, a}), [is, ia](Tape& t, const Matrix& g) {
    t.add_adjoint(is, scalar_matrix(g.cwiseProduct(t.value(ia)).sum()));
    t.add_adjoint(ia, t.value(is)(0, 0) * g);
  });
}

Var matmul(Var a, Var b) {
  if (a.value().cols() != b.value().rows()) shape_error("matmul", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(a.value() * b.value(), any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.add_adjoint(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.add_adjoint(ib, t.value(ia).transpose() * g);
  });
}

Var transpose(Var a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(a.value().transpose(), any_grad({a}),
                           [ia](Tape& t, const Matrix& g) { t.add_adjoint(ia, g.transpose()); });
}

Var affine(Var w, Var x, Var b) {
  require_column("affine", x.value());
  if (w.value().cols() != x.value().rows()) shape_error("affine", w.value(), x.value());
  if (b.value().rows() != w.value().rows() || b.value().cols() != 1) shape_error("affine", w.value(), b.value());
  const std::size_t iw = w.id, ix = x.id, ib = b.id;
  Matrix out = w.value() * x.value() + b.value();
  return tape_of(w).record(std::move(out), any_grad({w, x, b}), [iw, ix, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(iw)) t.add_adjoint(iw, g * t.value(ix).transpose());
    if (t.requires_grad(ix)) t.add_adjoint(ix, t.value(iw).transpose() * g);
    t.add_adjoint(ib, g);
  });
}

Var dot(Var a, Var b) {
  require_same_shape("dot", a.value(), b.value());
  const std::size_t ia = a.id, ib = b.id;
  return tape_of(a).record(scalar_matrix(a.value().cwiseProduct(b.value()).sum()), any_grad({a, b}),
                           [ia, ib](Tape& t, const Matrix& g) {
                             const double s = g(0, 0);
                             t.add_adjoint(ia, s * t.value(ib));
                             t.add_adjoint(ib, s * t.value(ia));
                           });
}

Var sum(Var a) {
  const std::size_t ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return tape_of(a).record(scalar_matrix(a.value().sum()), any_grad({a}), [ia, r, c](Tape& t, const Matrix& g) {
    t.add_adjoint(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var squared_norm(Var a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(scalar_matrix(a.value().squaredNorm()), any_grad({a}),
                           [ia](Tape& t, const Matrix& g) { t.add_adjoint(ia, 2.0 * g(0, 0) * t.value(ia)); });
}

Var quadratic_form(Var x, Var a) {
  require_column("quadratic_form", x.value());
  if (a.rows() != x.rows() || a.cols() != x.rows()) shape_error("quadratic_form", x.value(), a.value());
  const std::size_t ix = x.id, ia = a.id;
  const double q = (x.value().transpose() * a.value() * x.value())(0, 0);
  return tape_of(x).record(scalar_matrix(q), any_grad({x, a}), [ix, ia](Tape& t, const Matrix& g) {
    const double s = g(0, 0);
    const Matrix& xv = t.value(ix);
    const Matrix& av = t.value(ia);
    if (t.requires_grad(ix)) t.add_adjoint(ix, s * (av + av.transpose()) * xv);
    if (t.requires_grad(ia)) t.add_adjoint(ia, s * xv * xv.transpose());
  });
}

Var exp(Var a) {
  const std::size_t ia = a.id;
  Matrix out = a.value().array().exp();
  const std::size_t self = tape_of(a).size();
  return tape_of(a).record(std::move(out), any_grad({a}), [ia, self](Tape& t, const Matrix& g) {
    t.add_adjoint(ia, g.cwiseProduct(t.value(self)));
  });
}

Var log(Var a) {
  const std::size_t ia = a.id;
  Matrix out = a.value().array().log();
  return tape_of(a).record(std::move(out), any_grad({a}), [ia](Tape& t, const Matrix& g) {
    t.add_adjoint(ia, g.cwiseQuotient(t.value(ia)));
  });
}

Var tanh(Var a) {
  const std::size_t ia = a.id;
  Matrix out = a.value().array().tanh();
  const std::size_t self = tape_of(a).size();
  return tape_of(a).record(std::move(out), any_grad({a}), [ia, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    t.add_adjoint(ia, g.array() * (1.0 - y.array().square()));
  });
}

Var softplus(Var a) {
  const std::size_t ia = a.id;
  Matrix out = a.value().unaryExpr([](double x) { return softplus_value(x); });
  return tape_of(a).record(std::move(out), any_grad({a}), [ia](Tape& t, const Matrix& g) {
    t.add_adjoint(ia, g.cwiseProduct(t.value(ia).unaryExpr([](double x) { return sigmoid(x); })));
  });
}

Var square(Var a) {
  const std::size_t ia = a.id;
  return tape_of(a).record(a.value().array().square(), any_grad({a}), [ia](Tape& t, const Matrix& g) {
    t.add_adjoint(ia, 2.0 * g.cwiseProduct(t.value(ia)));
  });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) raise(ErrorCode::ShapeMismatch, "concat: no inputs");
  Eigen::Index rows = 0;
  bool grad = false;
  for (const Var& p : parts) {
    require_column("concat", p.value());
    rows += p.rows();
    grad = grad || p.tape->requires_grad(p.id);
  }
  Matrix out(rows, 1);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.block(off, 0, p.rows(), 1) = p.value();
    layout.emplace_back(p.id, off);
    off += p.rows();
  }
  return tape_of(parts.front()).record(std::move(out), grad, [layout](Tape& t, const Matrix& g) {
    for (const auto& [id, o] : layout) {
      if (t.requires_grad(id)) t.add_adjoint(id, g.block(o, 0, t.value(id).rows(), 1));
    }
  });
}

Var concat(std::initializer_list<Var> parts) { return concat(std::vector<Var>(parts)); }

Var slice(Var a, Eigen::Index offset, Eigen::Index length) {
  require_column("slice", a.value());
  if (offset < 0 || length < 0 || offset + length > a.rows()) {
    raise(ErrorCode::ShapeMismatch, "slice: range out of bounds");
  }
  const std::size_t ia = a.id;
  const Eigen::Index rows = a.rows();
  return tape_of(a).record(a.value().block(offset, 0, length, 1), any_grad({a}),
                           [ia, rows, offset, length](Tape& t, const Matrix& g) {
                             Matrix full = Matrix::Zero(rows, 1);
                             full.block(offset, 0, length, 1) = g;
                             t.add_adjoint(ia, full);
                           });
}

Var diag_matrix(Var v) {
  require_column("diag_matrix", v.value());
  const std::size_t iv = v.id;
  Matrix out = v.value().col(0).asDiagonal();
  return tape_of(v).record(std::move(out), any_grad({v}),
                           [iv](Tape& t, const Matrix& g) { t.add_adjoint(iv, Matrix(g.diagonal())); });
}

Var log_det_lower_triangular(Var lower) {
  const Matrix& l = lower.value();
  if (l.rows() != l.cols()) raise(ErrorCode::ShapeMismatch, "log_det_lower_triangular: matrix must be square");
  for (Eigen::Index i = 0; i < l.rows(); ++i)
    if (!(l(i, i) > 0.0)) raise(ErrorCode::InvalidArgument, "log_det_lower_triangular: non-positive diagonal");
  const std::size_t il = lower.id;
  const double v = l.diagonal().array().log().sum();
  return tape_of(lower).record(scalar_matrix(v), any_grad({lower}), [il](Tape& t, const Matrix& g) {
    const Matrix& lv = t.value(il);
    Matrix d = Matrix::Zero(lv.rows(), lv.cols());
    for (Eigen::Index i = 0; i < lv.rows(); ++i) d(i, i) = g(0, 0) / lv(i, i);
    t.add_adjoint(il, d);
  });
}

Var lower_from_packed(Var packed, std::size_t dim) {
  require_column("lower_from_packed", packed.value());
  if (static_cast<std::size_t>(packed.rows()) != LowerTriangularFactor::packed_size(dim)) {
    raise(ErrorCode::ShapeMismatch, "lower_from_packed: packed size does not match dimension");
  }
  const Matrix out = LowerTriangularFactor::from_packed(dim, packed.value().col(0)).realized();
  const std::size_t ip = packed.id;
  const std::size_t self = tape_of(packed).size();
  return tape_of(packed).record(out, any_grad({packed}), [ip, self, dim](Tape& t, const Matrix& g) {
    const Matrix& l = t.value(self);
    const auto n = static_cast<Eigen::Index>(dim);
    Matrix gp(static_cast<Eigen::Index>(LowerTriangularFactor::packed_size(dim)), 1);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < i; ++j) gp(k++, 0) = g(i, j);
    for (Eigen::Index i = 0; i < n; ++i) gp(k++, 0) = g(i, i) * l(i, i);
    t.add_adjoint(ip, gp);
  });
}

Var log_abs_det(Var m) {
  const SignedLogDet ld = speedvae::log_abs_det(m.value());
  if (ld.sign == 0) raise(ErrorCode::SingularJacobian, "log_abs_det: singular matrix");
  const std::size_t im = m.id;
  return tape_of(m).record(scalar_matrix(ld.log_abs), any_grad({m}), [im](Tape& t, const Matrix& g) {
    const Matrix inv = t.value(im).partialPivLu().inverse();
    t.add_adjoint(im, g(0, 0) * inv.transpose());
  });
}

Var min_zero(Var a) {
  require_scalar("min_zero", a.value());
  const double v = a.value()(0, 0);
  const std::size_t ia = a.id;
  const bool pass = v < 0.0;
  return tape_of(a).record(scalar_matrix(pass ? v : 0.0), any_grad({a}) && pass,
                           [ia](Tape& t, const Matrix& g) { t.add_adjoint(ia, g); });
}

// ---------------------------------------------------------------------------

Vector hvp_finite_difference(const std::function<Vector(const Vector&)>& grad_fn, const Vector& z,
                             const Vector& v, double eps) {
  const Vector plus = grad_fn(z + eps * v);
  const Vector minus = grad_fn(z - eps * v);
  return (plus - minus) / (2.0 * eps);
}

double default_hvp_eps(const Vector& z) {
  const double inf_norm = z.size() > 0 ? z.cwiseAbs().maxCoeff() : 0.0;
  return 1e-5 * (1.0 + inf_norm);
}

}  // namespace speedvae::ad
