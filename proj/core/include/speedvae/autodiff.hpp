#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "speedvae/numerics.hpp"

namespace speedvae::ad {

/// Named parameter tensors plus one gradient accumulator per tensor.
/// Vectors are stored as n x 1 matrices. Iteration order is insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
  };

  void add(const std::string& name, Matrix value);
  void add_vector(const std::string& name, const Vector& value) { add(name, Matrix(value)); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Matrix& value(const std::string& name);
  const Matrix& value(const std::string& name) const;
  Matrix& grad(const std::string& name);
  const Matrix& grad(const std::string& name) const;

  void zero_grad();
  void scale_grad(double factor);
  /// this.grad += other.grad for every entry of `other` (names must exist here).
  void add_grads_from(const ParamStore& other);

  std::size_t size() const { return entries_.size(); }
  std::size_t total_elements() const;
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<std::string> names() const;

 private:
  std::size_t locate(const std::string& name) const;

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  double scalar() const;
  Vector vec() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Append-only reverse-mode tape. Values are computed eagerly when a node is
/// recorded; `backward` walks nodes in strict reverse order exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& adjoint)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var constant(const Vector& value) { return constant(Matrix(value)); }
  Var scalar_constant(double value);
  /// Differentiable leaf not bound to any store; read its gradient with grad().
  Var leaf(Matrix value);
  Var leaf(const Vector& value) { return leaf(Matrix(value)); }
  /// Leaf bound to store[name]; backward accumulates into store.grad(name).
  Var param(ParamStore& store, const std::string& name);

  /// Records a node. `backward` receives the output adjoint and must push
  /// contributions to inputs through add_adjoint.
  Var record(Matrix value, bool requires_grad, BackwardFn backward);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void add_adjoint(std::size_t id, const Matrix& contribution);

  /// Reverse sweep from a 1x1 output. Throws NonScalarOutput otherwise.
  void backward(Var output);
  /// Adjoint of a node after the last backward(); zero if unreached.
  Matrix grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    bool requires_grad = false;
    BackwardFn backward;
  };
  struct Binding {
    std::size_t node;
    ParamStore* store;
    std::string name;
  };

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
  std::vector<Binding> bindings_;
};

// Linear algebra
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var neg(Var a);
Var mul(Var a, Var b);                 // elementwise
Var scale(Var a, double factor);
Var scale_shift(Var a, double factor, double shift);
Var scalar_times(Var s, Var a);        // 1x1 times tensor
Var matmul(Var a, Var b);
Var transpose(Var a);
Var affine(Var w, Var x, Var b);       // w x + b
Var dot(Var a, Var b);
Var sum(Var a);
Var squared_norm(Var a);
Var quadratic_form(Var x, Var a);      // x^T a x

// Elementwise nonlinearities
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var softplus(Var a);
Var square(Var a);

// Structure
Var concat(std::initializer_list<Var> parts);  // stacks column vectors
Var concat(const std::vector<Var>& parts);
Var slice(Var a, Eigen::Index offset, Eigen::Index length);  // rows of a column vector
Var diag_matrix(Var v);                        // diag(v)

// Factors and determinants
Var log_det_lower_triangular(Var lower);       // sum_i log L_ii
Var lower_from_packed(Var packed, std::size_t dim);  // LowerTriangularFactor packing, exp on diagonal
Var log_abs_det(Var m);

/// min{0, a} for scalar a, with derivative 1 when a < 0 and 0 when a >= 0.
Var min_zero(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return neg(a); }

/// Central-difference Hessian-vector product of a gradient function.
Vector hvp_finite_difference(const std::function<Vector(const Vector&)>& grad_fn,
                             const Vector& z, const Vector& v, double eps);
double default_hvp_eps(const Vector& z);

}  // namespace speedvae::ad
