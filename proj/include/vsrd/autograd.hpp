#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape is an append-only list of nodes. Values that do not depend on any
// trainable leaf are recorded without a backward closure, so stop-gradient is
// simply "re-enter the value as a constant". Backward walks the tape in reverse
// creation order, which is a valid topological order.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <vector>

#include "vsrd/video.hpp"

namespace vsrd::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  /// Scalar value of a 1x1 node.
  double item() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Backward closure: receives the output gradient and output value and
  /// accumulates into parents through `Tape::accumulate`.
  using Backward = std::function<void(Tape&, const Matrix& grad_out, const Matrix& value_out)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Trainable leaf.
  Var leaf(Matrix value);
  /// Records an op node; `backward` is dropped when no parent requires grad.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var record(Matrix value, const std::vector<Var>& parents, Backward backward);

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
  void backward(const Var& root);
  void zero_grad();

  /// Gradient of the last backward with respect to `v`; zeros if unreached.
  Matrix grad(const Var& v) const;
  bool has_grad(const Var& v) const;

  void accumulate(const Var& v, const Matrix& g);
  template <typename Derived>
  void accumulate(const Var& v, const Eigen::MatrixBase<Derived>& g) {
    accumulate(v, Matrix(g));
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise / linear algebra ----------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Scales every entry of `a` by the 1x1 node `s`.
Var scale_by(const Var& a, const Var& s);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator-(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
/// Adds a 1 x cols row vector to every row of `a`.
Var add_rowvec(const Var& a, const Var& row);
/// Multiplies every row of `a` elementwise by a 1 x cols row vector.
Var mul_rowvec(const Var& a, const Var& row);

Var silu(const Var& a);
Var relu(const Var& a);
Var log_sigmoid(const Var& a);
Var softmax_rows(const Var& a);
/// Zero-mean, unit-variance normalization of each row (no affine part).
Var layer_norm_rows(const Var& a, double eps = 1e-6);

// ---- structural ------------------------------------------------------------

Var slice_cols(const Var& a, Index start, Index count);
Var slice_rows(const Var& a, Index start, Index count);
Var concat_cols(const std::vector<Var>& parts);
/// Column-major reshape.
Var reshape(const Var& a, Index rows, Index cols);
/// out(linear i) = a(linear map[i]) in column-major order; map[i] < 0 yields 0.
Var gather(const Var& a, std::shared_ptr<const std::vector<Index>> map, Index rows, Index cols);
Var stop_gradient(const Var& a);

// ---- reductions ------------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// mean((a - b)^2) over all entries.
Var mse(const Var& a, const Var& b);

}  // namespace vsrd::ad
