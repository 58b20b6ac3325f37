#include "vsrd/autograd.hpp"

#include <malloc.h>

#include <cmath>
#include <mutex>
#include <string>

namespace vsrd::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractViolation("item() on a non-scalar node");
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace {

// Tape nodes are mostly 0.1-1 MB blocks that are freed and reallocated every
// step. glibc serves those with fresh mmap pages by default, and the page
// faults cost more than the arithmetic, so keep them on the heap instead.
void keep_large_blocks_on_heap() {
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
}

}  // namespace

Tape::Tape() { keep_large_blocks_on_heap(); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape_ != this) throw ContractViolation("autograd: mixing nodes from different tapes");
    needs = needs || nodes_[p.id_].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.tape_ != this) throw ContractViolation("autograd: mixing nodes from different tapes");
    needs = needs || nodes_[p.id_].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw ContractViolation("autograd: gradient shape mismatch");
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& root) {
  if (root.tape_ != this) throw ContractViolation("autograd: root belongs to another tape");
  if (nodes_[root.id_].value.size() != 1) throw ContractViolation("autograd: backward needs a scalar root");
  if (!nodes_[root.id_].requires_grad) return;
  accumulate(root, Matrix::Ones(1, 1));
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad, n.value);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
}

Matrix Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id_];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

bool Tape::has_grad(const Var& v) const { return nodes_[v.id_].has_grad; }

namespace {

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractViolation(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()) + ")");
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [a, b](Tape& t, const Matrix& g, const Matrix&) {
                            if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
                            if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
                          });
}

Var scale(const Var& a, double s) {
  return a.tape()->record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g * s);
  });
}

Var add_scalar(const Var& a, double s) {
  return a.tape()->record((a.value().array() + s).matrix(), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.value().size() != 1) throw ContractViolation("scale_by: factor must be 1x1");
  return a.tape()->record(a.value() * s.item(), {a, s}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t.accumulate(a, g * s.item());
    if (s.requires_grad()) t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ContractViolation("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ContractViolation("matmul_nt: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

Var add_rowvec(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ContractViolation("add_rowvec: row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

Var mul_rowvec(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ContractViolation("mul_rowvec: row shape mismatch");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t.accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    if (row.requires_grad()) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var silu(const Var& a) {
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double v) { return v * sigmoid(v); });
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = a.value().unaryExpr([](double v) {
      const double s = sigmoid(v);
      return s * (1.0 + v * (1.0 - s));
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  });
}

Var log_sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double v) { return -(std::max(-v, 0.0) + std::log1p(std::exp(-std::abs(v)))); });
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double v) { return sigmoid(-v); })));
  });
}

Var softmax_rows(const Var& a) {
  const Eigen::VectorXd m = a.value().rowwise().maxCoeff();
  Matrix out = (a.value().colwise() - m).array().exp().matrix();
  const Eigen::VectorXd inv = out.rowwise().sum().cwiseInverse();
  out = inv.asDiagonal() * out;
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = y.cwiseProduct(g.colwise() - dot);
    t.accumulate(a, d);
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  const Matrix& x = a.value();
  const Index n = x.cols();
  const Eigen::VectorXd mu = x.rowwise().mean();
  Matrix centered = x.colwise() - mu;
  const Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt().matrix();
  Matrix out = inv_std.asDiagonal() * centered;
  return a.tape()->record(std::move(out), {a}, [a, inv_std](Tape& t, const Matrix& g, const Matrix& y) {
    const Eigen::VectorXd g_mean = g.rowwise().mean();
    const Eigen::VectorXd gy_mean = g.cwiseProduct(y).rowwise().mean();
    Matrix d = g.colwise() - g_mean;
    d -= y.cwiseProduct(gy_mean.replicate(1, y.cols()));
    t.accumulate(a, inv_std.asDiagonal() * d);
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ContractViolation("slice_cols out of range");
  Matrix out = a.value().middleCols(start, count);
  return a.tape()->record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    d.middleCols(start, count) = g;
    t.accumulate(a, d);
  });
}

Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ContractViolation("slice_rows out of range");
  Matrix out = a.value().middleRows(start, count);
  return a.tape()->record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    d.middleRows(start, count) = g;
    t.accumulate(a, d);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ContractViolation("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape()->record(std::move(out), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
    Index off = 0;
    for (const Var& p : parts) {
      if (p.requires_grad()) t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var reshape(const Var& a, Index rows, Index cols) {
  if (rows * cols != a.value().size()) throw ContractViolation("reshape: size mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
    t.accumulate(a, Eigen::Map<const Matrix>(g.data(), a.rows(), a.cols()));
  });
}

Var gather(const Var& a, std::shared_ptr<const std::vector<Index>> map, Index rows, Index cols) {
  if (static_cast<Index>(map->size()) != rows * cols) throw ContractViolation("gather: map size mismatch");
  const Index n_in = a.value().size();
  Matrix out(rows, cols);
  const double* src = a.value().data();
  double* dst = out.data();
  const auto& m = *map;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] >= n_in) throw ContractViolation("gather: index out of range");
    dst[i] = m[i] < 0 ? 0.0 : src[m[i]];
  }
  return a.tape()->record(std::move(out), {a}, [a, map](Tape& t, const Matrix& g, const Matrix&) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    double* dd = d.data();
    const double* gd = g.data();
    const auto& mm = *map;
    for (std::size_t i = 0; i < mm.size(); ++i)
      if (mm[i] >= 0) dd[mm[i]] += gd[i];
    t.accumulate(a, d);
  });
}

Var stop_gradient(const Var& a) { return a.tape()->constant(a.value()); }

Var sum(const Var& a) {
  return a.tape()->record(Matrix::Constant(1, 1, a.value().sum()), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
                          });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return a.tape()->record(Matrix::Constant(1, 1, a.value().sum() / n), {a},
                          [a, n](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0) / n));
                          });
}

Var mse(const Var& a, const Var& b) {
  require_same(a, b, "mse");
  const double n = static_cast<double>(a.value().size());
  Matrix diff = a.value() - b.value();
  const double v = diff.squaredNorm() / n;
  return a.tape()->record(Matrix::Constant(1, 1, v), {a, b},
                          [a, b, n, diff = std::move(diff)](Tape& t, const Matrix& g, const Matrix&) {
                            const Matrix d = diff * (2.0 * g(0, 0) / n);
                            t.accumulate(a, d);
                            if (b.requires_grad()) t.accumulate(b, -d);
                          });
}

}  // namespace vsrd::ad
