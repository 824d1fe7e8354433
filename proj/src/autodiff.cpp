// SPDX-License-Identifier: Apache-2.0

#include "ulab/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

namespace ulab {

namespace {

std::string dims(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void same_tape(const char* op, Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) shape_fail(op, "operands live on different tapes");
}

void same_shape(const char* op, Var a, Var b) {
  same_tape(op, a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    shape_fail(op, "shape mismatch " + dims(a.value()) + " vs " + dims(b.value()));
}

}  // namespace

const Matrix& Var::value() const { return tape->value(*this); }
const Matrix& Var::grad() const { return tape->grad(*this); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) shape_fail("item", "expected 1x1, got " + dims(v));
  return v(0, 0);
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, std::vector<int> inputs, Pullback pullback) {
  Node n;
  n.value = std::move(value);
  for (int i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.pullback = std::move(pullback);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Matrix& Tape::grad_ref(int id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.has_grad) return n.grad;
  zero_cache_ = Matrix::Zero(n.value.rows(), n.value.cols());
  return zero_cache_;
}

void Tape::backward(Var output, const Matrix& seed) {
  if (output.tape != this) throw std::invalid_argument("backward: output not on this tape");
  const Matrix& out = nodes_.at(output.id).value;
  if (seed.rows() != out.rows() || seed.cols() != out.cols())
    shape_fail("backward", "seed " + dims(seed) + " does not match output " + dims(out));
  for (Node& n : nodes_) {
    if (!n.is_leaf) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
  }
  if (!nodes_[output.id].requires_grad) return;
  const FlushDenormals ftz;
  grad_ref(output.id) += seed;
  for (int i = output.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.has_grad && n.pullback) n.pullback(*this, i);
  }
}

void Tape::backward(Var scalar_output) {
  backward(scalar_output, Matrix::Ones(1, 1));
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  same_tape("matmul", a, b);
  if (a.cols() != b.rows())
    shape_fail("matmul", "inner dims differ: " + dims(a.value()) + " * " + dims(b.value()));
  Matrix out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    if (t.needs_grad(ia)) t.grad_ref(ia).noalias() += g * t.value_at(ib).transpose();
    if (t.needs_grad(ib)) t.grad_ref(ib).noalias() += t.value_at(ia).transpose() * g;
  });
}

Var matmul_bt(Var a, Var b) {
  same_tape("matmul_bt", a, b);
  if (a.cols() != b.cols())
    shape_fail("matmul_bt", "inner dims differ: " + dims(a.value()) + " * (" + dims(b.value()) + ")^T");
  Matrix out = a.value() * b.value().transpose();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    if (t.needs_grad(ia)) t.grad_ref(ia).noalias() += g * t.value_at(ib);
    if (t.needs_grad(ib)) t.grad_ref(ib).noalias() += g.transpose() * t.value_at(ia);
  });
}

Var transpose(Var a) {
  Matrix out = a.value().transpose();
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_at(self).transpose();
  });
}

Var add(Var a, Var b) {
  same_shape("add", a, b);
  Matrix out = a.value() + b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia) += t.grad_at(self);
    if (t.needs_grad(ib)) t.grad_ref(ib) += t.grad_at(self);
  });
}

Var sub(Var a, Var b) {
  same_shape("sub", a, b);
  Matrix out = a.value() - b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia) += t.grad_at(self);
    if (t.needs_grad(ib)) t.grad_ref(ib) -= t.grad_at(self);
  });
}

Var mul(Var a, Var b) {
  same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    if (t.needs_grad(ia)) t.grad_ref(ia) += g.cwiseProduct(t.value_at(ib));
    if (t.needs_grad(ib)) t.grad_ref(ib) += g.cwiseProduct(t.value_at(ia));
  });
}

Var add_row(Var a, Var row) {
  same_tape("add_row", a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    shape_fail("add_row", "bias " + dims(row.value()) + " incompatible with " + dims(a.value()));
  Matrix out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id, ib = row.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    if (t.needs_grad(ia)) t.grad_ref(ia) += g;
    if (t.needs_grad(ib)) t.grad_ref(ib) += g.colwise().sum();
  });
}

Var scale(Var a, double c) {
  Matrix out = a.value() * c;
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, c](Tape& t, int self) {
    t.grad_ref(ia) += c * t.grad_at(self);
  });
}

Var add_scalar(Var a, double c) {
  Matrix out = a.value().array() + c;
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_at(self);
  });
}

Var exp(Var a) {
  const FlushDenormals ftz;
  Matrix out = a.value().array().exp();
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_at(self).cwiseProduct(t.value_at(self));
  });
}

Var log(Var a) {
  Matrix out = a.value().array().log();
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia).array() += t.grad_at(self).array() / t.value_at(ia).array();
  });
}

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

Var gelu(Var a) {
  const double k = kGeluScale;
  const double c = kGeluCubic;
  const Matrix& x = a.value();
  Matrix th = (k * (x.array() + c * x.array().cube())).tanh().matrix();
  Matrix out = (0.5 * x.array() * (1.0 + th.array())).matrix();
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, k, c, th = std::move(th)](Tape& t, int self) {
    const auto x = t.value_at(ia).array();
    const auto d = 0.5 * (1.0 + th.array()) +
                   0.5 * x * (1.0 - th.array().square()) * k * (1.0 + 3.0 * c * x.square());
    t.grad_ref(ia).array() += t.grad_at(self).array() * d;
  });
}

Var log_sigmoid(Var a) {
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double z) { return std::min(z, 0.0) - std::log1p(std::exp(-std::abs(z))); });
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    // d/dz log sigma(z) = sigma(-z)
    Matrix s = t.value_at(ia).unaryExpr([](double z) {
      return z >= 0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
    });
    t.grad_ref(ia) += t.grad_at(self).cwiseProduct(s);
  });
}

namespace {

Matrix row_softmax(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

}  // namespace

Var softmax_rows(Var a) {
  const FlushDenormals ftz;
  Matrix out = row_softmax(a.value());
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& y = t.value_at(self);
    const Matrix& g = t.grad_at(self);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    t.grad_ref(ia).array() += y.array() * (g.colwise() - dot).array();
  });
}

Var log_softmax_rows(Var a) {
  const FlushDenormals ftz;
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    Matrix p = t.value_at(self).array().exp();
    Eigen::VectorXd gs = g.rowwise().sum();
    t.grad_ref(ia) += g - (p.array().colwise() * gs.array()).matrix();
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& w = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), w.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= w.rows())
      shape_fail("gather_rows", "row id " + std::to_string(ids[i]) + " outside table " + dims(w));
    out.row(static_cast<Eigen::Index>(i)) = w.row(ids[i]);
  }
  const int it = table.id;
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {it}, [it, idx = std::move(idx)](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    Matrix& gt = t.grad_ref(it);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  same_tape("layer_norm", x, gamma);
  same_tape("layer_norm", x, beta);
  const Matrix& v = x.value();
  const Eigen::Index d = v.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d)
    shape_fail("layer_norm", "gain " + dims(gamma.value()) + " / bias " + dims(beta.value()) +
                                 " incompatible with " + dims(v));
  Matrix xhat(v.rows(), d);
  Eigen::VectorXd inv_std(v.rows());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double mu = v.row(i).mean();
    const double var = (v.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
        const Matrix& g = t.grad_at(self);
        if (t.needs_grad(ig)) t.grad_ref(ig) += g.cwiseProduct(xhat).colwise().sum();
        if (t.needs_grad(ib)) t.grad_ref(ib) += g.colwise().sum();
        if (t.needs_grad(ix)) {
          Matrix dxhat = g.array().rowwise() * t.value_at(ig).row(0).array();
          Eigen::VectorXd m1 = dxhat.rowwise().mean();
          Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
          Matrix dx = (dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix();
          t.grad_ref(ix) += (dx.array().colwise() * inv_std.array()).matrix();
        }
      });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia).array() += t.grad_at(self)(0, 0);
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) shape_fail("mean", "empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  Matrix out = a.value().rowwise().sum();
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    Matrix& ga = t.grad_ref(ia);
    ga.colwise() += Eigen::VectorXd(g.col(0));
  });
}

Var block(Var a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& v = a.value();
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > v.rows() || col + cols > v.cols())
    shape_fail("block", "window (" + std::to_string(row) + "," + std::to_string(col) + ")+" +
                            std::to_string(rows) + "x" + std::to_string(cols) + " outside " + dims(v));
  Matrix out = v.block(row, col, rows, cols);
  const int ia = a.id;
  return a.tape->record(std::move(out), {ia}, [=](Tape& t, int self) {
    t.grad_ref(ia).block(row, col, rows, cols) += t.grad_at(self);
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  const Matrix& v = a.value();
  if (rows < 0 || cols < 0 || rows * cols != v.size())
    shape_fail("reshape", dims(v) + " into " + std::to_string(rows) + "x" + std::to_string(cols));
  Matrix out = Eigen::Map<const Matrix>(v.data(), rows, cols);
  const int ia = a.id;
  const Eigen::Index r0 = v.rows(), c0 = v.cols();
  return a.tape->record(std::move(out), {ia}, [=](Tape& t, int self) {
    t.grad_ref(ia) += Eigen::Map<const Matrix>(t.grad_at(self).data(), r0, c0);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) shape_fail("concat_rows", "no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  std::vector<int> ids;
  for (Var p : parts) {
    same_tape("concat_rows", parts[0], p);
    if (p.cols() != cols) shape_fail("concat_rows", "column count differs: " + dims(p.value()));
    rows += p.rows();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<int> inputs = ids;
  return parts[0].tape->record(std::move(out), std::move(inputs), [ids](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    Eigen::Index r = 0;
    for (int id : ids) {
      const Eigen::Index n = t.value_at(id).rows();
      if (t.needs_grad(id)) t.grad_ref(id) += g.middleRows(r, n);
      r += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) shape_fail("concat_cols", "no parts");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  std::vector<int> ids;
  for (Var p : parts) {
    same_tape("concat_cols", parts[0], p);
    if (p.rows() != rows) shape_fail("concat_cols", "row count differs: " + dims(p.value()));
    cols += p.cols();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<int> inputs = ids;
  return parts[0].tape->record(std::move(out), std::move(inputs), [ids](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    Eigen::Index c = 0;
    for (int id : ids) {
      const Eigen::Index n = t.value_at(id).cols();
      if (t.needs_grad(id)) t.grad_ref(id) += g.middleCols(c, n);
      c += n;
    }
  });
}

Var pick(Var a, std::span<const int> ids) {
  const Matrix& v = a.value();
  if (static_cast<Eigen::Index>(ids.size()) != v.rows())
    shape_fail("pick", std::to_string(ids.size()) + " ids for " + dims(v));
  Matrix out(v.rows(), 1);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const int c = ids[static_cast<std::size_t>(i)];
    if (c < 0 || c >= v.cols()) shape_fail("pick", "column " + std::to_string(c) + " outside " + dims(v));
    out(i, 0) = v(i, c);
  }
  const int ia = a.id;
  std::vector<int> idx(ids.begin(), ids.end());
  return a.tape->record(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& t, int self) {
    const Matrix& g = t.grad_at(self);
    Matrix& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      ga(static_cast<Eigen::Index>(i), idx[i]) += g(static_cast<Eigen::Index>(i), 0);
  });
}

Var masked_mean(Var column, std::span<const double> mask) {
  const Matrix& v = column.value();
  if (v.cols() != 1 || static_cast<Eigen::Index>(mask.size()) != v.rows())
    shape_fail("masked_mean", "column " + dims(v) + " with mask of length " + std::to_string(mask.size()));
  double count = 0, total = 0;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    if (mask[static_cast<std::size_t>(i)] != 0.0) {
      count += 1;
      total += v(i, 0);
    }
  }
  if (count == 0) throw std::invalid_argument("masked_mean: no supervised positions");
  Matrix out(1, 1);
  out(0, 0) = total / count;
  const int ia = column.id;
  std::vector<double> m(mask.begin(), mask.end());
  return column.tape->record(std::move(out), {ia}, [ia, m = std::move(m), count](Tape& t, int self) {
    const double g = t.grad_at(self)(0, 0) / count;
    Matrix& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] != 0.0) ga(static_cast<Eigen::Index>(i), 0) += g;
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> mask) {
  const FlushDenormals ftz;
  const Matrix& x = logits.value();
  const auto n = static_cast<std::size_t>(x.rows());
  if (targets.size() != n || mask.size() != n)
    shape_fail("cross_entropy", "logits " + dims(x) + " with " + std::to_string(targets.size()) +
                                    " targets and mask of length " + std::to_string(mask.size()));
  double count = 0, total = 0;
  Matrix probs = Matrix::Zero(x.rows(), x.cols());
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == 0.0) continue;
    const auto r = static_cast<Eigen::Index>(i);
    if (targets[i] < 0 || targets[i] >= x.cols())
      shape_fail("cross_entropy", "target " + std::to_string(targets[i]) + " outside vocabulary " +
                                      std::to_string(x.cols()));
    const double m = x.row(r).maxCoeff();
    probs.row(r) = (x.row(r).array() - m).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    total += (m + std::log(z)) - x(r, targets[i]);
    count += 1;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: no supervised positions");
  Matrix out(1, 1);
  out(0, 0) = total / count;
  const int ia = logits.id;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> m(mask.begin(), mask.end());
  return logits.tape->record(
      std::move(out), {ia},
      [ia, probs = std::move(probs), tg = std::move(tg), m = std::move(m), count](Tape& t, int self) {
        const double g = t.grad_at(self)(0, 0) / count;
        Matrix& ga = t.grad_ref(ia);
        for (std::size_t i = 0; i < tg.size(); ++i) {
          if (m[i] == 0.0) continue;
          const auto r = static_cast<Eigen::Index>(i);
          ga.row(r) += g * probs.row(r);
          ga(r, tg[i]) -= g;
        }
      });
}

// ---------------------------------------------------------------------------

FdCheckResult finite_difference_check(const LossBuilder& loss, std::span<const Matrix> params,
                                      FdCheckOptions options) {
  if (!(options.step > 0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  if (options.order != 2 && options.order != 4)
    throw std::invalid_argument("finite_difference_check: order must be 2 or 4");

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Matrix& p : params) leaves.push_back(tape.leaf(p));
    Var out = loss(tape, leaves);
    if (!std::isfinite(out.item())) throw std::domain_error("finite_difference_check: non-finite loss");
    tape.backward(out);
    for (Var v : leaves) analytic.push_back(v.grad());
  }

  auto eval = [&](const std::vector<Matrix>& ps) {
    Tape tape;
    std::vector<Var> leaves;
    for (const Matrix& p : ps) leaves.push_back(tape.constant(p));
    const double v = loss(tape, leaves).item();
    if (!std::isfinite(v)) throw std::domain_error("finite_difference_check: non-finite loss");
    return v;
  };

  std::size_t total = 0;
  for (const Matrix& p : params) total += static_cast<std::size_t>(p.size());
  const std::size_t stride =
      (options.max_coords == 0 || total <= options.max_coords) ? 1 : (total + options.max_coords - 1) / options.max_coords;

  FdCheckResult result;
  std::vector<Matrix> work(params.begin(), params.end());
  std::size_t flat = 0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (Eigen::Index j = 0; j < work[p].size(); ++j, ++flat) {
      if (flat % stride != 0) continue;
      double* x = work[p].data() + j;
      const double saved = *x;
      const double h = options.step;
      auto at = [&](double offset) {
        *x = saved + offset;
        const double v = eval(work);
        *x = saved;
        return v;
      };
      const double fd = options.order == 2
                            ? (at(h) - at(-h)) / (2.0 * h)
                            : (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
      const double an = analytic[p].data()[j];
      const double err = std::abs(an - fd) / (std::abs(fd) + 1e-12);
      ++result.coords_checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_param = p;
        result.worst_index = static_cast<std::size_t>(j);
      }
    }
  }
  return result;
}

}  // namespace ulab
