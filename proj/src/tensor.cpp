#include "nse/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "nse/random.hpp"

namespace nse {

const Mat& Tensor::value() const { return tape->value_of(id); }
const Mat& Tensor::grad() const { return tape->grad_of(id); }

double Tensor::scalar() const {
  const Mat& v = value();
  if (v.rows() != 1 || v.cols() != 1)
    throw ShapeError("scalar() on non-1x1 tensor");
  return v(0, 0);
}

Tensor Tape::leaf(Mat value) {
  return emplace(std::move(value), nullptr);
}

Tensor Tape::emplace(Mat value, std::function<void(Tape&, int)> back) {
  Node n;
  n.grad = Mat::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Tensor{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::backward(Tensor loss) {
  if (loss.tape != this) throw ShapeError("backward: tensor from another tape");
  const Mat& v = nodes_[loss.id].value;
  if (v.rows() != 1 || v.cols() != 1)
    throw ShapeError("backward: loss must be scalar");
  // Interior adjoints are per-pass scratch; only leaf grads accumulate
  // across repeated backward calls.
  for (Node& n : nodes_)
    if (n.back) n.grad.setZero();
  nodes_[loss.id].grad(0, 0) += 1.0;
  for (int i = loss.id; i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(*this, i);
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.setZero();
}

namespace {

void check_same_tape(Tensor a, Tensor b) {
  if (a.tape != b.tape) throw ShapeError("operands from different tapes");
}

void check_same_shape(Tensor a, Tensor b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor add(Tensor a, Tensor b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "add");
  int ia = a.id, ib = b.id;
  return a.tape->emplace(a.value() + b.value(), [ia, ib](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self);
    t.grad_ref(ib) += t.grad_of(self);
  });
}

Tensor sub(Tensor a, Tensor b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "sub");
  int ia = a.id, ib = b.id;
  return a.tape->emplace(a.value() - b.value(), [ia, ib](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self);
    t.grad_ref(ib) -= t.grad_of(self);
  });
}

Tensor mul(Tensor a, Tensor b) {
  check_same_tape(a, b);
  check_same_shape(a, b, "mul");
  int ia = a.id, ib = b.id;
  return a.tape->emplace(a.value().cwiseProduct(b.value()),
                         [ia, ib](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self).cwiseProduct(t.value_of(ib));
    t.grad_ref(ib) += t.grad_of(self).cwiseProduct(t.value_of(ia));
  });
}

Tensor matmul(Tensor a, Tensor b) {
  check_same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner extents disagree");
  int ia = a.id, ib = b.id;
  return a.tape->emplace(a.value() * b.value(), [ia, ib](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self) * t.value_of(ib).transpose();
    t.grad_ref(ib) += t.value_of(ia).transpose() * t.grad_of(self);
  });
}

Tensor transpose(Tensor a) {
  int ia = a.id;
  return a.tape->emplace(a.value().transpose(), [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self).transpose();
  });
}

Tensor scale(Tensor a, double s) {
  int ia = a.id;
  return a.tape->emplace(a.value() * s, [ia, s](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self) * s;
  });
}

Tensor add_const(Tensor a, double c) {
  int ia = a.id;
  return a.tape->emplace(a.value().array() + c, [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self);
  });
}

Tensor one_minus(Tensor a) {
  int ia = a.id;
  return a.tape->emplace((1.0 - a.value().array()).matrix(),
                         [ia](Tape& t, int self) {
    t.grad_ref(ia) -= t.grad_of(self);
  });
}

Tensor sigmoid(Tensor a) {
  int ia = a.id;
  Mat y = a.value().unaryExpr([](double x) {
    // Branch keeps exp() off large positive arguments.
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  });
  return a.tape->emplace(std::move(y), [ia](Tape& t, int self) {
    const Mat& y = t.value_of(self);
    t.grad_ref(ia) += t.grad_of(self).cwiseProduct(
        y.cwiseProduct((1.0 - y.array()).matrix()));
  });
}

Tensor tanh_t(Tensor a) {
  int ia = a.id;
  return a.tape->emplace(a.value().array().tanh().matrix(),
                         [ia](Tape& t, int self) {
    const Mat& y = t.value_of(self);
    t.grad_ref(ia) += t.grad_of(self).cwiseProduct(
        (1.0 - y.array().square()).matrix());
  });
}

Tensor log_t(Tensor a) {
  int ia = a.id;
  return a.tape->emplace(a.value().array().log().matrix(),
                         [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self).cwiseQuotient(t.value_of(ia));
  });
}

Tensor softmax(Tensor x, const Vec* mask) {
  if (x.cols() != 1) throw ShapeError("softmax: expects a column vector");
  const Eigen::Index n = x.rows();
  if (n < 1) throw ShapeError("softmax: empty input");
  if (mask && mask->size() != n) throw ShapeError("softmax: mask length");

  const Mat& v = x.value();
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!mask || (*mask)(i) != 0.0) mx = std::max(mx, v(i, 0));
  if (!std::isfinite(mx)) throw ShapeError("softmax: all positions masked");

  Mat y = Mat::Zero(n, 1);
  double z = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask || (*mask)(i) != 0.0) {
      y(i, 0) = std::exp(v(i, 0) - mx);
      z += y(i, 0);
    }
  }
  y /= z;

  int ix = x.id;
  return x.tape->emplace(std::move(y), [ix](Tape& t, int self) {
    const Mat& y = t.value_of(self);
    const Mat& dy = t.grad_of(self);
    const double s = y.cwiseProduct(dy).sum();
    // Masked entries have y = 0 and contribute nothing.
    t.grad_ref(ix) += y.cwiseProduct((dy.array() - s).matrix());
  });
}

Tensor elem_affine(Tensor x, const Mat& a, const Mat& b) {
  if (a.rows() != x.rows() || a.cols() != x.cols() || b.rows() != x.rows() ||
      b.cols() != x.cols())
    throw ShapeError("elem_affine: shape mismatch");
  int ix = x.id;
  Mat acopy = a;
  return x.tape->emplace(x.value().cwiseProduct(a) + b,
                         [ix, acopy](Tape& t, int self) {
    t.grad_ref(ix) += t.grad_of(self).cwiseProduct(acopy);
  });
}

Tensor scale_columns(Tensor m, Tensor z) {
  check_same_tape(m, z);
  if (z.cols() != 1 || z.rows() != m.cols())
    throw ShapeError("scale_columns: z must be cols(m) x 1");
  int im = m.id, iz = z.id;
  Mat y = m.value().array().rowwise() *
          z.value().col(0).transpose().array();
  return m.tape->emplace(std::move(y), [im, iz](Tape& t, int self) {
    const Mat& dy = t.grad_of(self);
    const Mat& mv = t.value_of(im);
    const Mat& zv = t.value_of(iz);
    t.grad_ref(im) +=
        (dy.array().rowwise() * zv.col(0).transpose().array()).matrix();
    t.grad_ref(iz) += dy.cwiseProduct(mv).colwise().sum().transpose();
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Eigen::Index total = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != 1) throw ShapeError("concat_rows: column vectors only");
    total += p.rows();
  }
  Mat y(total, 1);
  std::vector<int> ids;
  std::vector<Eigen::Index> offs;
  Eigen::Index off = 0;
  for (const Tensor& p : parts) {
    y.block(off, 0, p.rows(), 1) = p.value();
    ids.push_back(p.id);
    offs.push_back(off);
    off += p.rows();
  }
  return parts[0].tape->emplace(std::move(y),
                                [ids, offs](Tape& t, int self) {
    const Mat& dy = t.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Mat& g = t.grad_ref(ids[i]);
      g += dy.block(offs[i], 0, g.rows(), 1);
    }
  });
}

Tensor rows(Tensor a, Eigen::Index r0, Eigen::Index n) {
  if (r0 < 0 || n < 1 || r0 + n > a.rows())
    throw ShapeError("rows: slice out of range");
  int ia = a.id;
  return a.tape->emplace(a.value().block(r0, 0, n, a.cols()),
                         [ia, r0, n](Tape& t, int self) {
    Mat& g = t.grad_ref(ia);
    g.block(r0, 0, n, g.cols()) += t.grad_of(self);
  });
}

Tensor column(Tensor a, Eigen::Index j) {
  if (j < 0 || j >= a.cols()) throw ShapeError("column: index out of range");
  int ia = a.id;
  return a.tape->emplace(a.value().col(j), [ia, j](Tape& t, int self) {
    t.grad_ref(ia).col(j) += t.grad_of(self);
  });
}

Tensor sum(Tensor a) {
  int ia = a.id;
  Mat y(1, 1);
  y(0, 0) = a.value().sum();
  return a.tape->emplace(std::move(y), [ia](Tape& t, int self) {
    t.grad_ref(ia).array() += t.grad_of(self)(0, 0);
  });
}

Tensor dot(Tensor a, Tensor b) {
  check_same_tape(a, b);
  if (a.cols() != 1 || b.cols() != 1 || a.rows() != b.rows())
    throw ShapeError("dot: expects equal-length column vectors");
  int ia = a.id, ib = b.id;
  Mat y(1, 1);
  y(0, 0) = a.value().col(0).dot(b.value().col(0));
  return a.tape->emplace(std::move(y), [ia, ib](Tape& t, int self) {
    const double d = t.grad_of(self)(0, 0);
    t.grad_ref(ia) += d * t.value_of(ib);
    t.grad_ref(ib) += d * t.value_of(ia);
  });
}

Tensor pad_columns(Tensor a, Eigen::Index total_cols) {
  if (total_cols < a.cols()) throw ShapeError("pad_columns: shrinking");
  if (total_cols == a.cols()) return a;
  Mat y = Mat::Zero(a.rows(), total_cols);
  y.leftCols(a.cols()) = a.value();
  int ia = a.id;
  const Eigen::Index n = a.cols();
  return a.tape->emplace(std::move(y), [ia, n](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_of(self).leftCols(n);
  });
}

Tensor embed_rows(Tensor table, const std::vector<int>& ids) {
  if (ids.empty()) throw ShapeError("embed_rows: empty sequence");
  const Eigen::Index rows_n = table.rows();
  for (int id : ids)
    if (id < 0 || id >= rows_n)
      throw ShapeError("embed_rows: token id out of range");
  const Eigen::Index dim = table.cols();
  Mat y(dim, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j)
    y.col(static_cast<Eigen::Index>(j)) = table.value().row(ids[j]).transpose();
  int it = table.id;
  return table.tape->emplace(std::move(y), [it, ids](Tape& t, int self) {
    const Mat& dy = t.grad_of(self);
    Mat& g = t.grad_ref(it);
    for (std::size_t j = 0; j < ids.size(); ++j)
      g.row(ids[j]) += dy.col(static_cast<Eigen::Index>(j)).transpose();
  });
}

GradCheckReport grad_check(
    const std::string& op_name,
    const std::function<Tensor(Tape&, Tensor)>& f, const Mat& x, double eps,
    int probes, std::uint64_t seed) {
  // Analytic pass.
  Mat analytic;
  {
    Tape tape;
    Tensor xt = tape.leaf(x);
    Tensor y = f(tape, xt);
    if (y.rows() != 1 || y.cols() != 1)
      throw ShapeError("grad_check: f must be scalar-valued");
    tape.backward(y);
    analytic = xt.grad();
  }

  auto eval = [&](const Mat& xv) {
    Tape tape;
    Tensor xt = tape.leaf(xv);
    return f(tape, xt).scalar();
  };

  Rng rng(seed);
  GradCheckReport report;
  report.op_name = op_name;
  const Eigen::Index total = x.size();
  const int n = std::min<int>(probes, static_cast<int>(total));
  for (int p = 0; p < n; ++p) {
    const Eigen::Index i =
        static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(total)));
    Mat xp = x, xm = x;
    xp(i) += eps;
    xm(i) -= eps;
    const double numeric = (eval(xp) - eval(xm)) / (2.0 * eps);
    const double a = analytic(i);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    report.max_rel_error =
        std::max(report.max_rel_error, std::abs(a - numeric) / denom);
    ++report.probes;
  }
  return report;
}

}  // namespace nse
