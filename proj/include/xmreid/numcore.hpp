// Reverse-mode differentiation over dense row-major Eigen matrices.
//
// A Tape records every operation of one loss evaluation. Values are immutable
// once recorded; backward() walks the tape in reverse and accumulates
// gradients into nodes that require them. Parameters owned elsewhere are
// attached with bind(), which routes their gradient into external storage.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmreid {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename Derived>
std::string shape_str(const Eigen::MatrixBase<Derived>& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

inline void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw ShapeError(op + ": " + what);
}

}  // namespace detail

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const Mat&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value) { return push("constant", std::move(value), false, nullptr); }

  // Gradient stays on the tape; read it with grad() after backward().
  Var<Scalar> leaf(Mat value) { return push("leaf", std::move(value), true, nullptr); }

  // Value is copied; the gradient is added into *grad_sink after backward().
  Var<Scalar> bind(const Mat& value, Mat* grad_sink) {
    Var<Scalar> v = push("param", value, grad_sink != nullptr, nullptr);
    nodes_[v.id_].sink = grad_sink;
    return v;
  }

  Var<Scalar> record(const char* op, Mat value, bool requires_grad, Backward fn) {
    return push(op, std::move(value), requires_grad, requires_grad ? std::move(fn) : nullptr);
  }

  void backward(const Var<Scalar>& root) {
    detail::require(root.tape_ == this, "backward", "root belongs to another tape");
    detail::require(root.rows() == 1 && root.cols() == 1, "backward",
                    "root must be scalar, got " + detail::shape_str(root.value()));
    if (!requires_grad(root.id_)) return;
    nodes_[root.id_].grad = Mat::Ones(1, 1);
    for (int i = root.id_; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) {
        // Copy: accumulate() may touch other nodes, never this one.
        const Mat g = n.grad;
        n.backward(*this, g);
      }
    }
    for (Node& n : nodes_) {
      if (n.sink != nullptr && n.grad.size() != 0) {
        if (n.sink->size() == 0) *n.sink = Mat::Zero(n.value.rows(), n.value.cols());
        *n.sink += n.grad;
      }
    }
  }

  // Drops every gradient held on the tape so backward() can run again from
  // another root. Sinks are left alone.
  void zero_grad() {
    for (Node& n : nodes_) n.grad.resize(0, 0);
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Zero-sized grad means "no gradient reached this node".
  Mat grad(const Var<Scalar>& v) const {
    const Node& n = nodes_[v.id_];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
    Mat* sink = nullptr;
  };

  Var<Scalar> push(const char* op, Mat value, bool requires_grad, Backward fn) {
    if (!value.allFinite()) throw NumericError(std::string(op) + ": non-finite value " + detail::shape_str(value));
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(fn), nullptr});
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later ops
};

// ---------------------------------------------------------------------------
// Op catalog. Every op is a free function returning a new Var on the same tape.

namespace detail {

template <typename Scalar>
bool any_grad(std::initializer_list<Var<Scalar>> vs) {
  for (const auto& v : vs)
    if (v.requires_grad()) return true;
  return false;
}

template <typename Scalar>
void same_tape(const std::string& op, const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a.tape() == b.tape(), op, "operands on different tapes");
}

template <typename Scalar>
std::string shapes(const Var<Scalar>& a, const Var<Scalar>& b) {
  return shape_str(a.value()) + " and " + shape_str(b.value());
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape("matmul", a, b);
  detail::require(a.cols() == b.rows(), "matmul", "inner dimensions differ: " + detail::shapes(a, b));
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("matmul", a.value() * b.value(), detail::any_grad({a, b}),
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                            if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                          });
}

// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape("matmul_nt", a, b);
  detail::require(a.cols() == b.cols(), "matmul_nt", "widths differ: " + detail::shapes(a, b));
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("matmul_nt", a.value() * b.value().transpose(), detail::any_grad({a, b}),
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
                            if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
                          });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  const int ia = a.id();
  return a.tape()->record("transpose", a.value().transpose(), a.requires_grad(),
                          [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g.transpose()); });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape("add", a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add", "shape mismatch " + detail::shapes(a, b));
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("add", a.value() + b.value(), detail::any_grad({a, b}),
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g);
                            t.accumulate(ib, g);
                          });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape("sub", a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub", "shape mismatch " + detail::shapes(a, b));
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("sub", a.value() - b.value(), detail::any_grad({a, b}),
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g);
                            t.accumulate(ib, -g);
                          });
}

template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape("hadamard", a, b);
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard",
                  "shape mismatch " + detail::shapes(a, b));
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("hadamard", a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                          [ia, ib](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  const int ia = a.id();
  return a.tape()->record("scale", a.value() * s, a.requires_grad(),
                          [ia, s](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g * s); });
}

template <typename Scalar>
Var<Scalar> shift(const Var<Scalar>& a, Scalar s) {
  const int ia = a.id();
  return a.tape()->record("shift", (a.value().array() + s).matrix(), a.requires_grad(),
                          [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) { t.accumulate(ia, g); });
}

// Explicit row broadcast: out[i,:] = a[i,:] + row.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  detail::same_tape("add_row", a, row);
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row", "row shape mismatch " + detail::shapes(a, row));
  const int ia = a.id(), ir = row.id();
  Matrix<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape()->record("add_row", std::move(out), detail::any_grad({a, row}),
                          [ia, ir](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g);
                            if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
                          });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  const int ia = a.id();
  Matrix<Scalar> out = a.value().array().exp().matrix();
  auto saved = std::make_shared<Matrix<Scalar>>(out);
  return a.tape()->record("exp", std::move(out), a.requires_grad(),
                          [ia, saved](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g.cwiseProduct(*saved));
                          });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  if (!(a.value().array() > Scalar(0)).all()) throw NumericError("log: non-positive argument");
  const int ia = a.id();
  return a.tape()->record("log", a.value().array().log().matrix(), a.requires_grad(),
                          [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, g.cwiseQuotient(t.value(ia)));
                          });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  const int ia = a.id();
  return a.tape()->record("relu", a.value().cwiseMax(Scalar(0)), a.requires_grad(),
                          [ia](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, (t.value(ia).array() > Scalar(0)).select(g, Scalar(0)).matrix());
                          });
}

// tanh approximation
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  const int ia = a.id();
  const Scalar c = Scalar(std::sqrt(2.0 / 3.14159265358979323846));
  const Scalar k = Scalar(0.044715);
  const auto x = a.value().array();
  Matrix<Scalar> th = (c * (x + k * x.cube())).tanh().matrix();
  Matrix<Scalar> out = (Scalar(0.5) * x * (Scalar(1) + th.array())).matrix();
  auto saved = std::make_shared<Matrix<Scalar>>(std::move(th));
  return a.tape()->record("gelu", std::move(out), a.requires_grad(),
                          [ia, saved, c, k](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const auto x = t.value(ia).array();
                            const auto th = saved->array();
                            auto d = Scalar(0.5) * (Scalar(1) + th) +
                                     Scalar(0.5) * x * (Scalar(1) - th.square()) * c * (Scalar(1) + Scalar(3) * k * x.square());
                            t.accumulate(ia, (g.array() * d).matrix());
                          });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  const int ia = a.id();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record("sum", std::move(out), a.requires_grad(),
                          [ia, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            t.accumulate(ia, Matrix<Scalar>::Constant(r, c, g(0, 0)));
                          });
}

// axis 0 reduces rows (1 x cols); axis 1 reduces columns (rows x 1).
template <typename Scalar>
Var<Scalar> sum_axis(const Var<Scalar>& a, int axis) {
  detail::require(axis == 0 || axis == 1, "sum_axis", "axis must be 0 or 1");
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  Matrix<Scalar> out = axis == 0 ? Matrix<Scalar>(a.value().colwise().sum()) : Matrix<Scalar>(a.value().rowwise().sum());
  return a.tape()->record("sum_axis", std::move(out), a.requires_grad(),
                          [ia, axis, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (axis == 0)
                              t.accumulate(ia, g.replicate(r, 1));
                            else
                              t.accumulate(ia, g.replicate(1, c));
                          });
}

template <typename Scalar>
Var<Scalar> mean_axis(const Var<Scalar>& a, int axis) {
  detail::require(axis == 0 || axis == 1, "mean_axis", "axis must be 0 or 1");
  const Index n = axis == 0 ? a.rows() : a.cols();
  detail::require(n > 0, "mean_axis", "empty axis " + detail::shape_str(a.value()));
  return scale(sum_axis(a, axis), Scalar(1) / Scalar(n));
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  detail::require(a.value().size() > 0, "mean", "empty operand");
  return scale(sum(a), Scalar(1) / Scalar(a.value().size()));
}

// Row-wise softmax.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a) {
  const int ia = a.id();
  Matrix<Scalar> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  auto saved = std::make_shared<Matrix<Scalar>>(out);
  return a.tape()->record("softmax", std::move(out), a.requires_grad(),
                          [ia, saved](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const Matrix<Scalar>& p = *saved;
                            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = (g.cwiseProduct(p)).rowwise().sum();
                            Matrix<Scalar> dx = p.cwiseProduct(g - dot.replicate(1, g.cols()));
                            t.accumulate(ia, dx);
                          });
}

template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& a) {
  const int ia = a.id();
  Matrix<Scalar> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    const Scalar m = row.maxCoeff();
    const Scalar lse = m + std::log((row.array() - m).exp().sum());
    row.array() -= lse;
  }
  auto saved = std::make_shared<Matrix<Scalar>>(out);
  return a.tape()->record("log_softmax", std::move(out), a.requires_grad(),
                          [ia, saved](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> p = saved->array().exp().matrix();
                            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gs = g.rowwise().sum();
                            t.accumulate(ia, g - p.cwiseProduct(gs.replicate(1, g.cols())));
                          });
}

// Row-wise layer normalization with affine gain and bias (1 x cols each).
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  detail::require(gain.rows() == 1 && gain.cols() == x.cols() && bias.rows() == 1 && bias.cols() == x.cols(),
                  "layer_norm", "affine shape mismatch " + detail::shapes(x, gain));
  const Index n = x.rows(), d = x.cols();
  auto xhat = std::make_shared<Matrix<Scalar>>(n, d);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(n);
  const Matrix<Scalar>& xv = x.value();
  for (Index i = 0; i < n; ++i) {
    const Scalar mu = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mu).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)(i) = is;
    xhat->row(i) = (xv.row(i).array() - mu) * is;
  }
  Matrix<Scalar> out = xhat->array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape()->record("layer_norm", std::move(out), detail::any_grad({x, gain, bias}),
                          [ix, ig, ib, xhat, inv_std, d](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(*xhat).colwise().sum());
                            if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                            if (!t.requires_grad(ix)) return;
                            Matrix<Scalar> dxh = g.array().rowwise() * t.value(ig).row(0).array();
                            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m1 = dxh.rowwise().mean();
                            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> m2 = dxh.cwiseProduct(*xhat).rowwise().mean();
                            Matrix<Scalar> dx = (dxh - m1.replicate(1, d) - xhat->cwiseProduct(m2.replicate(1, d)));
                            dx = inv_std->asDiagonal() * dx;
                            t.accumulate(ix, dx);
                          });
}

// Row-wise Euclidean norm: rows x 1.
template <typename Scalar>
Var<Scalar> l2norm(const Var<Scalar>& a) {
  const int ia = a.id();
  Matrix<Scalar> out = a.value().rowwise().norm();
  auto saved = std::make_shared<Matrix<Scalar>>(out);
  return a.tape()->record("l2norm", std::move(out), a.requires_grad(),
                          [ia, saved](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const Matrix<Scalar>& x = t.value(ia);
                            Matrix<Scalar> dx(x.rows(), x.cols());
                            for (Index i = 0; i < x.rows(); ++i) {
                              const Scalar n = (*saved)(i, 0);
                              dx.row(i) = n > Scalar(0) ? Matrix<Scalar>(x.row(i) * (g(i, 0) / n))
                                                        : Matrix<Scalar>::Zero(1, x.cols());
                            }
                            t.accumulate(ia, dx);
                          });
}

// Rows scaled to unit length. Zero rows are an error.
template <typename Scalar>
Var<Scalar> normalize_rows(const Var<Scalar>& a) {
  const int ia = a.id();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms = a.value().rowwise().norm();
  detail::require((norms.array() > Scalar(0)).all(), "normalize_rows", "zero row " + detail::shape_str(a.value()));
  Matrix<Scalar> out = norms.cwiseInverse().asDiagonal() * a.value();
  auto unit = std::make_shared<Matrix<Scalar>>(out);
  auto ns = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(std::move(norms));
  return a.tape()->record("normalize_rows", std::move(out), a.requires_grad(),
                          [ia, unit, ns](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const Matrix<Scalar>& u = *unit;
                            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = g.cwiseProduct(u).rowwise().sum();
                            Matrix<Scalar> dx = ns->cwiseInverse().asDiagonal() * (g - u.cwiseProduct(dot.replicate(1, u.cols())));
                            t.accumulate(ia, dx);
                          });
}

// Pairwise Euclidean distances between rows: a.rows() x b.rows().
// The subgradient at zero distance is taken as zero.
template <typename Scalar>
Var<Scalar> pairwise_distance(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape("pairwise_distance", a, b);
  detail::require(a.cols() == b.cols(), "pairwise_distance", "widths differ: " + detail::shapes(a, b));
  const Matrix<Scalar>& av = a.value();
  const Matrix<Scalar>& bv = b.value();
  Matrix<Scalar> out(av.rows(), bv.rows());
  for (Index i = 0; i < av.rows(); ++i)
    for (Index j = 0; j < bv.rows(); ++j) out(i, j) = (av.row(i) - bv.row(j)).norm();
  auto saved = std::make_shared<Matrix<Scalar>>(out);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("pairwise_distance", std::move(out), detail::any_grad({a, b}),
                          [ia, ib, saved](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            const Matrix<Scalar>& av = t.value(ia);
                            const Matrix<Scalar>& bv = t.value(ib);
                            Matrix<Scalar> w = Matrix<Scalar>::Zero(g.rows(), g.cols());
                            for (Index i = 0; i < w.rows(); ++i)
                              for (Index j = 0; j < w.cols(); ++j)
                                if ((*saved)(i, j) > Scalar(0)) w(i, j) = g(i, j) / (*saved)(i, j);
                            // d/da_i = sum_j w_ij (a_i - b_j)
                            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> wr = w.rowwise().sum();
                            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> wc = w.colwise().sum().transpose();
                            if (t.requires_grad(ia)) t.accumulate(ia, Matrix<Scalar>(wr.asDiagonal() * av - w * bv));
                            if (t.requires_grad(ib)) t.accumulate(ib, Matrix<Scalar>(wc.asDiagonal() * bv - w.transpose() * av));
                          });
}

// Euclidean distance between matching rows: rows x 1.
template <typename Scalar>
Var<Scalar> row_distance(const Var<Scalar>& a, const Var<Scalar>& b) {
  return l2norm(sub(a, b));
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  detail::require(!parts.empty(), "concat_rows", "no operands");
  const Index c = parts.front().cols();
  Index r = 0;
  bool grad = false;
  for (const auto& p : parts) {
    detail::same_tape("concat_rows", parts.front(), p);
    detail::require(p.cols() == c, "concat_rows", "widths differ: " + detail::shapes(parts.front(), p));
    r += p.rows();
    grad = grad || p.requires_grad();
  }
  Matrix<Scalar> out(r, c);
  std::vector<std::pair<int, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts.front().tape()->record("concat_rows", std::move(out), grad,
                                      [spans](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                                        for (const auto& [id, start] : spans)
                                          if (t.requires_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
                                      });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Index start, Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows",
                  "range [" + std::to_string(start) + "," + std::to_string(start + count) + ") outside " +
                      detail::shape_str(a.value()));
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record("slice_rows", a.value().middleRows(start, count), a.requires_grad(),
                          [ia, start, count, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> full = Matrix<Scalar>::Zero(r, c);
                            full.middleRows(start, count) = g;
                            t.accumulate(ia, full);
                          });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index start, Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols",
                  "range outside " + detail::shape_str(a.value()));
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record("slice_cols", a.value().middleCols(start, count), a.requires_grad(),
                          [ia, start, count, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> full = Matrix<Scalar>::Zero(r, c);
                            full.middleCols(start, count) = g;
                            t.accumulate(ia, full);
                          });
}

// out[i,:] = a[index[i],:]; repeated indices accumulate on backward.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, const std::vector<Index>& index) {
  for (Index i : index)
    detail::require(i >= 0 && i < a.rows(), "gather_rows",
                    "index " + std::to_string(i) + " outside " + detail::shape_str(a.value()));
  const Matrix<Scalar>& av = a.value();
  Matrix<Scalar> out(static_cast<Index>(index.size()), av.cols());
  for (std::size_t i = 0; i < index.size(); ++i) out.row(static_cast<Index>(i)) = av.row(index[i]);
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record("gather_rows", std::move(out), a.requires_grad(),
                          [ia, index, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> full = Matrix<Scalar>::Zero(r, c);
                            for (std::size_t i = 0; i < index.size(); ++i) full.row(index[i]) += g.row(static_cast<Index>(i));
                            t.accumulate(ia, full);
                          });
}

// out[g,:] = mean of a[groups[g][i],:], accumulated in the listed order and
// divided by the group size.
template <typename Scalar>
Var<Scalar> group_mean_rows(const Var<Scalar>& a, const std::vector<std::vector<Index>>& groups) {
  const Matrix<Scalar>& av = a.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Index>(groups.size()), av.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    detail::require(!groups[g].empty(), "group_mean_rows", "empty group " + std::to_string(g));
    for (Index i : groups[g]) {
      detail::require(i >= 0 && i < a.rows(), "group_mean_rows", "index " + std::to_string(i) + " outside " + detail::shape_str(av));
      out.row(static_cast<Index>(g)) += av.row(i);
    }
    out.row(static_cast<Index>(g)) /= Scalar(groups[g].size());
  }
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record("group_mean_rows", std::move(out), a.requires_grad(),
                          [ia, groups, r, c](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> full = Matrix<Scalar>::Zero(r, c);
                            for (std::size_t k = 0; k < groups.size(); ++k)
                              for (Index i : groups[k]) full.row(i) += g.row(static_cast<Index>(k)) / Scalar(groups[k].size());
                            t.accumulate(ia, full);
                          });
}

// Picks single entries: out is n x 1 with out[i] = a(cells[i]).
template <typename Scalar>
Var<Scalar> pick(const Var<Scalar>& a, const std::vector<std::pair<Index, Index>>& cells) {
  Matrix<Scalar> out(static_cast<Index>(cells.size()), 1);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto [r, c] = cells[i];
    detail::require(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), "pick",
                    "cell (" + std::to_string(r) + "," + std::to_string(c) + ") outside " + detail::shape_str(a.value()));
    out(static_cast<Index>(i), 0) = a.value()(r, c);
  }
  const int ia = a.id();
  const Index rows = a.rows(), cols = a.cols();
  return a.tape()->record("pick", std::move(out), a.requires_grad(),
                          [ia, cells, rows, cols](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> full = Matrix<Scalar>::Zero(rows, cols);
                            for (std::size_t i = 0; i < cells.size(); ++i)
                              full(cells[i].first, cells[i].second) += g(static_cast<Index>(i), 0);
                            t.accumulate(ia, full);
                          });
}

// Forward identity; backward contributes nothing to the input.
template <typename Scalar>
Var<Scalar> stop_gradient(const Var<Scalar>& a) {
  return a.tape()->constant(a.value());
}

// x W + b, with W: in x out and b: 1 x out.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  return add_row(matmul(x, weight), bias);
}

// Multi-head scaled dot-product attention over a stack of equal-length
// sequences. q, k, v are (num_seq * seq_len) x width; heads split the width.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index seq_len, Index heads) {
  detail::same_tape("attention", q, k);
  detail::same_tape("attention", q, v);
  const Index total = q.rows(), width = q.cols();
  detail::require(k.rows() == total && v.rows() == total && k.cols() == width && v.cols() == width, "attention",
                  "q/k/v shapes differ: " + detail::shapes(q, k) + " and " + detail::shape_str(v.value()));
  detail::require(seq_len > 0 && total % seq_len == 0, "attention",
                  "row count " + std::to_string(total) + " not a multiple of sequence length " + std::to_string(seq_len));
  detail::require(heads > 0 && width % heads == 0, "attention",
                  "width " + std::to_string(width) + " not divisible into " + std::to_string(heads) + " heads");
  const Index nseq = total / seq_len, dh = width / heads;
  const Scalar inv = Scalar(1) / std::sqrt(Scalar(dh));
  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(static_cast<std::size_t>(nseq * heads));
  Matrix<Scalar> out(total, width);
  const Matrix<Scalar>& qv = q.value();
  const Matrix<Scalar>& kv = k.value();
  const Matrix<Scalar>& vv = v.value();
  for (Index s = 0; s < nseq; ++s) {
    for (Index h = 0; h < heads; ++h) {
      auto qs = qv.block(s * seq_len, h * dh, seq_len, dh);
      auto ks = kv.block(s * seq_len, h * dh, seq_len, dh);
      auto vs = vv.block(s * seq_len, h * dh, seq_len, dh);
      Matrix<Scalar> p = (qs * ks.transpose()) * inv;
      for (Index i = 0; i < seq_len; ++i) {
        auto row = p.row(i);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      out.block(s * seq_len, h * dh, seq_len, dh).noalias() = p * vs;
      (*probs)[static_cast<std::size_t>(s * heads + h)] = std::move(p);
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      "attention", std::move(out), detail::any_grad({q, k, v}),
      [iq, ik, iv, probs, seq_len, heads, nseq, dh, inv](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const Matrix<Scalar>& qv = t.value(iq);
        const Matrix<Scalar>& kv = t.value(ik);
        const Matrix<Scalar>& vv = t.value(iv);
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
        for (Index s = 0; s < nseq; ++s) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix<Scalar>& p = (*probs)[static_cast<std::size_t>(s * heads + h)];
            auto go = g.block(s * seq_len, h * dh, seq_len, dh);
            auto qs = qv.block(s * seq_len, h * dh, seq_len, dh);
            auto ks = kv.block(s * seq_len, h * dh, seq_len, dh);
            auto vs = vv.block(s * seq_len, h * dh, seq_len, dh);
            dv.block(s * seq_len, h * dh, seq_len, dh).noalias() = p.transpose() * go;
            Matrix<Scalar> dp = go * vs.transpose();
            Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
            Matrix<Scalar> ds = p.cwiseProduct(dp - rs.replicate(1, seq_len)) * inv;
            dq.block(s * seq_len, h * dh, seq_len, dh).noalias() = ds * ks;
            dk.block(s * seq_len, h * dh, seq_len, dh).noalias() = ds.transpose() * qs;
          }
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::map<std::string, double> per_param_errors;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

using ParamMap = std::map<std::string, Matrix<double>>;
using LossFn = std::function<Var<double>(Tape<double>&, const std::map<std::string, Var<double>>&)>;

// Five-point central differences
//   (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h
// against the tape's analytic gradient, per coordinate of every named parameter.
inline GradCheckReport grad_check(const LossFn& loss_fn, const ParamMap& params, double eps = 1e-4) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");

  auto evaluate = [&](const ParamMap& p) {
    Tape<double> tape;
    std::map<std::string, Var<double>> vars;
    for (const auto& [name, m] : p) vars.emplace(name, tape.constant(m));
    const double f = loss_fn(tape, vars).item();
    if (!std::isfinite(f)) throw NumericError("grad_check: non-finite loss");
    return f;
  };

  Tape<double> tape;
  std::map<std::string, Var<double>> vars;
  for (const auto& [name, m] : params) vars.emplace(name, tape.leaf(m));
  Var<double> root = loss_fn(tape, vars);
  detail::require(root.rows() == 1 && root.cols() == 1, "grad_check", "loss must be scalar");
  if (!std::isfinite(root.item())) throw NumericError("grad_check: non-finite loss");
  tape.backward(root);

  GradCheckReport report;
  ParamMap probe = params;
  for (const auto& [name, m] : params) {
    const Matrix<double> analytic = tape.grad(vars.at(name));
    double worst = 0.0;
    Matrix<double>& x = probe.at(name);
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) {
        const double saved = x(i, j);
        auto at = [&](double offset) {
          x(i, j) = saved + offset;
          return evaluate(probe);
        };
        const double numeric = (at(-2 * eps) - 8 * at(-eps) + 8 * at(eps) - at(2 * eps)) / (12.0 * eps);
        x(i, j) = saved;
        worst = std::max(worst, relative_error(analytic(i, j), numeric));
        if (std::getenv("GC_DEBUG") && relative_error(analytic(i, j), numeric) > 1e-4) std::fprintf(stderr, "%s(%ld,%ld) a=%.10e n=%.10e\n", name.c_str(), (long)i, (long)j, analytic(i, j), numeric);
      }
    }
    report.per_param_errors[name] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

}  // namespace xmreid
