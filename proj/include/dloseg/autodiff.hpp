#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dloseg/common.hpp"
#include "dloseg/random.hpp"

namespace dloseg::ad {

using Mat = Eigen::MatrixXd;
using Arr = Eigen::ArrayXXd;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;  // accumulated until the optimizer consumes it
  // AdamW state lives with the parameter so a model serializes as one unit.
  Mat adam_m;
  Mat adam_v;

  Parameter() = default;
  Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)) {
    grad = Mat::Zero(value.rows(), value.cols());
    adam_m = Mat::Zero(value.rows(), value.cols());
    adam_v = Mat::Zero(value.rows(), value.cols());
  }
  Eigen::Index size() const { return value.size(); }
};

class Tape;

// Lightweight handle into a tape node. Copyable, valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Dynamic reverse-mode tape over dense double matrices. One tape per forward
// pass; backward() walks nodes in reverse creation order, which is already a
// topological order.
class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched
    std::function<void(Tape&)> backprop;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  Var constant(Mat v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, nullptr, false});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Tracked leaf without a bound parameter (used to probe input gradients).
  Var input(Mat v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, nullptr, true});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var leaf(Parameter& p) {
    nodes_.push_back(Node{p.value, {}, nullptr, &p, true});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  int next_id() const { return static_cast<int>(nodes_.size()); }

  Var push(Mat value, bool needs_grad, std::function<void(Tape&)> backprop) {
    nodes_.push_back(Node{std::move(value), {},
                          needs_grad ? std::move(backprop) : nullptr, nullptr,
                          needs_grad});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& val(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  const Mat& grad_of(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accum(int id, const Mat& delta) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = delta;
    else
      n.grad += delta;
  }

  // Seeds the scalar node with gradient 1 and propagates. Parameter leaf
  // gradients are added into Parameter::grad.
  void backward(const Var& loss) {
    require_shape(loss.value().size() == 1, "backward expects a scalar node");
    accum(loss.id(), Mat::Ones(1, 1));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backprop) continue;
      n.backprop(*this);
    }
    for (Node& n : nodes_) {
      if (n.param && n.grad.size() != 0) n.param->grad += n.grad;
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->val(id_); }
inline const Mat& Var::grad() const { return tape_->grad_of(id_); }

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b) {
  require(a.tape() == b.tape(), "vars live on different tapes");
  return *a.tape();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  int ia = a.id(), ib = b.id(), self = t.next_id();
  bool ng = t.needs_grad(ia) || t.needs_grad(ib);
  return t.push(a.value() + b.value(), ng, [self, ia, ib](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    tp.accum(ia, g);
    tp.accum(ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  int ia = a.id(), ib = b.id(), self = t.next_id();
  bool ng = t.needs_grad(ia) || t.needs_grad(ib);
  return t.push(a.value() - b.value(), ng, [self, ia, ib](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    tp.accum(ia, g);
    tp.accum(ib, -g);
  });
}

// Broadcast a 1 x cols row vector over every row of a.
inline Var add_rowvec(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_shape(b.rows() == 1 && b.cols() == a.cols(), "add_rowvec: bad bias shape");
  int ia = a.id(), ib = b.id(), self = t.next_id();
  bool ng = t.needs_grad(ia) || t.needs_grad(ib);
  Mat out = a.value().rowwise() + b.value().row(0);
  return t.push(std::move(out), ng, [self, ia, ib](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    tp.accum(ia, g);
    tp.accum(ib, g.colwise().sum());
  });
}

// s * a + c, elementwise with scalar constants.
inline Var affine(const Var& a, double s, double c) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Mat out = (a.value().array() * s + c).matrix();
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, s](Tape& tp) {
    tp.accum(ia, tp.grad_of(self) * s);
  });
}

inline Var scale(const Var& a, double s) { return affine(a, s, 0.0); }

inline Var hadamard(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                "hadamard: shape mismatch");
  int ia = a.id(), ib = b.id(), self = t.next_id();
  bool ng = t.needs_grad(ia) || t.needs_grad(ib);
  Mat out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), ng, [self, ia, ib](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    tp.accum(ia, g.cwiseProduct(tp.val(ib)));
    tp.accum(ib, g.cwiseProduct(tp.val(ia)));
  });
}

// Elementwise product with a constant matrix (e.g. label masks).
inline Var mul_elem_const(const Var& a, Mat m) {
  Tape& t = *a.tape();
  require_shape(a.rows() == m.rows() && a.cols() == m.cols(),
                "mul_elem_const: shape mismatch");
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().cwiseProduct(m);
  auto mm = std::make_shared<Mat>(std::move(m));
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, mm](Tape& tp) {
    tp.accum(ia, tp.grad_of(self).cwiseProduct(*mm));
  });
}

// Multiply a matrix by a 1x1 scalar variable.
inline Var scalar_mul(const Var& a, const Var& s) {
  Tape& t = detail::same_tape(a, s);
  require_shape(s.value().size() == 1, "scalar_mul: s must be 1x1");
  int ia = a.id(), is = s.id(), self = t.next_id();
  bool ng = t.needs_grad(ia) || t.needs_grad(is);
  Mat out = a.value() * s.value()(0, 0);
  return t.push(std::move(out), ng, [self, ia, is](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    tp.accum(ia, g * tp.val(is)(0, 0));
    Mat gs(1, 1);
    gs(0, 0) = (g.array() * tp.val(ia).array()).sum();
    tp.accum(is, gs);
  });
}

inline Var divide(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                "divide: shape mismatch");
  int ia = a.id(), ib = b.id(), self = t.next_id();
  bool ng = t.needs_grad(ia) || t.needs_grad(ib);
  Mat out = a.value().cwiseQuotient(b.value());
  return t.push(std::move(out), ng, [self, ia, ib](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    const Mat& bv = tp.val(ib);
    tp.accum(ia, g.cwiseQuotient(bv));
    tp.accum(ib, (-g.array() * tp.val(ia).array() / (bv.array() * bv.array()))
                     .matrix());
  });
}

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_shape(a.cols() == b.rows(), "matmul: inner dimensions disagree");
  int ia = a.id(), ib = b.id(), self = t.next_id();
  bool ng = t.needs_grad(ia) || t.needs_grad(ib);
  Mat out = a.value() * b.value();
  return t.push(std::move(out), ng, [self, ia, ib](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    if (tp.needs_grad(ia)) tp.accum(ia, g * tp.val(ib).transpose());
    if (tp.needs_grad(ib)) tp.accum(ib, tp.val(ia).transpose() * g);
  });
}

// a * B with a constant right factor.
inline Var matmul_const_r(const Var& a, Mat b) {
  Tape& t = *a.tape();
  require_shape(a.cols() == b.rows(), "matmul_const_r: inner dims disagree");
  int ia = a.id(), self = t.next_id();
  Mat out = a.value() * b;
  auto bb = std::make_shared<Mat>(std::move(b));
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, bb](Tape& tp) {
    tp.accum(ia, tp.grad_of(self) * bb->transpose());
  });
}

// a * B against a long-lived constant; `b` must outlive the tape. Used for
// large fixed operands (positional grids, decoder kernels) that would be
// wasteful to copy per forward pass.
inline Var matmul_const_ptr(const Var& a, const Mat* b) {
  Tape& t = *a.tape();
  require_shape(a.cols() == b->rows(), "matmul_const_ptr: inner dims disagree");
  int ia = a.id(), self = t.next_id();
  Mat out = a.value() * (*b);
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, b](Tape& tp) {
    tp.accum(ia, tp.grad_of(self) * b->transpose());
  });
}

// Elementwise sum with a constant matrix.
inline Var add_elem_const(const Var& a, Mat m) {
  Tape& t = *a.tape();
  require_shape(a.rows() == m.rows() && a.cols() == m.cols(),
                "add_elem_const: shape mismatch");
  int ia = a.id(), self = t.next_id();
  Mat out = a.value() + m;
  return t.push(std::move(out), t.needs_grad(ia), [self, ia](Tape& tp) {
    tp.accum(ia, tp.grad_of(self));
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

// x^p for strictly positive x.
inline Var pow_const(const Var& a, double p) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().array().pow(p).matrix();
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, p](Tape& tp) {
    Arr x = tp.val(ia).array();
    tp.accum(ia, (tp.grad_of(self).array() * p * x.pow(p - 1.0)).matrix());
  });
}

inline Var vlog(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().array().log().matrix();
  return t.push(std::move(out), t.needs_grad(ia), [self, ia](Tape& tp) {
    tp.accum(ia, (tp.grad_of(self).array() / tp.val(ia).array()).matrix());
  });
}

inline Var square(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().array().square().matrix();
  return t.push(std::move(out), t.needs_grad(ia), [self, ia](Tape& tp) {
    tp.accum(ia, (2.0 * tp.grad_of(self).array() * tp.val(ia).array()).matrix());
  });
}

inline Var relu(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().cwiseMax(0.0);
  return t.push(std::move(out), t.needs_grad(ia), [self, ia](Tape& tp) {
    const Arr mask = (tp.val(ia).array() > 0.0).cast<double>();
    tp.accum(ia, (tp.grad_of(self).array() * mask).matrix());
  });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
inline Var gelu(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  auto normal_cdf = [](double v) {
    return 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
  };
  Arr x = a.value().array();
  Arr cdf = x.unaryExpr(normal_cdf);
  Mat out = (x * cdf).matrix();
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, normal_cdf](Tape& tp) {
    const double inv_sqrt2pi = 0.3989422804014326779;
    Arr x = tp.val(ia).array();
    Arr cdf = x.unaryExpr(normal_cdf);
    Arr pdf = inv_sqrt2pi * (-0.5 * x.square()).exp();
    tp.accum(ia, (tp.grad_of(self).array() * (cdf + x * pdf)).matrix());
  });
}

// Numerically stable softplus: max(x,0) + log1p(exp(-|x|)).
inline Var softplus(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Arr x = a.value().array();
  Mat out = (x.max(0.0) + (-x.abs()).exp().log1p()).matrix();
  return t.push(std::move(out), t.needs_grad(ia), [self, ia](Tape& tp) {
    Arr x = tp.val(ia).array();
    Arr sig = 1.0 / (1.0 + (-x).exp());
    tp.accum(ia, (tp.grad_of(self).array() * sig).matrix());
  });
}

// Hard clamp; gradient passes only strictly inside (lo, hi).
inline Var clamp(const Var& a, double lo, double hi) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().cwiseMax(lo).cwiseMin(hi);
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, lo, hi](Tape& tp) {
    Arr x = tp.val(ia).array();
    Arr mask = ((x > lo) && (x < hi)).cast<double>();
    tp.accum(ia, (tp.grad_of(self).array() * mask).matrix());
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizers

inline Var softmax_rows(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Arr x = a.value().array();
  Arr shifted = x.colwise() - x.rowwise().maxCoeff();
  Arr e = shifted.exp();
  Arr s = e.colwise() / e.rowwise().sum();
  return t.push(s.matrix(), t.needs_grad(ia), [self, ia](Tape& tp) {
    Arr s = tp.val(self).array();
    Arr g = tp.grad_of(self).array();
    Eigen::ArrayXd dot = (g * s).rowwise().sum();
    tp.accum(ia, (s * (g.colwise() - dot)).matrix());
  });
}

// Row-wise layer normalization without learned affine terms. Every output row
// has zero mean and unit variance up to eps.
inline Var layernorm_rows(const Var& a, double eps = 1e-5) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  const double d = static_cast<double>(a.cols());
  Arr x = a.value().array();
  Eigen::ArrayXd mu = x.rowwise().mean();
  Arr centered = x.colwise() - mu;
  Eigen::ArrayXd var = centered.square().rowwise().sum() / d;
  Eigen::ArrayXd inv_std = (var + eps).sqrt().inverse();
  Arr y = centered.colwise() * inv_std;
  return t.push(y.matrix(), t.needs_grad(ia), [self, ia, d, eps](Tape& tp) {
    // With y = (x - mu) / std: dx = (g - mean(g) - y * mean(g .* y)) / std.
    Arr y = tp.val(self).array();
    Arr g = tp.grad_of(self).array();
    Arr x = tp.val(ia).array();
    Eigen::ArrayXd mu = x.rowwise().mean();
    Arr centered = x.colwise() - mu;
    Eigen::ArrayXd var = centered.square().rowwise().sum() / d;
    Eigen::ArrayXd inv_std = (var + eps).sqrt().inverse();
    Eigen::ArrayXd g_mean = g.rowwise().mean();
    Eigen::ArrayXd gy_mean = (g * y).rowwise().mean();
    Arr dx = ((g.colwise() - g_mean) - (y.colwise() * gy_mean)).colwise() * inv_std;
    tp.accum(ia, dx.matrix());
  });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Var transpose(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  return t.push(a.value().transpose(), t.needs_grad(ia), [self, ia](Tape& tp) {
    tp.accum(ia, tp.grad_of(self).transpose());
  });
}

inline Var slice_rows(const Var& a, Eigen::Index i0, Eigen::Index n) {
  Tape& t = *a.tape();
  require_shape(i0 >= 0 && i0 + n <= a.rows(), "slice_rows: out of range");
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().middleRows(i0, n);
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, i0, n](Tape& tp) {
    Mat g = Mat::Zero(tp.val(ia).rows(), tp.val(ia).cols());
    g.middleRows(i0, n) = tp.grad_of(self);
    tp.accum(ia, g);
  });
}

inline Var slice_cols(const Var& a, Eigen::Index j0, Eigen::Index n) {
  Tape& t = *a.tape();
  require_shape(j0 >= 0 && j0 + n <= a.cols(), "slice_cols: out of range");
  int ia = a.id(), self = t.next_id();
  Mat out = a.value().middleCols(j0, n);
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, j0, n](Tape& tp) {
    Mat g = Mat::Zero(tp.val(ia).rows(), tp.val(ia).cols());
    g.middleCols(j0, n) = tp.grad_of(self);
    tp.accum(ia, g);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: empty input");
  Tape& t = *parts[0].tape();
  Eigen::Index rows = 0;
  bool ng = false;
  for (const Var& p : parts) {
    require_shape(p.cols() == parts[0].cols(), "concat_rows: column mismatch");
    rows += p.rows();
    ng = ng || t.needs_grad(p.id());
  }
  Mat out(rows, parts[0].cols());
  std::vector<int> ids;
  std::vector<Eigen::Index> offs, lens;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    ids.push_back(p.id());
    offs.push_back(r);
    lens.push_back(p.rows());
    r += p.rows();
  }
  int self = t.next_id();
  return t.push(std::move(out), ng, [self, ids, offs, lens](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    for (std::size_t k = 0; k < ids.size(); ++k)
      tp.accum(ids[k], g.middleRows(offs[k], lens[k]));
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  Tape& t = *parts[0].tape();
  Eigen::Index cols = 0;
  bool ng = false;
  for (const Var& p : parts) {
    require_shape(p.rows() == parts[0].rows(), "concat_cols: row mismatch");
    cols += p.cols();
    ng = ng || t.needs_grad(p.id());
  }
  Mat out(parts[0].rows(), cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offs, lens;
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    ids.push_back(p.id());
    offs.push_back(c);
    lens.push_back(p.cols());
    c += p.cols();
  }
  int self = t.next_id();
  return t.push(std::move(out), ng, [self, ids, offs, lens](Tape& tp) {
    const Mat& g = tp.grad_of(self);
    for (std::size_t k = 0; k < ids.size(); ++k)
      tp.accum(ids[k], g.middleCols(offs[k], lens[k]));
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum_all(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), t.needs_grad(ia), [self, ia](Tape& tp) {
    double g = tp.grad_of(self)(0, 0);
    tp.accum(ia, Mat::Constant(tp.val(ia).rows(), tp.val(ia).cols(), g));
  });
}

inline Var mean_all(const Var& a) {
  Tape& t = *a.tape();
  int ia = a.id(), self = t.next_id();
  const double n = static_cast<double>(a.value().size());
  Mat out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, n](Tape& tp) {
    double g = tp.grad_of(self)(0, 0) / n;
    tp.accum(ia, Mat::Constant(tp.val(ia).rows(), tp.val(ia).cols(), g));
  });
}

// Inverted dropout on every element; scaling keeps expectations unchanged.
inline Var dropout(const Var& a, double p, Rng& rng) {
  Tape& t = *a.tape();
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
  int ia = a.id(), self = t.next_id();
  Mat mask(a.rows(), a.cols());
  const double keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = rng.bernoulli(p) ? 0.0 : keep_scale;
  Mat out = a.value().cwiseProduct(mask);
  auto mm = std::make_shared<Mat>(std::move(mask));
  return t.push(std::move(out), t.needs_grad(ia), [self, ia, mm](Tape& tp) {
    tp.accum(ia, tp.grad_of(self).cwiseProduct(*mm));
  });
}

}  // namespace dloseg::ad
