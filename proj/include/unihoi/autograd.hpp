#pragma once

// Minimal reverse-mode automatic differentiation over row-major Eigen matrices.
//
// A Tensor is a handle to a graph node. Nodes created from inputs that require
// gradients record their parents and a backward closure; nodes created purely
// from constants do not, so evaluation-mode forwards build no graph at all.
// Everything is two-dimensional: vectors are 1 x C rows, scalars are 1 x 1.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "unihoi/common.hpp"

namespace unihoi::ag {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Matrix<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Eigen::Index r, Eigen::Index c) { return Tensor(Matrix<T>::Zero(r, c)); }
  static Tensor scalar(T v) {
    Matrix<T> m(1, 1);
    m(0, 0) = v;
    return Tensor(std::move(m));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  const Matrix<T>& grad() const { return node_->grad; }
  Matrix<T>& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  T item() const { return node_->value(0, 0); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() { node_->grad.resize(0, 0); }

  // Back-propagates from a 1 x 1 tensor through every reachable node.
  void backward() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("backward() requires a scalar tensor");
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->accumulate(Matrix<T>::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T, typename Fn>
Tensor<T> make(Matrix<T> value, std::initializer_list<Tensor<T>> parents, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::forward<Fn>(fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_multi(Matrix<T> value, const std::vector<Tensor<T>>& parents,
                     std::function<void(Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Tensor<T>(std::move(node));
}

inline void check_same(Eigen::Index r1, Eigen::Index c1, Eigen::Index r2, Eigen::Index c2,
                       const char* op) {
  if (r1 != r2 || c1 != c2) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(r1) + "x" +
                     std::to_string(c1) + " vs " + std::to_string(r2) + "x" + std::to_string(c2));
  }
}

}  // namespace detail

// a * b
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) detail::check_same(a.cols(), 0, b.rows(), 0, "matmul");
  return detail::make<T>(a.value() * b.value(), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) a.node()->accumulate(n.grad * b.value().transpose());
    if (b.requires_grad()) b.node()->accumulate(a.value().transpose() * n.grad);
  });
}

// a * b^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) detail::check_same(a.cols(), 0, b.cols(), 0, "matmul_nt");
  return detail::make<T>(a.value() * b.value().transpose(), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) a.node()->accumulate(n.grad * b.value());
    if (b.requires_grad()) b.node()->accumulate(n.grad.transpose() * a.value());
  });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a.rows(), a.cols(), b.rows(), b.cols(), "add");
  return detail::make<T>(a.value() + b.value(), {a, b}, [a, b](Node<T>& n) {
    a.node()->accumulate(n.grad);
    b.node()->accumulate(n.grad);
  });
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
  return detail::make<T>(a.value() - b.value(), {a, b}, [a, b](Node<T>& n) {
    a.node()->accumulate(n.grad);
    b.node()->accumulate(-n.grad);
  });
}

// Elementwise product.
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
  return detail::make<T>(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) a.node()->accumulate(n.grad.cwiseProduct(b.value()));
    if (b.requires_grad()) b.node()->accumulate(n.grad.cwiseProduct(a.value()));
  });
}

// Elementwise quotient.
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a.rows(), a.cols(), b.rows(), b.cols(), "div");
  return detail::make<T>(a.value().cwiseQuotient(b.value()), {a, b}, [a, b](Node<T>& n) {
    if (a.requires_grad()) a.node()->accumulate(n.grad.cwiseQuotient(b.value()));
    if (b.requires_grad()) {
      Matrix<T> q = a.value().cwiseQuotient(b.value().cwiseProduct(b.value()));
      b.node()->accumulate(-n.grad.cwiseProduct(q));
    }
  });
}

template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
  return detail::make<T>(a.value() * s, {a}, [a, s](Node<T>& n) { a.node()->accumulate(n.grad * s); });
}

template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
  return a * s;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::make<T>((a.value().array() + s).matrix(), {a},
                         [a](Node<T>& n) { a.node()->accumulate(n.grad); });
}

// Adds a 1 x C row to every row of a.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  detail::check_same(1, a.cols(), row.rows(), row.cols(), "add_row");
  Matrix<T> v = a.value().rowwise() + row.value().row(0);
  return detail::make<T>(std::move(v), {a, row}, [a, row](Node<T>& n) {
    a.node()->accumulate(n.grad);
    if (row.requires_grad()) row.node()->accumulate(n.grad.colwise().sum());
  });
}

// Multiplies every row of a elementwise by a 1 x C row.
template <typename T>
Tensor<T> mul_row(const Tensor<T>& a, const Tensor<T>& row) {
  detail::check_same(1, a.cols(), row.rows(), row.cols(), "mul_row");
  Matrix<T> v = a.value().array().rowwise() * row.value().row(0).array();
  return detail::make<T>(std::move(v), {a, row}, [a, row](Node<T>& n) {
    if (a.requires_grad()) {
      Matrix<T> g = n.grad.array().rowwise() * row.value().row(0).array();
      a.node()->accumulate(g);
    }
    if (row.requires_grad()) {
      row.node()->accumulate(n.grad.cwiseProduct(a.value()).colwise().sum());
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Matrix<T> v = a.value().cwiseMax(T(0));
  return detail::make<T>(std::move(v), {a}, [a](Node<T>& n) {
    Matrix<T> g = (a.value().array() > T(0)).select(n.grad, T(0));
    a.node()->accumulate(g);
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Matrix<T> v = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return detail::make<T>(v, {a}, [a, v](Node<T>& n) {
    a.node()->accumulate((n.grad.array() * v.array() * (T(1) - v.array())).matrix());
  });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::make<T>(a.value().cwiseAbs(), {a}, [a](Node<T>& n) {
    a.node()->accumulate((n.grad.array() * a.value().array().sign()).matrix());
  });
}

// Elementwise minimum; ties route the gradient to the first argument.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a.rows(), a.cols(), b.rows(), b.cols(), "minimum");
  return detail::make<T>(a.value().cwiseMin(b.value()), {a, b}, [a, b](Node<T>& n) {
    auto first = (a.value().array() <= b.value().array());
    if (a.requires_grad()) a.node()->accumulate(first.select(n.grad, T(0)).matrix());
    if (b.requires_grad()) b.node()->accumulate(first.select(T(0), n.grad).matrix());
  });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a.rows(), a.cols(), b.rows(), b.cols(), "maximum");
  return detail::make<T>(a.value().cwiseMax(b.value()), {a, b}, [a, b](Node<T>& n) {
    auto first = (a.value().array() >= b.value().array());
    if (a.requires_grad()) a.node()->accumulate(first.select(n.grad, T(0)).matrix());
    if (b.requires_grad()) b.node()->accumulate(first.select(T(0), n.grad).matrix());
  });
}

// max(a, floor) elementwise.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return detail::make<T>(a.value().cwiseMax(floor), {a}, [a, floor](Node<T>& n) {
    a.node()->accumulate((a.value().array() > floor).select(n.grad, T(0)).matrix());
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Matrix<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make<T>(std::move(v), {a}, [a](Node<T>& n) {
    a.node()->accumulate(Matrix<T>::Constant(a.rows(), a.cols(), n.grad(0, 0)));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return sum(a) * (T(1) / static_cast<T>(a.rows() * a.cols()));
}

// Column-wise mean: R x C -> 1 x C.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.rows());
  Matrix<T> v = a.value().colwise().sum() * inv;
  return detail::make<T>(std::move(v), {a}, [a, inv](Node<T>& n) {
    Matrix<T> g = n.grad.replicate(a.rows(), 1) * inv;
    a.node()->accumulate(g);
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows out of range");
  Matrix<T> v = a.value().middleRows(start, count);
  return detail::make<T>(std::move(v), {a}, [a, start, count](Node<T>& n) {
    Matrix<T> g = Matrix<T>::Zero(a.rows(), a.cols());
    g.middleRows(start, count) = n.grad;
    a.node()->accumulate(g);
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols out of range");
  Matrix<T> v = a.value().middleCols(start, count);
  return detail::make<T>(std::move(v), {a}, [a, start, count](Node<T>& n) {
    Matrix<T> g = Matrix<T>::Zero(a.rows(), a.cols());
    g.middleCols(start, count) = n.grad;
    a.node()->accumulate(g);
  });
}

// Selects rows by index (duplicates allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<Eigen::Index>& idx) {
  Matrix<T> v(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  return detail::make<T>(std::move(v), {a}, [a, idx](Node<T>& n) {
    Matrix<T> g = Matrix<T>::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    a.node()->accumulate(g);
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Eigen::Index r = parts.front().rows();
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols row mismatch");
    c += p.cols();
  }
  Matrix<T> v(r, c);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return detail::make_multi<T>(std::move(v), parts, [parts](Node<T>& n) {
    Eigen::Index o = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) p.node()->accumulate(n.grad.middleCols(o, p.cols()));
      o += p.cols();
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Eigen::Index c = parts.front().cols();
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows column mismatch");
    r += p.rows();
  }
  Matrix<T> v(r, c);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return detail::make_multi<T>(std::move(v), parts, [parts](Node<T>& n) {
    Eigen::Index o = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) p.node()->accumulate(n.grad.middleRows(o, p.rows()));
      o += p.rows();
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  Matrix<T> v = a.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const T m = v.row(i).maxCoeff();
    v.row(i) = (v.row(i).array() - m).exp();
    v.row(i) /= v.row(i).sum();
  }
  return detail::make<T>(v, {a}, [a, v](Node<T>& n) {
    Matrix<T> gy = n.grad.cwiseProduct(v);
    Eigen::Matrix<T, Eigen::Dynamic, 1> s = gy.rowwise().sum();
    Matrix<T> g = gy - (v.array().colwise() * s.array()).matrix();
    a.node()->accumulate(g);
  });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  Matrix<T> v = a.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const T m = v.row(i).maxCoeff();
    const T lse = m + std::log((v.row(i).array() - m).exp().sum());
    v.row(i).array() -= lse;
  }
  return detail::make<T>(v, {a}, [a, v](Node<T>& n) {
    Matrix<T> p = v.array().exp().matrix();
    Eigen::Matrix<T, Eigen::Dynamic, 1> s = n.grad.rowwise().sum();
    Matrix<T> g = n.grad - (p.array().colwise() * s.array()).matrix();
    a.node()->accumulate(g);
  });
}

// Row-wise layer normalization with affine gamma/beta (1 x C each).
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps = T(1e-5)) {
  const Eigen::Index r = x.rows();
  const Eigen::Index c = x.cols();
  Matrix<T> xhat(r, c);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const T mu = x.value().row(i).mean();
    auto centered = x.value().row(i).array() - mu;
    const T var = centered.square().mean();
    inv_std(i) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix<T> y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
                beta.value().row(0).array();
  return detail::make<T>(std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Node<T>& n) {
    if (gamma.requires_grad()) gamma.node()->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (beta.requires_grad()) beta.node()->accumulate(n.grad.colwise().sum());
    if (x.requires_grad()) {
      const Eigen::Index cc = xhat.cols();
      Matrix<T> gh = n.grad.array().rowwise() * gamma.value().row(0).array();
      Matrix<T> gx(xhat.rows(), cc);
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const T m1 = gh.row(i).mean();
        const T m2 = gh.row(i).dot(xhat.row(i)) / static_cast<T>(cc);
        gx.row(i) = inv_std(i) * (gh.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
      x.node()->accumulate(gx);
    }
  });
}

// Cosine similarity between every row of a (N x D) and every row of b (M x D).
// A zero-norm row on either side yields 0 for its entries and no gradient.
template <typename T>
Tensor<T> cosine_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols()) throw ShapeError("cosine_rows width mismatch");
  const Eigen::Matrix<T, Eigen::Dynamic, 1> na = a.value().rowwise().norm();
  const Eigen::Matrix<T, Eigen::Dynamic, 1> nb = b.value().rowwise().norm();
  Eigen::Matrix<T, Eigen::Dynamic, 1> ia(na.size()), ib(nb.size());
  for (Eigen::Index i = 0; i < na.size(); ++i) ia(i) = na(i) > T(0) ? T(1) / na(i) : T(0);
  for (Eigen::Index i = 0; i < nb.size(); ++i) ib(i) = nb(i) > T(0) ? T(1) / nb(i) : T(0);
  Matrix<T> ua = a.value().array().colwise() * ia.array();
  Matrix<T> ub = b.value().array().colwise() * ib.array();
  Matrix<T> c = ua * ub.transpose();
  return detail::make<T>(c, {a, b}, [a, b, ua, ub, ia, ib, c](Node<T>& n) {
    // d cos / d a_i = (ub_j - c_ij ua_i) / |a_i|
    if (a.requires_grad()) {
      Matrix<T> g = n.grad * ub;
      Eigen::Matrix<T, Eigen::Dynamic, 1> s = n.grad.cwiseProduct(c).rowwise().sum();
      g -= (ua.array().colwise() * s.array()).matrix();
      g = g.array().colwise() * ia.array();
      a.node()->accumulate(g);
    }
    if (b.requires_grad()) {
      Matrix<T> g = n.grad.transpose() * ua;
      Eigen::Matrix<T, Eigen::Dynamic, 1> s = n.grad.cwiseProduct(c).colwise().sum().transpose();
      g -= (ub.array().colwise() * s.array()).matrix();
      g = g.array().colwise() * ib.array();
      b.node()->accumulate(g);
    }
  });
}

// Sum over all entries of the sigmoid focal loss of logits against {0,1} targets.
template <typename T>
Tensor<T> sigmoid_focal_sum(const Tensor<T>& logits, const Matrix<T>& targets, T alpha, T gamma) {
  detail::check_same(logits.rows(), logits.cols(), targets.rows(), targets.cols(), "sigmoid_focal_sum");
  const Matrix<T>& x = logits.value();
  Matrix<T> grad(x.rows(), x.cols());
  T total = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const T z = x(i, j);
      const T t = targets(i, j);
      const T p = T(1) / (T(1) + std::exp(-z));
      // Stable BCE-with-logits and its derivative.
      const T ce = std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
      const T dce = p - t;
      const T pt = p * t + (T(1) - p) * (T(1) - t);
      const T dpt = (T(2) * t - T(1)) * p * (T(1) - p);
      const T at = alpha * t + (T(1) - alpha) * (T(1) - t);
      const T one_m = T(1) - pt;
      const T mod = std::pow(one_m, gamma);
      total += at * mod * ce;
      const T dmod = one_m > T(0) ? -gamma * std::pow(one_m, gamma - T(1)) * dpt : T(0);
      grad(i, j) = at * (dmod * ce + mod * dce);
    }
  }
  Matrix<T> v(1, 1);
  v(0, 0) = total;
  return detail::make<T>(std::move(v), {logits}, [logits, grad](Node<T>& n) {
    logits.node()->accumulate(grad * n.grad(0, 0));
  });
}

// sum_i w_i * (-log softmax(logits_i)[target_i]).
template <typename T>
Tensor<T> weighted_nll_sum(const Tensor<T>& logits, const std::vector<Eigen::Index>& targets,
                           const std::vector<T>& weights) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size() || targets.size() != weights.size()) {
    throw ShapeError("weighted_nll_sum: size mismatch");
  }
  Tensor<T> lsm = log_softmax_rows(logits);
  Matrix<T> sel = Matrix<T>::Zero(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    sel(static_cast<Eigen::Index>(i), targets[i]) = -weights[i];
  }
  Tensor<T> mask(sel);
  return sum(lsm * mask);
}

}  // namespace unihoi::ag
