#pragma once

#include <Eigen/Dense>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "rff/core/errors.hpp"
#include "rff/core/rng.hpp"

namespace rff::nn {

using Shape = std::vector<int>;

inline long numel(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// One vertex of the reverse-mode tape. Values and gradients are flat
/// row-major buffers; `shape` carries the logical dimensions.
template <typename S>
struct Node {
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  Shape shape;
  Vec value;
  Vec grad;  // empty until touched by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  long size() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Vec::Zero(value.size());
  }
};

/// Shared handle to a tape node. Copies alias the same storage.
template <typename S>
class Tensor {
 public:
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap =
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = Vec::Zero(numel(n->shape));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    t.flat().setConstant(v);
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<S> values, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (static_cast<long>(values.size()) != t.size())
      throw UsageError("tensor init list size " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor from_vector(Shape shape, const std::vector<S>& values,
                            bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (static_cast<long>(values.size()) != t.size())
      throw UsageError("tensor data size does not match shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double std = 1.0, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    S* p = t.data();
    for (long i = 0; i < t.size(); ++i) p[i] = static_cast<S>(rng.normal(0.0, std));
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  long size() const { return node_->size(); }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  Eigen::Map<Vec> flat() { return Eigen::Map<Vec>(node_->value.data(), node_->value.size()); }
  Eigen::Map<const Vec> flat() const {
    return Eigen::Map<const Vec>(node_->value.data(), node_->value.size());
  }

  /// 2-D view collapsing all leading axes; `cols` must divide size().
  ConstMatMap as_matrix(long cols) const {
    return ConstMatMap(node_->value.data(), node_->value.size() / cols, cols);
  }
  MatMap as_matrix(long cols) {
    return MatMap(node_->value.data(), node_->value.size() / cols, cols);
  }

  S item() const {
    if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  Eigen::Map<Vec> grad() {
    node_->ensure_grad();
    return Eigen::Map<Vec>(node_->grad.data(), node_->grad.size());
  }
  Eigen::Map<const Vec> grad() const {
    if (!has_grad()) throw UsageError("gradient not computed for this tensor");
    return Eigen::Map<const Vec>(node_->grad.data(), node_->grad.size());
  }
  void zero_grad() {
    node_->ensure_grad();
    node_->grad.setZero();
  }

  std::shared_ptr<Node<S>>& node() { return node_; }
  const std::shared_ptr<Node<S>>& node() const { return node_; }

  /// Leaf copy of the current values (detached from the tape).
  Tensor detached_copy() const {
    Tensor t = zeros(shape());
    t.flat() = flat();
    return t;
  }

 private:
  std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <typename S>
void topo_sort(Node<S>* root, std::vector<Node<S>*>& order) {
  // iterative post-order DFS
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into
/// every reachable node with requires_grad set, including leaves that
/// already hold gradients from a previous sweep.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw UsageError("backward() expects a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw UsageError("backward() on a tensor without requires_grad");
  std::vector<Node<S>*> order;
  detail::topo_sort(loss.node().get(), order);
  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

/// Builds an op output node wired to its parents. The backward function
/// receives the output node and must accumulate into parents' grads.
template <typename S>
Tensor<S> make_op(Shape shape, std::vector<Tensor<S>> parents,
                  std::function<void(Node<S>&)> backward_fn, const char* op) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value.resize(numel(n->shape));
  n->op = op;
  bool rg = false;
  for (auto& p : parents) {
    if (p.valid()) {
      rg = rg || p.requires_grad();
      n->parents.push_back(p.node());
    }
  }
  n->requires_grad = rg;
  if (rg) n->backward_fn = std::move(backward_fn);
  return Tensor<S>(std::move(n));
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace rff::nn
