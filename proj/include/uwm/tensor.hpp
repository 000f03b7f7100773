#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "uwm/common.hpp"

namespace uwm {

// One node of the dynamically recorded op graph. `back` reads this->grad and
// accumulates into the parents' grad buffers; it is recorded at forward time
// and owns copies of whatever intermediate values it needs.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> val;
  std::vector<T> grad;  // stays empty until backward touches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> back;

  int64_t size() const { return static_cast<int64_t>(val.size()); }
};

template <class T>
std::vector<T>& grad_buf(Node<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.val.size(), T(0));
  return n.grad;
}

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor leaf(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (::uwm::numel(shape) != static_cast<int64_t>(data.size()))
      shape_fail("leaf", "shape " + shape_str(shape) + " expects " + std::to_string(::uwm::numel(shape)) +
                             " values, got " + std::to_string(data.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return leaf(shape, std::vector<T>(::uwm::numel(shape), T(0)), requires_grad);
  }

  static Tensor full(const Shape& shape, T v, bool requires_grad = false) {
    return leaf(shape, std::vector<T>(::uwm::numel(shape), v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return n_->size(); }
  bool requires_grad() const { return n_->requires_grad; }
  const std::vector<T>& data() const { return n_->val; }

  // In-place mutation is only sound for leaves: recorded closures of older
  // graphs must never see the new values.
  std::vector<T>& mut_data() {
    if (!n_->parents.empty()) throw Error("mut_data: not a leaf tensor");
    return n_->val;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (n_->grad.empty()) throw Error("grad: no gradient recorded for this tensor");
    return n_->grad;
  }
  void zero_grad() { n_->grad.clear(); }

  const std::shared_ptr<Node<T>>& node() const { return n_; }

  // Reverse-mode sweep from a scalar output.
  void backward() const {
    if (numel() != 1) throw Error("backward: output must be scalar, got " + shape_str(shape()));
    if (!n_->requires_grad) throw Error("backward: output does not require grad");

    // Iterative postorder so graph depth cannot overflow the stack.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      bool descended = false;
      while (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) {
          stack.emplace_back(p, 0);
          descended = true;
          break;
        }
      }
      if (!descended && (stack.back().second >= stack.back().first->parents.size())) {
        order.push_back(stack.back().first);
        stack.pop_back();
      }
    }

    grad_buf(*n_)[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->back && !node->grad.empty()) node->back(*node);
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <class T>
std::shared_ptr<Node<T>> make_node(const char* op, Shape shape,
                                   std::vector<std::shared_ptr<Node<T>>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->val.assign(static_cast<size_t>(numel(n->shape)), T(0));
  n->parents = std::move(parents);
  for (const auto& p : n->parents) n->requires_grad = n->requires_grad || p->requires_grad;
  return n;
}

}  // namespace detail

}  // namespace uwm
