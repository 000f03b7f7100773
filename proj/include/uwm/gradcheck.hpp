#pragma once

#include <cmath>
#include <functional>
#include <unordered_set>

#include "uwm/tensor.hpp"

namespace uwm {

// Ground-truth oracle for the reverse-mode engine: central finite differences
// at f64 against the recorded graph's analytic gradients. Independent of any
// backward rule by construction.

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "input 2, element 17"
};

namespace detail {

template <class T>
void check_graph_finite(const Tensor<T>& out) {
  std::vector<Node<T>*> stack{out.node().get()};
  std::unordered_set<Node<T>*> seen{out.node().get()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    for (const T v : n->val)
      if (!std::isfinite(static_cast<double>(v)))
        throw CheckError(std::string("non-finite value produced by op '") + n->op + "'");
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
}

}  // namespace detail

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// `fn` must rebuild the graph from the given leaves and return a scalar.
// When `subset` is non-null, only the listed element indices of each input are
// probed (indices beyond an input's extent are ignored); the analytic gradient
// is still taken from a full reverse sweep.
inline GradCheckReport grad_check(const GradFn& fn, std::vector<Tensor<double>> inputs,
                                  double eps = 1e-5,
                                  const std::vector<std::vector<int64_t>>* subset = nullptr) {
  for (auto& t : inputs)
    if (!t.requires_grad()) throw CheckError("grad_check: all inputs must require grad");

  Tensor<double> out = fn(inputs);
  if (out.numel() != 1) throw CheckError("grad_check: fn must return a scalar");
  detail::check_graph_finite(out);
  out.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
  for (auto& t : inputs) t.zero_grad();

  auto eval = [&]() {
    Tensor<double> y = fn(inputs);
    detail::check_graph_finite(y);
    return y.data()[0];
  };

  GradCheckReport rep;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& data = inputs[k].mut_data();
    std::vector<int64_t> idxs;
    if (subset) {
      for (int64_t i : (*subset)[k])
        if (i >= 0 && i < static_cast<int64_t>(data.size())) idxs.push_back(i);
    } else {
      idxs.resize(data.size());
      for (size_t i = 0; i < data.size(); ++i) idxs[i] = static_cast<int64_t>(i);
    }
    for (int64_t i : idxs) {
      const double keep = data[i];
      data[i] = keep + eps;
      const double yp = eval();
      data[i] = keep - eps;
      const double ym = eval();
      data[i] = keep;
      const double fd = (yp - ym) / (2.0 * eps);
      const double an = analytic[k][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      const double rel = std::abs(fd - an) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "input " + std::to_string(k) + ", element " + std::to_string(i);
      }
    }
  }
  return rep;
}

}  // namespace uwm
