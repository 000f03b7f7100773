#pragma once

#include <memory>
#include <string>
#include <unordered_map>

#include "uwm/rng.hpp"
#include "uwm/tensor.hpp"

namespace uwm {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;  // leaf; requires_grad tracks `trainable`
  bool trainable = true;
};

// Registry of named parameters in deterministic insertion order. The builder
// registers every parameter exactly once; optimizers and checkpointing walk
// the same order.
template <class T>
class ParamRegistry {
 public:
  std::shared_ptr<Parameter<T>> add(const std::string& name, Shape shape, std::vector<T> init,
                                    bool trainable = true) {
    if (index_.count(name)) throw Error("parameter registered twice: " + name);
    auto p = std::make_shared<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>::leaf(std::move(shape), std::move(init), trainable);
    p->trainable = trainable;
    index_[name] = items_.size();
    items_.push_back(p);
    return p;
  }

  const std::vector<std::shared_ptr<Parameter<T>>>& items() const { return items_; }

  std::shared_ptr<Parameter<T>> find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second];
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p->value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : items_) p->value.zero_grad();
  }

  // test surgery: overwrite every parameter whose name starts with `prefix`
  void fill_prefix(const std::string& prefix, T v) {
    for (auto& p : items_)
      if (p->name.rfind(prefix, 0) == 0)
        for (auto& e : p->value.mut_data()) e = v;
  }

 private:
  std::vector<std::shared_ptr<Parameter<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// uniform(-sqrt(1/fan_in), sqrt(1/fan_in)); biases and output heads are
// zero-initialized elsewhere
template <class T>
std::vector<T> uniform_init(Rng& rng, int64_t count, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(static_cast<size_t>(count));
  for (auto& e : v) e = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

}  // namespace uwm
