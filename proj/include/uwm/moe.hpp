#pragma once

#include "uwm/layers.hpp"

namespace uwm {

// Soft routing head: global average pool -> linear -> softmax. Weights are
// nonnegative and sum to 1 per sample. top_k > 0 renormalizes over the k
// largest logits; 0 keeps the dense mixture.
template <class T>
struct GateNet {
  Linear<T> proj;
  int64_t top_k = 0;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c_in, int64_t n_experts,
            Rng& rng, int64_t top_k_ = 0) {
    top_k = top_k_;
    // zero init: routing starts uniform over experts
    proj.init(reg, prefix + ".proj", c_in, n_experts, rng, true, true);
  }

  // x: (B, C, H, W) -> (B, n_experts)
  Tensor<T> forward(const Tensor<T>& x) const {
    const Shape& s = x.shape();
    auto pooled = reshape(global_avg_pool(x), {s[0], s[1]});
    return softmax_last(linear(pooled, proj.w->value, proj.b->value), top_k);
  }
};

// weighted sum of per-expert maps with per-sample weights w: (B, E)
template <class T>
Tensor<T> mix_experts(const std::vector<Tensor<T>>& outs, const Tensor<T>& w) {
  if (outs.empty()) throw ShapeError("mix_experts: no expert outputs");
  const int64_t e = w.shape()[1];
  if (static_cast<int64_t>(outs.size()) != e)
    shape_fail("mix_experts", std::to_string(outs.size()) + " outputs vs " + shape_str(w.shape()));
  const int64_t b = w.shape()[0];
  Tensor<T> acc;
  for (int64_t i = 0; i < e; ++i) {
    auto wi = reshape(slice_axis(w, 1, i, 1), {b, 1, 1, 1});
    auto term = mul(outs[static_cast<size_t>(i)], wi);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

// Feed-forward expert: pointwise expand x2 -> SiLU -> pointwise contract.
template <class T>
struct FfExpert {
  Conv2d<T> expand, contract;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, Rng& rng) {
    expand.init(reg, prefix + ".expand", c, 2 * c, 1, rng);
    contract.init(reg, prefix + ".contract", 2 * c, c, 1, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return contract.forward(silu(expand.forward(x)));
  }
};

template <class T>
struct FeedForwardMoe {
  GateNet<T> gate;
  std::vector<FfExpert<T>> experts;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, int64_t n_experts,
            Rng& rng, int64_t top_k = 0) {
    gate.init(reg, prefix + ".gate", c, n_experts, rng, top_k);
    experts.resize(static_cast<size_t>(n_experts));
    for (int64_t i = 0; i < n_experts; ++i)
      experts[static_cast<size_t>(i)].init(reg, prefix + ".expert" + std::to_string(i), c, rng);
  }

  Tensor<T> expert_forward(int64_t i, const Tensor<T>& x) const {
    return experts.at(static_cast<size_t>(i)).forward(x);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto w = gate.forward(x);
    std::vector<Tensor<T>> outs;
    outs.reserve(experts.size());
    for (const auto& e : experts) outs.push_back(e.forward(x));
    return mix_experts(outs, w);
  }
};

// Expert that reshapes a fused mid-scale map to one target scale: pointwise
// conv to the target width, x2 resample if the scale differs, then a 3x3 conv.
// scale_step: -1 up to the finer scale, 0 same, +1 down to the coarser scale.
template <class T>
struct ConvExpert {
  Conv2d<T> to_width, refine;
  int scale_step = 0;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c_in, int64_t c_out,
            int scale_step_, Rng& rng) {
    scale_step = scale_step_;
    to_width.init(reg, prefix + ".to_width", c_in, c_out, 1, rng);
    refine.init(reg, prefix + ".refine", c_out, c_out, 3, rng, 1, 1);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = to_width.forward(x);
    if (scale_step < 0) y = up2_nearest(y);
    if (scale_step > 0) y = down2_mean(y);
    return refine.forward(y);
  }
};

// One routed bank of conv experts per target scale.
template <class T>
struct ConvMoe {
  GateNet<T> gate;
  std::vector<ConvExpert<T>> experts;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c_in, int64_t c_out,
            int scale_step, int64_t n_experts, Rng& rng, int64_t top_k = 0) {
    gate.init(reg, prefix + ".gate", c_in, n_experts, rng, top_k);
    experts.resize(static_cast<size_t>(n_experts));
    for (int64_t i = 0; i < n_experts; ++i)
      experts[static_cast<size_t>(i)].init(reg, prefix + ".expert" + std::to_string(i), c_in,
                                           c_out, scale_step, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto w = gate.forward(x);
    std::vector<Tensor<T>> outs;
    outs.reserve(experts.size());
    for (const auto& e : experts) outs.push_back(e.forward(x));
    return mix_experts(outs, w);
  }
};

}  // namespace uwm
