#pragma once

#include "uwm/channel.hpp"
#include "uwm/spatial.hpp"

namespace uwm {

// Multi-scale mixture over the three encoder outputs: each is projected to a
// common width by a 1x1 conv and resampled to the middle scale, the three maps
// are channel-concatenated, and the concatenation is routed through scan-module
// experts (spatial or channel flavor per branch).
template <class T, class ExpertT>
struct MultiScaleMoe {
  Conv2d<T> unify[3];
  GateNet<T> gate;
  std::vector<ExpertT> experts;
  int64_t cat_channels = 0;

  template <class InitExpert>
  void init(ParamRegistry<T>& reg, const std::string& prefix, const int64_t widths[3],
            int64_t common, int64_t n_experts, Rng& rng, int64_t top_k,
            InitExpert init_expert) {
    cat_channels = 3 * common;
    for (int i = 0; i < 3; ++i)
      unify[i].init(reg, prefix + ".unify" + std::to_string(i), widths[i], common, 1, rng);
    gate.init(reg, prefix + ".gate", cat_channels, n_experts, rng, top_k);
    experts.resize(static_cast<size_t>(n_experts));
    for (int64_t i = 0; i < n_experts; ++i)
      init_expert(experts[static_cast<size_t>(i)], reg,
                  prefix + ".expert" + std::to_string(i), cat_channels);
  }

  // e1 at full scale, e2 at 1/2, e3 at 1/4; output at 1/2 with 3*common channels
  Tensor<T> forward(const Tensor<T>& e1, const Tensor<T>& e2, const Tensor<T>& e3,
                    ScanEvaluator ev) const {
    auto u1 = down2_mean(unify[0].forward(e1));
    auto u2 = unify[1].forward(e2);
    auto u3 = up2_nearest(unify[2].forward(e3));
    auto cat = concat_ch<T>({u1, u2, u3});
    auto w = gate.forward(cat);
    std::vector<Tensor<T>> outs;
    outs.reserve(experts.size());
    for (const auto& e : experts) outs.push_back(e.forward(cat, ev));
    return mix_experts(outs, w);
  }
};

}  // namespace uwm
