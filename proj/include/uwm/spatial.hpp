#pragma once

#include "uwm/moe.hpp"
#include "uwm/ssm.hpp"

namespace uwm {

// Spatial selective-scan module: shared channel expansion, depthwise 3x3,
// SiLU, then four directional scans (row fwd/bwd, col fwd/bwd) whose outputs
// are summed in that fixed order and layer-normed; a SiLU gate branch
// multiplies in before the output projection.
template <class T>
struct SpatialSsm {
  Conv2d<T> expand;    // 1x1, C -> E
  Conv2d<T> dwconv;    // 3x3 depthwise on E
  SsmParams<T> dirs[4];
  LayerNorm<T> norm;   // over E per position
  Conv2d<T> gate;      // 1x1, C -> E
  Conv2d<T> out_proj;  // 1x1, E -> C
  int64_t channels = 0, expanded = 0;

  static constexpr ScanOrder kOrders[4] = {ScanOrder::RowForward, ScanOrder::RowBackward,
                                           ScanOrder::ColForward, ScanOrder::ColBackward};

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, double expansion,
            int64_t n, Rng& rng) {
    channels = c;
    expanded = std::max<int64_t>(c, static_cast<int64_t>(expansion * static_cast<double>(c)));
    expand.init(reg, prefix + ".expand", c, expanded, 1, rng);
    dwconv.init(reg, prefix + ".dwconv", expanded, expanded, 3, rng, 1, 1, expanded);
    for (int i = 0; i < 4; ++i)
      dirs[i].init(reg, prefix + "." + scan_order_name(kOrders[i]), expanded, n, rng);
    norm.init(reg, prefix + ".norm", expanded);
    gate.init(reg, prefix + ".gate", c, expanded, 1, rng);
    out_proj.init(reg, prefix + ".out_proj", expanded, c, 1, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, ScanEvaluator ev) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != channels)
      shape_fail("spatial_ssm", "expects (B, " + std::to_string(channels) + ", H, W), got " +
                                    shape_str(s));
    const int64_t h = s[2], w = s[3];
    auto xe = silu(dwconv.forward(expand.forward(x)));
    Tensor<T> acc;
    for (int i = 0; i < 4; ++i) {
      auto seq = flatten_2d(xe, kOrders[i]);
      auto y = ssm_layer(seq, dirs[i], ev);
      auto img = unflatten_2d(y, kOrders[i], h, w);
      acc = acc.defined() ? add(acc, img) : img;
    }
    auto xa = norm.forward_channels(acc);
    auto xb = silu(gate.forward(x));
    return out_proj.forward(mul(xa, xb));
  }
};

// Pre-norm residual block: X_in = X_n + Y_prev, then the spatial scan and a
// feed-forward mixture, each behind a layer norm with an additive skip.
template <class T>
struct SpatialBlock {
  LayerNorm<T> norm1, norm2;
  SpatialSsm<T> ssm;
  FeedForwardMoe<T> ff;
  int64_t channels = 0;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, double expansion,
            int64_t n, int64_t n_experts, Rng& rng, int64_t top_k = 0) {
    channels = c;
    norm1.init(reg, prefix + ".norm1", c);
    ssm.init(reg, prefix + ".ssm", c, expansion, n, rng);
    norm2.init(reg, prefix + ".norm2", c);
    ff.init(reg, prefix + ".ff", c, n_experts, rng, top_k);
  }

  Tensor<T> forward(const Tensor<T>& x_n, const Tensor<T>& y_prev, ScanEvaluator ev) const {
    auto x_in = y_prev.defined() ? add(x_n, y_prev) : x_n;
    auto x_mid = add(ssm.forward(norm1.forward_channels(x_in), ev), x_in);
    return add(ff.forward(norm2.forward_channels(x_mid)), x_mid);
  }
};

}  // namespace uwm
