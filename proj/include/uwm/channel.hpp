#pragma once

#include "uwm/moe.hpp"
#include "uwm/ssm.hpp"

namespace uwm {

// Channel selective-scan module: pooled channel descriptor -> 1x1 conv ->
// SiLU -> the C channels scanned as a length-C sequence in both directions ->
// sigmoid attention in (0, 1) applied back over H, W. The attention depends
// on the input only through its per-channel means.
template <class T>
struct ChannelSsm {
  Conv2d<T> proj;  // 1x1 on the pooled map, C -> C
  SsmParams<T> fwd, bwd;
  int64_t channels = 0;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, int64_t n, Rng& rng) {
    channels = c;
    proj.init(reg, prefix + ".proj", c, c, 1, rng);
    fwd.init(reg, prefix + ".fwd", 1, n, rng);
    bwd.init(reg, prefix + ".bwd", 1, n, rng);
  }

  // (B, C, H, W) -> pre-sigmoid logits (B, C, 1, 1)
  Tensor<T> attention_logits(const Tensor<T>& x, ScanEvaluator ev) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != channels)
      shape_fail("channel_ssm", "expects (B, " + std::to_string(channels) + ", H, W), got " +
                                    shape_str(s));
    const int64_t b = s[0], c = s[1];
    auto q = silu(proj.forward(global_avg_pool(x)));
    auto seq = reshape(q, {b, c, 1});  // each channel is one step of a scalar sequence
    auto yf = ssm_layer(seq, fwd, ev);
    auto yb = reverse_seq(ssm_layer(reverse_seq(seq), bwd, ev));
    return reshape(add(yf, yb), {b, c, 1, 1});
  }

  static Tensor<T> apply_attention(const Tensor<T>& x, const Tensor<T>& logits) {
    return mul(x, sigmoid_t(logits));
  }

  Tensor<T> forward(const Tensor<T>& x, ScanEvaluator ev) const {
    return apply_attention(x, attention_logits(x, ev));
  }
};

// Channel-branch mirror of the spatial block.
template <class T>
struct ChannelBlock {
  LayerNorm<T> norm1, norm2;
  ChannelSsm<T> ssm;
  FeedForwardMoe<T> ff;
  int64_t channels = 0;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c, int64_t n,
            int64_t n_experts, Rng& rng, int64_t top_k = 0) {
    channels = c;
    norm1.init(reg, prefix + ".norm1", c);
    ssm.init(reg, prefix + ".ssm", c, n, rng);
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
