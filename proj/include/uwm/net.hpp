#pragma once

#include <array>
#include <optional>

#include "uwm/ms_moe.hpp"

namespace uwm {

// Two parallel 3-scale U-shapes (spatial and channel) with additive skips,
// joined across branches at the bottleneck by per-branch multi-scale expert
// mixtures and at every skip level by shared conv mixtures over the fused
// mid-scale map F = Y_s + Y_c (the promoted skip is Z_i = MoE_i(F) + Skip_i).
// Channel widths double per scale; per-scale 1x1 heads emit residuals on top
// of the resampled input so the zero-initialized network is the identity.
struct NetConfig {
  int64_t base_channels = 16;
  int64_t blocks_per_scale = 1;
  double expansion = 2.0;
  int64_t d_state = 8;
  int64_t n_experts = 4;
  int64_t top_k = 0;  // 0 = dense soft mixture
  bool spatial_branch = true;
  bool channel_branch = true;
  bool mutual_promotion = true;
  ScanEvaluator evaluator = ScanEvaluator::Sequential;

  int64_t width(int scale) const { return base_channels << scale; }
  int active_branches() const {
    return (spatial_branch ? 1 : 0) + (channel_branch ? 1 : 0);
  }
  void validate() const {
    if (base_channels < 1 || blocks_per_scale < 1 || d_state < 1 || n_experts < 1)
      throw ConfigError("net: base_channels, blocks_per_scale, d_state, n_experts must be >= 1");
    if (expansion < 1.0) throw ConfigError("net: expansion must be >= 1");
    if (top_k < 0 || top_k > n_experts)
      throw ConfigError("net: top_k must lie in [0, n_experts]");
    if (!spatial_branch && !channel_branch)
      throw ConfigError("net: at least one branch must be enabled");
  }
};

template <class T>
struct MultiScaleOutput {
  std::array<Tensor<T>, 3> s, c, fused;  // index 0 = full scale, 1 = 1/2, 2 = 1/4
};

namespace detail {

template <class T, class BlockT>
struct BranchModules {
  Conv2d<T> embed[3];                     // 3x3 patch embeds, 3 -> width(i)
  std::vector<BlockT> enc[3], dec[3];
  Conv2d<T> down_tr[2], up_tr[2];         // width change around the resamples
  Conv2d<T> head[3];                      // 1x1 to 3 channels, zero-initialized
};

}  // namespace detail

template <class T>
class DualBranchNet {
 public:
  using SBranch = detail::BranchModules<T, SpatialBlock<T>>;
  using CBranch = detail::BranchModules<T, ChannelBlock<T>>;

  DualBranchNet(ParamRegistry<T>& reg, const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const int64_t ms_common = cfg.base_channels;
    const int64_t widths[3] = {cfg.width(0), cfg.width(1), cfg.width(2)};
    if (cfg.spatial_branch) {
      build_branch(reg, "spatial", spatial_, rng,
                   [&](SpatialBlock<T>& b, const std::string& p, int64_t c) {
                     b.init(reg, p, c, cfg.expansion, cfg.d_state, cfg.n_experts, rng, cfg.top_k);
                   });
      ms_spatial_.init(reg, "spatial.ms_moe", widths, ms_common, cfg.n_experts, rng, cfg.top_k,
                       [&](SpatialSsm<T>& e, ParamRegistry<T>& r, const std::string& p,
                           int64_t c) { e.init(r, p, c, cfg.expansion, cfg.d_state, rng); });
    }
    if (cfg.channel_branch) {
      build_branch(reg, "channel", channel_, rng,
                   [&](ChannelBlock<T>& b, const std::string& p, int64_t c) {
                     b.init(reg, p, c, cfg.d_state, cfg.n_experts, rng, cfg.top_k);
                   });
      ms_channel_.init(reg, "channel.ms_moe", widths, ms_common, cfg.n_experts, rng, cfg.top_k,
                       [&](ChannelSsm<T>& e, ParamRegistry<T>& r, const std::string& p,
                           int64_t c) { e.init(r, p, c, cfg.d_state, rng); });
    }
    if (cfg.mutual_promotion) {
      // fused map F lives at the middle scale with 3*ms_common channels
      for (int i = 0; i < 3; ++i)
        promo_[i].init(reg, "promo.scale" + std::to_string(i), 3 * ms_common, widths[i], i - 1,
                       cfg.n_experts, rng, cfg.top_k);
    }
  }

  const NetConfig& config() const { return cfg_; }

  // image: (B, 3, H, W), H and W divisible by 4
  MultiScaleOutput<T> forward(const Tensor<T>& image) const {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != 3)
      shape_fail("net", "expects (B, 3, H, W), got " + shape_str(s));
    if (s[2] % 4 || s[3] % 4)
      throw ConfigError("net: H and W must be divisible by 4, got " + shape_str(s));
    const ScanEvaluator ev = cfg_.evaluator;

    std::array<Tensor<T>, 3> img;
    img[0] = image;
    img[1] = down2_mean(img[0]);
    img[2] = down2_mean(img[1]);

    std::array<Tensor<T>, 3> enc_s, enc_c;
    Tensor<T> ys, yc;
    if (cfg_.spatial_branch) {
      enc_s = encode(spatial_, img, ev);
      ys = ms_spatial_.forward(enc_s[0], enc_s[1], enc_s[2], ev);
    }
    if (cfg_.channel_branch) {
      enc_c = encode(channel_, img, ev);
      yc = ms_channel_.forward(enc_c[0], enc_c[1], enc_c[2], ev);
    }

    std::array<Tensor<T>, 3> skip_s = enc_s, skip_c = enc_c;
    if (cfg_.mutual_promotion) {
      Tensor<T> f = ys.defined() && yc.defined() ? add(ys, yc) : (ys.defined() ? ys : yc);
      for (int i = 0; i < 3; ++i) {
        auto z = promo_[i].forward(f);
        if (cfg_.spatial_branch) skip_s[i] = add(z, enc_s[i]);
        if (cfg_.channel_branch) skip_c[i] = add(z, enc_c[i]);
      }
    }

    MultiScaleOutput<T> out;
    const T base_w = T(1) / static_cast<T>(cfg_.active_branches());
    for (int i = 0; i < 3; ++i) {
      if (!cfg_.spatial_branch)
        out.s[i] = Tensor<T>::zeros({s[0], 3, img[i].shape()[2], img[i].shape()[3]});
      if (!cfg_.channel_branch)
        out.c[i] = Tensor<T>::zeros({s[0], 3, img[i].shape()[2], img[i].shape()[3]});
    }
    if (cfg_.spatial_branch) decode(spatial_, skip_s, img, base_w, ev, out.s);
    if (cfg_.channel_branch) decode(channel_, skip_c, img, base_w, ev, out.c);
    for (int i = 0; i < 3; ++i) out.fused[i] = add(out.s[i], out.c[i]);
    return out;
  }

 private:
  template <class Branch, class InitBlock>
  void build_branch(ParamRegistry<T>& reg, const std::string& name, Branch& br, Rng& rng,
                    InitBlock init_block) {
    for (int i = 0; i < 3; ++i) {
      const int64_t w = cfg_.width(i);
      br.embed[i].init(reg, name + ".embed" + std::to_string(i), 3, w, 3, rng, 1, 1);
      br.enc[i].resize(static_cast<size_t>(cfg_.blocks_per_scale));
      br.dec[i].resize(static_cast<size_t>(cfg_.blocks_per_scale));
      for (int64_t k = 0; k < cfg_.blocks_per_scale; ++k) {
        init_block(br.enc[i][static_cast<size_t>(k)],
                   name + ".enc" + std::to_string(i) + ".block" + std::to_string(k), w);
        init_block(br.dec[i][static_cast<size_t>(k)],
                   name + ".dec" + std::to_string(i) + ".block" + std::to_string(k), w);
      }
      br.head[i].init(reg, name + ".head" + std::to_string(i), w, 3, 1, rng, 1, 0, 1, true);
    }
    for (int i = 0; i < 2; ++i) {
      br.down_tr[i].init(reg, name + ".down" + std::to_string(i), cfg_.width(i), cfg_.width(i + 1),
                         1, rng);
      br.up_tr[i].init(reg, name + ".up" + std::to_string(i), cfg_.width(i + 1), cfg_.width(i), 1,
                       rng);
    }
  }

  template <class Branch>
  std::array<Tensor<T>, 3> encode(const Branch& br, const std::array<Tensor<T>, 3>& img,
                                  ScanEvaluator ev) const {
    std::array<Tensor<T>, 3> e;
    Tensor<T> carry;
    for (int i = 0; i < 3; ++i) {
      auto x = br.embed[i].forward(img[i]);
      Tensor<T> y = run_stage(br.enc[i], x, carry, ev);
      e[i] = y;
      if (i < 2) carry = br.down_tr[i].forward(down2_mean(y));
    }
    return e;
  }

  template <class Branch>
  void decode(const Branch& br, const std::array<Tensor<T>, 3>& skips,
              const std::array<Tensor<T>, 3>& img, T base_w, ScanEvaluator ev,
              std::array<Tensor<T>, 3>& heads_out) const {
    Tensor<T> carry;  // bottleneck enters the decoder through the promoted skip
    for (int i = 2; i >= 0; --i) {
      Tensor<T> y = run_stage(br.dec[i], skips[i], carry, ev);
      heads_out[i] = add(scale(img[i], base_w), br.head[i].forward(y));
      if (i > 0) carry = br.up_tr[i - 1].forward(up2_nearest(y));
    }
  }

  template <class BlockT>
  static Tensor<T> run_stage(const std::vector<BlockT>& blocks, const Tensor<T>& x_n,
                             const Tensor<T>& y_prev, ScanEvaluator ev) {
    Tensor<T> y = blocks[0].forward(x_n, y_prev, ev);
    for (size_t k = 1; k < blocks.size(); ++k) y = blocks[k].forward(y, Tensor<T>{}, ev);
    return y;
  }

  NetConfig cfg_;
  SBranch spatial_;
  CBranch channel_;
  MultiScaleMoe<T, SpatialSsm<T>> ms_spatial_;
  MultiScaleMoe<T, ChannelSsm<T>> ms_channel_;
  ConvMoe<T> promo_[3];
};

}  // namespace uwm
