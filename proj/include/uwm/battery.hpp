#pragma once

#include "uwm/channel.hpp"
#include "uwm/gradcheck.hpp"
#include "uwm/net.hpp"
#include "uwm/spatial.hpp"

namespace uwm {

// Fixed finite-difference battery: every differentiable primitive, the scan
// modules, the block compositions, and a tiny end-to-end net. All f64.

struct BatteryItem {
  std::string name;
  double tol = 0.0;
  double err = 0.0;
  std::string worst;
  bool pass() const { return err <= tol; }
};

namespace detail {

inline Tensor<double> rand_leaf(Rng& rng, const Shape& s, double lo, double hi,
                                bool grad = true) {
  std::vector<double> v((size_t)numel(s));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return Tensor<double>::leaf(s, std::move(v), grad);
}

// Scalar readout with fixed pseudo-random coefficients so every output
// element influences the objective. `scale` keeps the objective small where
// central-difference cancellation noise would otherwise exceed the 1e-8
// relative-error floor on near-zero gradient elements.
inline Tensor<double> weighted_sum(const Tensor<double>& y, uint64_t salt = 17,
                                   double scale = 1.0) {
  Rng rng(salt);
  return sum_all(mul(y, rand_leaf(rng, y.shape(), -scale, scale, false)));
}

struct BatteryBuilder {
  std::vector<BatteryItem> items;

  void run(const std::string& name, double tol, const GradFn& fn,
           std::vector<Tensor<double>> inputs,
           const std::vector<std::vector<int64_t>>* subset = nullptr) {
    BatteryItem it{name, tol, 0.0, ""};
    auto rep = grad_check(fn, std::move(inputs), 1e-5, subset);
    it.err = rep.max_rel_err;
    it.worst = rep.worst;
    items.push_back(std::move(it));
  }
};

}  // namespace detail

inline std::vector<BatteryItem> run_grad_battery(uint64_t seed = 7) {
  using detail::rand_leaf;
  using detail::weighted_sum;
  constexpr double kPrimTol = 1e-6;
  constexpr double kBlockTol = 1e-5;
  constexpr double kNetTol = 1e-4;
  Rng rng(seed);
  detail::BatteryBuilder bb;

  bb.run("add", kPrimTol,
         [](const auto& in) { return weighted_sum(add(in[0], in[1])); },
         {rand_leaf(rng, {2, 3}, -1, 1), rand_leaf(rng, {2, 3}, -1, 1)});
  bb.run("add_broadcast", kPrimTol,
         [](const auto& in) { return weighted_sum(add(in[0], in[1])); },
         {rand_leaf(rng, {2, 3, 4}, -1, 1), rand_leaf(rng, {1, 1, 4}, -1, 1)});
  bb.run("sub", kPrimTol,
         [](const auto& in) { return weighted_sum(sub(in[0], in[1])); },
         {rand_leaf(rng, {2, 3}, -1, 1), rand_leaf(rng, {2, 3}, -1, 1)});
  bb.run("mul", kPrimTol,
         [](const auto& in) { return weighted_sum(mul(in[0], in[1])); },
         {rand_leaf(rng, {2, 3}, -1, 1), rand_leaf(rng, {2, 3}, -1, 1)});
  bb.run("mul_broadcast", kPrimTol,
         [](const auto& in) { return weighted_sum(mul(in[0], in[1])); },
         {rand_leaf(rng, {2, 3, 4}, -1, 1), rand_leaf(rng, {2, 1, 4}, -1, 1)});
  bb.run("scale_neg", kPrimTol,
         [](const auto& in) { return weighted_sum(neg(scale(in[0], 1.7))); },
         {rand_leaf(rng, {2, 3}, -1, 1)});
  bb.run("exp", kPrimTol, [](const auto& in) { return weighted_sum(exp_t(in[0])); },
         {rand_leaf(rng, {2, 3}, -1, 1)});
  bb.run("silu", kPrimTol, [](const auto& in) { return weighted_sum(silu(in[0])); },
         {rand_leaf(rng, {2, 3}, -3, 3)});
  bb.run("sigmoid", kPrimTol, [](const auto& in) { return weighted_sum(sigmoid_t(in[0])); },
         {rand_leaf(rng, {2, 3}, -3, 3)});
  bb.run("softplus", kPrimTol, [](const auto& in) { return weighted_sum(softplus_t(in[0])); },
         {rand_leaf(rng, {2, 3}, -5, 5)});
  bb.run("phi_expm1", kPrimTol, [](const auto& in) { return weighted_sum(phi_expm1(in[0])); },
         {rand_leaf(rng, {2, 4}, -2, 2)});
  bb.run("reduce_mean", kPrimTol,
         [](const auto& in) { return weighted_sum(reduce_mean_keep(in[0], {0, 2})); },
         {rand_leaf(rng, {2, 3, 4}, -1, 1)});
  bb.run("global_avg_pool", kPrimTol,
         [](const auto& in) { return weighted_sum(global_avg_pool(in[0])); },
         {rand_leaf(rng, {2, 3, 4, 4}, -1, 1)});
  bb.run("reshape", kPrimTol,
         [](const auto& in) { return weighted_sum(reshape(in[0], {3, 8})); },
         {rand_leaf(rng, {2, 3, 4}, -1, 1)});
  bb.run("slice_concat", kPrimTol,
         [](const auto& in) {
           auto a = slice_axis(in[0], 1, 0, 2);
           auto b = slice_axis(in[0], 1, 1, 3);
           return weighted_sum(concat_ch(std::vector<Tensor<double>>{b, a}));
         },
         {rand_leaf(rng, {2, 4, 3, 3}, -1, 1)});
  bb.run("reverse_seq", kPrimTol,
         [](const auto& in) { return weighted_sum(reverse_seq(in[0])); },
         {rand_leaf(rng, {2, 5, 3}, -1, 1)});
  bb.run("linear", kPrimTol,
         [](const auto& in) { return weighted_sum(linear(in[0], in[1], in[2])); },
         {rand_leaf(rng, {2, 5, 3}, -1, 1), rand_leaf(rng, {3, 4}, -1, 1),
          rand_leaf(rng, {4}, -1, 1)});
  bb.run("conv2d_k1", kPrimTol,
         [](const auto& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 1, 0)); },
         {rand_leaf(rng, {2, 3, 5, 5}, -1, 1), rand_leaf(rng, {4, 3, 1, 1}, -1, 1),
          rand_leaf(rng, {4}, -1, 1)});
  bb.run("conv2d_k3", kPrimTol,
         [](const auto& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 1, 1)); },
         {rand_leaf(rng, {2, 3, 6, 6}, -1, 1), rand_leaf(rng, {4, 3, 3, 3}, -1, 1),
          rand_leaf(rng, {4}, -1, 1)});
  bb.run("conv2d_k3_stride2", kPrimTol,
         [](const auto& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 2, 1)); },
         {rand_leaf(rng, {1, 3, 7, 7}, -1, 1), rand_leaf(rng, {4, 3, 3, 3}, -1, 1),
          rand_leaf(rng, {4}, -1, 1)});
  bb.run("conv2d_depthwise", kPrimTol,
         [](const auto& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 1, 1, 4)); },
         {rand_leaf(rng, {1, 4, 5, 5}, -1, 1), rand_leaf(rng, {4, 1, 3, 3}, -1, 1),
          rand_leaf(rng, {4}, -1, 1)});
  bb.run("layer_norm", kPrimTol,
         [](const auto& in) { return weighted_sum(layer_norm_last(in[0], in[1], in[2], 1e-5)); },
         {rand_leaf(rng, {2, 3, 5}, -1, 1), rand_leaf(rng, {5}, 0.5, 1.5),
          rand_leaf(rng, {5}, -0.5, 0.5)});
  bb.run("softmax", kPrimTol,
         [](const auto& in) { return weighted_sum(softmax_last(in[0])); },
         {rand_leaf(rng, {2, 5}, -2, 2)});
  bb.run("down2_mean", kPrimTol,
         [](const auto& in) { return weighted_sum(down2_mean(in[0])); },
         {rand_leaf(rng, {1, 2, 4, 4}, -1, 1)});
  bb.run("up2_nearest", kPrimTol,
         [](const auto& in) { return weighted_sum(up2_nearest(in[0])); },
         {rand_leaf(rng, {1, 2, 3, 3}, -1, 1)});
  bb.run("flatten_2d", kPrimTol,
         [](const auto& in) {
           Tensor<double> acc;
           for (ScanOrder o : {ScanOrder::RowForward, ScanOrder::RowBackward,
                               ScanOrder::ColForward, ScanOrder::ColBackward}) {
             auto t = weighted_sum(flatten_2d(in[0], o));
             acc = acc.defined() ? add(acc, t) : t;
           }
           return acc;
         },
         {rand_leaf(rng, {1, 2, 3, 4}, -1, 1)});
  {
    auto target = rand_leaf(rng, {2, 3, 2, 2}, 2.0, 3.0, false);
    bb.run("l1_loss", kPrimTol,
           [target](const auto& in) { return l1_loss(in[0], target); },
           {rand_leaf(rng, {2, 3, 2, 2}, -1, 1)});
  }
  bb.run("discretize", kPrimTol,
         [](const auto& in) {
           auto d = discretize(in[0], in[1], in[2]);
           return add(weighted_sum(d.a_bar, 3), weighted_sum(d.b_bar, 5));
         },
         {rand_leaf(rng, {3}, -2.0, -0.2), rand_leaf(rng, {1, 4, 3}, -1, 1),
          rand_leaf(rng, {1, 4, 2}, 0.1, 0.9)});
  bb.run("selective_scan", kPrimTol,
         [](const auto& in) {
           return weighted_sum(scan_run(in[0], in[1], in[2], in[3], in[4],
                                        ScanEvaluator::Sequential));
         },
         {rand_leaf(rng, {1, 5, 2, 3}, 0.1, 0.95), rand_leaf(rng, {1, 5, 2, 3}, -1, 1),
          rand_leaf(rng, {1, 5, 3}, -1, 1), rand_leaf(rng, {2}, 0.5, 1.5),
          rand_leaf(rng, {1, 5, 2}, -1, 1)});

  auto reg_inputs = [](ParamRegistry<double>& reg, const Tensor<double>& x) {
    std::vector<Tensor<double>> in{x};
    for (auto& p : reg.items()) in.push_back(p->value);
    return in;
  };

  {
    auto reg = std::make_shared<ParamRegistry<double>>();
    auto p = std::make_shared<SsmParams<double>>();
    p->init(*reg, "m", 2, 2, rng);
    bb.run("ssm_layer", kBlockTol,
           [p](const auto& in) { return weighted_sum(ssm_layer(in[0], *p, ScanEvaluator::Sequential), 17, 1e-4); },
           reg_inputs(*reg, rand_leaf(rng, {1, 4, 2}, -1, 1)));
  }
  {
    auto reg = std::make_shared<ParamRegistry<double>>();
    auto m = std::make_shared<SpatialSsm<double>>();
    m->init(*reg, "m", 2, 2.0, 2, rng);
    bb.run("s_ssm", kBlockTol,
           [m](const auto& in) { return weighted_sum(m->forward(in[0], ScanEvaluator::Sequential), 17, 1e-4); },
           reg_inputs(*reg, rand_leaf(rng, {1, 2, 4, 4}, -1, 1)));
  }
  {
    auto reg = std::make_shared<ParamRegistry<double>>();
    auto m = std::make_shared<ChannelSsm<double>>();
    m->init(*reg, "m", 3, 2, rng);
    bb.run("c_ssm", kBlockTol,
           [m](const auto& in) { return weighted_sum(m->forward(in[0], ScanEvaluator::Sequential), 17, 1e-4); },
           reg_inputs(*reg, rand_leaf(rng, {1, 3, 4, 4}, -1, 1)));
  }
  {
    auto reg = std::make_shared<ParamRegistry<double>>();
    auto m = std::make_shared<FeedForwardMoe<double>>();
    m->init(*reg, "m", 2, 2, rng);
    bb.run("ff_moe", kBlockTol,
           [m](const auto& in) { return weighted_sum(m->forward(in[0]), 17, 1e-4); },
           reg_inputs(*reg, rand_leaf(rng, {1, 2, 3, 3}, -1, 1)));
  }
  {
    auto reg = std::make_shared<ParamRegistry<double>>();
    auto m = std::make_shared<SpatialBlock<double>>();
    m->init(*reg, "m", 2, 2.0, 2, 2, rng);
    bb.run("sm_block", kBlockTol,
           [m](const auto& in) {
             return weighted_sum(m->forward(in[0], Tensor<double>(), ScanEvaluator::Sequential), 17, 1e-4);
           },
           reg_inputs(*reg, rand_leaf(rng, {1, 2, 4, 4}, -1, 1)));
  }
  {
    auto reg = std::make_shared<ParamRegistry<double>>();
    auto m = std::make_shared<ChannelBlock<double>>();
    m->init(*reg, "m", 2, 2, 2, rng);
    bb.run("cm_block", kBlockTol,
           [m](const auto& in) {
             return weighted_sum(m->forward(in[0], Tensor<double>(), ScanEvaluator::Sequential), 17, 1e-4);
           },
           reg_inputs(*reg, rand_leaf(rng, {1, 2, 4, 4}, -1, 1)));
  }
  {
    NetConfig cfg;
    cfg.base_channels = 4;
    cfg.blocks_per_scale = 1;
    cfg.d_state = 2;
    cfg.n_experts = 2;
    auto reg = std::make_shared<ParamRegistry<double>>();
    Rng nrng(seed + 1);
    auto net = std::make_shared<DualBranchNet<double>>(*reg, cfg, nrng);
    auto img = rand_leaf(rng, {1, 3, 8, 8}, 0.0, 1.0);
    auto inputs = reg_inputs(*reg, img);
    // image probed densely, parameters at a fixed three-element subset
    std::vector<std::vector<int64_t>> subset(inputs.size());
    for (int64_t i = 0; i < img.numel(); ++i) subset[0].push_back(i);
    for (size_t k = 1; k < inputs.size(); ++k) {
      int64_t n = inputs[k].numel();
      subset[k] = {0, n / 2, n - 1};
    }
    bb.run("net_8x8", kNetTol,
           [net](const auto& in) {
             auto out = net->forward(in[0]);
             auto s = add(weighted_sum(out.fused[0], 3, 1e-4),
                          add(weighted_sum(out.fused[1], 5, 1e-4), weighted_sum(out.fused[2], 7, 1e-4)));
             return s;
           },
           inputs, &subset);
  }
  return bb.items;
}

}  // namespace uwm
