#pragma once

#include "uwm/ops.hpp"
#include "uwm/param.hpp"

namespace uwm {

template <class T>
struct Linear {
  std::shared_ptr<Parameter<T>> w;  // (d_in, d_out)
  std::shared_ptr<Parameter<T>> b;  // (d_out), absent when bias=false

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t d_in, int64_t d_out,
            Rng& rng, bool bias = true, bool zero = false) {
    auto wv = zero ? std::vector<T>(static_cast<size_t>(d_in * d_out), T(0))
                   : uniform_init<T>(rng, d_in * d_out, d_in);
    w = reg.add(prefix + ".w", {d_in, d_out}, std::move(wv));
    if (bias) b = reg.add(prefix + ".b", {d_out}, std::vector<T>(static_cast<size_t>(d_out), T(0)));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear(x, w->value, b ? b->value : Tensor<T>{});
  }
};

template <class T>
struct Conv2d {
  std::shared_ptr<Parameter<T>> w;  // (c_out, c_in/groups, k, k)
  std::shared_ptr<Parameter<T>> b;  // (c_out)
  int64_t stride = 1, pad = 0, groups = 1;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t c_in, int64_t c_out,
            int64_t k, Rng& rng, int64_t stride_ = 1, int64_t pad_ = 0, int64_t groups_ = 1,
            bool zero = false) {
    stride = stride_;
    pad = pad_;
    groups = groups_;
    const int64_t cink = c_in / groups_;
    const int64_t fan_in = cink * k * k;
    auto wv = zero ? std::vector<T>(static_cast<size_t>(c_out * cink * k * k), T(0))
                   : uniform_init<T>(rng, c_out * cink * k * k, fan_in);
    w = reg.add(prefix + ".w", {c_out, cink, k, k}, std::move(wv));
    b = reg.add(prefix + ".b", {c_out}, std::vector<T>(static_cast<size_t>(c_out), T(0)));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, w->value, b->value, stride, pad, groups);
  }
};

template <class T>
struct LayerNorm {
  std::shared_ptr<Parameter<T>> gamma, beta;
  T eps = T(1e-5);

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t d) {
    gamma = reg.add(prefix + ".gamma", {d}, std::vector<T>(static_cast<size_t>(d), T(1)));
    beta = reg.add(prefix + ".beta", {d}, std::vector<T>(static_cast<size_t>(d), T(0)));
  }

  // over the last axis
  Tensor<T> forward(const Tensor<T>& x) const {
    return layer_norm_last(x, gamma->value, beta->value, eps);
  }

  // per spatial position over the channel extent of an NCHW tensor
  Tensor<T> forward_channels(const Tensor<T>& x) const {
    const Shape& s = x.shape();
    if (s.size() != 4) shape_fail("layer_norm_channels", "expects NCHW, got " + shape_str(s));
    auto seq = flatten_2d(x, ScanOrder::RowForward);
    return unflatten_2d(forward(seq), ScanOrder::RowForward, s[2], s[3]);
  }
};

}  // namespace uwm
