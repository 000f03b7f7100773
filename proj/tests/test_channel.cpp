#include <doctest.h>

#include <cmath>

#include "uwm/channel.hpp"
#include "uwm/gradcheck.hpp"

using namespace uwm;

using T64 = Tensor<double>;

namespace {

T64 rand_leaf(Rng& rng, const Shape& s, double lo, double hi, bool grad = false) {
  std::vector<double> v((size_t)numel(s));
  for (auto& e : v) e = rng.uniform(lo, hi);
  return T64::leaf(s, std::move(v), grad);
}

double max_abs_diff(const T64& a, const T64& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[(size_t)i] - b.data()[(size_t)i]));
  return m;
}

}  // namespace

TEST_CASE("c_ssm shape contract at (2,16,8,8)") {
  ParamRegistry<double> reg;
  Rng rng(3);
  ChannelSsm<double> m;
  m.init(reg, "m", 16, 4, rng);
  auto x = rand_leaf(rng, {2, 16, 8, 8}, -1, 1);
  auto y = m.forward(x, ScanEvaluator::Sequential);
  CHECK(y.shape() == Shape{2, 16, 8, 8});
  CHECK_THROWS_AS(m.forward(T64::zeros({1, 8, 4, 4}), ScanEvaluator::Sequential), ShapeError);
}

TEST_CASE("attention is bounded: |out| <= |in| elementwise") {
  ParamRegistry<double> reg;
  Rng rng(5);
  ChannelSsm<double> m;
  m.init(reg, "m", 6, 3, rng);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = rand_leaf(rng, {2, 6, 4, 4}, -3, 3);
    auto y = m.forward(x, ScanEvaluator::Sequential);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(std::abs(y.data()[(size_t)i]) <= std::abs(x.data()[(size_t)i]));
  }
}

TEST_CASE("attention values lie strictly inside (0,1)") {
  ParamRegistry<double> reg;
  Rng rng(7);
  ChannelSsm<double> m;
  m.init(reg, "m", 4, 3, rng);
  for (int trial = 0; trial < 1000; ++trial) {
    auto x = rand_leaf(rng, {1, 4, 2, 2}, -5, 5);
    auto logits = m.attention_logits(x, ScanEvaluator::Sequential);
    auto a = sigmoid_t(logits);
    for (int64_t i = 0; i < a.numel(); ++i) {
      CHECK(a.data()[(size_t)i] > 0.0);
      CHECK(a.data()[(size_t)i] < 1.0);
    }
  }
}

TEST_CASE("forced unit attention reproduces the input within 1e-9") {
  ParamRegistry<double> reg;
  Rng rng(11);
  ChannelSsm<double> m;
  m.init(reg, "m", 5, 3, rng);
  auto x = rand_leaf(rng, {2, 5, 4, 4}, -2, 2);
  // sigmoid(30) differs from 1 by ~9e-14; scaled by |x| <= 2 stays below 1e-9
  auto big = T64::full({2, 5, 1, 1}, 30.0);
  auto y = ChannelSsm<double>::apply_attention(x, big);
  CHECK(max_abs_diff(y, x) <= 1e-9);
}

TEST_CASE("spatial uniformity: out(b,c,.,.) / x(b,c,.,.) is constant over H,W") {
  ParamRegistry<double> reg;
  Rng rng(13);
  ChannelSsm<double> m;
  m.init(reg, "m", 3, 2, rng);
  auto x = rand_leaf(rng, {1, 3, 4, 4}, 0.5, 2.0);
  auto y = m.forward(x, ScanEvaluator::Sequential);
  for (int64_t c = 0; c < 3; ++c) {
    const double r0 = y.data()[(size_t)(c * 16)] / x.data()[(size_t)(c * 16)];
    for (int64_t i = 1; i < 16; ++i) {
      const double r = y.data()[(size_t)(c * 16 + i)] / x.data()[(size_t)(c * 16 + i)];
      CHECK(std::abs(r - r0) <= 1e-7);
    }
  }
}

TEST_CASE("attention depends on the input only through per-channel means") {
  ParamRegistry<double> reg;
  Rng rng(17);
  ChannelSsm<double> m;
  m.init(reg, "m", 4, 3, rng);
  // Exactly representable values keep the two pooled means bit-equal:
  // channel mean of {1.0, 3.0, 5.0, 7.0} and of {4.0, 4.0, 4.0, 4.0} is 4.0.
  std::vector<double> v1, v2;
  const double groups[4][4] = {{1, 3, 5, 7}, {2, 2, 6, 6}, {0, 8, 0, 8}, {4, 4, 4, 4}};
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 4; ++i) {
      v1.push_back(groups[c][i]);
      v2.push_back(4.0);
    }
  auto x1 = T64::leaf({1, 4, 2, 2}, v1);
  auto x2 = T64::leaf({1, 4, 2, 2}, v2);
  auto a1 = sigmoid_t(m.attention_logits(x1, ScanEvaluator::Sequential));
  auto a2 = sigmoid_t(m.attention_logits(x2, ScanEvaluator::Sequential));
  CHECK(max_abs_diff(a1, a2) <= 1e-9);
}

TEST_CASE("channel order matters: a permutation changes the output") {
  ParamRegistry<double> reg;
  Rng rng(19);
  ChannelSsm<double> m;
  m.init(reg, "m", 4, 3, rng);
  std::vector<double> v;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 4; ++i) v.push_back((double)(c + 1));
  auto x = T64::leaf({1, 4, 2, 2}, v);
  // swap channels 0 and 3
  std::vector<double> vp = v;
  for (int i = 0; i < 4; ++i) std::swap(vp[(size_t)i], vp[(size_t)(3 * 4 + i)]);
  auto xp = T64::leaf({1, 4, 2, 2}, vp);
  auto a = sigmoid_t(m.attention_logits(x, ScanEvaluator::Sequential));
  auto ap = sigmoid_t(m.attention_logits(xp, ScanEvaluator::Sequential));
  // attention for the untouched middle channels must still differ somewhere
  double diff = 0.0;
  for (int64_t i = 0; i < 4; ++i)
    diff = std::max(diff, std::abs(a.data()[(size_t)i] - ap.data()[(size_t)i]));
  CHECK(diff > 1e-9);
}

TEST_CASE("cm_block surgery: zeroed attention path halves the scan branch") {
  // Zeroing the projections and skips of both directional scans makes the
  // pre-sigmoid logits identically zero, so a = 0.5 everywhere and
  // X_mid = 0.5 * LN(X_in) + X_in. Check against that hand-built graph with
  // the feed-forward stage also silenced.
  ParamRegistry<double> reg;
  Rng rng(23);
  ChannelBlock<double> blk;
  blk.init(reg, "b", 4, 3, 2, rng);
  for (const char* dir : {"fwd", "bwd"}) {
    reg.fill_prefix("b.ssm." + std::string(dir) + ".b_proj", 0.0);
    reg.fill_prefix("b.ssm." + std::string(dir) + ".c_proj", 0.0);
    reg.fill_prefix("b.ssm." + std::string(dir) + ".d_skip", 0.0);
  }
  reg.fill_prefix("b.ff.expert0", 0.0);
  reg.fill_prefix("b.ff.expert1", 0.0);
  auto x_n = rand_leaf(rng, {1, 4, 4, 4}, -1, 1);
  auto y = blk.forward(x_n, Tensor<double>{}, ScanEvaluator::Sequential);
  auto ln = blk.norm1.forward_channels(x_n);
  auto x_mid = add(scale(ln, 0.5), x_n);
  CHECK(max_abs_diff(y, x_mid) <= 1e-13);
}

TEST_CASE("cm_block residual floor: X_mid survives any ff_moe perturbation") {
  ParamRegistry<double> reg;
  Rng rng(29);
  ChannelBlock<double> blk;
  blk.init(reg, "b", 3, 2, 2, rng);
  auto x_n = rand_leaf(rng, {1, 3, 4, 4}, -1, 1);
  auto x_in = x_n;
  auto x_mid = add(blk.ssm.forward(blk.norm1.forward_channels(x_in), ScanEvaluator::Sequential),
                   x_in);
  auto y1 = blk.forward(x_n, Tensor<double>{}, ScanEvaluator::Sequential);
  auto ff1 = sub(y1, x_mid);
  // perturb the feed-forward weights; the difference Y - X_mid moves with
  // them while X_mid itself is untouched
  for (auto& p : reg.items())
    if (p->name.rfind("b.ff.expert", 0) == 0)
      for (auto& e : p->value.mut_data()) e += 0.25;
  auto y2 = blk.forward(x_n, Tensor<double>{}, ScanEvaluator::Sequential);
  auto x_mid2 = add(blk.ssm.forward(blk.norm1.forward_channels(x_in), ScanEvaluator::Sequential),
                    x_in);
  CHECK(max_abs_diff(x_mid, x_mid2) == 0.0);
  auto ff2 = sub(y2, x_mid2);
  CHECK(max_abs_diff(ff1, ff2) > 1e-6);
}

TEST_CASE("cm_block rejects mismatched shapes") {
  ParamRegistry<double> reg;
  Rng rng(31);
  ChannelBlock<double> blk;
  blk.init(reg, "b", 2, 2, 1, rng);
  CHECK_THROWS_AS(
      blk.forward(T64::zeros({1, 2, 4, 4}), T64::zeros({1, 2, 2, 4}), ScanEvaluator::Sequential),
      ShapeError);
}

TEST_CASE("C=1 degenerates to a length-1 channel scan") {
  ParamRegistry<double> reg;
  Rng rng(37);
  ChannelSsm<double> m;
  m.init(reg, "m", 1, 2, rng);
  auto x = rand_leaf(rng, {2, 1, 3, 3}, -1, 1);
  auto y = m.forward(x, ScanEvaluator::Sequential);
  CHECK(y.shape() == x.shape());
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::isfinite(y.data()[(size_t)i]));
}

TEST_CASE("cm_block gradient at (1,4,4,4)") {
  ParamRegistry<double> reg;
  Rng rng(41);
  ChannelBlock<double> blk;
  blk.init(reg, "m", 4, 2, 2, rng);
  std::vector<T64> inputs{rand_leaf(rng, {1, 4, 4, 4}, -1, 1, true)};
  for (auto& p : reg.items()) inputs.push_back(p->value);
  auto rep = grad_check(
      [&blk](const std::vector<T64>& in) {
        Rng r(17);
        auto y = blk.forward(in[0], Tensor<double>{}, ScanEvaluator::Sequential);
        std::vector<double> v((size_t)y.numel());
        for (auto& e : v) e = r.uniform(-1e-4, 1e-4);
        return sum_all(mul(y, T64::leaf(y.shape(), std::move(v))));
      },
      inputs);
  CHECK(rep.max_rel_err <= 1e-5);
}
