#include <doctest.h>

#include <cmath>
#include <set>

#include "uwm/net.hpp"

using namespace uwm;

using T64 = Tensor<double>;

namespace {

NetConfig tiny_cfg() {
  NetConfig cfg;
  cfg.base_channels = 8;
  cfg.blocks_per_scale = 1;
  cfg.expansion = 2.0;
  cfg.d_state = 4;
  cfg.n_experts = 2;
  return cfg;
}

T64 rand_image(Rng& rng, int64_t b, int64_t h, int64_t w) {
  std::vector<double> v((size_t)(b * 3 * h * w));
  for (auto& e : v) e = rng.uniform01();
  return T64::leaf({b, 3, h, w}, std::move(v));
}

double max_abs_diff(const T64& a, const T64& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[(size_t)i] - b.data()[(size_t)i]));
  return m;
}

bool bit_equal(const T64& a, const T64& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[(size_t)i] != b.data()[(size_t)i]) return false;
  return true;
}

}  // namespace

TEST_CASE("same seed builds bit-identical parameters") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> r1, r2;
  Rng g1(42), g2(42);
  DualBranchNet<double> n1(r1, cfg, g1);
  DualBranchNet<double> n2(r2, cfg, g2);
  REQUIRE(r1.items().size() == r2.items().size());
  for (size_t i = 0; i < r1.items().size(); ++i) {
    const auto& p1 = *r1.items()[i];
    const auto& p2 = *r2.items()[i];
    CHECK(p1.name == p2.name);
    REQUIRE(p1.value.shape() == p2.value.shape());
    for (int64_t j = 0; j < p1.value.numel(); ++j)
      CHECK(p1.value.data()[(size_t)j] == p2.value.data()[(size_t)j]);
  }
}

TEST_CASE("registry names are unique and hierarchical") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> reg;
  Rng rng(7);
  DualBranchNet<double> net(reg, cfg, rng);
  std::set<std::string> names;
  for (const auto& p : reg.items()) names.insert(p->name);
  CHECK(names.size() == reg.items().size());
  CHECK(reg.find("spatial.embed0.w") != nullptr);
  CHECK(reg.find("channel.dec2.block0.ssm.proj.w") != nullptr);
  CHECK(reg.find("promo.scale1.gate.proj.w") != nullptr);
}

TEST_CASE("parameter count matches the shape-walking oracle") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> reg;
  Rng rng(11);
  DualBranchNet<double> net(reg, cfg, rng);

  // independent walk over the architecture, summing element counts
  const int64_t W[3] = {8, 16, 32};
  const int64_t E = 2, N = 4, common = 8, cat = 3 * common;
  auto conv = [](int64_t ci, int64_t co, int64_t k, int64_t g = 1) {
    return co * (ci / g) * k * k + co;
  };
  auto lin = [](int64_t di, int64_t dout) { return di * dout + dout; };
  auto ln = [](int64_t d) { return 2 * d; };
  auto ssmp = [](int64_t d, int64_t n) { return n + 2 * d * n + 4 * d; };
  auto ff_moe = [&](int64_t c) {
    return lin(c, E) + E * (conv(c, 2 * c, 1) + conv(2 * c, c, 1));
  };
  auto s_ssm = [&](int64_t c) {
    const int64_t e = std::max<int64_t>(c, (int64_t)(2.0 * (double)c));
    return conv(c, e, 1) + conv(e, e, 3, e) + 4 * ssmp(e, N) + ln(e) + conv(c, e, 1) +
           conv(e, c, 1);
  };
  auto c_ssm = [&](int64_t c) { return conv(c, c, 1) + 2 * ssmp(1, N); };
  auto s_block = [&](int64_t c) { return 2 * ln(c) + s_ssm(c) + ff_moe(c); };
  auto c_block = [&](int64_t c) { return 2 * ln(c) + c_ssm(c) + ff_moe(c); };
  auto conv_moe = [&](int64_t ci, int64_t co) {
    return lin(ci, E) + E * (conv(ci, co, 1) + conv(co, co, 3));
  };
  auto branch = [&](auto block) {
    int64_t n = 0;
    for (int i = 0; i < 3; ++i)
      n += conv(3, W[i], 3) + 2 * block(W[i]) + conv(W[i], 3, 1);
    for (int i = 0; i < 2; ++i) n += conv(W[i], W[i + 1], 1) + conv(W[i + 1], W[i], 1);
    return n;
  };
  auto ms = [&](auto expert) {
    int64_t n = lin(cat, E);
    for (int i = 0; i < 3; ++i) n += conv(W[i], common, 1);
    return n + E * expert(cat);
  };
  const int64_t expect = branch(s_block) + ms(s_ssm) + branch(c_block) + ms(c_ssm) +
                         conv_moe(cat, W[0]) + conv_moe(cat, W[1]) + conv_moe(cat, W[2]);
  CHECK(reg.total_elements() == expect);
}

TEST_CASE("scale widths and input pyramid arithmetic") {
  auto cfg = tiny_cfg();
  CHECK(cfg.width(0) == 8);
  CHECK(cfg.width(1) == 16);
  CHECK(cfg.width(2) == 32);
  Rng rng(3);
  auto img = rand_image(rng, 1, 64, 64);
  auto half = down2_mean(img);
  auto quarter = down2_mean(half);
  CHECK(half.shape() == Shape{1, 3, 32, 32});
  CHECK(quarter.shape() == Shape{1, 3, 16, 16});
  auto c = T64::full({1, 3, 8, 8}, 0.37);
  auto cd = down2_mean(down2_mean(c));
  for (int64_t i = 0; i < cd.numel(); ++i) CHECK(cd.data()[(size_t)i] == doctest::Approx(0.37).epsilon(1e-15));
}

TEST_CASE("forward emits 3-channel maps at full, half and quarter scale") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> reg;
  Rng rng(13);
  DualBranchNet<double> net(reg, cfg, rng);
  auto img = rand_image(rng, 2, 64, 64);
  auto out = net.forward(img);
  CHECK(out.fused[0].shape() == Shape{2, 3, 64, 64});
  CHECK(out.fused[1].shape() == Shape{2, 3, 32, 32});
  CHECK(out.fused[2].shape() == Shape{2, 3, 16, 16});
  for (int i = 0; i < 3; ++i) {
    CHECK(out.s[i].shape() == out.fused[i].shape());
    CHECK(out.c[i].shape() == out.fused[i].shape());
    for (int64_t j = 0; j < out.fused[i].numel(); ++j)
      CHECK(std::isfinite(out.fused[i].data()[(size_t)j]));
  }
}

TEST_CASE("forward rejects bad extents and channel counts") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> reg;
  Rng rng(17);
  DualBranchNet<double> net(reg, cfg, rng);
  CHECK_THROWS_AS(net.forward(T64::zeros({1, 3, 10, 8})), ConfigError);
  CHECK_THROWS_AS(net.forward(T64::zeros({1, 3, 8, 6})), ConfigError);
  CHECK_THROWS_AS(net.forward(T64::zeros({1, 4, 8, 8})), ShapeError);
}

TEST_CASE("config validation rejects out-of-range fields") {
  auto ok = tiny_cfg();
  CHECK_NOTHROW(ok.validate());
  auto c1 = ok;
  c1.spatial_branch = c1.channel_branch = false;
  CHECK_THROWS_AS(c1.validate(), ConfigError);
  auto c2 = ok;
  c2.top_k = 3;
  CHECK_THROWS_AS(c2.validate(), ConfigError);
  auto c3 = ok;
  c3.top_k = -1;
  CHECK_THROWS_AS(c3.validate(), ConfigError);
  auto c4 = ok;
  c4.base_channels = 0;
  CHECK_THROWS_AS(c4.validate(), ConfigError);
  auto c5 = ok;
  c5.expansion = 0.5;
  CHECK_THROWS_AS(c5.validate(), ConfigError);
}

TEST_CASE("zero-initialized heads make the network an identity on images") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> reg;
  Rng rng(19);
  DualBranchNet<double> net(reg, cfg, rng);
  auto img = rand_image(rng, 1, 8, 8);
  auto out = net.forward(img);
  std::array<T64, 3> pyr{img, down2_mean(img), down2_mean(down2_mean(img))};
  for (int i = 0; i < 3; ++i) {
    CHECK(bit_equal(out.fused[i], pyr[i]));
    // each branch carries exactly half of the image
    CHECK(bit_equal(out.s[i], scale(pyr[i], 0.5)));
    CHECK(bit_equal(out.c[i], scale(pyr[i], 0.5)));
  }
}

TEST_CASE("single-branch identity start without the halving split") {
  auto cfg = tiny_cfg();
  cfg.channel_branch = false;
  ParamRegistry<double> reg;
  Rng rng(23);
  DualBranchNet<double> net(reg, cfg, rng);
  auto img = rand_image(rng, 1, 8, 8);
  auto out = net.forward(img);
  CHECK(bit_equal(out.s[0], img));
  CHECK(bit_equal(out.fused[0], img));
  for (int i = 0; i < 3; ++i)
    for (int64_t j = 0; j < out.c[i].numel(); ++j) CHECK(out.c[i].data()[(size_t)j] == 0.0);
}

TEST_CASE("fused output is the exact elementwise sum of the branch outputs") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> reg;
  Rng rng(29);
  DualBranchNet<double> net(reg, cfg, rng);
  // nonzero heads so both branch outputs are nontrivial
  for (const char* b : {"spatial", "channel"})
    for (int i = 0; i < 3; ++i) {
      auto p = reg.find(std::string(b) + ".head" + std::to_string(i) + ".w");
      REQUIRE(p != nullptr);
      for (auto& e : p->value.mut_data()) e = rng.uniform(-0.2, 0.2);
    }
  auto out = net.forward(rand_image(rng, 1, 8, 8));
  for (int i = 0; i < 3; ++i)
    for (int64_t j = 0; j < out.fused[i].numel(); ++j) {
      const double s = out.s[i].data()[(size_t)j];
      const double c = out.c[i].data()[(size_t)j];
      CHECK(out.fused[i].data()[(size_t)j] == s + c);
    }
}

TEST_CASE("zeroed promotion weights reduce to the plain dual-branch net") {
  // promo params are registered after both branches, so the branch init
  // streams coincide for the same seed with and without mutual promotion
  auto cfg = tiny_cfg();
  ParamRegistry<double> r_mp;
  Rng g1(31);
  DualBranchNet<double> n_mp(r_mp, cfg, g1);
  auto cfg_off = cfg;
  cfg_off.mutual_promotion = false;
  ParamRegistry<double> r_off;
  Rng g2(31);
  DualBranchNet<double> n_off(r_off, cfg_off, g2);

  for (const char* b : {"spatial", "channel"})
    for (int i = 0; i < 3; ++i)
      for (auto* r : {&r_mp, &r_off}) {
        auto p = r->find(std::string(b) + ".head" + std::to_string(i) + ".w");
        Rng hw(100 + i);
        for (auto& e : p->value.mut_data()) e = hw.uniform(-0.2, 0.2);
      }
  r_mp.fill_prefix("promo", 0.0);
  Rng gi(37);
  auto img = rand_image(gi, 1, 8, 8);
  auto o1 = n_mp.forward(img);
  auto o2 = n_off.forward(img);
  for (int i = 0; i < 3; ++i) CHECK(bit_equal(o1.fused[i], o2.fused[i]));
}

TEST_CASE("fusion input is symmetric in the branch order") {
  Rng rng(41);
  ParamRegistry<double> reg;
  ConvMoe<double> promo;
  promo.init(reg, "p", 24, 8, -1, 2, rng);
  std::vector<double> va((size_t)(24 * 16)), vb((size_t)(24 * 16));
  for (auto& e : va) e = rng.uniform(-1, 1);
  for (auto& e : vb) e = rng.uniform(-1, 1);
  auto ys = T64::leaf({1, 24, 4, 4}, std::move(va));
  auto yc = T64::leaf({1, 24, 4, 4}, std::move(vb));
  auto z1 = promo.forward(add(ys, yc));
  auto z2 = promo.forward(add(yc, ys));
  CHECK(bit_equal(z1, z2));
}

TEST_CASE("ablated variants build and run") {
  Rng gi(43);
  auto img = rand_image(gi, 1, 8, 8);
  std::vector<NetConfig> grid;
  auto c1 = tiny_cfg();
  c1.channel_branch = false;
  grid.push_back(c1);
  auto c2 = tiny_cfg();
  c2.spatial_branch = false;
  grid.push_back(c2);
  auto c3 = tiny_cfg();
  c3.mutual_promotion = false;
  grid.push_back(c3);
  auto c4 = tiny_cfg();
  c4.blocks_per_scale = 2;
  grid.push_back(c4);
  auto c5 = tiny_cfg();
  c5.n_experts = 1;
  grid.push_back(c5);
  auto c6 = tiny_cfg();
  c6.n_experts = 4;
  c6.top_k = 2;
  grid.push_back(c6);
  for (const auto& cfg : grid) {
    ParamRegistry<double> reg;
    Rng rng(47);
    DualBranchNet<double> net(reg, cfg, rng);
    auto out = net.forward(img);
    for (int i = 0; i < 3; ++i) {
      CHECK(out.fused[i].shape()[1] == 3);
      for (int64_t j = 0; j < out.fused[i].numel(); ++j)
        CHECK(std::isfinite(out.fused[i].data()[(size_t)j]));
    }
  }
}

TEST_CASE("same seed and input give identical outputs") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> r1, r2;
  Rng g1(53), g2(53);
  DualBranchNet<double> n1(r1, cfg, g1);
  DualBranchNet<double> n2(r2, cfg, g2);
  Rng gi(59);
  auto img = rand_image(gi, 1, 8, 8);
  auto o1 = n1.forward(img);
  auto o2 = n2.forward(img);
  for (int i = 0; i < 3; ++i) {
    CHECK(bit_equal(o1.fused[i], o2.fused[i]));
    CHECK(bit_equal(o1.s[i], o2.s[i]));
    CHECK(bit_equal(o1.c[i], o2.c[i]));
  }
}

TEST_CASE("backward reaches every module group") {
  auto cfg = tiny_cfg();
  ParamRegistry<double> reg;
  Rng rng(61);
  DualBranchNet<double> net(reg, cfg, rng);
  for (const char* b : {"spatial", "channel"})
    for (int i = 0; i < 3; ++i) {
      auto p = reg.find(std::string(b) + ".head" + std::to_string(i) + ".w");
      for (auto& e : p->value.mut_data()) e = rng.uniform(-0.2, 0.2);
    }
  auto img = rand_image(rng, 1, 8, 8);
  auto out = net.forward(img);
  auto loss = add(add(sum_all(out.fused[0]), sum_all(out.fused[1])), sum_all(out.fused[2]));
  loss.backward();
  for (const auto& p : reg.items()) {
    INFO(p->name);
    CHECK(p->value.has_grad());
  }
  const char* probes[] = {"spatial.embed0.w",
                          "spatial.enc0.block0.ssm.row_forward.b_proj",
                          "spatial.dec2.block0.ff.expert0.expand.w",
                          "spatial.ms_moe.unify0.w",
                          "channel.embed2.w",
                          "channel.enc1.block0.ssm.proj.w",
                          "channel.ms_moe.expert1.proj.w",
                          "promo.scale0.expert0.to_width.w",
                          "promo.scale2.expert1.refine.w"};
  for (const char* name : probes) {
    auto p = reg.find(name);
    REQUIRE(p != nullptr);
    double mag = 0.0;
    for (double g : p->value.grad()) mag = std::max(mag, std::abs(g));
    INFO(name);
    CHECK(mag > 0.0);
  }
}
