#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "uwm/train.hpp"

using namespace uwm;
namespace fs = std::filesystem;

using T64 = Tensor<double>;

namespace {

NetConfig small_net_cfg() {
  NetConfig cfg;
  cfg.base_channels = 4;
  cfg.blocks_per_scale = 1;
  cfg.expansion = 2.0;
  cfg.d_state = 2;
  cfg.n_experts = 2;
  return cfg;
}

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("uwm_train_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Image noise_image(Rng& rng, int64_t h, int64_t w) {
  Image im;
  im.h = h;
  im.w = w;
  im.px.resize((size_t)(3 * h * w));
  for (auto& v : im.px) v = rng.uniform01();
  return im;
}

PairedDataset synth_dataset(const fs::path& dir, int n, int64_t hw, uint64_t seed) {
  fs::create_directories(dir);
  Rng rng(seed);
  PairedDataset ds;
  for (int i = 0; i < n; ++i) {
    Image gt = noise_image(rng, hw, hw);
    Image in = gt;
    for (auto& v : in.px) v = std::clamp(0.6 * v + 0.15, 0.0, 1.0);
    std::string base = "im" + std::to_string(i);
    std::string in_p = (dir / (base + "_in.png")).string();
    std::string gt_p = (dir / (base + "_gt.png")).string();
    save_png(in_p, in);
    save_png(gt_p, gt);
    ds.entries.push_back({base, in_p, gt_p});
  }
  return ds;
}

struct CsvRow {
  long long iter;
  int scale;
  std::string loss, lr;
};

std::vector<CsvRow> read_csv(const fs::path& p, bool expect_header) {
  std::ifstream f(p);
  REQUIRE(f.good());
  std::string line;
  std::vector<CsvRow> rows;
  bool first = true;
  while (std::getline(f, line)) {
    if (first && expect_header) {
      CHECK(line == "iteration,selected_scale,loss,lr,wall_ms");
      first = false;
      continue;
    }
    first = false;
    std::stringstream ss(line);
    std::string cell;
    CsvRow r;
    std::getline(ss, cell, ',');
    r.iter = std::stoll(cell);
    std::getline(ss, cell, ',');
    r.scale = std::stoi(cell);
    std::getline(ss, r.loss, ',');
    std::getline(ss, r.lr, ',');
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST_CASE("cms loss picks one scale per iteration index") {
  MultiScaleOutput<double> out;
  out.fused[0] = T64::full({1, 3, 8, 8}, 0.7);
  out.fused[1] = T64::full({1, 3, 4, 4}, 0.9);
  out.fused[2] = T64::full({1, 3, 2, 2}, 0.3);
  std::array<T64, 3> gts{T64::full({1, 3, 8, 8}, 0.2), T64::full({1, 3, 4, 4}, 0.8),
                         T64::full({1, 3, 2, 2}, 0.6)};
  CHECK(cms_loss(out, gts, 0).data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(cms_loss(out, gts, 1).data()[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(cms_loss(out, gts, 2).data()[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(cms_loss(out, gts, 3).data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(cms_loss(out, gts, 6).data()[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("cms loss endpoints: zero residual and unit residual") {
  MultiScaleOutput<double> out;
  out.fused[0] = T64::full({1, 3, 4, 4}, 0.4);
  std::array<T64, 3> gts{T64::full({1, 3, 4, 4}, 0.4), T64{}, T64{}};
  CHECK(cms_loss(out, gts, 0).data()[0] == 0.0);
  out.fused[0] = T64::zeros({1, 3, 4, 4});
  gts[0] = T64::full({1, 3, 4, 4}, 1.0);
  CHECK(cms_loss(out, gts, 0).data()[0] == 1.0);
}

TEST_CASE("cms loss rejects a missing scale") {
  MultiScaleOutput<double> out;
  out.fused[0] = T64::zeros({1, 3, 4, 4});
  std::array<T64, 3> gts{T64::zeros({1, 3, 4, 4}), T64{}, T64{}};
  CHECK_THROWS_AS(cms_loss(out, gts, 1), PreconditionError);
}

TEST_CASE("ground-truth pyramid shapes and means") {
  Rng rng(3);
  std::vector<double> v((size_t)(3 * 8 * 8));
  for (auto& e : v) e = rng.uniform01();
  auto g = T64::leaf({1, 3, 8, 8}, std::move(v));
  auto pyr = downsample_gt(g);
  CHECK(pyr[0].shape() == Shape{1, 3, 8, 8});
  CHECK(pyr[1].shape() == Shape{1, 3, 4, 4});
  CHECK(pyr[2].shape() == Shape{1, 3, 2, 2});

  auto c = T64::full({1, 3, 8, 8}, 0.25);
  auto cp = downsample_gt(c);
  for (int i = 0; i < 3; ++i)
    for (int64_t j = 0; j < cp[(size_t)i].numel(); ++j)
      CHECK(cp[(size_t)i].data()[(size_t)j] == doctest::Approx(0.25).epsilon(1e-15));

  // checkerboard halves to its block mean
  std::vector<double> cb((size_t)(3 * 4 * 4));
  for (int64_t ch = 0; ch < 3; ++ch)
    for (int64_t y = 0; y < 4; ++y)
      for (int64_t x = 0; x < 4; ++x) cb[(size_t)(ch * 16 + y * 4 + x)] = (double)((y + x) % 2);
  auto board = T64::leaf({1, 3, 4, 4}, std::move(cb));
  auto bp = downsample_gt(board);
  for (int64_t j = 0; j < bp[1].numel(); ++j) CHECK(bp[1].data()[(size_t)j] == 0.5);

  CHECK_THROWS_AS(downsample_gt(T64::zeros({1, 3, 6, 6})), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate());
  auto c1 = ok;
  c1.patch = 66;
  CHECK_THROWS_AS(c1.validate(), ConfigError);
  auto c2 = ok;
  c2.learning_rate = 0.0;
  CHECK_THROWS_AS(c2.validate(), ConfigError);
  auto c3 = ok;
  c3.beta2 = 1.0;
  CHECK_THROWS_AS(c3.validate(), ConfigError);
  auto c4 = ok;
  c4.batch_size = 0;
  CHECK_THROWS_AS(c4.validate(), ConfigError);
}

TEST_CASE("learning rate halves exactly once per milestone") {
  TrainConfig cfg;
  cfg.learning_rate = 2e-4;
  cfg.total_iters = 1000;
  CHECK(cfg.resolved_milestones() == std::vector<int64_t>{600, 800});
  CHECK(lr_at(cfg, 0) == 2e-4);
  CHECK(lr_at(cfg, 599) == 2e-4);
  CHECK(lr_at(cfg, 600) == 1e-4);
  CHECK(lr_at(cfg, 799) == 1e-4);
  CHECK(lr_at(cfg, 800) == 5e-5);
  CHECK(lr_at(cfg, 999) == 5e-5);
  cfg.milestones = {10, 20};
  CHECK(lr_at(cfg, 9) == 2e-4);
  CHECK(lr_at(cfg, 10) == 1e-4);
  CHECK(lr_at(cfg, 20) == 5e-5);
}

TEST_CASE("first Adam step on a unit gradient moves by -lr") {
  ParamRegistry<double> reg;
  auto p = reg.add("p", {1}, {0.3});
  sum_all(p->value).backward();
  AdamState<double> st;
  TrainConfig cfg;
  cfg.learning_rate = 2e-3;
  adam_step(reg, st, cfg, cfg.learning_rate);
  // mhat = vhat = 1 after bias correction, so the step is -lr/(1 + eps)
  CHECK(std::abs(p->value.data()[0] - (0.3 - 2e-3)) <= 1e-10);
  CHECK(st.entries.at("p").steps == 1);

  reg.zero_grads();
  sum_all(p->value).backward();
  adam_step(reg, st, cfg, cfg.learning_rate);
  CHECK(std::abs(p->value.data()[0] - (0.3 - 4e-3)) <= 1e-9);
  CHECK(st.entries.at("p").steps == 2);
}

TEST_CASE("parameters without a gradient buffer are skipped entirely") {
  ParamRegistry<double> reg;
  auto a = reg.add("a", {2}, {1.0, 2.0});
  auto b = reg.add("b", {2}, {5.0, 6.0});
  sum_all(a->value).backward();
  AdamState<double> st;
  TrainConfig cfg;
  adam_step(reg, st, cfg, cfg.learning_rate);
  CHECK(a->value.data()[0] != 1.0);
  CHECK(b->value.data()[0] == 5.0);
  CHECK(b->value.data()[1] == 6.0);
  CHECK(st.entries.count("a") == 1);
  CHECK(st.entries.count("b") == 0);
}

TEST_CASE("a non-finite gradient aborts the step and names the parameter") {
  ParamRegistry<double> reg;
  auto a = reg.add("bad_param", {1}, {1.0});
  auto inf = T64::leaf({1}, {std::numeric_limits<double>::infinity()});
  sum_all(mul(a->value, inf)).backward();
  AdamState<double> st;
  TrainConfig cfg;
  CHECK_THROWS_WITH_AS(adam_step(reg, st, cfg, cfg.learning_rate),
                       "adam_step: non-finite gradient in parameter 'bad_param'", Error);
}

TEST_CASE("300 iterations select each scale exactly 100 times with isolated heads") {
  auto dir = fresh_dir("cms300");
  auto ds = synth_dataset(dir / "data", 3, 16, 11);
  ParamRegistry<double> reg;
  Rng rng(5);
  DualBranchNet<double> net(reg, small_net_cfg(), rng);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.patch = 8;
  cfg.total_iters = 300;
  cfg.seed = 9;

  int64_t isolation_checks = 0;
  TrainHooks<double> hooks;
  hooks.on_post_backward = [&](int64_t k, ParamRegistry<double>& r) {
    const int sel = (int)(k % 3);
    for (int i = 0; i < 3; ++i)
      for (const char* br : {"spatial", "channel"}) {
        auto h = r.find(std::string(br) + ".head" + std::to_string(i) + ".w");
        REQUIRE(h != nullptr);
        if (i == sel) {
          REQUIRE(h->value.has_grad());
        } else {
          REQUIRE(!h->value.has_grad());
          ++isolation_checks;
        }
      }
  };
  auto res = train_loop(net, reg, ds, cfg, (dir / "out").string(), "", hooks);
  CHECK(res.iters_run == 300);
  CHECK(std::isfinite(res.final_loss));
  CHECK(isolation_checks == 300 * 4);

  auto rows = read_csv(dir / "out" / "metrics.csv", true);
  REQUIRE(rows.size() == 300);
  int count[3] = {0, 0, 0};
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].iter == (long long)i);
    if (rows[i].scale == 1) ++count[0];
    if (rows[i].scale == 2) ++count[1];
    if (rows[i].scale == 4) ++count[2];
    // milestones at 180 and 240
    const double lr = std::stod(rows[i].lr);
    if (i < 180) CHECK(lr == 2e-4);
    if (i >= 180 && i < 240) CHECK(lr == 1e-4);
    if (i >= 240) CHECK(lr == 5e-5);
  }
  CHECK(count[0] == 100);
  CHECK(count[1] == 100);
  CHECK(count[2] == 100);

  CHECK(fs::exists(dir / "out" / "ckpt_final.uwck"));
  CHECK(!fs::exists(dir / "out" / "ckpt_100.uwck"));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trip restores the forward map bit for bit") {
  auto dir = fresh_dir("roundtrip");
  auto ds = synth_dataset(dir / "data", 2, 16, 13);
  auto ncfg = small_net_cfg();
  ParamRegistry<double> reg;
  Rng rng(21);
  DualBranchNet<double> net(reg, ncfg, rng);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.patch = 8;
  cfg.total_iters = 10;
  cfg.seed = 2;
  train_loop(net, reg, ds, cfg, (dir / "out").string());

  Rng gi(77);
  std::vector<double> v((size_t)(3 * 8 * 8));
  for (auto& e : v) e = gi.uniform01();
  auto probe = T64::leaf({1, 3, 8, 8}, std::move(v));
  auto before = net.forward(probe);

  ParamRegistry<double> reg2;
  Rng rng2(999);  // different seed, load must overwrite everything
  DualBranchNet<double> net2(reg2, ncfg, rng2);
  Container c = Container::read((dir / "out" / "ckpt_final.uwck").string());
  load_params(reg2, c);
  auto after = net2.forward(probe);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(before.fused[i].shape() == after.fused[i].shape());
    for (int64_t j = 0; j < before.fused[i].numel(); ++j)
      CHECK(before.fused[i].data()[(size_t)j] == after.fused[i].data()[(size_t)j]);
  }
  fs::remove_all(dir);
}

TEST_CASE("resume reproduces the uninterrupted run bit for bit") {
  auto dir = fresh_dir("resume");
  auto ds = synth_dataset(dir / "data", 3, 16, 17);
  auto ncfg = small_net_cfg();

  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.patch = 8;
  cfg.total_iters = 24;
  cfg.seed = 4;
  cfg.checkpoint_interval = 12;

  ParamRegistry<double> ra;
  Rng ga(33);
  DualBranchNet<double> na(ra, ncfg, ga);
  train_loop(na, ra, ds, cfg, (dir / "a").string());

  ParamRegistry<double> rb;
  Rng gb(33);
  DualBranchNet<double> nb(rb, ncfg, gb);
  auto cfg_b = cfg;
  cfg_b.resume = (dir / "a" / "ckpt_12.uwck").string();
  train_loop(nb, rb, ds, cfg_b, (dir / "b").string());

  REQUIRE(ra.items().size() == rb.items().size());
  for (size_t i = 0; i < ra.items().size(); ++i) {
    const auto& pa = *ra.items()[i];
    const auto& pb = *rb.items()[i];
    REQUIRE(pa.name == pb.name);
    for (int64_t j = 0; j < pa.value.numel(); ++j)
      CHECK(pa.value.data()[(size_t)j] == pb.value.data()[(size_t)j]);
  }

  // run B logs iterations 12..23; fields must match run A text-for-text
  auto rows_a = read_csv(dir / "a" / "metrics.csv", true);
  auto rows_b = read_csv(dir / "b" / "metrics.csv", false);
  REQUIRE(rows_a.size() == 24);
  REQUIRE(rows_b.size() == 12);
  for (size_t i = 0; i < rows_b.size(); ++i) {
    CHECK(rows_b[i].iter == rows_a[i + 12].iter);
    CHECK(rows_b[i].scale == rows_a[i + 12].scale);
    CHECK(rows_b[i].loss == rows_a[i + 12].loss);
    CHECK(rows_b[i].lr == rows_a[i + 12].lr);
  }
  fs::remove_all(dir);
}

TEST_CASE("validation hook can stop the run early") {
  auto dir = fresh_dir("earlystop");
  auto ds = synth_dataset(dir / "data", 2, 16, 19);
  ParamRegistry<double> reg;
  Rng rng(51);
  DualBranchNet<double> net(reg, small_net_cfg(), rng);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.patch = 8;
  cfg.total_iters = 100;
  cfg.seed = 6;
  cfg.val_interval = 5;
  TrainHooks<double> hooks;
  int64_t seen_at = 0;
  hooks.on_validate = [&](int64_t k, double psnr_db, double ssim_val) {
    seen_at = k;
    CHECK(psnr_db > 0.0);
    CHECK(ssim_val > -1.0);
    return true;
  };
  auto res = train_loop(net, reg, ds, cfg, (dir / "out").string(), "", hooks);
  CHECK(res.early_stopped);
  CHECK(res.iters_run == 5);
  CHECK(seen_at == 5);
  CHECK(res.best_psnr > 0.0);
  CHECK(fs::exists(dir / "out" / "ckpt_final.uwck"));
  fs::remove_all(dir);
}
