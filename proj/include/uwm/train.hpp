#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>

#include "uwm/checkpoint.hpp"
#include "uwm/dataset.hpp"
#include "uwm/metrics.hpp"
#include "uwm/net.hpp"

namespace uwm {

struct TrainConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t batch_size = 4;
  int64_t patch = 128;
  int64_t total_iters = 1000;
  std::vector<int64_t> milestones;  // empty = {60%, 80%} of total_iters
  uint64_t seed = 0;
  bool augment_flip = true;
  int64_t val_interval = 0;         // 0 = no validation during training
  int64_t checkpoint_interval = 0;  // 0 = final checkpoint only
  std::string resume;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("train: learning_rate must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("train: betas must lie in [0, 1)");
    if (patch % 4 != 0) throw ConfigError("train: patch must be divisible by 4");
    if (batch_size < 1 || total_iters < 1)
      throw ConfigError("train: batch_size and total_iters must be >= 1");
  }

  std::vector<int64_t> resolved_milestones() const {
    if (!milestones.empty()) return milestones;
    return {(int64_t)(total_iters * 6 / 10), (int64_t)(total_iters * 8 / 10)};
  }
};

inline double lr_at(const TrainConfig& cfg, int64_t k) {
  double lr = cfg.learning_rate;
  for (int64_t m : cfg.resolved_milestones())
    if (m <= k) lr *= 0.5;
  return lr;
}

// Per-parameter Adam moments. Parameters whose gradient buffer is absent for
// a step are skipped entirely: their moments and step counts do not advance.
template <class T>
struct AdamState {
  struct Entry {
    std::vector<T> m, v;
    int64_t steps = 0;
  };
  std::map<std::string, Entry> entries;
};

template <class T>
void adam_step(ParamRegistry<T>& reg, AdamState<T>& state, const TrainConfig& cfg, double lr) {
  for (auto& p : reg.items()) {
    if (!p->trainable || !p->value.has_grad()) continue;
    const std::vector<T>& g = p->value.grad();
    for (size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite((double)g[i]))
        throw Error("adam_step: non-finite gradient in parameter '" + p->name + "'");
    auto& e = state.entries[p->name];
    if (e.m.empty()) {
      e.m.assign(g.size(), T(0));
      e.v.assign(g.size(), T(0));
    }
    e.steps += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, (double)e.steps);
    double bc2 = 1.0 - std::pow(cfg.beta2, (double)e.steps);
    std::vector<T>& w = p->value.mut_data();
    for (size_t i = 0; i < g.size(); ++i) {
      e.m[i] = (T)(cfg.beta1 * (double)e.m[i] + (1.0 - cfg.beta1) * (double)g[i]);
      e.v[i] = (T)(cfg.beta2 * (double)e.v[i] + (1.0 - cfg.beta2) * (double)g[i] * (double)g[i]);
      double mh = (double)e.m[i] / bc1;
      double vh = (double)e.v[i] / bc2;
      w[i] = (T)((double)w[i] - lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

template <class T>
std::array<Tensor<T>, 3> downsample_gt(const Tensor<T>& g) {
  const Shape& s = g.shape();
  if (s.size() != 4) shape_fail("downsample_gt", "expects NCHW, got " + shape_str(s));
  if (s[2] % 4 != 0 || s[3] % 4 != 0)
    throw ConfigError("downsample_gt: extents must be divisible by 4, got " + shape_str(s));
  Tensor<T> half = down2_mean(g);
  return {g, half, down2_mean(half)};
}

// One scale per iteration: k mod 3 = 0 selects full scale, 1 selects 1/2,
// 2 selects 1/4. Only the selected scale contributes to the loss graph.
template <class T>
Tensor<T> cms_loss(const MultiScaleOutput<T>& out, const std::array<Tensor<T>, 3>& gts,
                   int64_t k) {
  int idx = (int)(((k % 3) + 3) % 3);
  if (!out.fused[idx].defined() || !gts[(size_t)idx].defined())
    throw PreconditionError("cms_loss: scale " + std::to_string(idx) + " output or target missing");
  return l1_loss(out.fused[idx], gts[(size_t)idx]);
}

template <class T>
Tensor<T> images_to_tensor(const std::vector<Image>& imgs) {
  if (imgs.empty()) throw PreconditionError("images_to_tensor: empty batch");
  int64_t h = imgs[0].h, w = imgs[0].w;
  std::vector<T> buf;
  buf.reserve((size_t)imgs.size() * 3 * h * w);
  for (const auto& im : imgs) {
    if (im.h != h || im.w != w)
      throw ShapeError("images_to_tensor: mixed extents in batch");
    for (double v : im.px) buf.push_back((T)v);
  }
  return Tensor<T>::leaf({(int64_t)imgs.size(), 3, h, w}, std::move(buf));
}

template <class T>
Image tensor_to_image(const Tensor<T>& t, int64_t batch_index = 0) {
  const Shape& s = t.shape();
  if (s.size() != 4 || s[1] != 3)
    shape_fail("tensor_to_image", "expects (B, 3, H, W), got " + shape_str(s));
  Image im;
  im.h = s[2];
  im.w = s[3];
  im.px.resize((size_t)(3 * s[2] * s[3]));
  const auto& v = t.data();
  size_t off = (size_t)(batch_index * 3 * s[2] * s[3]);
  for (size_t i = 0; i < im.px.size(); ++i)
    im.px[i] = std::clamp((double)v[off + i], 0.0, 1.0);
  return im;
}

struct TrainResult {
  int64_t iters_run = 0;
  double final_loss = 0.0;
  double best_psnr = 0.0;
  double best_ssim = 0.0;
  bool early_stopped = false;
};

template <class T>
struct TrainHooks {
  // Return true from on_validate to stop early.
  std::function<bool(int64_t, double psnr_db, double ssim_val)> on_validate;
  std::function<void(int64_t, ParamRegistry<T>&)> on_post_backward;
};

namespace detail {

template <class T>
void save_train_checkpoint(const std::string& path, const ParamRegistry<T>& reg,
                           const AdamState<T>& adam, int64_t next_iter, const Rng& rng,
                           const std::vector<uint64_t>& perm, uint64_t cursor,
                           double best_psnr, double best_ssim, const std::string& cfg_text) {
  Container c;
  save_params(reg, c);
  for (const auto& [name, e] : adam.entries) {
    c.put_values("opt." + name + ".m", Shape{(int64_t)e.m.size()}, e.m);
    c.put_values("opt." + name + ".v", Shape{(int64_t)e.v.size()}, e.v);
    c.put_u64("opt." + name + ".steps", {(uint64_t)e.steps});
  }
  c.put_u64("train.iteration", {(uint64_t)next_iter});
  auto st = rng.state();
  c.put_u64("train.rng_state", {st[0], st[1], st[2], st[3]});
  c.put_u64("train.perm", perm);
  c.put_u64("train.cursor", {cursor});
  c.put_values("train.best", Shape{2}, std::vector<double>{best_psnr, best_ssim});
  if (!cfg_text.empty()) c.put_text("config", cfg_text);
  c.write(path);
}

}  // namespace detail

// Deterministic single-threaded loop: reshuffling epoch permutation, shared
// patch windows, CMS loss, Adam with per-parameter step counts.
template <class T>
TrainResult train_loop(DualBranchNet<T>& net, ParamRegistry<T>& reg, const PairedDataset& ds,
                       const TrainConfig& cfg, const std::string& out_dir,
                       const std::string& cfg_text = "", const TrainHooks<T>& hooks = {},
                       const PairedDataset* val_ds = nullptr) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  Rng rng(cfg.seed);
  AdamState<T> adam;
  std::vector<uint64_t> perm(ds.entries.size());
  std::iota(perm.begin(), perm.end(), 0);
  uint64_t cursor = (uint64_t)perm.size();  // forces the first shuffle
  int64_t start_iter = 0;
  double best_psnr = 0.0, best_ssim = 0.0;

  if (!cfg.resume.empty()) {
    Container c = Container::read(cfg.resume);
    load_params(reg, c);
    for (auto& p : reg.items()) {
      if (!c.has("opt." + p->name + ".m")) continue;
      auto& e = adam.entries[p->name];
      e.m = c.get_values<T>("opt." + p->name + ".m");
      e.v = c.get_values<T>("opt." + p->name + ".v");
      e.steps = (int64_t)c.get_u64("opt." + p->name + ".steps")[0];
    }
    start_iter = (int64_t)c.get_u64("train.iteration")[0];
    auto st = c.get_u64("train.rng_state");
    rng.set_state({st[0], st[1], st[2], st[3]});
    perm = c.get_u64("train.perm");
    if (perm.size() != ds.entries.size())
      throw ConfigError("resume: checkpoint permutation covers " + std::to_string(perm.size()) +
                        " entries but the dataset has " + std::to_string(ds.entries.size()));
    cursor = c.get_u64("train.cursor")[0];
    auto best = c.get_values<double>("train.best");
    best_psnr = best[0];
    best_ssim = best[1];
  }

  std::map<std::string, Image> cache;
  auto load_cached = [&cache](const std::string& path) -> const Image& {
    auto it = cache.find(path);
    if (it == cache.end()) it = cache.emplace(path, load_image(path)).first;
    return it->second;
  };

  std::string csv_path = out_dir + "/metrics.csv";
  FILE* csv = std::fopen(csv_path.c_str(), start_iter == 0 ? "w" : "a");
  if (!csv) throw DataError("cannot open metrics log: " + csv_path);
  if (start_iter == 0) std::fprintf(csv, "iteration,selected_scale,loss,lr,wall_ms\n");

  TrainResult res;
  static const int kScaleDiv[3] = {1, 2, 4};
  for (int64_t k = start_iter; k < cfg.total_iters; ++k) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<Image> ins, gts;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= perm.size()) {
        for (size_t i = perm.size(); i > 1; --i)
          std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
        cursor = 0;
      }
      const auto& e = ds.entries[(size_t)perm[cursor++]];
      PatchSample ps = sample_patch(load_cached(e.input_path), load_cached(e.target_path),
                                    cfg.patch, rng, cfg.augment_flip);
      ins.push_back(std::move(ps.input));
      gts.push_back(std::move(ps.target));
    }

    reg.zero_grads();
    Tensor<T> x = images_to_tensor<T>(ins);
    Tensor<T> g = images_to_tensor<T>(gts);
    auto out = net.forward(x);
    auto pyramid = downsample_gt(g);
    Tensor<T> loss = cms_loss(out, pyramid, k);
    double lv = (double)loss.data()[0];
    if (!std::isfinite(lv)) throw Error("train: non-finite loss at iteration " + std::to_string(k));
    loss.backward();
    if (hooks.on_post_backward) hooks.on_post_backward(k, reg);
    double lr = lr_at(cfg, k);
    adam_step(reg, adam, cfg, lr);

    auto t1 = std::chrono::steady_clock::now();
    double wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    std::fprintf(csv, "%lld,%d,%.17g,%.17g,%.3f\n", (long long)k, kScaleDiv[k % 3], lv, lr,
                 wall_ms);
    std::fflush(csv);
    res.final_loss = lv;
    res.iters_run = k + 1;

    bool last = (k + 1 == cfg.total_iters);
    if (cfg.val_interval > 0 && ((k + 1) % cfg.val_interval == 0 || last)) {
      const PairedDataset& vds = val_ds ? *val_ds : ds;
      double psum = 0.0, ssum = 0.0;
      for (const auto& e : vds.entries) {
        const Image& vin = load_cached(e.input_path);
        const Image& vgt = load_cached(e.target_path);
        Image padded = pad_reflect_to_multiple(vin, 4);
        auto vout = net.forward(images_to_tensor<T>({padded}));
        Image pred = crop(tensor_to_image(vout.fused[0]), 0, 0, vin.h, vin.w);
        psum += psnr(pred, vgt);
        ssum += ssim(pred, vgt);
      }
      double pm = psum / (double)vds.entries.size();
      double sm = ssum / (double)vds.entries.size();
      if (pm > best_psnr) {
        best_psnr = pm;
        best_ssim = sm;
      }
      if (hooks.on_validate && hooks.on_validate(k + 1, pm, sm)) {
        res.early_stopped = true;
        detail::save_train_checkpoint(out_dir + "/ckpt_final.uwck", reg, adam, k + 1, rng, perm,
                                      cursor, best_psnr, best_ssim, cfg_text);
        res.best_psnr = best_psnr;
        res.best_ssim = best_ssim;
        std::fclose(csv);
        return res;
      }
    }
    if (cfg.checkpoint_interval > 0 && (k + 1) % cfg.checkpoint_interval == 0 && !last)
      detail::save_train_checkpoint(out_dir + "/ckpt_" + std::to_string(k + 1) + ".uwck", reg,
                                    adam, k + 1, rng, perm, cursor, best_psnr, best_ssim,
                                    cfg_text);
  }
  detail::save_train_checkpoint(out_dir + "/ckpt_final.uwck", reg, adam, cfg.total_iters, rng,
                                perm, cursor, best_psnr, best_ssim, cfg_text);
  res.best_psnr = best_psnr;
  res.best_ssim = best_ssim;
  std::fclose(csv);
  return res;
}

}  // namespace uwm
