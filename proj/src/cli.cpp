#include "uwm/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "uwm/battery.hpp"
#include "uwm/config.hpp"
#include "uwm/train.hpp"

namespace fs = std::filesystem;

namespace uwm {

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out = "out";
  int64_t seed = -1;  // -1 = keep config value
  std::string dtype;
  std::string evaluator;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "config file (key = value lines)");
  cmd->add_option("--override", o.overrides, "config override key=value, applied last-wins");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "rng seed (overrides train.seed)");
  cmd->add_option("--dtype", o.dtype, "f32|f64")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--evaluator", o.evaluator, "sequential|parallel")
      ->check(CLI::IsMember({"sequential", "parallel"}));
}

FullConfig resolve_config(const CommonOpts& o, const std::string& embedded = "") {
  FullConfig cfg;
  std::vector<std::pair<std::string, std::string>> pairs;
  if (!embedded.empty()) {
    // embedded checkpoint config is the base layer
    std::istringstream ss(embedded);
    std::string line;
    std::vector<std::pair<std::string, std::string>> emb;
    while (std::getline(ss, line)) {
      size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      emb.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    pairs.insert(pairs.end(), emb.begin(), emb.end());
  }
  if (!o.config_path.empty()) {
    auto file_pairs = parse_config_file(o.config_path);
    pairs.insert(pairs.end(), file_pairs.begin(), file_pairs.end());
  }
  for (const auto& ov : o.overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--override expects key=value, got '" + ov + "'");
    pairs.emplace_back(ov.substr(0, eq), ov.substr(eq + 1));
  }
  apply_config(cfg, pairs);
  if (o.seed >= 0) cfg.train.seed = (uint64_t)o.seed;
  if (!o.dtype.empty()) cfg.dtype = o.dtype;
  if (!o.evaluator.empty())
    cfg.net.evaluator =
        o.evaluator == "parallel" ? ScanEvaluator::Parallel : ScanEvaluator::Sequential;
  return cfg;
}

template <class T>
int do_train(const FullConfig& cfg, const std::string& out_dir) {
  if (cfg.data_root.empty()) throw ConfigError("train: data.root is not set");
  PairedDataset ds = load_pairs(cfg.data_root, cfg.train_split);
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";

  PairedDataset val;
  const PairedDataset* val_ptr = nullptr;
  if (cfg.train.val_interval > 0) {
    if (fs::exists(fs::path(cfg.data_root) / cfg.val_split / "input")) {
      val = load_pairs(cfg.data_root, cfg.val_split);
      val_ptr = &val;
    }
  }

  ParamRegistry<T> reg;
  Rng init_rng(cfg.train.seed);
  DualBranchNet<T> net(reg, cfg.net, init_rng);
  TrainResult res =
      train_loop(net, reg, ds, cfg.train, out_dir, config_to_text(cfg), TrainHooks<T>{}, val_ptr);

  std::cout << "iterations: " << res.iters_run << "\n";
  std::cout << "final_loss: " << res.final_loss << "\n";
  if (res.best_psnr > 0.0) {
    std::cout << "best_psnr_db: " << res.best_psnr << "\n";
    std::cout << "best_ssim: " << res.best_ssim << "\n";
  }
  std::cout << "checkpoint: " << out_dir << "/ckpt_final.uwck\n";
  return 0;
}

template <class T>
std::pair<std::unique_ptr<DualBranchNet<T>>, std::unique_ptr<ParamRegistry<T>>> net_from_checkpoint(
    const Container& c, const FullConfig& cfg) {
  auto reg = std::make_unique<ParamRegistry<T>>();
  Rng rng(cfg.train.seed);
  auto net = std::make_unique<DualBranchNet<T>>(*reg, cfg.net, rng);
  load_params(*reg, c);
  return {std::move(net), std::move(reg)};
}

template <class T>
int do_infer(const FullConfig& cfg, const Container& ckpt, const std::vector<std::string>& inputs,
             const std::string& out_dir) {
  auto [net, reg] = net_from_checkpoint<T>(ckpt, cfg);
  fs::create_directories(out_dir);
  for (const auto& path : inputs) {
    Image im = load_image(path);
    Image padded = pad_reflect_to_multiple(im, 4);
    auto out = net->forward(images_to_tensor<T>({padded}));
    Image pred = crop(tensor_to_image(out.fused[0]), 0, 0, im.h, im.w);
    std::string dst = (fs::path(out_dir) / (fs::path(path).stem().string() + ".png")).string();
    save_png(dst, pred);
    std::cout << path << " -> " << dst << "\n";
  }
  return 0;
}

template <class T>
int do_eval(const FullConfig& cfg, const Container& ckpt, const std::string& split,
            const std::string& out_dir) {
  if (cfg.data_root.empty()) throw ConfigError("eval: data.root is not set");
  PairedDataset ds = load_pairs(cfg.data_root, split);
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
  auto [net, reg] = net_from_checkpoint<T>(ckpt, cfg);

  fs::create_directories(out_dir);
  std::string csv_path = (fs::path(out_dir) / "eval.csv").string();
  FILE* csv = std::fopen(csv_path.c_str(), "w");
  if (!csv) throw DataError("cannot open " + csv_path);
  std::fprintf(csv, "filename,psnr_db,ssim\n");
  double psum = 0.0, ssum = 0.0;
  for (const auto& e : ds.entries) {
    Image in = load_image(e.input_path);
    Image gt = load_image(e.target_path);
    Image padded = pad_reflect_to_multiple(in, 4);
    auto out = net->forward(images_to_tensor<T>({padded}));
    Image pred = crop(tensor_to_image(out.fused[0]), 0, 0, in.h, in.w);
    double p = psnr(pred, gt), s = ssim(pred, gt);
    psum += p;
    ssum += s;
    std::fprintf(csv, "%s,%.6f,%.6f\n", e.name.c_str(), p, s);
  }
  double pm = psum / (double)ds.entries.size();
  double sm = ssum / (double)ds.entries.size();
  std::fprintf(csv, "mean,%.6f,%.6f\n", pm, sm);
  std::fclose(csv);
  std::cout << "pairs: " << ds.entries.size() << "\n";
  std::cout << "mean_psnr_db: " << pm << "\n";
  std::cout << "mean_ssim: " << sm << "\n";
  std::cout << "report: " << csv_path << "\n";
  return 0;
}

int do_grad_check(uint64_t seed) {
  auto items = run_grad_battery(seed);
  bool ok = true;
  for (const auto& it : items) {
    std::printf("%-18s max_rel_err=%.3e tol=%.0e %s\n", it.name.c_str(), it.err, it.tol,
                it.pass() ? "PASS" : "FAIL");
    ok = ok && it.pass();
  }
  if (!ok) {
    std::string failing;
    for (const auto& it : items)
      if (!it.pass()) failing += (failing.empty() ? "" : ", ") + it.name;
    std::cerr << "gradient check failed: " << failing << "\n";
    return 1;
  }
  return 0;
}

int do_bench_scan(const std::vector<int64_t>& ls, const std::vector<int64_t>& ns,
                  const std::vector<int64_t>& ds_, uint64_t seed, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::string csv_path = (fs::path(out_dir) / "bench_scan.csv").string();
  FILE* csv = std::fopen(csv_path.c_str(), "w");
  if (!csv) throw DataError("cannot open " + csv_path);
  std::fprintf(csv, "evaluator,L,N,D,wall_time_ns,max_abs_diff_vs_sequential\n");
  std::vector<int64_t> sorted_l = ls;
  std::sort(sorted_l.begin(), sorted_l.end());
  Rng rng(seed);
  for (int64_t l : sorted_l)
    for (int64_t n : ns)
      for (int64_t d : ds_) {
        if (l < 1 || n < 1 || d < 1) throw ConfigError("bench-scan: extents must be positive");
        auto mk = [&](const Shape& s, double lo, double hi) {
          std::vector<double> v((size_t)numel(s));
          for (auto& e : v) e = rng.uniform(lo, hi);
          return Tensor<double>::leaf(s, std::move(v));
        };
        auto a = mk({1, l, d, n}, 0.05, 0.98);
        auto b = mk({1, l, d, n}, -1, 1);
        auto c = mk({1, l, n}, -1, 1);
        auto dk = mk({d}, 0.5, 1.5);
        auto x = mk({1, l, d}, -1, 1);
        auto t0 = std::chrono::steady_clock::now();
        auto ys = scan_run(a, b, c, dk, x, ScanEvaluator::Sequential);
        auto t1 = std::chrono::steady_clock::now();
        auto yp = scan_run(a, b, c, dk, x, ScanEvaluator::Parallel);
        auto t2 = std::chrono::steady_clock::now();
        double diff = 0.0;
        for (int64_t i = 0; i < ys.numel(); ++i)
          diff = std::max(diff, std::abs(ys.data()[(size_t)i] - yp.data()[(size_t)i]));
        auto ns_of = [](auto a_, auto b_) {
          return (long long)std::chrono::duration_cast<std::chrono::nanoseconds>(b_ - a_).count();
        };
        std::fprintf(csv, "sequential,%lld,%lld,%lld,%lld,0\n", (long long)l, (long long)n,
                     (long long)d, ns_of(t0, t1));
        std::fprintf(csv, "parallel,%lld,%lld,%lld,%lld,%.3e\n", (long long)l, (long long)n,
                     (long long)d, ns_of(t1, t2), diff);
      }
  std::fclose(csv);
  std::cout << "report: " << csv_path << "\n";
  return 0;
}

int run_cli_inner(const std::vector<std::string>& args) {
  CLI::App app{"dual-branch selective-scan image enhancement"};
  app.require_subcommand(1);

  CommonOpts train_o, infer_o, eval_o, gc_o, bench_o;
  std::string infer_ckpt, eval_ckpt, eval_split;
  std::vector<std::string> infer_inputs;
  std::vector<int64_t> bench_l{64, 256, 1024}, bench_n{8, 16}, bench_d{4};

  CLI::App* t = app.add_subcommand("train", "train on a paired dataset");
  add_common(t, train_o);

  CLI::App* inf = app.add_subcommand("infer", "enhance images with a checkpoint");
  add_common(inf, infer_o);
  inf->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  inf->add_option("inputs", infer_inputs, "input images")->required();

  CLI::App* ev = app.add_subcommand("eval", "paired-split PSNR/SSIM report");
  add_common(ev, eval_o);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--split", eval_split, "dataset split (default: config data.val_split)");

  CLI::App* gc = app.add_subcommand("grad-check", "finite-difference gradient battery (f64)");
  add_common(gc, gc_o);

  CLI::App* bench = app.add_subcommand("bench-scan", "sequential vs parallel scan benchmark");
  add_common(bench, bench_o);
  bench->add_option("--L", bench_l, "sequence lengths");
  bench->add_option("--N", bench_n, "state sizes");
  bench->add_option("--D", bench_d, "feature widths");

  std::vector<const char*> argv;
  argv.push_back("artifact");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse((int)argv.size(), argv.data());
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (t->parsed()) {
    FullConfig cfg = resolve_config(train_o);
    cfg.train.validate();
    cfg.net.validate();
    return cfg.dtype == "f64" ? do_train<double>(cfg, train_o.out)
                              : do_train<float>(cfg, train_o.out);
  }
  if (inf->parsed()) {
    Container c = Container::read(infer_ckpt);
    FullConfig cfg = resolve_config(infer_o, c.has("config") ? c.get_text("config") : "");
    return cfg.dtype == "f64" ? do_infer<double>(cfg, c, infer_inputs, infer_o.out)
                              : do_infer<float>(cfg, c, infer_inputs, infer_o.out);
  }
  if (ev->parsed()) {
    Container c = Container::read(eval_ckpt);
    FullConfig cfg = resolve_config(eval_o, c.has("config") ? c.get_text("config") : "");
    std::string split = eval_split.empty() ? cfg.val_split : eval_split;
    return cfg.dtype == "f64" ? do_eval<double>(cfg, c, split, eval_o.out)
                              : do_eval<float>(cfg, c, split, eval_o.out);
  }
  if (gc->parsed()) {
    // grad-check always runs at f64; --dtype is accepted but ignored
    FullConfig cfg = resolve_config(gc_o);
    return do_grad_check(cfg.train.seed);
  }
  if (bench->parsed()) {
    FullConfig cfg = resolve_config(bench_o);
    return do_bench_scan(bench_l, bench_n, bench_d, cfg.train.seed, bench_o.out);
  }
  return 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    return run_cli_inner(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace uwm
