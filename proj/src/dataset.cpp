#include "uwm/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <map>

namespace fs = std::filesystem;

namespace uwm {

namespace {

bool supported_ext(const std::string& ext) {
  return ext == ".png" || ext == ".ppm";
}

std::map<std::string, std::string> scan_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir) || !fs::is_directory(dir))
    throw DataError("dataset directory not found: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return (char)std::tolower(c); });
    if (!supported_ext(ext)) continue;
    out[e.path().stem().string()] = e.path().string();
  }
  return out;
}

}  // namespace

PairedDataset load_pairs(const std::string& root, const std::string& split) {
  fs::path base = fs::path(root) / split;
  auto inputs = scan_dir(base / "input");
  auto targets = scan_dir(base / "target");

  PairedDataset ds;
  for (const auto& [name, ipath] : inputs) {
    auto it = targets.find(name);
    if (it == targets.end()) {
      ds.warnings.push_back("input without matching target, skipped: " + ipath);
      continue;
    }
    ds.entries.push_back({name, ipath, it->second});
  }
  for (const auto& [name, tpath] : targets) {
    if (inputs.find(name) == inputs.end())
      ds.warnings.push_back("target without matching input, skipped: " + tpath);
  }
  // std::map iteration is already lexicographic; keep the invariant explicit.
  std::sort(ds.entries.begin(), ds.entries.end(),
            [](const PairedDataset::Entry& a, const PairedDataset::Entry& b) { return a.name < b.name; });
  if (ds.entries.empty())
    throw DataError("no usable image pairs under " + base.string());
  return ds;
}

PatchSample sample_patch(const Image& input, const Image& target, int64_t size, Rng& rng,
                         bool allow_flip, std::vector<std::string>* warnings) {
  if (input.h != target.h || input.w != target.w)
    throw DataError("paired images disagree on extent: input " + std::to_string(input.h) + "x" +
                    std::to_string(input.w) + " vs target " + std::to_string(target.h) + "x" +
                    std::to_string(target.w));
  Image in = input, gt = target;
  if (in.h < size || in.w < size) {
    int64_t nh = std::max(in.h, size), nw = std::max(in.w, size);
    if (warnings)
      warnings->push_back("image smaller than patch (" + std::to_string(in.h) + "x" +
                          std::to_string(in.w) + "), resized up to " + std::to_string(nh) + "x" +
                          std::to_string(nw));
    in = resize_nearest(in, nh, nw);
    gt = resize_nearest(gt, nh, nw);
  }

  PatchSample s;
  s.y = (in.h == size) ? 0 : (int64_t)rng.uniform_int((uint64_t)(in.h - size + 1));
  s.x = (in.w == size) ? 0 : (int64_t)rng.uniform_int((uint64_t)(in.w - size + 1));
  s.flipped = allow_flip && (rng.next_u64() & 1u);
  s.input = crop(in, s.y, s.x, size, size);
  s.target = crop(gt, s.y, s.x, size, size);
  if (s.flipped) {
    auto hflip = [](Image& im) {
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < im.h; ++y)
          for (int64_t x = 0; x < im.w / 2; ++x)
            std::swap(im.at(c, y, x), im.at(c, y, im.w - 1 - x));
    };
    hflip(s.input);
    hflip(s.target);
  }
  return s;
}

}  // namespace uwm
