#pragma once

#include "uwm/image.hpp"
#include "uwm/rng.hpp"

namespace uwm {

// Paired degraded/reference dataset laid out as
//   <root>/<split>/input/*.png|ppm and <root>/<split>/target/*.png|ppm
// matched by filename. Pairs are ordered lexicographically by filename;
// orphans on either side and extent mismatches are reported as warnings and
// skipped.
struct PairedDataset {
  struct Entry {
    std::string name;
    std::string input_path, target_path;
  };
  std::vector<Entry> entries;
  std::vector<std::string> warnings;
};

PairedDataset load_pairs(const std::string& root, const std::string& split);

struct PatchSample {
  Image input, target;
  int64_t y = 0, x = 0;
  bool flipped = false;
};

// One shared window and flip decision for both images. Images smaller than
// the patch are first resized up with nearest neighbor (a warning is pushed
// to `warnings` when provided).
PatchSample sample_patch(const Image& input, const Image& target, int64_t size, Rng& rng,
                         bool allow_flip, std::vector<std::string>* warnings = nullptr);

}  // namespace uwm
