#pragma once

#include <string>
#include <utility>
#include <vector>

#include "uwm/net.hpp"
#include "uwm/train.hpp"

namespace uwm {

// Flat dotted-key config. File lines are `key = value`; '#' starts a comment.
// CLI --override pairs are applied after the file, last one wins.
struct FullConfig {
  NetConfig net;
  TrainConfig train;
  std::string data_root;
  std::string train_split = "train";
  std::string val_split = "test";
  std::string dtype = "f32";
};

const std::vector<std::string>& valid_config_keys();

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path);

// `pairs` are applied in order onto `cfg`. Unknown keys raise ConfigError
// naming every valid key.
void apply_config(FullConfig& cfg, const std::vector<std::pair<std::string, std::string>>& pairs);

std::string config_to_text(const FullConfig& cfg);

}  // namespace uwm
