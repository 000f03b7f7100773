#include "uwm/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace uwm {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected real number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<int64_t> parse_milestones(const std::string& key, const std::string& v) {
  if (v == "auto") return {};
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  return out;
}

}  // namespace

const std::vector<std::string>& valid_config_keys() {
  static const std::vector<std::string> keys = {
      "net.base_channels", "net.blocks_per_scale", "net.expansion",      "net.d_state",
      "net.n_experts",     "net.top_k",            "net.spatial_branch", "net.channel_branch",
      "net.mutual_promotion", "net.evaluator",
      "train.learning_rate", "train.beta1",        "train.beta2",        "train.eps",
      "train.batch_size",  "train.patch",          "train.total_iters",  "train.milestones",
      "train.seed",        "train.augment_flip",   "train.val_interval",
      "train.checkpoint_interval", "train.resume",
      "data.root",         "data.train_split",     "data.val_split",     "dtype",
  };
  return keys;
}

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

void apply_config(FullConfig& cfg, const std::vector<std::pair<std::string, std::string>>& pairs) {
  for (const auto& [k, v] : pairs) {
    if (k == "net.base_channels") cfg.net.base_channels = parse_int(k, v);
    else if (k == "net.blocks_per_scale") cfg.net.blocks_per_scale = parse_int(k, v);
    else if (k == "net.expansion") cfg.net.expansion = parse_real(k, v);
    else if (k == "net.d_state") cfg.net.d_state = parse_int(k, v);
    else if (k == "net.n_experts") cfg.net.n_experts = parse_int(k, v);
    else if (k == "net.top_k") cfg.net.top_k = parse_int(k, v);
    else if (k == "net.spatial_branch") cfg.net.spatial_branch = parse_bool(k, v);
    else if (k == "net.channel_branch") cfg.net.channel_branch = parse_bool(k, v);
    else if (k == "net.mutual_promotion") cfg.net.mutual_promotion = parse_bool(k, v);
    else if (k == "net.evaluator") {
      if (v == "sequential") cfg.net.evaluator = ScanEvaluator::Sequential;
      else if (v == "parallel") cfg.net.evaluator = ScanEvaluator::Parallel;
      else throw ConfigError("config key 'net.evaluator': expected sequential|parallel, got '" + v + "'");
    }
    else if (k == "train.learning_rate") cfg.train.learning_rate = parse_real(k, v);
    else if (k == "train.beta1") cfg.train.beta1 = parse_real(k, v);
    else if (k == "train.beta2") cfg.train.beta2 = parse_real(k, v);
    else if (k == "train.eps") cfg.train.eps = parse_real(k, v);
    else if (k == "train.batch_size") cfg.train.batch_size = parse_int(k, v);
    else if (k == "train.patch") cfg.train.patch = parse_int(k, v);
    else if (k == "train.total_iters") cfg.train.total_iters = parse_int(k, v);
    else if (k == "train.milestones") cfg.train.milestones = parse_milestones(k, v);
    else if (k == "train.seed") cfg.train.seed = (uint64_t)parse_int(k, v);
    else if (k == "train.augment_flip") cfg.train.augment_flip = parse_bool(k, v);
    else if (k == "train.val_interval") cfg.train.val_interval = parse_int(k, v);
    else if (k == "train.checkpoint_interval") cfg.train.checkpoint_interval = parse_int(k, v);
    else if (k == "train.resume") cfg.train.resume = v;
    else if (k == "data.root") cfg.data_root = v;
    else if (k == "data.train_split") cfg.train_split = v;
    else if (k == "data.val_split") cfg.val_split = v;
    else if (k == "dtype") {
      if (v != "f32" && v != "f64")
        throw ConfigError("config key 'dtype': expected f32|f64, got '" + v + "'");
      cfg.dtype = v;
    } else {
      std::string msg = "unknown config key '" + k + "'; valid keys:";
      for (const auto& key : valid_config_keys()) msg += "\n  " + key;
      throw ConfigError(msg);
    }
  }
}

std::string config_to_text(const FullConfig& cfg) {
  std::ostringstream o;
  o.precision(17);
  o << "net.base_channels = " << cfg.net.base_channels << "\n";
  o << "net.blocks_per_scale = " << cfg.net.blocks_per_scale << "\n";
  o << "net.expansion = " << cfg.net.expansion << "\n";
  o << "net.d_state = " << cfg.net.d_state << "\n";
  o << "net.n_experts = " << cfg.net.n_experts << "\n";
  o << "net.top_k = " << cfg.net.top_k << "\n";
  o << "net.spatial_branch = " << (cfg.net.spatial_branch ? "true" : "false") << "\n";
  o << "net.channel_branch = " << (cfg.net.channel_branch ? "true" : "false") << "\n";
  o << "net.mutual_promotion = " << (cfg.net.mutual_promotion ? "true" : "false") << "\n";
  o << "net.evaluator = "
    << (cfg.net.evaluator == ScanEvaluator::Parallel ? "parallel" : "sequential") << "\n";
  o << "train.learning_rate = " << cfg.train.learning_rate << "\n";
  o << "train.beta1 = " << cfg.train.beta1 << "\n";
  o << "train.beta2 = " << cfg.train.beta2 << "\n";
  o << "train.eps = " << cfg.train.eps << "\n";
  o << "train.batch_size = " << cfg.train.batch_size << "\n";
  o << "train.patch = " << cfg.train.patch << "\n";
  o << "train.total_iters = " << cfg.train.total_iters << "\n";
  o << "train.milestones = ";
  if (cfg.train.milestones.empty()) {
    o << "auto";
  } else {
    for (size_t i = 0; i < cfg.train.milestones.size(); ++i)
      o << (i ? "," : "") << cfg.train.milestones[i];
  }
  o << "\n";
  o << "train.seed = " << cfg.train.seed << "\n";
  o << "train.augment_flip = " << (cfg.train.augment_flip ? "true" : "false") << "\n";
  o << "train.val_interval = " << cfg.train.val_interval << "\n";
  o << "train.checkpoint_interval = " << cfg.train.checkpoint_interval << "\n";
  o << "data.root = " << cfg.data_root << "\n";
  o << "data.train_split = " << cfg.train_split << "\n";
  o << "data.val_split = " << cfg.val_split << "\n";
  o << "dtype = " << cfg.dtype << "\n";
  return o.str();
}

}  // namespace uwm
