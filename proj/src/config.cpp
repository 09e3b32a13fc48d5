#include "aspcnet/config.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace aspcnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<ConfigKey>& RunConfig::schema() {
  static const std::vector<ConfigKey> keys = {
      {"cube", ConfigType::string, "input cube file"},
      {"labels", ConfigType::string, "label raster file"},
      {"palette", ConfigType::string, "class palette file"},
      {"split", ConfigType::string, "train/test split file"},
      {"checkpoint", ConfigType::string, "checkpoint file"},
      {"out", ConfigType::string, "output directory or file"},
      {"seed", ConfigType::integer, "run seed"},
      {"deterministic", ConfigType::boolean, "suppress timestamps, fixed reductions"},
      {"precision", ConfigType::string, "f32 or f64"},
      {"threads", ConfigType::integer, "worker threads"},
      {"width_scale", ConfigType::real, "uniform width multiplier"},
      {"pca_dims", ConfigType::integer, "retained principal components (d)"},
      {"patch", ConfigType::integer, "patch size m (odd)"},
      {"per_class", ConfigType::integer, "training pixels per class"},
      {"fraction", ConfigType::real, "training fraction per class"},
      {"dilation", ConfigType::integer, "ASP dilation rate h_dr"},
      {"routing_iters", ConfigType::integer, "dynamic-routing iterations"},
      {"asp1_filters", ConfigType::integer, "ASPConv 1 filters"},
      {"asp2_filters", ConfigType::integer, "ASPConv 2 filters"},
      {"caps_types", ConfigType::integer, "capsule types per ASPCaps layer"},
      {"caps_dim", ConfigType::integer, "capsule dimension"},
      {"digital_dim", ConfigType::integer, "digital capsule dimension"},
      {"epochs", ConfigType::integer, "training epochs"},
      {"batch", ConfigType::integer, "batch size"},
      {"lr", ConfigType::real, "Adam learning rate"},
      {"beta1", ConfigType::real, "Adam beta1"},
      {"beta2", ConfigType::real, "Adam beta2"},
      {"adam_eps", ConfigType::real, "Adam epsilon"},
      {"bn_momentum", ConfigType::real, "batch-norm running momentum"},
      {"margin_pos", ConfigType::real, "margin-loss positive bound"},
      {"margin_neg", ConfigType::real, "margin-loss negative bound"},
      {"margin_lambda", ConfigType::real, "margin-loss down-weight"},
      {"early_stop", ConfigType::boolean, "stop on train-accuracy plateau"},
      {"patience", ConfigType::integer, "early-stopping patience"},
      {"resume", ConfigType::boolean, "resume from last checkpoint"},
      {"all_pixels", ConfigType::boolean, "map every pixel, not only labeled"},
  };
  return keys;
}

const ConfigKey& RunConfig::key_info(const std::string& key) {
  for (const ConfigKey& k : schema())
    if (k.name == key) return k;
  throw std::invalid_argument("unknown configuration key: " + key);
}

void RunConfig::validate_value(const ConfigKey& info, const std::string& value) {
  try {
    std::size_t used = 0;
    switch (info.type) {
      case ConfigType::string:
        return;
      case ConfigType::integer:
        (void)std::stoll(value, &used);
        break;
      case ConfigType::real:
        (void)std::stod(value, &used);
        break;
      case ConfigType::boolean: {
        std::string v = value;
        std::transform(v.begin(), v.end(), v.begin(), ::tolower);
        if (v != "0" && v != "1" && v != "true" && v != "false")
          throw std::invalid_argument("not a boolean");
        return;
      }
    }
    if (used != value.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw std::invalid_argument("bad value for key " + info.name + ": '" + value + "'");
  }
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config file " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  " is not key=value: '" + line + "'");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const ConfigKey& info = key_info(key);
  validate_value(info, value);
  values_[key] = value;
}

std::string RunConfig::get_string(const std::string& key, const std::string& dflt) const {
  auto it = values_.find(key);
  return it == values_.end() ? dflt : it->second;
}

long long RunConfig::get_int(const std::string& key, long long dflt) const {
  auto it = values_.find(key);
  return it == values_.end() ? dflt : std::stoll(it->second);
}

double RunConfig::get_double(const std::string& key, double dflt) const {
  auto it = values_.find(key);
  return it == values_.end() ? dflt : std::stod(it->second);
}

bool RunConfig::get_bool(const std::string& key, bool dflt) const {
  auto it = values_.find(key);
  if (it == values_.end()) return dflt;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  return v == "1" || v == "true";
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t dflt) const {
  auto it = values_.find(key);
  return it == values_.end() ? dflt : std::stoull(it->second);
}

AspcNetConfig RunConfig::net_config(int classes) const {
  AspcNetConfig cfg;
  cfg.classes = classes;
  cfg.pca_dims = static_cast<int>(get_int("pca_dims", cfg.pca_dims));
  cfg.patch = static_cast<int>(get_int("patch", cfg.patch));
  cfg.dilation = static_cast<int>(get_int("dilation", cfg.dilation));
  cfg.asp1_filters = static_cast<int>(get_int("asp1_filters", cfg.asp1_filters));
  cfg.asp2_filters = static_cast<int>(get_int("asp2_filters", cfg.asp2_filters));
  cfg.caps_types = static_cast<int>(get_int("caps_types", cfg.caps_types));
  cfg.caps_dim = static_cast<int>(get_int("caps_dim", cfg.caps_dim));
  cfg.digital_dim = static_cast<int>(get_int("digital_dim", cfg.digital_dim));
  cfg.routing_iters = static_cast<int>(get_int("routing_iters", cfg.routing_iters));
  cfg.margin_pos = get_double("margin_pos", cfg.margin_pos);
  cfg.margin_neg = get_double("margin_neg", cfg.margin_neg);
  cfg.margin_lambda = get_double("margin_lambda", cfg.margin_lambda);
  cfg.lr = get_double("lr", cfg.lr);
  cfg.beta1 = get_double("beta1", cfg.beta1);
  cfg.beta2 = get_double("beta2", cfg.beta2);
  cfg.adam_eps = get_double("adam_eps", cfg.adam_eps);
  cfg.batch = static_cast<int>(get_int("batch", cfg.batch));
  cfg.epochs = static_cast<int>(get_int("epochs", cfg.epochs));
  cfg.bn_momentum = get_double("bn_momentum", cfg.bn_momentum);
  cfg.seed = get_u64("seed", cfg.seed);
  cfg.width_scale = get_double("width_scale", cfg.width_scale);
  cfg.validate();
  return cfg;
}

}  // namespace aspcnet
