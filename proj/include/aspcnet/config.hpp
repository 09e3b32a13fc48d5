#ifndef ASPCNET_CONFIG_HPP
#define ASPCNET_CONFIG_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aspcnet/model.hpp"

namespace aspcnet {

enum class ConfigType { string, integer, real, boolean };

struct ConfigKey {
  std::string name;
  ConfigType type;
  std::string help;
};

/// Plain key=value run configuration ('#' starts a comment). Every key is
/// validated against the schema; unknown keys are hard errors. Precedence is
/// flags > file > defaults: load the file first, then apply flag overrides.
class RunConfig {
 public:
  static const std::vector<ConfigKey>& schema();

  void load_file(const std::string& path);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& dflt = "") const;
  long long get_int(const std::string& key, long long dflt) const;
  double get_double(const std::string& key, double dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const;

  /// Network configuration with this run's overrides; `classes` comes from
  /// the label raster.
  AspcNetConfig net_config(int classes) const;

 private:
  static const ConfigKey& key_info(const std::string& key);
  static void validate_value(const ConfigKey& info, const std::string& value);
  std::map<std::string, std::string> values_;
};

}  // namespace aspcnet

#endif  // ASPCNET_CONFIG_HPP
