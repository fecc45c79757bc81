#pragma once

#include "trgrpo/trainer.hpp"

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace trgrpo {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, int line, const std::string& what);
  const std::string& key() const { return key_; }
  int line() const { return line_; }  // 0 for command-line overrides

 private:
  std::string key_;
  int line_;
};

struct ConfigKey {
  std::string key;
  std::string description;
  std::function<void(TrainConfig&, const std::string&)> set;  // throws std::invalid_argument on a bad value
  std::function<std::string(const TrainConfig&)> get;
};

/// Closed schema of every accepted key, in documentation order.
const std::vector<ConfigKey>& config_schema();

/// Flat `key = value` text; `#` starts a comment. Overrides ("key=value") are
/// applied after the text and win over it.
TrainConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {});
TrainConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Effective configuration in the same key = value format, one key per line.
std::string config_to_text(const TrainConfig& cfg);

/// Schema with defaults, for --help and documentation.
std::string config_help();

}  // namespace trgrpo
