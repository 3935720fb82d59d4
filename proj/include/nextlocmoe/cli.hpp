#pragma once

#include "nextlocmoe/config_file.hpp"
#include "nextlocmoe/model_config.hpp"
#include "nextlocmoe/training.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace nextlocmoe {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kErrorPrefix = "nextlocmoe-error";

/// Experiment settings resolved from defaults < profile < config file < environment < flags.
struct RunSettings {
  std::string profile = "desk";
  ModelConfig model;
  TrainConfig train;
  SplitRatios split;
  int eval_stride = 1;
  std::uint64_t seed = 1;

  static std::vector<std::string> known_keys();

  /// `env` maps variable names to values; only NEXTLOCMOE_<KEY> entries for known keys are used.
  static RunSettings resolve(const std::string& profile, const KeyValueConfig* file,
                             const std::map<std::string, std::string>& env, const KeyValueConfig& flags);

  nlohmann::json to_json() const;
};

/// Environment variables of the current process that start with NEXTLOCMOE_.
std::map<std::string, std::string> nextlocmoe_environment();

/// Runs one subcommand. Errors go to `err` as a single line
/// "nextlocmoe-error: <category>: <message>" and yield a nonzero code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nextlocmoe
