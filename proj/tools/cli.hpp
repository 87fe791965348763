#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace rsfm::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kNumericError = 4,
  kCheckpointError = 5,
};

class CliConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Full default configuration; every accepted key appears here.
nlohmann::json default_config();

// Merges `patch` into `base`; keys absent from `base` or values of another
// type are rejected with their dotted path.
void merge_checked(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "");

// "a.b.c=value"; value parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& cfg, const std::string& assignment);

// Entry point shared by the executable and the tests.
int run(const std::vector<std::string>& args);

}  // namespace rsfm::cli
