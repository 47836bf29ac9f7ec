#pragma once

#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "pulsegate/error.hpp"

namespace pulsegate::cli {

enum ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
  kSearch = 5,
  kHorizon = 6,
};

int exit_code_for(ErrorKind kind) noexcept;

/// `key = value` lines; '#' starts a comment. Throws ConfigError.
using Config = std::map<std::string, std::string>;
Config parse_config(std::string_view text);

/// Entry point shared by the binary and the tests; args exclude argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pulsegate::cli
