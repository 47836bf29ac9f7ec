#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pulsegate {

enum class ErrorKind {
  // ingest
  MissingColumn,
  MalformedRow,
  NonMonotoneSepsisLabel,
  EmptyRecord,
  // windowing
  AllMissing,
  NoMinorityClass,
  EmptyPartition,
  // nncore / models
  ShapeMismatch,
  KernelTooLarge,
  DegenerateBatch,
  BadSpec,
  NonFiniteLoss,
  HorizonMismatch,
  // model container
  BadMagic,
  VersionMismatch,
  ChecksumMismatch,
  // eval / boosting
  SingleClass,
  NoPositives,
  // gaopt
  WidthMismatch,
  AllDiverged,
  // plumbing
  IoError,
  ConfigError,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries one of the kinds above so
/// callers (notably the CLI exit-code table) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace pulsegate
