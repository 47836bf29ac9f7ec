#include "pulsegate/error.hpp"

namespace pulsegate {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::MalformedRow: return "MalformedRow";
    case ErrorKind::NonMonotoneSepsisLabel: return "NonMonotoneSepsisLabel";
    case ErrorKind::EmptyRecord: return "EmptyRecord";
    case ErrorKind::AllMissing: return "AllMissing";
    case ErrorKind::NoMinorityClass: return "NoMinorityClass";
    case ErrorKind::EmptyPartition: return "EmptyPartition";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::KernelTooLarge: return "KernelTooLarge";
    case ErrorKind::DegenerateBatch: return "DegenerateBatch";
    case ErrorKind::BadSpec: return "BadSpec";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::HorizonMismatch: return "HorizonMismatch";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::SingleClass: return "SingleClass";
    case ErrorKind::NoPositives: return "NoPositives";
    case ErrorKind::WidthMismatch: return "WidthMismatch";
    case ErrorKind::AllDiverged: return "AllDiverged";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace pulsegate
