#include "fedagg/error.hpp"

namespace fedagg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::InvalidValue: return "InvalidValue";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::EmptyAggregate: return "EmptyAggregate";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::CapacityExceeded: return "CapacityExceeded";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::MemoryCapExceeded: return "MemoryCapExceeded";
    case ErrorCode::OversizedEntry: return "OversizedEntry";
    case ErrorCode::MissingPartition: return "MissingPartition";
    case ErrorCode::DuplicatePartition: return "DuplicatePartition";
    case ErrorCode::JobFailed: return "JobFailed";
    case ErrorCode::NoWorkers: return "NoWorkers";
    case ErrorCode::StoreReadError: return "StoreReadError";
    case ErrorCode::StoreUnavailable: return "StoreUnavailable";
    case ErrorCode::DuplicateUpdate: return "DuplicateUpdate";
    case ErrorCode::ValidationFailed: return "ValidationFailed";
    case ErrorCode::NotYetPublished: return "NotYetPublished";
    case ErrorCode::AlreadyExists: return "AlreadyExists";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::RoundClosed: return "RoundClosed";
    case ErrorCode::InsufficientParties: return "InsufficientParties";
    case ErrorCode::WrongMode: return "WrongMode";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::TargetUnavailable: return "TargetUnavailable";
    case ErrorCode::MalformedCsv: return "MalformedCsv";
  }
  return "Unknown";
}

static std::string format_what(ErrorCode code, const std::string& message,
                               const std::string& subject,
                               std::optional<std::size_t> offset) {
  std::string out{to_string(code)};
  if (!subject.empty()) out += "(" + subject + ")";
  if (offset) out += " at offset " + std::to_string(*offset);
  if (!message.empty()) out += ": " + message;
  return out;
}

Error::Error(ErrorCode code, std::string message, std::string subject,
             std::optional<std::size_t> offset)
    : std::runtime_error(format_what(code, message, subject, offset)),
      code_(code),
      subject_(std::move(subject)),
      offset_(offset) {}

std::optional<ErrorCode> parse_error_code(std::string_view name) {
  for (int c = 0; c <= static_cast<int>(ErrorCode::MalformedCsv); ++c) {
    if (to_string(static_cast<ErrorCode>(c)) == name) return static_cast<ErrorCode>(c);
  }
  return std::nullopt;
}

}  // namespace fedagg
