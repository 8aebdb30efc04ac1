#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fedagg {

enum class ErrorCode {
  // codec
  BadMagic,
  UnsupportedVersion,
  ChecksumMismatch,
  Truncated,
  InvalidValue,
  // fusion
  SchemaMismatch,
  EmptyAggregate,
  NonFiniteValue,
  // dispatch / engines
  CapacityExceeded,
  EmptyInput,
  MemoryCapExceeded,
  OversizedEntry,
  MissingPartition,
  DuplicatePartition,
  JobFailed,
  NoWorkers,
  // store
  StoreReadError,
  StoreUnavailable,
  DuplicateUpdate,
  ValidationFailed,
  NotYetPublished,
  AlreadyExists,
  NotFound,
  RoundClosed,
  // coordinator
  InsufficientParties,
  WrongMode,
  ConfigError,
  // simbench
  TargetUnavailable,
  MalformedCsv,
};

std::string_view to_string(ErrorCode code);
std::optional<ErrorCode> parse_error_code(std::string_view name);

// Single exception type for the library. `subject` names the offending
// entity (field, key, partition id, layer) when one exists.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message, std::string subject = {},
        std::optional<std::size_t> offset = std::nullopt);

  ErrorCode code() const noexcept { return code_; }
  const std::string& subject() const noexcept { return subject_; }
  std::optional<std::size_t> offset() const noexcept { return offset_; }

 private:
  ErrorCode code_;
  std::string subject_;
  std::optional<std::size_t> offset_;
};

}  // namespace fedagg
