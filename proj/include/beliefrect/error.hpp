#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace beliefrect {

enum class ErrorCode {
  ContextTooLong,
  NonFiniteLoss,
  PlaceholderMissing,
  EmptyField,
  EmptyBeliefSpace,
  InvalidConfig,
  MissingBeliefs,
  EmptyPool,
  DegenerateGradient,
  SchemaError,
  DuplicateId,
  InsufficientData,
  CheckpointMismatch,
  LengthMismatch,
  EmptyInput,
  IoError,
  NotImplemented,
};

std::string_view to_string(ErrorCode code);

/// Every recoverable failure in the library is reported through this type;
/// callers switch on code() rather than on the message text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace beliefrect
