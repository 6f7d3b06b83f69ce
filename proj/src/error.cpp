#include "beliefrect/error.hpp"

namespace beliefrect {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ContextTooLong: return "ContextTooLong";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::PlaceholderMissing: return "PlaceholderMissing";
    case ErrorCode::EmptyField: return "EmptyField";
    case ErrorCode::EmptyBeliefSpace: return "EmptyBeliefSpace";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MissingBeliefs: return "MissingBeliefs";
    case ErrorCode::EmptyPool: return "EmptyPool";
    case ErrorCode::DegenerateGradient: return "DegenerateGradient";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NotImplemented: return "NotImplemented";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace beliefrect
