#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace saex {

enum class ErrorKind {
  Io,
  BadMagic,
  UnsupportedVersion,
  UnsupportedDtype,
  TruncatedPayload,
  DimensionMismatch,
  NonFinite,
  CountMismatch,
  DuplicateToken,
  IndexOutOfRange,
  InvalidArgument,
  EmptySelection,
  UnknownFeature,
  UnknownTopic,
  EmptyResult,
  NonFiniteLoss,
  SchemaMismatch,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io: return "Io";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::CountMismatch: return "CountMismatch";
    case ErrorKind::DuplicateToken: return "DuplicateToken";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::EmptySelection: return "EmptySelection";
    case ErrorKind::UnknownFeature: return "UnknownFeature";
    case ErrorKind::UnknownTopic: return "UnknownTopic";
    case ErrorKind::EmptyResult: return "EmptyResult";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::SchemaMismatch: return "SchemaMismatch";
  }
  return "Unknown";
}

/// Every failure surfaced by the library carries a kind so callers (and the
/// CLI's exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace saex
