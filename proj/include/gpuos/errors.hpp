// Error codes and the exception type shared by all gpuos components.
#pragma once

#include <stdexcept>
#include <string>

namespace gpuos {

enum class ErrorCode : int {
  Ok = 0,
  // tensor
  IncompatibleShapes,
  OutOfBounds,
  InvalidBuffer,
  // queue
  ZeroCapacity,
  QueueFull,
  // operator table
  ZeroSlots,
  OutOfRange,
  NotInstalled,
  OperatorKilled,
  TableFull,
  // operator compiler
  SyntaxError,
  UnknownIdentifier,
  ArityError,
  VerifyError,
  // operator library
  EmptyAxis,
  DTypeMismatch,
  ShapeMismatch,
  TooLarge,
  OddDim,
  CacheFull,
  // runtime / executor
  AlreadyStarted,
  RuntimeStopped,
  IoError,
  Internal,
};

inline const char* error_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::Ok: return "Ok";
    case ErrorCode::IncompatibleShapes: return "IncompatibleShapes";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::InvalidBuffer: return "InvalidBuffer";
    case ErrorCode::ZeroCapacity: return "ZeroCapacity";
    case ErrorCode::QueueFull: return "QueueFull";
    case ErrorCode::ZeroSlots: return "ZeroSlots";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::NotInstalled: return "NotInstalled";
    case ErrorCode::OperatorKilled: return "OperatorKilled";
    case ErrorCode::TableFull: return "TableFull";
    case ErrorCode::SyntaxError: return "SyntaxError";
    case ErrorCode::UnknownIdentifier: return "UnknownIdentifier";
    case ErrorCode::ArityError: return "ArityError";
    case ErrorCode::VerifyError: return "VerifyError";
    case ErrorCode::EmptyAxis: return "EmptyAxis";
    case ErrorCode::DTypeMismatch: return "DTypeMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TooLarge: return "TooLarge";
    case ErrorCode::OddDim: return "OddDim";
    case ErrorCode::CacheFull: return "CacheFull";
    case ErrorCode::AlreadyStarted: return "AlreadyStarted";
    case ErrorCode::RuntimeStopped: return "RuntimeStopped";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

/// Exception carrying a machine-checkable code next to the human message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace gpuos
