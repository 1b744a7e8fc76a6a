#pragma once

#include <stdexcept>
#include <string>

namespace rns {

enum class ErrorKind {
  // numerical failures
  NearZeroRow,
  NonFiniteGradient,
  // validation failures
  EmptyMask,
  NoVisualSupport,
  EmptyStore,
  EmptyRegion,
  ShapeMismatch,
  DimensionMismatch,
  MissingFile,
  InfeasibleSeparation,
  InvalidArgument,
  // format failures
  FormatError,
  TruncatedFile,
  ParseError,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit code for the CLI: 2 format, 3 validation, 4 numerical.
int exit_code(ErrorKind kind) noexcept;

}  // namespace rns
