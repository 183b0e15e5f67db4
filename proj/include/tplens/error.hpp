#pragma once

#include <stdexcept>
#include <string>

namespace tplens {

enum class ErrorKind {
  kInvalidArgument,
  kShapeMismatch,
  kNumeric,
  kIo,
  kFormat,
  kSchema,
  kState,
  kDegenerate,
};

// Single exception type for the library; the kind maps 1:1 onto C API codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace tplens
