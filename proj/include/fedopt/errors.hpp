#pragma once

#include <stdexcept>
#include <string>

namespace fedopt {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a precondition (length mismatch, bad argument).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Invalid or infeasible experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Training produced non-finite or exploding parameters.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Server received an inconsistent set of client reports.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace fedopt
