#pragma once

#include <stdexcept>
#include <string>

namespace metaof {

/// A caller broke a documented precondition (shape mismatch, empty batch, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A loss or gradient went non-finite during training or evaluation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or invalid experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be read or written, or has the wrong format.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws ContractError with `what` when `cond` is false.
inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

}  // namespace metaof
