#ifndef KRRST_ERRORS_HPP_
#define KRRST_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace krrst {

// Error taxonomy. The CLI maps each family onto a process exit code:
// ConfigError -> 2, FormatError -> 3, NumericError/TrainingError -> 4.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Violated precondition of an operation (wrong call order, bad argument).
class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class SingularSystemError : public NumericError {
 public:
  using NumericError::NumericError;
};

class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace krrst

#endif  // KRRST_ERRORS_HPP_
