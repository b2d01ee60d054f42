#pragma once

#include <stdexcept>
#include <string>

namespace mope {

// Error categories surface as distinct process exit codes in the CLI:
// validation 2, contract (including shape/index) 3, format 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class ContractError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

class CapacityError : public ContractError {
 public:
  using ContractError::ContractError;
};

class FormatError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

}  // namespace mope
