#pragma once

#include <stdexcept>
#include <string>

namespace wavbert {

// Base of every error raised by the library. The CLI maps the subclasses
// onto exit codes (config 1, numeric 2, io 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

// All keys of some query row are masked out.
class DegenerateAttentionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class EmptyInputError : public ContractError {
 public:
  using ContractError::ContractError;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace wavbert
