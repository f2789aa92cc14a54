#pragma once

#include <stdexcept>
#include <string>

namespace ibn {

/// Violated precondition (bad argument, wrong mode, empty input).
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

/// Operand shapes do not conform for the requested primitive.
class DimensionError : public ContractError {
  public:
    using ContractError::ContractError;
};

/// Invalid or inconsistent configuration (unknown kind, missing field).
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values, failed decompositions, overflow.
class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Information estimate cannot be formed (too few active samples).
class EstimationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

} // namespace ibn
