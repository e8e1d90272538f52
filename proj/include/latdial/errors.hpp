#pragma once

#include <stdexcept>
#include <string>

namespace latdial {

// Shape mismatch between operands.
class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Id or index outside its valid range (vocabulary, embedding table, timestep).
class IndexError : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

// Caller broke an operation precondition.
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

// Invalid configuration value; the message names the offending field.
class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Malformed input data (corpus lines, files).
class ValidationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// A forward op produced NaN or Inf.
class NumericError : public std::domain_error {
  public:
    using std::domain_error::domain_error;
};

}  // namespace latdial
