#pragma once

#include <stdexcept>
#include <string>

namespace matchs {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced by an operation, or a diverged loss.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Caller violated an operation precondition.
class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

// Invalid configuration value; `field()` names the offending key.
class ConfigError : public std::invalid_argument {
   public:
    ConfigError(std::string field, const std::string& message)
        : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

   private:
    std::string field_;
};

// Malformed or unreadable input file.
class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

}  // namespace matchs
